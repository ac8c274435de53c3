use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::signal::{compress, stft, CompressedMagnitude, Waveform, N_BINS};

/// Audio for one corpus entry; either side may be absent.
#[derive(Clone, Debug)]
pub struct UtteranceAudio {
    pub id: String,
    pub clean: Option<Waveform>,
    pub noisy: Option<Waveform>,
}

/// Compressed magnitudes of one utterance.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub mag: CompressedMagnitude,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.mag.frames()
    }
}

/// Clean and noisy utterances prepared for crop sampling.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub clean: Vec<Utterance>,
    pub noisy: Vec<Utterance>,
    /// For each noisy utterance, the index of its clean counterpart when the
    /// entry listed both and their frame counts agree.
    pub pairs: Vec<Option<usize>>,
    pub eta: f32,
    pub crop_frames: usize,
}

/// One training batch, each tensor `B × crop × 257 × 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub noisy: Tensor,
    pub clean: Tensor,
    pub noisy_ids: Vec<String>,
    pub clean_ids: Vec<String>,
    pub noisy_offsets: Vec<usize>,
    pub clean_offsets: Vec<usize>,
}

fn features(w: &Waveform, eta: f32) -> Result<CompressedMagnitude> {
    Ok(compress(&stft(w)?, eta)?.0)
}

impl Corpus {
    /// Computes features for every entry (in parallel, order preserved).
    /// Utterances shorter than `crop_frames` are dropped with a warning.
    pub fn from_audio(entries: &[UtteranceAudio], eta: f32, crop_frames: usize) -> Result<Self> {
        if crop_frames == 0 {
            return Err(Error::invalid("crop_frames must be at least 1"));
        }
        let prepared: Vec<(Option<CompressedMagnitude>, Option<CompressedMagnitude>)> = entries
            .par_iter()
            .map(|e| {
                let c = e.clean.as_ref().map(|w| features(w, eta)).transpose()?;
                let n = e.noisy.as_ref().map(|w| features(w, eta)).transpose()?;
                Ok((c, n))
            })
            .collect::<Result<_>>()?;
        let mut corpus = Corpus {
            clean: Vec::new(),
            noisy: Vec::new(),
            pairs: Vec::new(),
            eta,
            crop_frames,
        };
        for (e, (c, n)) in entries.iter().zip(prepared) {
            let keep = |m: &CompressedMagnitude, side: &str| {
                if m.frames() < crop_frames {
                    log::warn!("dropping {side} {}: {} frames < crop of {crop_frames}", e.id, m.frames());
                    false
                } else {
                    true
                }
            };
            let clean_idx = match c {
                Some(m) if keep(&m, "clean") => {
                    corpus.clean.push(Utterance { id: e.id.clone(), mag: m });
                    Some(corpus.clean.len() - 1)
                }
                _ => None,
            };
            if let Some(m) = n {
                if keep(&m, "noisy") {
                    let pair = clean_idx.filter(|&ci| corpus.clean[ci].frames() == m.frames());
                    corpus.noisy.push(Utterance { id: e.id.clone(), mag: m });
                    corpus.pairs.push(pair);
                }
            }
        }
        Ok(corpus)
    }

    fn check_sides(&self) -> Result<()> {
        if self.clean.is_empty() || self.noisy.is_empty() {
            return Err(Error::Corpus(format!(
                "need clean and noisy utterances, have {} and {}",
                self.clean.len(),
                self.noisy.len()
            )));
        }
        Ok(())
    }

    fn offset(&self, u: &Utterance, rng: &mut impl Rng) -> usize {
        rng.gen_range(0..=u.frames() - self.crop_frames)
    }

    fn assemble(&self, picks: &[(usize, usize, usize, usize)]) -> Batch {
        let n = self.crop_frames * N_BINS;
        let mut noisy = Vec::with_capacity(picks.len() * n);
        let mut clean = Vec::with_capacity(picks.len() * n);
        let mut b = Batch {
            noisy: Tensor::zeros(&[1]),
            clean: Tensor::zeros(&[1]),
            noisy_ids: Vec::new(),
            clean_ids: Vec::new(),
            noisy_offsets: Vec::new(),
            clean_offsets: Vec::new(),
        };
        for &(ni, no, ci, co) in picks {
            let (nu, cu) = (&self.noisy[ni], &self.clean[ci]);
            noisy.extend_from_slice(&nu.mag.data()[no * N_BINS..no * N_BINS + n]);
            clean.extend_from_slice(&cu.mag.data()[co * N_BINS..co * N_BINS + n]);
            b.noisy_ids.push(nu.id.clone());
            b.clean_ids.push(cu.id.clone());
            b.noisy_offsets.push(no);
            b.clean_offsets.push(co);
        }
        let shape = [picks.len(), self.crop_frames, N_BINS, 1];
        b.noisy = Tensor::new(&shape, noisy).expect("crop sizes are consistent");
        b.clean = Tensor::new(&shape, clean).expect("crop sizes are consistent");
        b
    }

    /// Independent noisy and clean crops; the clean crop avoids the noisy
    /// crop's own source utterance whenever another clean utterance exists.
    pub fn sample_nonparallel_batch(&self, batch: usize, rng: &mut impl Rng) -> Result<Batch> {
        self.check_sides()?;
        let mut picks = Vec::with_capacity(batch);
        for _ in 0..batch {
            let ni = rng.gen_range(0..self.noisy.len());
            let no = self.offset(&self.noisy[ni], rng);
            let own = self.clean.iter().position(|c| c.id == self.noisy[ni].id);
            let ci = match own {
                Some(j) if self.clean.len() > 1 => {
                    let r = rng.gen_range(0..self.clean.len() - 1);
                    if r >= j {
                        r + 1
                    } else {
                        r
                    }
                }
                _ => rng.gen_range(0..self.clean.len()),
            };
            let co = self.offset(&self.clean[ci], rng);
            picks.push((ni, no, ci, co));
        }
        Ok(self.assemble(&picks))
    }

    /// Aligned crops of the same utterance at the same offset.
    pub fn sample_parallel_batch(&self, batch: usize, rng: &mut impl Rng) -> Result<Batch> {
        let paired: Vec<usize> = (0..self.noisy.len()).filter(|&i| self.pairs[i].is_some()).collect();
        if paired.is_empty() {
            return Err(Error::Corpus("parallel sampling needs paired clean/noisy utterances".into()));
        }
        let mut picks = Vec::with_capacity(batch);
        for _ in 0..batch {
            let ni = paired[rng.gen_range(0..paired.len())];
            let off = self.offset(&self.noisy[ni], rng);
            picks.push((ni, off, self.pairs[ni].expect("filtered"), off));
        }
        Ok(self.assemble(&picks))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn wave(len: usize, seed: u64) -> Waveform {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| r.gen_range(-0.5..0.5)).collect()).unwrap()
    }

    fn entries(n: usize, len: usize) -> Vec<UtteranceAudio> {
        (0..n)
            .map(|i| UtteranceAudio {
                id: format!("u{i}"),
                clean: Some(wave(len, i as u64)),
                noisy: Some(wave(len, 100 + i as u64)),
            })
            .collect()
    }

    #[test]
    fn exact_length_only_offers_offset_zero() {
        // 108 frames ⇔ (108 − 1)·128 + 512 samples
        let c = Corpus::from_audio(&entries(3, 107 * 128 + 512), 0.5, 108).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let b = c.sample_nonparallel_batch(4, &mut r).unwrap();
            assert!(b.noisy_offsets.iter().chain(&b.clean_offsets).all(|o| *o == 0));
            assert_eq!(b.noisy.shape(), &[4, 108, 257, 1]);
            assert_eq!(b.clean.shape(), &[4, 108, 257, 1]);
        }
    }

    #[test]
    fn clean_crop_avoids_own_source() {
        let c = Corpus::from_audio(&entries(2, 14400), 0.5, 16).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let b = c.sample_nonparallel_batch(2, &mut r).unwrap();
            assert!(b.noisy_ids.iter().zip(&b.clean_ids).all(|(n, c)| n != c));
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let c = Corpus::from_audio(&entries(4, 14400), 0.5, 32).unwrap();
        let run = |mode: bool| {
            let mut r = ChaCha8Rng::seed_from_u64(7);
            (0..5)
                .map(|_| if mode { c.sample_parallel_batch(3, &mut r) } else { c.sample_nonparallel_batch(3, &mut r) }.unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(false), run(false));
        assert_eq!(run(true), run(true));
    }

    #[test]
    fn parallel_pairs_share_id_and_offset() {
        let c = Corpus::from_audio(&entries(4, 14400), 0.5, 32).unwrap();
        let b = c.sample_parallel_batch(6, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(b.noisy_ids, b.clean_ids);
        assert_eq!(b.noisy_offsets, b.clean_offsets);
    }

    #[test]
    fn parallel_difference_recovers_in_phase_noise() {
        let clean = wave(14400, 9);
        let noise = Waveform::new(clean.samples().iter().map(|v| 0.5 * v).collect()).unwrap();
        let noisy = Waveform::new(clean.samples().iter().zip(noise.samples()).map(|(a, b)| a + b).collect()).unwrap();
        let e = vec![UtteranceAudio {
            id: "a".into(),
            clean: Some(clean),
            noisy: Some(noisy),
        }];
        let c = Corpus::from_audio(&e, 1.0, 40).unwrap();
        let nm = features(&noise, 1.0).unwrap();
        let b = c.sample_parallel_batch(2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for (i, off) in b.noisy_offsets.iter().enumerate() {
            let n = 40 * N_BINS;
            let expect = &nm.data()[off * N_BINS..off * N_BINS + n];
            for j in 0..n {
                let d = b.noisy.data()[i * n + j] - b.clean.data()[i * n + j];
                assert!((d - expect[j]).abs() <= 1e-6 * expect[j].abs().max(1.0), "{d} vs {}", expect[j]);
            }
        }
    }

    #[test]
    fn empty_or_unpaired_sides_are_errors() {
        let mut e = entries(2, 14400);
        for x in &mut e {
            x.clean = None;
        }
        let c = Corpus::from_audio(&e, 0.5, 16).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!(c.sample_nonparallel_batch(1, &mut r).is_err());
        assert!(c.sample_parallel_batch(1, &mut r).is_err());
    }

    #[test]
    fn short_utterances_are_dropped() {
        let c = Corpus::from_audio(&entries(2, 2000), 0.5, 108).unwrap();
        assert!(c.clean.is_empty() && c.noisy.is_empty());
    }
}
