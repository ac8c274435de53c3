//! Corpus manifests and the synthetic tone-in-noise corpus generator.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::signal::{mix, read_wav, write_wav, Waveform, SAMPLE_RATE};
use crate::training::UtteranceAudio;

pub const SNR_GRID_DB: [f64; 4] = [0.0, 5.0, 10.0, 15.0];
const NONE: &str = "NONE";
const HEADER: &str = "utterance_id,clean_path,noisy_path,snr_db";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub clean: Option<PathBuf>,
    pub noisy: Option<PathBuf>,
    pub snr_db: Option<f64>,
}

/// CSV list of utterances. Relative paths resolve against `root`, the
/// directory holding the manifest file.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

fn corpus_err(msg: impl Into<String>) -> Error {
    Error::Corpus(msg.into())
}

fn opt_field(s: &str) -> Option<&str> {
    (s != NONE && !s.is_empty()).then_some(s)
}

impl Manifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == HEADER => {}
            _ => return Err(corpus_err(format!("manifest must start with the header {HEADER}"))),
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let [id, clean, noisy, snr] = f[..] else {
                return Err(corpus_err(format!("manifest line {}: expected 4 fields", i + 1)));
            };
            let snr_db = opt_field(snr)
                .map(|s| s.parse::<f64>().map_err(|_| corpus_err(format!("manifest line {}: bad snr {s}", i + 1))))
                .transpose()?;
            let e = ManifestEntry {
                id: id.to_string(),
                clean: opt_field(clean).map(PathBuf::from),
                noisy: opt_field(noisy).map(PathBuf::from),
                snr_db,
            };
            if e.clean.is_none() && e.noisy.is_none() {
                return Err(corpus_err(format!("manifest line {}: entry {id} lists no audio", i + 1)));
            }
            entries.push(e);
        }
        Ok(Manifest { root: root.into(), entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\n");
        let p = |x: &Option<PathBuf>| x.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| NONE.into());
        for e in &self.entries {
            let snr = e.snr_db.map(|v| v.to_string()).unwrap_or_else(|| NONE.into());
            let _ = writeln!(s, "{},{},{},{snr}", e.id, p(&e.clean), p(&e.noisy));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Reads every referenced WAV file.
    pub fn load_audio(&self) -> Result<Vec<UtteranceAudio>> {
        self.entries
            .iter()
            .map(|e| {
                Ok(UtteranceAudio {
                    id: e.id.clone(),
                    clean: e.clean.as_ref().map(|p| read_wav(self.resolve(p))).transpose()?,
                    noisy: e.noisy.as_ref().map(|p| read_wav(self.resolve(p))).transpose()?,
                })
            })
            .collect()
    }

    /// Splits off the last `holdout` entries.
    pub fn split(&self, holdout: usize) -> Result<(Manifest, Manifest)> {
        if holdout >= self.entries.len() {
            return Err(corpus_err(format!("cannot hold out {holdout} of {} entries", self.entries.len())));
        }
        let cut = self.entries.len() - holdout;
        let part = |e: &[ManifestEntry]| Manifest {
            root: self.root.clone(),
            entries: e.to_vec(),
        };
        Ok((part(&self.entries[..cut]), part(&self.entries[cut..])))
    }
}

/// Multi-harmonic notes with smooth envelopes separated by silences,
/// peak-scaled to a random level in `[0.3, 0.7]`.
pub fn synth_clean(len: usize, rng: &mut impl Rng) -> Waveform {
    let mut x = vec![0.0f64; len];
    let notes = rng.gen_range(2..=4);
    let slot = len / notes;
    for n in 0..notes {
        let start = n * slot + rng.gen_range(0..=slot / 5);
        let dur = rng.gen_range(slot / 2..=slot * 4 / 5).min(len - start);
        let f0 = rng.gen_range(110.0..320.0f64);
        let harmonics = rng.gen_range(3..=6);
        let amps: Vec<f64> = (1..=harmonics).map(|k| rng.gen_range(0.4..1.0) / k as f64).collect();
        let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        let glide = rng.gen_range(-0.15..0.15f64);
        let mut phase_acc = 0.0f64;
        for i in 0..dur {
            let pos = i as f64 / dur as f64;
            let env = (std::f64::consts::PI * pos).sin().powf(0.7);
            let f = f0 * (1.0 + glide * pos);
            phase_acc += std::f64::consts::TAU * f / SAMPLE_RATE as f64;
            let s: f64 = amps
                .iter()
                .zip(&phases)
                .enumerate()
                .map(|(k, (a, p))| a * ((k + 1) as f64 * phase_acc + p).sin())
                .sum();
            x[start + i] += env * s;
        }
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let level = rng.gen_range(0.3..0.7);
    Waveform::new(x.iter().map(|v| (v / peak * level) as f32).collect()).expect("finite synthesis")
}

/// White Gaussian noise, optionally through a one-pole low-pass filter.
pub fn synth_noise(len: usize, rng: &mut impl Rng) -> Waveform {
    let white: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let out = if rng.gen_bool(0.5) {
        white
    } else {
        let a = rng.gen_range(0.6..0.95f64);
        let mut y = 0.0;
        white
            .iter()
            .map(|x| {
                y = a * y + (1.0 - a) * x;
                y
            })
            .collect()
    };
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    Waveform::new(out.iter().map(|v| (v / peak * 0.5) as f32).collect()).expect("finite synthesis")
}

/// Writes `n` clean/noisy WAV pairs plus `manifest.csv` into `out_dir`.
pub fn synth_dataset(out_dir: impl AsRef<Path>, n: usize, duration_s: f64, seed: u64) -> Result<Manifest> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 utterances, got {n}")));
    }
    if !(duration_s >= 0.9) {
        return Err(Error::invalid(format!("duration must be at least 0.9 s, got {duration_s}")));
    }
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out.join("clean"))?;
    std::fs::create_dir_all(out.join("noisy"))?;
    let len = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("utt{i:04}");
        let clean = synth_clean(len, &mut rng);
        let noise = synth_noise(len, &mut rng);
        let snr = *SNR_GRID_DB.choose(&mut rng).expect("non-empty grid");
        let m = mix(&clean, &noise, snr)?;
        // keep the pair on the same scale when the mixture had to be normalized
        let clean = Waveform::new(clean.samples().iter().map(|v| (*v as f64 * m.peak_scale) as f32).collect())?;
        let noisy = m.wave;
        let (cp, np) = (PathBuf::from("clean").join(format!("{id}.wav")), PathBuf::from("noisy").join(format!("{id}.wav")));
        write_wav(out.join(&cp), &clean)?;
        write_wav(out.join(&np), &noisy)?;
        entries.push(ManifestEntry {
            id,
            clean: Some(cp),
            noisy: Some(np),
            snr_db: Some(snr),
        });
    }
    let m = Manifest {
        root: out.to_path_buf(),
        entries,
    };
    m.save(out.join("manifest.csv"))?;
    Ok(m)
}
