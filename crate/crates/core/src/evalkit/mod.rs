//! Objective metrics, spectrogram export and the enhancement pipeline.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::Bind;
use crate::models::Generator;
use crate::numerics::{Graph, ParamStore};
use crate::training::UtteranceAudio;
use crate::signal::{compress, istft, reconstruct, stft, CompressedMagnitude, Waveform, N_BINS};

pub const SSNR_SEGMENT: usize = 512;
pub const SSNR_HOP: usize = 256;
pub const SSNR_MIN_DB: f64 = -10.0;
pub const SSNR_MAX_DB: f64 = 35.0;
pub const SILENCE_ENERGY: f64 = 1e-8;
pub const LSD_EPS: f64 = 1e-8;
pub const SPEC_FLOOR_DB: f64 = -80.0;

/// Segmental SNR in dB: per-segment ratios clamped to `[-10, 35]`,
/// averaged over segments whose reference energy reaches the silence
/// threshold.
pub fn ssnr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    let (r, e) = (reference.samples(), estimate.samples());
    if r.len() != e.len() {
        return Err(Error::invalid(format!("ssnr: lengths differ ({} vs {})", r.len(), e.len())));
    }
    if r.len() < SSNR_SEGMENT {
        return Err(Error::invalid(format!("ssnr: signal shorter than one {SSNR_SEGMENT}-sample segment")));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + SSNR_SEGMENT <= r.len() {
        let (rs, es) = (&r[start..start + SSNR_SEGMENT], &e[start..start + SSNR_SEGMENT]);
        let sig: f64 = rs.iter().map(|v| (*v as f64).powi(2)).sum();
        if sig >= SILENCE_ENERGY {
            let err: f64 = rs.iter().zip(es).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
            let db = if err == 0.0 { SSNR_MAX_DB } else { 10.0 * (sig / err).log10() };
            total += db.clamp(SSNR_MIN_DB, SSNR_MAX_DB);
            count += 1;
        }
        start += SSNR_HOP;
    }
    if count == 0 {
        return Err(Error::invalid("ssnr: every reference segment is silent"));
    }
    Ok(total / count as f64)
}

/// Mean over frames of the RMS (over bins) of the dB ratio of STFT
/// magnitudes.
pub fn log_spectral_distance(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::invalid(format!("lsd: lengths differ ({} vs {})", reference.len(), estimate.len())));
    }
    let (a, b) = (stft(reference)?, stft(estimate)?);
    let (ma, mb) = (a.magnitudes(), b.magnitudes());
    let frames = a.frames();
    let mut total = 0.0;
    for t in 0..frames {
        let mut acc = 0.0;
        for f in 0..N_BINS {
            let i = t * N_BINS + f;
            let d = 20.0 * ((ma[i] as f64 + LSD_EPS) / (mb[i] as f64 + LSD_EPS)).log10();
            acc += d * d;
        }
        total += (acc / N_BINS as f64).sqrt();
    }
    Ok(total / frames as f64)
}

/// A `T × 257` dB spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramDb {
    pub frames: usize,
    pub db: Vec<f64>,
    /// Bins whose magnitude is exactly zero.
    pub silent: Vec<bool>,
}

impl SpectrogramDb {
    pub fn from_wave(w: &Waveform) -> Result<Self> {
        let s = stft(w)?;
        let mags = s.magnitudes();
        Ok(SpectrogramDb {
            frames: s.frames(),
            db: mags.iter().map(|m| 20.0 * (*m as f64 + LSD_EPS).log10()).collect(),
            silent: mags.iter().map(|m| *m == 0.0).collect(),
        })
    }

    /// 8-bit intensities, `257` rows (highest bin first) × `T` columns. Levels
    /// are relative to the file maximum and clipped at −80 dB; zero-magnitude
    /// bins are black.
    pub fn to_gray(&self) -> Vec<u8> {
        let max = self.db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut img = vec![0u8; N_BINS * self.frames];
        for t in 0..self.frames {
            for f in 0..N_BINS {
                let i = t * N_BINS + f;
                let row = N_BINS - 1 - f;
                img[row * self.frames + t] = if self.silent[i] {
                    0
                } else {
                    let rel = (self.db[i] - max).clamp(SPEC_FLOOR_DB, 0.0);
                    ((rel - SPEC_FLOOR_DB) / -SPEC_FLOOR_DB * 255.0).round() as u8
                };
            }
        }
        img
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.db.chunks(N_BINS) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }
}

/// Writes `<out>.csv` and `<out>.pgm`; returns both paths.
pub fn export_spectrogram(wave: &Waveform, out: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let spec = SpectrogramDb::from_wave(wave)?;
    let (csv, pgm) = (out.as_ref().with_extension("csv"), out.as_ref().with_extension("pgm"));
    std::fs::write(&csv, spec.to_csv())?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(&pgm)?);
    write!(f, "P5\n{} {}\n255\n", spec.frames, N_BINS)?;
    f.write_all(&spec.to_gray())?;
    f.flush()?;
    Ok((csv, pgm))
}

/// Runs the generator on one waveform: STFT, compression, mapping,
/// reconstruction with the input phase, inverse STFT and clipping.
pub fn enhance(g: &Generator, store: &ParamStore, eta: f32, wave: &Waveform) -> Result<Waveform> {
    let spec = stft(wave)?;
    let (mag, phase) = compress(&spec, eta)?;
    let mut graph = Graph::new();
    let x = graph.constant(mag.to_tensor());
    let (y, _) = g.forward(&mut graph, Bind::frozen(store), x)?;
    let out = CompressedMagnitude::from_tensor(graph.value(y), 0, eta)?;
    let w = istft(&reconstruct(&out, &phase)?)?;
    let clipped = w.clipped();
    if clipped.samples().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("enhanced waveform".into()));
    }
    Ok(clipped)
}

/// Noisy and enhanced scores against the clean references of a paired set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub noisy: MetricReport,
    pub enhanced: MetricReport,
}

impl Evaluation {
    pub fn ssnr_gain(&self) -> f64 {
        self.enhanced.mean_ssnr() - self.noisy.mean_ssnr()
    }
}

/// Enhances every paired entry and scores noisy and enhanced audio on the
/// span the enhancer reproduces.
pub fn evaluate_pairs(g: &Generator, store: &ParamStore, eta: f32, entries: &[UtteranceAudio]) -> Result<Evaluation> {
    let pairs: Vec<(&str, &Waveform, &Waveform)> = entries
        .iter()
        .filter_map(|e| Some((e.id.as_str(), e.clean.as_ref()?, e.noisy.as_ref()?)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Corpus("evaluation needs entries with both clean and noisy audio".into()));
    }
    let enhanced = pairs
        .par_iter()
        .map(|(_, _, n)| enhance(g, store, eta, n))
        .collect::<Result<Vec<_>>>()?;
    let mut noisy_items = Vec::with_capacity(pairs.len());
    let mut enh_items = Vec::with_capacity(pairs.len());
    for ((id, c, n), e) in pairs.into_iter().zip(enhanced) {
        let len = e.len().min(c.len());
        let cut = |w: &Waveform| Waveform::new(w.samples()[..len].to_vec());
        noisy_items.push((id.to_string(), cut(c)?, cut(n)?));
        enh_items.push((id.to_string(), cut(c)?, cut(&e)?));
    }
    Ok(Evaluation {
        noisy: MetricReport::compute(&noisy_items)?,
        enhanced: MetricReport::compute(&enh_items)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub ssnr_db: f64,
    pub lsd_db: f64,
}

/// Per-file metrics and their means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    /// Scores `(id, reference, estimate)` triples in parallel; rows keep
    /// input order. Signals are truncated to the shorter length.
    pub fn compute(items: &[(String, Waveform, Waveform)]) -> Result<Self> {
        let rows = items
            .par_iter()
            .map(|(id, r, e)| {
                let n = r.len().min(e.len());
                let r = Waveform::new(r.samples()[..n].to_vec())?;
                let e = Waveform::new(e.samples()[..n].to_vec())?;
                Ok(MetricRow {
                    id: id.clone(),
                    ssnr_db: ssnr(&r, &e)?,
                    lsd_db: log_spectral_distance(&r, &e)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricReport { rows })
    }

    pub fn mean_ssnr(&self) -> f64 {
        self.rows.iter().map(|r| r.ssnr_db).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_lsd(&self) -> f64 {
        self.rows.iter().map(|r| r.lsd_db).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("file_id,ssnr_db,lsd_db\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.id, r.ssnr_db, r.lsd_db);
        }
        let _ = writeln!(s, "mean,{},{}", self.mean_ssnr(), self.mean_lsd());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, len: usize, amp: f64) -> Waveform {
        Waveform::new((0..len).map(|i| (amp * (std::f64::consts::TAU * freq * i as f64 / 16000.0).sin()) as f32).collect()).unwrap()
    }

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| r.gen_range(-0.5..0.5)).collect()).unwrap()
    }

    #[test]
    fn ssnr_examples() {
        let x = tone(440.0, 4096, 0.5);
        assert_eq!(ssnr(&x, &x).unwrap(), 35.0);
        let zero = Waveform::new(vec![0.0; 4096]).unwrap();
        assert!(ssnr(&x, &zero).unwrap().abs() < 1e-9);
        assert!(ssnr(&zero, &x).is_err());
        assert!(ssnr(&x, &tone(440.0, 4000, 0.5)).is_err());
    }

    #[test]
    fn ssnr_constructed_ten_db() {
        // non-overlapping segments so each can be scaled independently: use
        // segments where the noise is a scaled copy of the signal itself
        let x = noise(512 * 8, 3);
        let est = Waveform::new(x.samples().iter().map(|v| v * (1.0 + 10f32.powf(-0.5))).collect()).unwrap();
        assert!((ssnr(&x, &est).unwrap() - 10.0).abs() <= 0.01);
    }

    #[test]
    fn lsd_examples() {
        let x = noise(4096, 1);
        assert_eq!(log_spectral_distance(&x, &x).unwrap(), 0.0);
        let x10 = Waveform::new(x.samples().iter().map(|v| v * 10.0).collect()).unwrap();
        assert!((log_spectral_distance(&x10, &x).unwrap() - 20.0).abs() < 1e-3);
        let y = noise(4096, 2);
        assert!((log_spectral_distance(&x, &y).unwrap() - log_spectral_distance(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn silent_input_is_uniformly_dark() {
        let s = SpectrogramDb::from_wave(&Waveform::new(vec![0.0; 2048]).unwrap()).unwrap();
        assert!(s.to_gray().iter().all(|p| *p == 0));
    }

    #[test]
    fn tone_lights_its_bin() {
        let s = SpectrogramDb::from_wave(&tone(1000.0, 4096, 0.5)).unwrap();
        let img = s.to_gray();
        let row_mean = |f: usize| {
            let row = N_BINS - 1 - f;
            img[row * s.frames..(row + 1) * s.frames].iter().map(|p| *p as f64).sum::<f64>() / s.frames as f64
        };
        let brightest = (0..N_BINS).max_by(|a, b| row_mean(*a).total_cmp(&row_mean(*b))).unwrap();
        assert_eq!(brightest, (1000.0f64 / (16000.0 / 512.0)).round() as usize);
    }

    #[test]
    fn csv_export_round_trips() {
        let d = tempfile::tempdir().unwrap();
        let w = noise(2048, 4);
        let (csv, pgm) = export_spectrogram(&w, d.path().join("spec")).unwrap();
        let parsed: Vec<f64> = std::fs::read_to_string(csv)
            .unwrap()
            .lines()
            .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .collect();
        assert_eq!(parsed, SpectrogramDb::from_wave(&w).unwrap().db);
        let bytes = std::fs::read(pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n13 257\n255\n"));
        assert!(export_spectrogram(&w, "/nonexistent/dir/spec").is_err());
    }

    #[test]
    fn report_means_and_csv() {
        let x = tone(300.0, 4096, 0.4);
        let items = vec![("a".to_string(), x.clone(), x.clone()), ("b".to_string(), x.clone(), noise(4096, 9))];
        let r = MetricReport::compute(&items).unwrap();
        assert_eq!(r.rows[0].ssnr_db, 35.0);
        assert!(r.rows.iter().all(|m| m.lsd_db >= 0.0 && (-10.0..=35.0).contains(&m.ssnr_db)));
        assert!(r.to_csv().lines().last().unwrap().starts_with("mean,"));
    }
}
