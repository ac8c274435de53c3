//! Waveform ↔ spectrogram conversion and the compressed-magnitude features.
//!
//! Analysis uses a 512-sample periodic Hann window, hop 128, a 512-point DFT
//! and no centre padding, giving `T = ⌊(L − 512)/128⌋ + 1` frames of 257
//! one-sided bins.

mod wav;

use rustfft::num_complex::{Complex, Complex32};
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use wav::{read_wav, write_wav};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 512;
pub const HOP: usize = 128;
pub const N_BINS: usize = N_FFT / 2 + 1;

/// Below this summed squared window the overlap-add output is set to zero.
const WOLA_FLOOR: f64 = 1e-10;

/// Mono 16 kHz audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Waveform { samples })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rate(&self) -> u32 {
        SAMPLE_RATE
    }

    /// Copy with every sample clamped to `[-1, 1]`.
    pub fn clipped(&self) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s.clamp(-1.0, 1.0)).collect(),
        }
    }

    /// Mean power `Σx²/L` in `f64`.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&s| s as f64 * s as f64).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }
}

/// One-sided complex STFT, `frames × 257`, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    frames: usize,
    data: Vec<Complex32>,
}

impl ComplexSpectrogram {
    pub fn new(frames: usize, data: Vec<Complex32>) -> Result<Self> {
        if frames == 0 || data.len() != frames * N_BINS {
            return Err(Error::shape(
                "spectrogram",
                format!("{} values for {frames} frames of {N_BINS} bins", data.len()),
            ));
        }
        Ok(ComplexSpectrogram { frames, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        N_BINS
    }

    pub fn data(&self) -> &[Complex32] {
        &self.data
    }

    pub fn get(&self, t: usize, f: usize) -> Complex32 {
        self.data[t * N_BINS + f]
    }

    pub fn magnitudes(&self) -> Vec<f32> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// `|X|^η` for every bin, `frames × 257`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedMagnitude {
    frames: usize,
    data: Vec<f32>,
    eta: f32,
}

impl CompressedMagnitude {
    pub fn new(frames: usize, data: Vec<f32>, eta: f32) -> Result<Self> {
        check_eta(eta)?;
        if frames == 0 || data.len() != frames * N_BINS {
            return Err(Error::shape("compressed magnitude", format!("{} values for {frames} frames", data.len())));
        }
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("compressed magnitudes must be finite and non-negative"));
        }
        Ok(CompressedMagnitude { frames, data, eta })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn eta(&self) -> f32 {
        self.eta
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Frames `start..start + len` as a new magnitude map.
    pub fn crop(&self, start: usize, len: usize) -> Result<CompressedMagnitude> {
        if len == 0 || start + len > self.frames {
            return Err(Error::invalid(format!("crop {start}+{len} exceeds {} frames", self.frames)));
        }
        Ok(CompressedMagnitude {
            frames: len,
            data: self.data[start * N_BINS..(start + len) * N_BINS].to_vec(),
            eta: self.eta,
        })
    }

    /// Network layout `1 × T × 257 × 1`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.frames, N_BINS, 1], self.data.clone()).expect("validated at construction")
    }

    /// Reads item `index` of a `B × T × 257 × 1` tensor, clamping tiny
    /// negative values to zero.
    pub fn from_tensor(t: &Tensor, index: usize, eta: f32) -> Result<Self> {
        let &[b, frames, bins, 1] = t.shape() else {
            return Err(Error::shape("from_tensor", format!("expected B×T×257×1, got {:?}", t.shape())));
        };
        if bins != N_BINS || index >= b {
            return Err(Error::shape("from_tensor", format!("{:?}, item {index}", t.shape())));
        }
        let n = frames * N_BINS;
        let data = t.data()[index * n..(index + 1) * n].iter().map(|v| v.max(0.0)).collect();
        Self::new(frames, data, eta)
    }
}

/// Phase angles in `(−π, π]`, `frames × 257`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseMap {
    frames: usize,
    data: Vec<f32>,
}

impl PhaseMap {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

fn check_eta(eta: f32) -> Result<()> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::invalid(format!("compression exponent must lie in (0, 1], got {eta}")));
    }
    Ok(())
}

/// Periodic Hann window of length [`N_FFT`].
pub fn hann_window() -> Vec<f64> {
    (0..N_FFT)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / N_FFT as f64).cos())
        .collect()
}

/// Frame count for a signal of `len` samples (0 when shorter than a window).
pub fn frame_count(len: usize) -> usize {
    if len < N_FFT {
        0
    } else {
        (len - N_FFT) / HOP + 1
    }
}

pub fn stft(wave: &Waveform) -> Result<ComplexSpectrogram> {
    let len = wave.len();
    if len < N_FFT {
        return Err(Error::invalid(format!("signal of {len} samples is shorter than one {N_FFT}-sample window")));
    }
    let frames = frame_count(len);
    let window = hann_window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let mut buf = vec![Complex::new(0.0f64, 0.0); N_FFT];
    let mut data = Vec::with_capacity(frames * N_BINS);
    let x = wave.samples();
    for t in 0..frames {
        let start = t * HOP;
        for (n, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(x[start + n] as f64 * window[n], 0.0);
        }
        fft.process(&mut buf);
        data.extend(buf[..N_BINS].iter().map(|c| Complex32::new(c.re as f32, c.im as f32)));
    }
    Ok(ComplexSpectrogram { frames, data })
}

/// Weighted overlap-add inverse: each frame is inverse-transformed, windowed
/// again and summed, then divided by the summed squared window.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform> {
    let frames = spec.frames();
    let len = (frames - 1) * HOP + N_FFT;
    let window = hann_window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(N_FFT);
    let mut out = vec![0.0f64; len];
    let mut norm = vec![0.0f64; len];
    let mut buf = vec![Complex::new(0.0f64, 0.0); N_FFT];
    for t in 0..frames {
        let row = &spec.data[t * N_BINS..(t + 1) * N_BINS];
        for (k, c) in row.iter().enumerate() {
            buf[k] = Complex::new(c.re as f64, c.im as f64);
        }
        // Hermitian extension; DC and Nyquist must be real.
        buf[0].im = 0.0;
        buf[N_FFT / 2].im = 0.0;
        for k in 1..N_FFT / 2 {
            buf[N_FFT - k] = buf[k].conj();
        }
        ifft.process(&mut buf);
        let start = t * HOP;
        for n in 0..N_FFT {
            out[start + n] += buf[n].re / N_FFT as f64 * window[n];
            norm[start + n] += window[n] * window[n];
        }
    }
    let samples = out
        .iter()
        .zip(&norm)
        .map(|(v, w)| if *w > WOLA_FLOOR { (v / w) as f32 } else { 0.0 })
        .collect();
    Waveform::new(samples)
}

/// Splits a spectrogram into `|X|^η` and the phase angle. A zero bin has
/// phase 0.
pub fn compress(spec: &ComplexSpectrogram, eta: f32) -> Result<(CompressedMagnitude, PhaseMap)> {
    check_eta(eta)?;
    let mut mag = Vec::with_capacity(spec.data.len());
    let mut phase = Vec::with_capacity(spec.data.len());
    for c in &spec.data {
        let m = (c.re as f64).hypot(c.im as f64);
        if m == 0.0 {
            mag.push(0.0);
            phase.push(0.0);
            continue;
        }
        mag.push(if eta == 1.0 { m as f32 } else { m.powf(eta as f64) as f32 });
        let mut p = (c.im as f64).atan2(c.re as f64);
        if p <= -std::f64::consts::PI {
            p = std::f64::consts::PI;
        }
        let mut p32 = p as f32;
        if p32 <= -std::f32::consts::PI {
            p32 = std::f32::consts::PI;
        }
        phase.push(p32);
    }
    Ok((
        CompressedMagnitude {
            frames: spec.frames,
            data: mag,
            eta,
        },
        PhaseMap {
            frames: spec.frames,
            data: phase,
        },
    ))
}

/// `mag^{1/η} · e^{i·phase}`.
pub fn reconstruct(mag: &CompressedMagnitude, phase: &PhaseMap) -> Result<ComplexSpectrogram> {
    if mag.frames != phase.frames {
        return Err(Error::shape("reconstruct", format!("{} magnitude frames vs {} phase frames", mag.frames, phase.frames)));
    }
    let inv = 1.0 / mag.eta as f64;
    let data = mag
        .data
        .iter()
        .zip(&phase.data)
        .map(|(&m, &p)| {
            let r = if mag.eta == 1.0 { m as f64 } else { (m as f64).powf(inv) };
            let (s, c) = (p as f64).sin_cos();
            Complex32::new((r * c) as f32, (r * s) as f32)
        })
        .collect();
    Ok(ComplexSpectrogram {
        frames: mag.frames,
        data,
    })
}

/// Result of [`mix`].
#[derive(Clone, Debug)]
pub struct Mixture {
    pub wave: Waveform,
    /// Gain applied to the noise before adding it.
    pub noise_gain: f64,
    /// Factor (≤ 1) applied to the sum to keep its peak within `[-1, 1]`.
    pub peak_scale: f64,
}

/// `clean + g·noise` with `g` chosen so the clean-to-scaled-noise power
/// ratio equals `snr_db`; the sum is then peak-normalized if it exceeds 1.
pub fn mix(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Mixture> {
    if clean.len() != noise.len() {
        return Err(Error::invalid(format!("clean has {} samples, noise has {}", clean.len(), noise.len())));
    }
    let (pc, pn) = (clean.power(), noise.power());
    if pc == 0.0 {
        return Err(Error::invalid("clean signal has zero energy"));
    }
    if pn == 0.0 {
        return Err(Error::invalid("noise signal has zero energy"));
    }
    let gain = 10f64.powf(-snr_db / 20.0) * (pc / pn).sqrt();
    let summed: Vec<f64> = clean
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(c, n)| *c as f64 + gain * *n as f64)
        .collect();
    let peak = summed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let peak_scale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    let wave = Waveform::new(summed.iter().map(|v| (v * peak_scale) as f32).collect())?;
    Ok(Mixture {
        wave,
        noise_gain: gain,
        peak_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_wave(len: usize, seed: u64) -> Waveform {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-0.9..0.9)).collect()).unwrap()
    }

    #[test]
    fn frame_counts() {
        assert_eq!(stft(&Waveform::new(vec![0.0; 14208]).unwrap()).unwrap().frames(), 108);
        assert_eq!(frame_count(16000), 122);
        assert_eq!(frame_count(14400), 109);
        assert!(stft(&Waveform::new(vec![0.0; 511]).unwrap()).is_err());
    }

    #[test]
    fn silence_gives_zero_spectrogram() {
        let s = stft(&Waveform::new(vec![0.0; 14208]).unwrap()).unwrap();
        assert!(s.data().iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn constant_signal_concentrates_in_dc() {
        let s = stft(&Waveform::new(vec![1.0; 1024]).unwrap()).unwrap();
        // direct DFT of one windowed frame: bin 0 = Σw, bins ≥ 1 are leakage-free
        // for a periodic Hann except bin 1 (−Σw/2 · 1/2 on each side).
        let sum_w: f64 = hann_window().iter().sum();
        for t in 0..s.frames() {
            assert!((s.get(t, 0).re as f64 - sum_w).abs() < 1e-3);
            assert!(s.get(t, 0).im.abs() < 1e-3);
            for f in 2..N_BINS {
                assert!(s.get(t, f).norm() < 1e-3, "bin {f}: {}", s.get(t, f));
            }
        }
    }

    #[test]
    fn round_trip_recovers_interior() {
        let x = random_wave(8192, 3);
        let y = istft(&stft(&x).unwrap()).unwrap();
        let (a, b) = (&x.samples()[512..8192 - 512], &y.samples()[512..8192 - 512]);
        let err: f64 = a.iter().zip(b).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = a.iter().map(|p| (*p as f64).powi(2)).sum::<f64>().sqrt();
        assert!(err / norm <= 1e-5, "relative RMS error {}", err / norm);
    }

    #[test]
    fn zero_spectrogram_inverts_to_silence() {
        let spec = ComplexSpectrogram::new(3, vec![Complex32::new(0.0, 0.0); 3 * N_BINS]).unwrap();
        let w = istft(&spec).unwrap();
        assert_eq!(w.len(), 2 * HOP + N_FFT);
        assert!(w.samples().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_frame_is_normalized_back() {
        let x = random_wave(512, 9);
        let y = istft(&stft(&x).unwrap()).unwrap();
        assert_eq!(y.len(), 512);
        // x·w·w / w² = x wherever the window is not vanishing
        let w = hann_window();
        for n in 0..512 {
            if w[n] * w[n] > 1e-4 {
                assert!((x.samples()[n] - y.samples()[n]).abs() < 1e-4, "sample {n}");
            }
        }
    }

    #[test]
    fn compression_examples() {
        let spec = ComplexSpectrogram::new(
            1,
            (0..N_BINS).map(|f| if f == 0 { Complex32::new(4.0, 0.0) } else { Complex32::new(0.0, 0.0) }).collect(),
        )
        .unwrap();
        let (m, p) = compress(&spec, 0.5).unwrap();
        assert_eq!(m.data()[0], 2.0);
        assert_eq!(m.data()[1], 0.0);
        assert_eq!(p.data()[1], 0.0);
        let (m1, _) = compress(&spec, 1.0).unwrap();
        assert_eq!(m1.data()[0], 4.0);
        assert!(compress(&spec, 0.0).is_err());
        assert!(compress(&spec, 1.5).is_err());
    }

    #[test]
    fn reconstruct_examples() {
        let mut mag = vec![0.0; N_BINS];
        mag[0] = 3.0;
        let m = CompressedMagnitude::new(1, mag, 0.5).unwrap();
        let (_, phase) = compress(&ComplexSpectrogram::new(1, vec![Complex32::new(0.0, 0.0); N_BINS]).unwrap(), 0.5).unwrap();
        let s = reconstruct(&m, &phase).unwrap();
        assert_eq!(s.get(0, 0), Complex32::new(9.0, 0.0));
        assert_eq!(s.get(0, 1), Complex32::new(0.0, 0.0));
    }

    #[test]
    fn phase_lies_in_half_open_interval() {
        let spec = ComplexSpectrogram::new(
            1,
            (0..N_BINS).map(|f| Complex32::new(-1.0, if f % 2 == 0 { -0.0 } else { 0.0 })).collect(),
        )
        .unwrap();
        let (_, p) = compress(&spec, 0.5).unwrap();
        let pi = std::f32::consts::PI;
        assert!(p.data().iter().all(|v| *v > -pi && *v <= pi));
    }

    #[test]
    fn mix_gain_examples() {
        let clean = Waveform::new((0..1000).map(|i| if i % 2 == 0 { 0.1 } else { -0.1 }).collect()).unwrap();
        let noise = Waveform::new((0..1000).map(|i| if i % 4 < 2 { 0.1 } else { -0.1 }).collect()).unwrap();
        assert!((mix(&clean, &noise, 0.0).unwrap().noise_gain - 1.0).abs() < 1e-12);
        assert!((mix(&clean, &noise, 20.0).unwrap().noise_gain - 0.1).abs() < 1e-12);
        assert!(mix(&clean, &Waveform::new(vec![0.0; 1000]).unwrap(), 5.0).is_err());
        assert!(mix(&Waveform::new(vec![0.0; 1000]).unwrap(), &noise, 5.0).is_err());
    }

    #[test]
    fn mix_peak_normalizes() {
        let clean = Waveform::new(vec![0.9; 100]).unwrap();
        let noise = Waveform::new((0..100).map(|i| if i % 2 == 0 { 0.9 } else { -0.9 }).collect()).unwrap();
        let m = mix(&clean, &noise, 0.0).unwrap();
        assert!(m.peak_scale < 1.0);
        assert!(m.wave.samples().iter().all(|v| v.abs() <= 1.0));
    }
}
