use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::attention::AttentionSwitches;
use crate::error::{Error, Result};
use crate::models::GeneratorConfig;
use crate::numerics::AdamHyper;

/// How training batches pair noisy and clean crops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    NonParallel,
    Parallel,
}

impl SamplingMode {
    fn as_str(self) -> &'static str {
        match self {
            SamplingMode::NonParallel => "non_parallel",
            SamplingMode::Parallel => "parallel",
        }
    }
}

/// Every tunable of a training run. Serialized as flat `key=value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub eta: f32,
    pub compressed_input: bool,
    pub crop_frames: usize,
    pub batch: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_cycle: f32,
    pub lambda_id: f32,
    pub id_epochs: usize,
    pub decay_start_epoch: usize,
    pub total_epochs: usize,
    /// 0 derives the epoch length from the corpus: `⌈noisy utterances / batch⌉`.
    pub steps_per_epoch: usize,
    /// Stop after this many steps even if the schedule is longer (0 = no cap).
    pub max_steps: u64,
    pub mode: SamplingMode,
    pub use_atab: bool,
    pub use_afab: bool,
    pub use_aha: bool,
    pub channels: usize,
    pub depth: usize,
    pub d_base: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            eta: 0.5,
            compressed_input: true,
            crop_frames: 108,
            batch: 4,
            lr_g: 2e-4,
            lr_d: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            lambda_cycle: 5.0,
            lambda_id: 10.0,
            id_epochs: 20,
            decay_start_epoch: 50,
            total_epochs: 100,
            steps_per_epoch: 0,
            max_steps: 0,
            mode: SamplingMode::NonParallel,
            use_atab: true,
            use_afab: true,
            use_aha: true,
            channels: 64,
            depth: 6,
            d_base: 8,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        reason: format!("cannot parse {key}={v}"),
    })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config {
            line,
            reason: format!("{key} expects true/false, got {v}"),
        }),
    }
}

impl TrainingConfig {
    /// Compression exponent actually applied to magnitudes.
    pub fn effective_eta(&self) -> f32 {
        if self.compressed_input {
            self.eta
        } else {
            1.0
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            channels: self.channels,
            depth: self.depth,
            switches: AttentionSwitches {
                time: self.use_atab,
                freq: self.use_afab,
                hierarchy: self.use_aha,
            },
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamHyper::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::Config { line: 0, reason });
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return fail(format!("eta must lie in (0, 1], got {}", self.eta));
        }
        if self.crop_frames == 0 || self.batch == 0 {
            return fail("crop_frames and batch must be at least 1".into());
        }
        if !(self.id_epochs <= self.decay_start_epoch && self.decay_start_epoch <= self.total_epochs) {
            return fail(format!(
                "need id_epochs ≤ decay_start_epoch ≤ total_epochs, got {} / {} / {}",
                self.id_epochs, self.decay_start_epoch, self.total_epochs
            ));
        }
        if self.total_epochs == 0 {
            return fail("total_epochs must be at least 1".into());
        }
        if self.channels == 0 || self.channels % 32 != 0 {
            return fail(format!("channels must be a positive multiple of 32, got {}", self.channels));
        }
        if self.depth == 0 || self.d_base == 0 {
            return fail("depth and d_base must be at least 1".into());
        }
        if !(self.lr_g >= 0.0 && self.lr_d >= 0.0) {
            return fail("learning rates must be non-negative".into());
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment, blank lines are
    /// ignored, unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainingConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                reason: format!("expected key=value, got {content:?}"),
            })?;
            c.set(line, k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key; `line` is used in error messages.
    pub fn set(&mut self, line: usize, k: &str, v: &str) -> Result<()> {
        match k {
            "eta" => self.eta = parse_value(line, k, v)?,
            "compressed_input" => self.compressed_input = parse_bool(line, k, v)?,
            "crop_frames" => self.crop_frames = parse_value(line, k, v)?,
            "batch" => self.batch = parse_value(line, k, v)?,
            "lr_g" => self.lr_g = parse_value(line, k, v)?,
            "lr_d" => self.lr_d = parse_value(line, k, v)?,
            "beta1" => self.beta1 = parse_value(line, k, v)?,
            "beta2" => self.beta2 = parse_value(line, k, v)?,
            "lambda_cycle" => self.lambda_cycle = parse_value(line, k, v)?,
            "lambda_id" => self.lambda_id = parse_value(line, k, v)?,
            "id_epochs" => self.id_epochs = parse_value(line, k, v)?,
            "decay_start_epoch" => self.decay_start_epoch = parse_value(line, k, v)?,
            "total_epochs" => self.total_epochs = parse_value(line, k, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse_value(line, k, v)?,
            "max_steps" => self.max_steps = parse_value(line, k, v)?,
            "mode" => {
                self.mode = match v {
                    "non_parallel" => SamplingMode::NonParallel,
                    "parallel" => SamplingMode::Parallel,
                    _ => {
                        return Err(Error::Config {
                            line,
                            reason: format!("mode must be non_parallel or parallel, got {v}"),
                        })
                    }
                }
            }
            "use_atab" => self.use_atab = parse_bool(line, k, v)?,
            "use_afab" => self.use_afab = parse_bool(line, k, v)?,
            "use_aha" => self.use_aha = parse_bool(line, k, v)?,
            "channels" => self.channels = parse_value(line, k, v)?,
            "depth" => self.depth = parse_value(line, k, v)?,
            "d_base" => self.d_base = parse_value(line, k, v)?,
            "seed" => self.seed = parse_value(line, k, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(line, k, v)?,
            _ => {
                return Err(Error::Config {
                    line,
                    reason: format!("unknown key {k}"),
                })
            }
        }
        Ok(())
    }

    /// All keys in a fixed order; `parse(to_text())` reproduces `self`.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("eta", self.eta.to_string()),
            ("compressed_input", self.compressed_input.to_string()),
            ("crop_frames", self.crop_frames.to_string()),
            ("batch", self.batch.to_string()),
            ("lr_g", self.lr_g.to_string()),
            ("lr_d", self.lr_d.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("lambda_cycle", self.lambda_cycle.to_string()),
            ("lambda_id", self.lambda_id.to_string()),
            ("id_epochs", self.id_epochs.to_string()),
            ("decay_start_epoch", self.decay_start_epoch.to_string()),
            ("total_epochs", self.total_epochs.to_string()),
            ("steps_per_epoch", self.steps_per_epoch.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("mode", self.mode.as_str().to_string()),
            ("use_atab", self.use_atab.to_string()),
            ("use_afab", self.use_afab.to_string()),
            ("use_aha", self.use_aha.to_string()),
            ("channels", self.channels.to_string()),
            ("depth", self.depth.to_string()),
            ("d_base", self.d_base.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// `base` for epochs up to the decay start, then linear decay reaching 0
/// at `total_epochs`. Epochs are 1-based.
pub fn learning_rate(base: f64, epoch: usize, cfg: &TrainingConfig) -> Result<f64> {
    if epoch == 0 || epoch > cfg.total_epochs {
        return Err(Error::invalid(format!("epoch {epoch} outside 1..={}", cfg.total_epochs)));
    }
    if epoch <= cfg.decay_start_epoch {
        return Ok(base);
    }
    Ok(base * (cfg.total_epochs - epoch) as f64 / (cfg.total_epochs - cfg.decay_start_epoch) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = TrainingConfig::default();
        c.validate().unwrap();
        assert_eq!(TrainingConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parse_overrides_and_comments() {
        let c = TrainingConfig::parse("# desk\nbatch = 2\n\nchannels=32 # small\nmode=parallel\nuse_aha=false\n").unwrap();
        assert_eq!((c.batch, c.channels, c.mode, c.use_aha), (2, 32, SamplingMode::Parallel, false));
    }

    #[test]
    fn parse_errors_name_the_line() {
        match TrainingConfig::parse("batch=2\nfoo=1\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(TrainingConfig::parse("batch=two").is_err());
        assert!(TrainingConfig::parse("justtext").is_err());
        assert!(TrainingConfig::parse("id_epochs=60").is_err());
        assert!(TrainingConfig::parse("channels=48").is_err());
    }

    #[test]
    fn schedule_examples() {
        let c = TrainingConfig::default();
        assert_eq!(learning_rate(2e-4, 10, &c).unwrap(), 2e-4);
        assert_eq!(learning_rate(2e-4, 50, &c).unwrap(), 2e-4);
        assert_eq!(learning_rate(2e-4, 75, &c).unwrap(), 2e-4 * 0.5);
        assert_eq!(learning_rate(2e-4, 100, &c).unwrap(), 0.0);
        assert!(learning_rate(2e-4, 0, &c).is_err());
        assert!(learning_rate(2e-4, 101, &c).is_err());
    }

    #[test]
    fn uncompressed_input_uses_unit_exponent() {
        let c = TrainingConfig {
            compressed_input: false,
            ..TrainingConfig::default()
        };
        assert_eq!(c.effective_eta(), 1.0);
    }
}
