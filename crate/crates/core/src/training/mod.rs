//! Two-cycle adversarial training with relativistic discriminators.
//!
//! Domain `X` holds noisy magnitudes and `Y` clean ones. `G: X → Y` is the
//! enhancer, `F: Y → X` its inverse; `D_Y` and `D_X` judge the two domains.

mod config;
mod corpus;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{learning_rate, SamplingMode, TrainingConfig};
pub use corpus::{Batch, Corpus, Utterance, UtteranceAudio};

use crate::error::{Error, Result};
use crate::layers::Bind;
use crate::losses::{self, GeneratorTerms, LossBreakdown};
use crate::models::{export_store, import_store, Generator, MultiScaleDiscriminator};
use crate::numerics::{AdamState, Checkpoint, Graph, ParamStore, Tensor, Var};

const SAMPLING_STREAM: u64 = 1;

/// The four networks of the two cycles and their parameters.
#[derive(Clone, Debug)]
pub struct CycleModels {
    pub g: Generator,
    pub g_store: ParamStore,
    pub f: Generator,
    pub f_store: ParamStore,
    pub d_x: MultiScaleDiscriminator,
    pub d_x_store: ParamStore,
    pub d_y: MultiScaleDiscriminator,
    pub d_y_store: ParamStore,
}

impl CycleModels {
    /// Initializes all four networks from `seed` (independent of the
    /// batch-sampling stream).
    pub fn new(cfg: &TrainingConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (g, g_store) = Generator::new(cfg.generator_config(), &mut rng)?;
        let (f, f_store) = Generator::new(cfg.generator_config(), &mut rng)?;
        let (d_x, d_x_store) = MultiScaleDiscriminator::new(cfg.d_base, &mut rng)?;
        let (d_y, d_y_store) = MultiScaleDiscriminator::new(cfg.d_base, &mut rng)?;
        Ok(CycleModels {
            g,
            g_store,
            f,
            f_store,
            d_x,
            d_x_store,
            d_y,
            d_y_store,
        })
    }

    fn stores(&self) -> [(&'static str, &ParamStore); 4] {
        [("G", &self.g_store), ("F", &self.f_store), ("DX", &self.d_x_store), ("DY", &self.d_y_store)]
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub losses: LossBreakdown,
}

impl LogRow {
    pub fn csv_header() -> String {
        let mut h = vec!["step", "epoch", "lr_g", "lr_d"];
        h.extend(LossBreakdown::FIELDS);
        h.join(",")
    }

    /// Values use the shortest round-trip representation, so equal rows
    /// print identically.
    pub fn csv_line(&self) -> String {
        let mut v = vec![self.step.to_string(), self.epoch.to_string(), self.lr_g.to_string(), self.lr_d.to_string()];
        v.extend(self.losses.values().iter().map(|x| x.to_string()));
        v.join(",")
    }
}

/// Training state: models, optimizers, sampling RNG and step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainingConfig,
    pub models: CycleModels,
    pub opt_g: AdamState,
    pub opt_d_x: AdamState,
    pub opt_d_y: AdamState,
    rng: ChaCha8Rng,
    /// Steps completed so far.
    pub step: u64,
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).item() as f64
}

impl Trainer {
    pub fn new(cfg: TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let models = CycleModels::new(&cfg)?;
        let opt_g = AdamState::new(&[&models.g_store, &models.f_store]);
        let opt_d_x = AdamState::new(&[&models.d_x_store]);
        let opt_d_y = AdamState::new(&[&models.d_y_store]);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SAMPLING_STREAM);
        Ok(Trainer {
            cfg,
            models,
            opt_g,
            opt_d_x,
            opt_d_y,
            rng,
            step: 0,
        })
    }

    /// Epoch length for `corpus` under this config.
    pub fn steps_per_epoch(&self, corpus: &Corpus) -> u64 {
        if self.cfg.steps_per_epoch > 0 {
            self.cfg.steps_per_epoch as u64
        } else {
            corpus.noisy.len().div_ceil(self.cfg.batch).max(1) as u64
        }
    }

    /// Steps of the full schedule, capped by `max_steps` when set.
    pub fn total_steps(&self, corpus: &Corpus) -> u64 {
        let full = self.steps_per_epoch(corpus) * self.cfg.total_epochs as u64;
        match self.cfg.max_steps {
            0 => full,
            cap => full.min(cap),
        }
    }

    pub fn sample(&mut self, corpus: &Corpus) -> Result<Batch> {
        match self.cfg.mode {
            SamplingMode::NonParallel => corpus.sample_nonparallel_batch(self.cfg.batch, &mut self.rng),
            SamplingMode::Parallel => corpus.sample_parallel_batch(self.cfg.batch, &mut self.rng),
        }
    }

    /// Samples the next batch and trains on it.
    pub fn advance(&mut self, corpus: &Corpus) -> Result<LogRow> {
        let epoch = (self.step / self.steps_per_epoch(corpus)) as usize + 1;
        let batch = self.sample(corpus)?;
        let lr_g = learning_rate(self.cfg.lr_g, epoch, &self.cfg)?;
        let lr_d = learning_rate(self.cfg.lr_d, epoch, &self.cfg)?;
        let losses = self.train_step(&batch, epoch)?;
        let row = LogRow {
            step: self.step,
            epoch,
            lr_g,
            lr_d,
            losses,
        };
        self.step += 1;
        Ok(row)
    }

    /// One update of `D_Y`, `D_X` and then `G`, `F` jointly.
    pub fn train_step(&mut self, batch: &Batch, epoch: usize) -> Result<LossBreakdown> {
        let cfg = self.cfg.clone();
        let lr_g = learning_rate(cfg.lr_g, epoch, &cfg)?;
        let lr_d = learning_rate(cfg.lr_d, epoch, &cfg)?;
        let identity_active = epoch <= cfg.id_epochs;
        let adam = cfg.adam();
        let m = &mut self.models;

        let mut g = Graph::new();
        let x = g.constant(batch.noisy.clone());
        let y = g.constant(batch.clean.clone());
        let (gx, _) = m.g.forward(&mut g, Bind::trainable(&m.g_store), x)?;
        let (fy, _) = m.f.forward(&mut g, Bind::trainable(&m.f_store), y)?;

        let rals_d_y = discriminator_update(&m.d_y, &mut m.d_y_store, &mut self.opt_d_y, &batch.clean, g.value(gx), lr_d, adam)?;
        let rals_d_x = discriminator_update(&m.d_x, &mut m.d_x_store, &mut self.opt_d_x, &batch.noisy, g.value(fy), lr_d, adam)?;

        let dy = Bind::frozen(&m.d_y_store);
        let real_y = m.d_y.forward(&mut g, dy, y)?;
        let fake_y = m.d_y.forward(&mut g, dy, gx)?;
        let rals_xy = losses::multiscale_generator_loss(&mut g, real_y, fake_y)?;
        let dx = Bind::frozen(&m.d_x_store);
        let real_x = m.d_x.forward(&mut g, dx, x)?;
        let fake_x = m.d_x.forward(&mut g, dx, fy)?;
        let rals_yx = losses::multiscale_generator_loss(&mut g, real_x, fake_x)?;

        let (gb, fb) = (Bind::trainable(&m.g_store), Bind::trainable(&m.f_store));
        let (fgx, _) = m.f.forward(&mut g, fb, gx)?;
        let (gfy, _) = m.g.forward(&mut g, gb, fy)?;
        let cycle = losses::cycle_loss(&mut g, x, fgx, y, gfy)?;

        // Identity terms are always reported; they only carry gradients
        // while scheduled.
        let (gi, fi) = if identity_active {
            (gb, fb)
        } else {
            (Bind::frozen(&m.g_store), Bind::frozen(&m.f_store))
        };
        let (fx, _) = m.f.forward(&mut g, fi, x)?;
        let (gy, _) = m.g.forward(&mut g, gi, y)?;
        let identity = losses::identity_loss(&mut g, x, fx, y, gy)?;

        let terms = GeneratorTerms {
            rals_xy,
            rals_yx,
            cycle,
            identity,
        };
        let total = losses::total_generator_loss(&mut g, terms, cfg.lambda_cycle, cfg.lambda_id, identity_active)?;
        let breakdown = LossBreakdown {
            rals_g_xy: scalar(&g, rals_xy),
            rals_g_yx: scalar(&g, rals_yx),
            rals_d_x,
            rals_d_y,
            cycle: scalar(&g, cycle),
            identity: scalar(&g, identity),
            total_g: scalar(&g, total),
        };
        if let Some(name) = breakdown.first_non_finite() {
            return Err(Error::NonFinite(format!("loss component {name} at step {}", self.step)));
        }
        let grads = g.backward(total)?;
        grads.accumulate_into(&g, &mut m.g_store);
        grads.accumulate_into(&g, &mut m.f_store);
        drop(grads);
        drop(g);
        self.opt_g.step(&mut [&mut m.g_store, &mut m.f_store], lr_g, adam)?;
        for (name, s) in m.stores() {
            if !s.all_finite() {
                return Err(Error::NonFinite(format!("parameters of {name} after step {}", self.step)));
            }
        }
        Ok(breakdown)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_meta("kind", "trainer");
        ck.push_meta("step", self.step);
        ck.push_meta("rng_seed", self.cfg.seed);
        ck.push_meta("rng_word_pos", self.rng.get_word_pos());
        for (k, v) in self.cfg.pairs() {
            ck.push_meta(format!("config.{k}"), v);
        }
        for (name, s) in self.models.stores() {
            export_store(&mut ck, name, s);
        }
        for (name, opt) in [("optG", &self.opt_g), ("optDX", &self.opt_d_x), ("optDY", &self.opt_d_y)] {
            ck.push_meta(format!("{name}.t"), opt.t);
            for (si, (ms, vs)) in opt.m.iter().zip(&opt.v).enumerate() {
                for (li, (mt, vt)) in ms.iter().zip(vs).enumerate() {
                    ck.push_tensor(format!("{name}/{si}/{li}/m"), mt.clone());
                    ck.push_tensor(format!("{name}/{si}/{li}/v"), vt.clone());
                }
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = config_from_checkpoint(ck)?;
        let mut t = Trainer::new(cfg)?;
        let meta = |k: &str| ck.meta(k).ok_or_else(|| Error::Checkpoint(format!("missing meta {k}")));
        let num = |k: &str| -> Result<u128> { meta(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad meta {k}"))) };
        t.step = num("step")? as u64;
        t.rng.set_word_pos(num("rng_word_pos")?);
        import_store(ck, "G", &mut t.models.g_store)?;
        import_store(ck, "F", &mut t.models.f_store)?;
        import_store(ck, "DX", &mut t.models.d_x_store)?;
        import_store(ck, "DY", &mut t.models.d_y_store)?;
        for (name, opt) in [("optG", &mut t.opt_g), ("optDX", &mut t.opt_d_x), ("optDY", &mut t.opt_d_y)] {
            opt.t = num(&format!("{name}.t"))? as u64;
            for (si, (ms, vs)) in opt.m.iter_mut().zip(opt.v.iter_mut()).enumerate() {
                for (li, (mt, vt)) in ms.iter_mut().zip(vs.iter_mut()).enumerate() {
                    for (suffix, dst) in [("m", mt), ("v", vt)] {
                        let key = format!("{name}/{si}/{li}/{suffix}");
                        let src = ck.tensor(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                        if src.shape() != dst.shape() {
                            return Err(Error::Checkpoint(format!("shape mismatch for {key}")));
                        }
                        *dst = src.clone();
                    }
                }
            }
        }
        Ok(t)
    }

    /// A checkpoint holding only the enhancer `G` and the config.
    pub fn generator_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_meta("kind", "generator");
        for (k, v) in self.cfg.pairs() {
            ck.push_meta(format!("config.{k}"), v);
        }
        export_store(&mut ck, "G", &self.models.g_store);
        ck
    }
}

fn discriminator_update(
    d: &MultiScaleDiscriminator,
    store: &mut ParamStore,
    opt: &mut AdamState,
    real: &Tensor,
    fake: &Tensor,
    lr: f64,
    adam: crate::numerics::AdamHyper,
) -> Result<f64> {
    d.power_iterate(store)?;
    let mut g = Graph::new();
    let (r, f) = (g.constant(real.clone()), g.constant(fake.clone()));
    let p = Bind::trainable(store);
    let rs = d.forward(&mut g, p, r)?;
    let fs = d.forward(&mut g, p, f)?;
    let loss = losses::multiscale_discriminator_loss(&mut g, rs, fs)?;
    let value = scalar(&g, loss);
    if !value.is_finite() {
        return Err(Error::NonFinite("discriminator loss".into()));
    }
    let grads = g.backward(loss)?;
    grads.accumulate_into(&g, store);
    opt.step(&mut [store], lr, adam)?;
    Ok(value)
}

/// Rebuilds the training config recorded in a checkpoint.
pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<TrainingConfig> {
    let mut cfg = TrainingConfig::default();
    let mut seen = false;
    for (k, v) in &ck.meta {
        if let Some(key) = k.strip_prefix("config.") {
            cfg.set(0, key, v)?;
            seen = true;
        }
    }
    if !seen {
        return Err(Error::Checkpoint("no config recorded".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the enhancer from a trainer or generator checkpoint.
pub fn load_generator(ck: &Checkpoint) -> Result<(TrainingConfig, Generator, ParamStore)> {
    let cfg = config_from_checkpoint(ck)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (g, mut store) = Generator::new(cfg.generator_config(), &mut rng)?;
    import_store(ck, "G", &mut store)?;
    Ok((cfg, g, store))
}

/// Output locations of [`train`].
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub log_csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Runs every remaining step of `trainer`, writing the log as it goes and
/// checkpoints at the configured cadence and at the end.
pub fn train(trainer: &mut Trainer, corpus: &Corpus, out: &TrainOutputs) -> Result<Vec<LogRow>> {
    let total = trainer.total_steps(corpus);
    let mut log = match &out.log_csv {
        Some(p) => {
            let append = trainer.step > 0 && p.exists();
            let mut f = std::fs::OpenOptions::new().create(true).append(append).write(true).truncate(!append).open(p)?;
            if !append {
                writeln!(f, "{}", LogRow::csv_header())?;
            }
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };
    let mut rows = Vec::new();
    while trainer.step < total {
        let row = trainer.advance(corpus)?;
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", row.csv_line())?;
        }
        if row.step % 50 == 0 {
            log::info!(
                "step {} epoch {} total_g {:.4} cycle {:.4} d_y {:.4}",
                row.step,
                row.epoch,
                row.losses.total_g,
                row.losses.cycle,
                row.losses.rals_d_y
            );
        }
        rows.push(row);
        let every = trainer.cfg.checkpoint_every;
        if let Some(p) = &out.checkpoint {
            if every > 0 && trainer.step % every == 0 && trainer.step < total {
                trainer.to_checkpoint().save(p)?;
            }
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    if let Some(p) = &out.checkpoint {
        trainer.to_checkpoint().save(p)?;
    }
    Ok(rows)
}

/// Writes log rows as CSV.
pub fn write_log(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let mut s = LogRow::csv_header();
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}
