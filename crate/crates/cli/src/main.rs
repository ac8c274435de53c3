use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use cyclese_core::dataset::{synth_dataset, Manifest};
use cyclese_core::evalkit::{enhance, evaluate_pairs, export_spectrogram};
use cyclese_core::gradsuite;
use cyclese_core::numerics::Checkpoint;
use cyclese_core::signal::{read_wav, write_wav};
use cyclese_core::training::{load_generator, train, Corpus, TrainOutputs, Trainer, TrainingConfig};

/// Thread count for data preparation and matrix kernels.
const THREADS_ENV: &str = "CYCLESE_THREADS";

#[derive(Parser)]
#[command(name = "cyclese", version, about = "Non-parallel speech enhancement with an attention CycleGAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic tone-in-noise corpus and its manifest.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Utterance length in seconds.
        #[arg(long, default_value_t = 0.9)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on the utterances of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for the checkpoint, generator and log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from `<out>/trainer.ckpt` if present.
        #[arg(long)]
        resume: bool,
    },
    /// Enhance one WAV file, or every WAV file in a directory.
    Enhance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score noisy and enhanced audio against clean references.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a dB spectrogram of a WAV file as CSV and PGM.
    ExportSpec {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output path without extension.
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        if n == 0 {
            bail!("{THREADS_ENV} must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn cmd_synth(out: &Path, count: usize, duration: f64, seed: u64) -> Result<()> {
    let m = synth_dataset(out, count, duration, seed)?;
    println!("wrote {} utterances to {}", m.entries.len(), out.display());
    Ok(())
}

fn cmd_train(manifest: &Path, out: &Path, config: Option<&Path>, seed: Option<u64>, resume: bool) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let ckpt_path = out.join("trainer.ckpt");
    let mut trainer = if resume && ckpt_path.exists() {
        info!("resuming from {}", ckpt_path.display());
        Trainer::from_checkpoint(&Checkpoint::load(&ckpt_path)?)?
    } else {
        let mut cfg = match config {
            Some(p) => TrainingConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => TrainingConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Trainer::new(cfg)?
    };
    std::fs::write(out.join("config.txt"), trainer.cfg.to_text())?;
    let audio = Manifest::load(manifest)?.load_audio()?;
    let corpus = Corpus::from_audio(&audio, trainer.cfg.effective_eta(), trainer.cfg.crop_frames)?;
    info!(
        "{} clean / {} noisy utterances, {} steps",
        corpus.clean.len(),
        corpus.noisy.len(),
        trainer.total_steps(&corpus)
    );
    let outputs = TrainOutputs {
        log_csv: Some(out.join("train_log.csv")),
        checkpoint: Some(ckpt_path),
    };
    let rows = train(&mut trainer, &corpus, &outputs)?;
    trainer.generator_checkpoint().save(out.join("generator.ckpt"))?;
    if let Some(last) = rows.last() {
        println!("finished at step {} (total_g {:.4}, cycle {:.4})", last.step + 1, last.losses.total_g, last.losses.cycle);
    }
    Ok(())
}

fn cmd_enhance(model: &Path, input: &Path, out: &Path) -> Result<()> {
    let (cfg, g, store) = load_generator(&Checkpoint::load(model)?)?;
    let eta = cfg.effective_eta();
    let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        std::fs::create_dir_all(out)?;
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
            .collect();
        files.sort();
        files.into_iter().map(|p| (p.clone(), out.join(p.file_name().unwrap()))).collect()
    } else {
        vec![(input.to_path_buf(), out.to_path_buf())]
    };
    for (src, dst) in &jobs {
        let w = read_wav(src)?;
        let e = enhance(&g, &store, eta, &w).with_context(|| format!("enhancing {}", src.display()))?;
        write_wav(dst, &e)?;
        info!("{} -> {}", src.display(), dst.display());
    }
    println!("enhanced {} file(s)", jobs.len());
    Ok(())
}

fn cmd_evaluate(model: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let (cfg, g, store) = load_generator(&Checkpoint::load(model)?)?;
    let audio = Manifest::load(manifest)?.load_audio()?;
    let ev = evaluate_pairs(&g, &store, cfg.effective_eta(), &audio)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("noisy_metrics.csv"), ev.noisy.to_csv())?;
    std::fs::write(out.join("enhanced_metrics.csv"), ev.enhanced.to_csv())?;
    println!("{:<10} {:>10} {:>10}", "", "ssnr_db", "lsd_db");
    println!("{:<10} {:>10.3} {:>10.3}", "noisy", ev.noisy.mean_ssnr(), ev.noisy.mean_lsd());
    println!("{:<10} {:>10.3} {:>10.3}", "enhanced", ev.enhanced.mean_ssnr(), ev.enhanced.mean_lsd());
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let report = gradsuite::run(seed)?;
    print!("{}", report.to_text());
    let failed = report.failures();
    if !failed.is_empty() {
        let names: Vec<&str> = failed.iter().map(|r| r.name).collect();
        bail!("gradient check failed for {}", names.join(", "));
    }
    println!("all {} operations within {:e}", report.results.len(), gradsuite::TOLERANCE);
    Ok(())
}

fn cmd_export_spec(input: &Path, out: &Path) -> Result<()> {
    let (csv, pgm) = export_spectrogram(&read_wav(input)?, out)?;
    println!("wrote {} and {}", csv.display(), pgm.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads()?;
    match Cli::parse().command {
        Command::SynthData { out, count, duration, seed } => cmd_synth(&out, count, duration, seed),
        Command::Train {
            manifest,
            out,
            config,
            seed,
            resume,
        } => cmd_train(&manifest, &out, config.as_deref(), seed, resume),
        Command::Enhance { model, input, out } => cmd_enhance(&model, &input, &out),
        Command::Evaluate { model, manifest, out } => cmd_evaluate(&model, &manifest, &out),
        Command::GradCheck { seed } => cmd_gradcheck(seed),
        Command::ExportSpec { input, out } => cmd_export_spec(&input, &out),
    }
}
