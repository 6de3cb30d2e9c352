use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ffcn::harness::{
    ablate, evaluate_checkpoint, fewshot_finetune, gradcheck, train, Arm, Checkpoint, Dataset, MetricsRecord, Precision,
    RunConfig, CHECKPOINT_FILE, GRADCHECK_TOLERANCE, METRICS_FILE,
};
use ffcn::numerics::Real;
use ffcn::synth::{generate, materialize, oracle_accuracy, read_manifest, read_split, write_dataset, SplitMode, SplitSpec, SynthConfig};

const ORACLE_FLOOR: f64 = 0.95;

#[derive(Parser)]
#[command(name = "ffcn", version, about = "Train and evaluate free-form composition networks on synthetic tracklet clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and check its oracle separability.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "longtail")]
        mode: SplitMode,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 40)]
        classes: usize,
    },
    /// Train on a generated dataset, writing a checkpoint and metrics per epoch.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// `manifest.json` of the dataset, or its directory.
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to `val`, or `base_val` for few-shot datasets.
        #[arg(long)]
        split: Option<String>,
    },
    /// Finetune a base-class checkpoint on the novel classes, with and without composition.
    Fewshot {
        #[arg(long)]
        base_ckpt: PathBuf,
        #[arg(long, value_parser = ["5", "10"])]
        k: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference audit of every parameter path of the tiny model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train every arm for every seed and report the tail and overall means.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "no-comp,comp")]
        arms: Vec<Arm>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
}

fn config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let mut c = RunConfig::default();
            c.apply_env()?;
            c
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn print_metrics(m: &MetricsRecord) {
    println!("top1 {:.4}", m.top1);
    if let Some(t) = m.tail_mean {
        println!("tail_mean {t:.4}");
    }
    for (c, a) in m.per_class.iter().enumerate() {
        if let Some(a) = a {
            println!("class {c} {a:.4}");
        }
    }
}

fn gen_data(cfg: &RunConfig, out: &Path, mode: SplitMode, seed: u64, classes: usize) -> Result<bool> {
    let synth = SynthConfig {
        frames: cfg.frames,
        slots: cfg.slots,
        appearance_dim: cfg.appearance_dim,
        ..SynthConfig::default()
    };
    let manifest = generate(&synth, classes, mode, &SplitSpec::default(), seed)?;
    write_dataset(out, &manifest)?;
    let val = if mode == SplitMode::Fewshot { "novel_val" } else { "val" };
    let acc = oracle_accuracy(&materialize(&manifest, val)?, &manifest);
    for (name, entries) in &manifest.splits {
        println!("{name}: {} clips", entries.len());
    }
    println!("oracle accuracy on {val}: {acc:.4} (floor {ORACLE_FLOOR})");
    Ok(acc >= ORACLE_FLOOR)
}

fn run_train<F: Real>(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let dataset = Dataset::from_dir(data)?;
    let resume = resume.map(Checkpoint::<F>::load).transpose()?;
    let run = train::<F>(cfg, &dataset, Some(out), resume)?;
    if let Some(m) = run.history.last() {
        print_metrics(m);
    }
    println!("wrote {} and {}", out.join(CHECKPOINT_FILE).display(), out.join(METRICS_FILE).display());
    Ok(())
}

fn run_eval<F: Real>(ckpt: &Path, manifest: &Path, split: Option<&str>) -> Result<()> {
    let dir = if manifest.is_dir() { manifest } else { manifest.parent().unwrap_or(Path::new(".")) };
    let m = read_manifest(dir)?;
    let ckpt = Checkpoint::<F>::load(ckpt)?;
    let (default_split, classes) = match m.mode {
        SplitMode::Fewshot => ("base_val", m.base_classes),
        _ => ("val", m.classes.len()),
    };
    let samples = read_split(dir, split.unwrap_or(default_split))?;
    print_metrics(&evaluate_checkpoint(&ckpt, &samples, classes)?);
    Ok(())
}

fn run_fewshot<F: Real>(cfg: &RunConfig, base: &Path, k: usize, data: &Path, out: Option<&Path>) -> Result<()> {
    let m = read_manifest(data)?;
    if m.mode != SplitMode::Fewshot {
        bail!("{} is not a few-shot dataset", data.display());
    }
    let base = Checkpoint::<F>::load(base)?;
    let base_train = read_split(data, "base_train")?;
    let shots = read_split(data, &format!("novel_train_k{k}"))?;
    let val = read_split(data, "novel_val")?;
    for composition in [false, true] {
        let run = fewshot_finetune(cfg, &base, &m, &base_train, &shots, &val, k, composition)?;
        println!("k={k} composition={composition} novel_mean {:.4}", run.novel_mean());
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
            let tag = if composition { "comp" } else { "no-comp" };
            run.checkpoint.save(&dir.join(format!("fewshot_k{k}_{tag}.ffcn")))?;
        }
    }
    Ok(())
}

fn run_ablate<F: Real>(cfg: &RunConfig, data: &Path, arms: &[Arm], seeds: &[u64]) -> Result<()> {
    let dataset = Dataset::from_dir(data)?;
    let results = ablate::<F>(cfg, &dataset, arms, seeds)?;
    for r in &results {
        println!(
            "{} seed {} top1 {:.4} tail {:.4}",
            r.arm,
            r.seed,
            r.metrics.top1,
            r.metrics.tail_mean.unwrap_or(0.0)
        );
    }
    for &arm in arms {
        let rows: Vec<&MetricsRecord> = results.iter().filter(|r| r.arm == arm).map(|r| &r.metrics).collect();
        let n = rows.len().max(1) as f64;
        let top1 = rows.iter().map(|m| m.top1).sum::<f64>() / n;
        let tail = rows.iter().filter_map(|m| m.tail_mean).sum::<f64>() / n;
        println!("{arm} mean top1 {top1:.4} tail {tail:.4}");
    }
    Ok(())
}

macro_rules! dispatch {
    ($precision:expr, $f:ident($($arg:expr),*)) => {
        match $precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn checkpoint_precision(path: &Path) -> Result<Precision> {
    Ok(Checkpoint::<f64>::load(path)?.config.precision)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { config: c, out, mode, seed, classes } => {
            let cfg = config(c.as_deref())?;
            gen_data(&cfg, &out, mode, seed.unwrap_or(cfg.seed), classes)
        }
        Command::Train { config: c, data, out, resume } => {
            let cfg = config(c.as_deref())?;
            dispatch!(cfg.precision, run_train(&cfg, &data, &out, resume.as_deref()))?;
            Ok(true)
        }
        Command::Eval { ckpt, manifest, split } => {
            dispatch!(checkpoint_precision(&ckpt)?, run_eval(&ckpt, &manifest, split.as_deref()))?;
            Ok(true)
        }
        Command::Fewshot { base_ckpt, k, data, config: c, out } => {
            let cfg = config(c.as_deref())?;
            let k: usize = k.parse()?;
            dispatch!(checkpoint_precision(&base_ckpt)?, run_fewshot(&cfg, &base_ckpt, k, &data, out.as_deref()))?;
            Ok(true)
        }
        Command::Gradcheck { config: c } => {
            let cfg = config(c.as_deref())?;
            let report = gradcheck(&cfg, None)?;
            for (module, err) in &report.modules {
                println!("{module:<12} {err:.3e}");
            }
            println!(
                "max relative error {:.3e} over {} paths in {:.1}s (tolerance {GRADCHECK_TOLERANCE:e})",
                report.max_rel_error,
                report.paths.len(),
                report.seconds
            );
            Ok(report.passed())
        }
        Command::Ablate { config: c, data, arms, seeds } => {
            let cfg = config(c.as_deref())?;
            dispatch!(cfg.precision, run_ablate(&cfg, &data, &arms, &seeds))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
