use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use disent_sod::checkpoint::load_model;
use disent_sod::config::{Stage, TrainConfig};
use disent_sod::datamodel::{
    encode_trimap, load_image, read_dataset, save_saliency, scene_seed, synthesize_dataset, write_dataset,
};
use disent_sod::hrrn::Hrrn;
use disent_sod::lrscn::Lrscn;
use disent_sod::metrics::evaluate_directory;
use disent_sod::tiling::run_pipeline;
use disent_sod::training::{ablate_noise, train_hrrn, train_lrscn, AblationConfig, StepLog};

/// Environment variable capping the number of worker threads.
const THREADS_ENV: &str = "DISENT_SOD_THREADS";
const MANIFEST: &str = "manifest.csv";

#[derive(Parser)]
#[command(name = "disent-sod", version, about = "Two-stage salient object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Lrscn,
    Hrrn,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Lrscn => Stage::Lrscn,
            StageArg::Hrrn => Stage::Hrrn,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (images/, masks/, manifest.csv).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one stage and write a checkpoint plus a JSONL step log.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// TOML config; the stage's desk preset fills missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `key=value` applied on top of the config (repeatable).
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Predict a saliency map for one image.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        lrscn: PathBuf,
        #[arg(long)]
        hrrn: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trimap_out: Option<PathBuf>,
        /// Side of the canonical square split into four tiles.
        #[arg(long, default_value_t = 256)]
        canonical_size: usize,
    },
    /// Score predicted maps against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pr_out: Option<PathBuf>,
        #[arg(long)]
        jsonl_out: Option<PathBuf>,
    },
    /// Label-noise ablation of the refinement loss.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Input problems the user can fix; reported with exit code 2.
#[derive(Debug)]
struct UserError(String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use disent_sod::Error as E;
    for cause in err.chain() {
        if cause.is::<UserError>() || cause.is::<clap::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::MissingFile(_)
                | E::UnsupportedFormat { .. }
                | E::ShapeMismatch(_)
                | E::InvalidParameter(_)
                | E::InvalidValue(_)
                | E::Checkpoint(_)
                | E::Config(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads().and_then(|_| run(cli.command)) {
        eprintln!("error: {e:#}");
        return ExitCode::from(exit_code(&e));
    }
    ExitCode::SUCCESS
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| user(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { out, count, size, seed } => synth(&out, count, size, seed),
        Command::Train {
            stage,
            config,
            data,
            out,
            overrides,
        } => train(stage.into(), config.as_deref(), &data, &out, &overrides),
        Command::Infer {
            image,
            lrscn,
            hrrn,
            out,
            trimap_out,
            canonical_size,
        } => infer(&image, &lrscn, &hrrn, &out, trimap_out.as_deref(), canonical_size),
        Command::Eval {
            pred,
            gt,
            out,
            pr_out,
            jsonl_out,
        } => eval(&pred, &gt, &out, pr_out.as_deref(), jsonl_out.as_deref()),
        Command::Ablate { config, out } => ablate(config.as_deref(), &out),
    }
}

fn synth(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    if count == 0 || size < 8 {
        return Err(user("--count must be >= 1 and --size >= 8"));
    }
    let records = synthesize_dataset(seed, count, size)?;
    write_dataset(out, &records).with_context(|| format!("writing dataset to {}", out.display()))?;
    let mut m = BufWriter::new(fs::File::create(out.join(MANIFEST))?);
    writeln!(m, "stem,seed")?;
    for (i, r) in records.iter().enumerate() {
        writeln!(m, "{},{}", r.identifier, scene_seed(seed, i))?;
    }
    m.flush()?;
    log::info!("wrote {count} scenes of {size}x{size} to {}", out.display());
    Ok(())
}

fn train_config(stage: Stage, path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| user(format!("cannot read config {}: {e}", p.display())))?;
            text.parse().map_err(|e| user(format!("{}: {e}", p.display())))?
        }
        None => Default::default(),
    };
    let name = match stage {
        Stage::Lrscn => "lrscn",
        Stage::Hrrn => "hrrn",
    };
    if let Some(s) = table.get("stage").and_then(|v| v.as_str()) {
        if s != name {
            return Err(user(format!("config is for stage `{s}` but --stage is `{name}`")));
        }
    }
    table.insert("stage".into(), name.into());
    Ok(TrainConfig::from_toml_str(&table.to_string(), overrides)?)
}

fn log_path(out: &Path) -> PathBuf {
    out.with_extension("log.jsonl")
}

fn train(stage: Stage, config: Option<&Path>, data: &Path, out: &Path, overrides: &[String]) -> Result<()> {
    let cfg = train_config(stage, config, overrides)?;
    if !data.is_dir() {
        return Err(user(format!("data directory {} does not exist", data.display())));
    }
    let records = read_dataset(data)?;
    if records.is_empty() {
        return Err(user(format!("no image/mask pairs in {}", data.display())));
    }
    log::info!("training {stage:?} on {} scenes for {} steps", records.len(), cfg.steps);
    let mut log = BufWriter::new(fs::File::create(log_path(out))?);
    let mut write_err = None;
    let mut observer = |s: &StepLog| {
        if write_err.is_none() {
            if let Err(e) = serde_json::to_writer(&mut log, s).map_err(anyhow::Error::from).and_then(|_| {
                log.write_all(b"\n")?;
                Ok(())
            }) {
                write_err = Some(e);
            }
        }
    };
    let ckpt = match stage {
        Stage::Lrscn => train_lrscn(&cfg, &records, &mut observer)?.checkpoint()?,
        Stage::Hrrn => train_hrrn(&cfg, &records, &mut observer)?.checkpoint()?,
    };
    if let Some(e) = write_err {
        return Err(e.context("writing the training log"));
    }
    log.flush()?;
    ckpt.save(out).with_context(|| format!("writing checkpoint {}", out.display()))?;
    log::info!("checkpoint written to {}", out.display());
    Ok(())
}

fn infer(image: &Path, lrscn: &Path, hrrn: &Path, out: &Path, trimap_out: Option<&Path>, canonical: usize) -> Result<()> {
    let img = load_image(image)?;
    let l: Lrscn = load_model(lrscn).with_context(|| format!("loading {}", lrscn.display()))?;
    let h: Hrrn = load_model(hrrn).with_context(|| format!("loading {}", hrrn.display()))?;
    let result = run_pipeline(&img, &l, &h, canonical)?;
    save_saliency(&result.saliency, out)?;
    if let Some(t) = trimap_out {
        encode_trimap(&result.trimap, t)?;
    }
    Ok(())
}

fn eval(pred: &Path, gt: &Path, out: &Path, pr_out: Option<&Path>, jsonl_out: Option<&Path>) -> Result<()> {
    let report = evaluate_directory(pred, gt)?;
    report.write_csv(out)?;
    if let Some(p) = pr_out {
        report.write_pr_csv(p)?;
    }
    if let Some(p) = jsonl_out {
        report.write_jsonl(p)?;
    }
    let m = &report.mean;
    log::info!(
        "{} images: mae {:.4} f_beta {:.4} f_beta_max {:.4} bde {} b_mu {:.4}",
        report.rows.len(),
        m.mae,
        m.f_beta,
        m.f_beta_max,
        m.bde.map_or("n/a".to_string(), |v| format!("{v:.3}")),
        m.b_mu
    );
    Ok(())
}

fn ablate(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => AblationConfig::load(p)?,
        None => AblationConfig::default(),
    };
    fs::create_dir_all(out)?;
    let report = ablate_noise(&cfg, &mut |line| log::info!("{line}"))?;
    report.write_long_csv(fs::File::create(out.join("ablation_long.csv"))?)?;
    report.write_median_csv(fs::File::create(out.join("ablation_median.csv"))?)?;
    report.write_per_seed_csv(fs::File::create(out.join("ablation_per_seed.csv"))?)?;
    Ok(())
}
