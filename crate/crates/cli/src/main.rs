mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use pfad_core::checkpoint::Checkpoint;
use pfad_core::data::pnm::{read_pgm, write_pgm};
use pfad_core::data::synth::{generate, Pattern};
use pfad_core::data::{load_dataset, Split};
use pfad_core::frontend::Frontend;
use pfad_core::scoring::{score_map_to_gray, AnomalyScorer, EvalReport};
use pfad_core::train::{ablate, evaluate, fit, AblationOptions, Detector, FitOptions, TrainingSet};

use config::RunConfig;

const CHECKPOINT_FILE: &str = "checkpoint.pfck";
const TRAIN_LOG_FILE: &str = "train.log";
const LOSSES_FILE: &str = "epoch_losses.tsv";
const REPORT_FILE: &str = "eval_report.txt";
const TABLE_FILE: &str = "eval_table.txt";
const SCORES_FILE: &str = "scores.tsv";
const MAPS_DIR: &str = "maps";
const ABLATION_TSV: &str = "ablation.tsv";
const ABLATION_TABLE: &str = "ablation.txt";

/// Perturbation-pool feature reconstruction for anomaly detection.
#[derive(Parser)]
#[command(name = "pfad", version)]
struct Cli {
    /// Run configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset seed for gen-data, training seed for the other commands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic textured-surface dataset.
    GenData {
        /// Number of categories, taken in order from the built-in patterns.
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..=Pattern::ALL.len() as u64))]
        categories: Option<u64>,
    },
    /// Train a codec on the normal training images.
    Train {
        #[command(flatten)]
        data: DataArg,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Two epochs on eight samples.
        #[arg(long)]
        smoke: bool,
    },
    /// Score the test split and write AUROC reports.
    Eval {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Write per-image anomaly maps and image scores for the test split.
    Score {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Train and evaluate the pool × fusion grid and the per-kind rows.
    Ablate {
        #[command(flatten)]
        data: DataArg,
        /// Number of matched training seeds, starting at `--seed`.
        #[arg(long)]
        seeds: Option<usize>,
    },
}

#[derive(Args)]
struct DataArg {
    /// Dataset root holding manifest.tsv.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArg {
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for assignment in &cli.overrides {
        config.apply_override(assignment)?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    match &cli.command {
        Command::GenData { categories } => {
            if let Some(n) = categories {
                config.synth.categories = Pattern::ALL[..*n as usize].to_vec();
            }
        }
        Command::Train { data, smoke, .. } => {
            set_data(&mut config, data);
            config.train.smoke |= smoke;
        }
        Command::Eval { data, model } | Command::Score { data, model } => {
            set_data(&mut config, data);
            if let Some(c) = &model.checkpoint {
                config.checkpoint = Some(c.clone());
            }
        }
        Command::Ablate { data, seeds } => {
            set_data(&mut config, data);
            if let Some(n) = seeds {
                config.ablate_seeds = *n;
            }
        }
    }
    Ok(config)
}

fn set_data(config: &mut RunConfig, data: &DataArg) {
    if let Some(d) = &data.data {
        config.data = d.clone();
    }
}

fn prepare_out(config: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&config.out).with_context(|| format!("creating {}", config.out.display()))?;
    config.save(&config.out)?;
    Ok(config.out.clone())
}

fn checkpoint_path(config: &RunConfig) -> Result<&Path> {
    match &config.checkpoint {
        Some(p) => Ok(p),
        None => bail!("no checkpoint given; pass --checkpoint or set model.checkpoint"),
    }
}

fn cmd_gen_data(config: &RunConfig) -> Result<()> {
    let synth = config.synth_config();
    synth.validate()?;
    let out = prepare_out(config)?;
    let dataset = generate(&out, &synth)?;
    let reloaded = load_dataset(&out)?;
    ensure!(reloaded.records == dataset.records, "written manifest does not read back");
    println!("{} records in {}", dataset.records.len(), out.display());
    for category in dataset.categories() {
        let of = |split: Split, label: bool| {
            dataset
                .records
                .iter()
                .filter(|r| r.category == category && r.split == split && r.label == label)
                .count()
        };
        println!(
            "  {category}: train {} / test normal {} / test defective {}",
            of(Split::Train, false),
            of(Split::Test, false),
            of(Split::Test, true)
        );
    }
    Ok(())
}

fn cmd_train(config: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let train = config.train_config();
    train.validate()?;
    let frontend_kind = config.frontend_kind();
    let frontend = Frontend::new(frontend_kind.clone())?;
    ensure!(
        frontend.c_feat() == train.codec.c_in,
        "frontend yields {} channels but codec.c_in is {}",
        frontend.c_feat(),
        train.codec.c_in
    );
    let dataset = load_dataset(&config.data)?;
    let out = prepare_out(config)?;
    let set = TrainingSet::extract(&frontend, &dataset)?;
    let resume = resume
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    info!("training on {} samples from {}", set.len(), config.data.display());
    let outcome = fit(
        &set,
        &frontend_kind,
        &train,
        FitOptions {
            resume,
            log: Some(&mut log),
            ..FitOptions::default()
        },
    )?;
    log.flush()?;
    drop(log);
    let ck_path = out.join(CHECKPOINT_FILE);
    outcome.checkpoint.save(&ck_path)?;
    let losses: String = outcome.epoch_losses.iter().enumerate().map(|(i, l)| format!("{i}\t{l}\n")).collect();
    fs::write(out.join(LOSSES_FILE), losses)?;

    let back = Checkpoint::load(&ck_path)?;
    ensure!(back == outcome.checkpoint, "checkpoint does not read back");
    let lines = fs::read_to_string(&log_path)?.lines().count();
    ensure!(lines > 0 || outcome.epoch_losses.is_empty(), "training log is empty");
    println!(
        "trained {} epochs ({} steps), final loss {:.6}; checkpoint {}",
        back.epoch,
        back.step,
        back.running_loss,
        ck_path.display()
    );
    Ok(())
}

fn cmd_eval(config: &RunConfig) -> Result<()> {
    let ck_path = checkpoint_path(config)?;
    let ck = Checkpoint::load(ck_path).with_context(|| format!("loading {}", ck_path.display()))?;
    let dataset = load_dataset(&config.data)?;
    let out = prepare_out(config)?;
    let report = evaluate(&ck, &dataset)?;
    let record = out.join(REPORT_FILE);
    report.save(&record, &out.join(TABLE_FILE))?;
    EvalReport::parse_record(&fs::read_to_string(&record)?).context("report does not read back")?;
    print!("{report}");
    Ok(())
}

fn cmd_score(config: &RunConfig) -> Result<()> {
    let ck_path = checkpoint_path(config)?;
    let ck = Checkpoint::load(ck_path).with_context(|| format!("loading {}", ck_path.display()))?;
    let dataset = load_dataset(&config.data)?;
    let out = prepare_out(config)?;
    let maps_dir = out.join(MAPS_DIR);
    fs::create_dir_all(&maps_dir)?;
    let detector = Detector::from_checkpoint(&ck)?;
    let records = dataset.split(Split::Test);
    let mut scored = Vec::with_capacity(records.len());
    for record in &records {
        let s = detector.score(&dataset, record)?;
        let map = s.pixel_map.context("scorer produced no map")?;
        scored.push((*record, s.image_score, map));
    }
    // One shared scale so gray levels compare across images.
    let max = scored.iter().map(|(_, _, m)| m.max()).fold(0.0f32, f32::max);
    let mut table = String::from("id\tcategory\tlabel\timage_score\tmap\n");
    for (record, score, map) in &scored {
        let (h, w) = map.dims();
        let name = format!("{}.pgm", record.id);
        let path = maps_dir.join(&name);
        write_pgm(&path, w, h, &score_map_to_gray(map, max))?;
        ensure!(read_pgm(&path)?.0 == w, "{} does not read back", path.display());
        let label = if record.label { "defective" } else { "normal" };
        table.push_str(&format!("{}\t{}\t{label}\t{score}\t{MAPS_DIR}/{name}\n", record.id, record.category));
    }
    fs::write(out.join(SCORES_FILE), table)?;
    println!("scored {} images; maps in {}", scored.len(), maps_dir.display());
    Ok(())
}

fn cmd_ablate(config: &RunConfig) -> Result<()> {
    ensure!(config.ablate_seeds > 0, "ablate.seeds must be >= 1");
    let base = config.train_config();
    base.validate()?;
    let frontend_kind = config.frontend_kind();
    let frontend = Frontend::new(frontend_kind.clone())?;
    let dataset = load_dataset(&config.data)?;
    let out = prepare_out(config)?;
    let set = TrainingSet::extract(&frontend, &dataset)?;
    let seeds = (0..config.ablate_seeds as u64).map(|i| config.seed + i).collect();
    let report = ablate(&set, &dataset, &frontend_kind, &base, &AblationOptions { seeds })?;
    fs::write(out.join(ABLATION_TSV), report.to_tsv())?;
    fs::write(out.join(ABLATION_TABLE), report.to_string())?;
    print!("{report}");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PFAD_LOG", "info")).init();
    pfad_core::alloc::retain_freed_memory();
    let cli = Cli::parse();
    let config = resolve(&cli)?;
    match &cli.command {
        Command::GenData { .. } => cmd_gen_data(&config),
        Command::Train { resume, .. } => cmd_train(&config, resume.as_deref()),
        Command::Eval { .. } => cmd_eval(&config),
        Command::Score { .. } => cmd_score(&config),
        Command::Ablate { .. } => cmd_ablate(&config),
    }
}
