use std::fs;
use std::path::{Path, PathBuf};

use advmtl::data::{
    gen_adv_targets, read_targets, select_adv_target, write_targets, DataConfig, DatasetSplit, SpeechWorld,
};
use advmtl::experiments::{
    attack_rows, attack_split, report_config_hash, rows_from_csv, rows_to_csv, run_grid, trend_check, trend_report,
    write_report, AttackSettings, Cell, ExperimentConfig, InferenceMode, ReportRow,
};
use advmtl::losses::MtlWeights;
use advmtl::model::{ModelConfig, ModelParams};
use advmtl::training::{evaluate_benign, train_mtl_with, TrainConfig};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

const DATA_CONFIG: &str = "data_config.json";
const TARGETS: &str = "targets.txt";
const RUN_CONFIG: &str = "run_config.json";

#[derive(Parser)]
#[command(
    name = "advmtl",
    version,
    about = "Adversarial robustness of multi-task speech recognisers on a toy corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/valid/test splits and the adversarial target pool.
    GenData {
        /// Data config JSON (defaults if absent).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on a generated dataset.
    Train {
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Run config JSON with `model` and `train` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        lambda_a: Option<f64>,
        #[arg(long)]
        lambda_c: Option<f64>,
        /// Seeds both initialisation and shuffling.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Benign WER and accent accuracy of a checkpoint on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Match)]
        mode: Mode,
        /// Output JSON file (stdout if absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Targeted PGD against every test utterance; writes report rows.
    Attack {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Attack settings JSON (`epsilon`, `alpha`, `steps`, `report_at`).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum, default_value_t = Mode::Match)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and attack the full cross-product of training weights and seeds.
    Grid {
        /// Experiment config JSON (defaults if absent).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Reuse checkpoints and rows from a previous run in `--out`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate report CSVs into the table shapes and the step curves.
    Report {
        /// One or more report CSVs.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Attack steps for the ordering checks.
        #[arg(long, value_delimiter = ',', default_value = "100,200")]
        trend_steps: Vec<usize>,
    },
    /// Evaluate the robustness orderings on a report; exits 1 if any fails.
    Trend {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "100,200")]
        steps: Vec<usize>,
    },
    /// Print a default config JSON.
    Defaults {
        #[arg(value_enum)]
        kind: ConfigKind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Match,
    DropCtc,
}

impl From<Mode> for InferenceMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Match => InferenceMode::Match,
            Mode::DropCtc => InferenceMode::DropCtc,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfigKind {
    Data,
    Run,
    Attack,
    Experiment,
}

/// Config for `train`: model architecture and optimisation.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

struct LoadedData {
    cfg: DataConfig,
    world: SpeechWorld,
    split: DatasetSplit,
}

fn load_data(dir: &Path) -> Result<LoadedData> {
    let cfg: DataConfig = read_json(Some(&dir.join(DATA_CONFIG)))?;
    let world = SpeechWorld::from_config(&cfg)?;
    let split =
        DatasetSplit::load(dir, &world.vocab).with_context(|| format!("loading splits from {}", dir.display()))?;
    Ok(LoadedData { cfg, world, split })
}

/// Checkpoint plus the run config saved next to it by `train`.
fn load_model(checkpoint: &Path) -> Result<(ModelParams, TrainConfig)> {
    let params = ModelParams::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let sidecar = checkpoint.with_file_name(RUN_CONFIG);
    let run: RunConfig = read_json(Some(&sidecar))?;
    Ok((params, run.train))
}

fn inference_weights(train: &TrainConfig, mode: Mode) -> Result<MtlWeights> {
    let w = train.weights;
    let mode = InferenceMode::from(mode);
    Ok(MtlWeights::with_inference(
        w.lambda_t_a,
        w.lambda_t_c,
        mode.lambda_i_c(w.lambda_t_c),
    )?)
}

fn gen_data(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg: DataConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let world = SpeechWorld::from_config(&cfg)?;
    let split = world.gen_from_config(&cfg)?;
    let targets = gen_adv_targets(&world.vocab, cfg.seed, cfg.n_targets, cfg.target_len_range)?;
    ensure_dir(out)?;
    split.save(out, world.feat_dim(), &world.vocab)?;
    fs::write(out.join(TARGETS), write_targets(&targets, &world.vocab))?;
    write_json(&out.join(DATA_CONFIG), &cfg)?;
    println!(
        "wrote {} train, {} valid, {} test utterances and {} targets to {}",
        split.train.len(),
        split.valid.len(),
        split.test.len(),
        targets.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &Path,
    config: Option<&Path>,
    lambda_a: Option<f64>,
    lambda_c: Option<f64>,
    seed: Option<u64>,
    epochs: Option<usize>,
    out: &Path,
) -> Result<()> {
    let d = load_data(data)?;
    let mut run: RunConfig = read_json(config)?;
    run.model.vocab_size = d.world.vocab.n_words();
    run.model.feat_dim = d.world.feat_dim();
    let w = run.train.weights;
    run.train.weights = MtlWeights::new(lambda_a.unwrap_or(w.lambda_t_a), lambda_c.unwrap_or(w.lambda_t_c))?;
    if let Some(s) = seed {
        run.model.seed = s;
        run.train.seed = s;
    }
    if let Some(e) = epochs {
        run.train.epochs = e;
    }
    let (params, log) = train_mtl_with(&run.model, &run.train, &d.split.train, &d.split.valid, |e| {
        eprintln!(
            "epoch {:>3}  train l_mtl {:.5}  valid l_mtl {:.5}",
            e.epoch, e.train.l_mtl, e.valid.l_mtl
        );
    })?;
    ensure_dir(out)?;
    params.save(&out.join("model.ckpt"))?;
    fs::write(out.join("train_log.csv"), log.to_csv())?;
    write_json(&out.join(RUN_CONFIG), &run)?;
    println!(
        "selected epoch {} -> {}",
        log.selected_epoch,
        out.join("model.ckpt").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    lambda_t_a: f64,
    lambda_t_c: f64,
    lambda_i_c: f64,
    wer: f64,
    substitutions: usize,
    deletions: usize,
    insertions: usize,
    ref_words: usize,
    accent_acc: f64,
    n_utterances: usize,
}

fn eval(data: &Path, checkpoint: &Path, mode: Mode, out: Option<&Path>) -> Result<()> {
    let d = load_data(data)?;
    let (params, train) = load_model(checkpoint)?;
    let w = inference_weights(&train, mode)?;
    let b = evaluate_benign(&params, &d.split.test, &w)?;
    let report = EvalReport {
        lambda_t_a: w.lambda_t_a,
        lambda_t_c: w.lambda_t_c,
        lambda_i_c: w.lambda_i_c,
        wer: b.wer.wer,
        substitutions: b.wer.substitutions,
        deletions: b.wer.deletions,
        insertions: b.wer.insertions,
        ref_words: b.wer.ref_len,
        accent_acc: b.accent_acc,
        n_utterances: d.split.test.len(),
    };
    match out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn attack(
    data: &Path,
    checkpoint: &Path,
    config: Option<&Path>,
    steps: Option<usize>,
    mode: Mode,
    out: &Path,
) -> Result<()> {
    let d = load_data(data)?;
    let (params, train) = load_model(checkpoint)?;
    let mut settings: AttackSettings = read_json(config)?;
    if let Some(s) = steps {
        settings.steps = s;
    }
    let w = inference_weights(&train, mode)?;
    let test = &d.split.test;
    let pool = read_targets(&fs::read_to_string(data.join(TARGETS))?, &d.world.vocab)?;
    let targets = test
        .iter()
        .map(|u| select_adv_target(&u.transcript, &pool).cloned())
        .collect::<advmtl::Result<Vec<_>>>()?;
    let acfg = settings.resolve(test, w)?;
    let benign = evaluate_benign(&params, test, &w)?;
    let summary = attack_split(&params, test, &targets, &acfg)?;
    let cell = Cell {
        lambda_t_a: w.lambda_t_a,
        lambda_t_c: w.lambda_t_c,
        seed: params.config.seed,
    };
    let rows = attack_rows(&cell, mode.into(), &benign, &summary)?;
    let hash = attack_hash(&d.cfg, &params, &settings);
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    fs::write(out, rows_to_csv(&rows, &hash))?;
    eprintln!(
        "epsilon {:.6} alpha {:.6}: {} attacked, {} skipped, final loss <= initial on {}",
        acfg.epsilon, acfg.alpha, summary.n_samples, summary.n_skipped, summary.n_descended
    );
    print_rows(&rows);
    Ok(())
}

fn attack_hash(data: &DataConfig, params: &ModelParams, settings: &AttackSettings) -> String {
    let cfg = ExperimentConfig {
        data: data.clone(),
        model: params.config.clone(),
        attack: settings.clone(),
        ..Default::default()
    };
    cfg.hash()
}

fn print_rows(rows: &[ReportRow]) {
    for r in rows {
        println!(
            "λA={} λC={} λi={} seed={} steps={:>4}  benign WER {:.4}  accent {:.4}  AdvTWER {}",
            r.lambda_t_a,
            r.lambda_t_c,
            r.lambda_i_c,
            r.seed,
            r.attack_steps,
            r.benign_wer,
            r.accent_acc,
            r.adv_twer.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
}

fn grid(config: Option<&Path>, seed: Option<u64>, steps: Option<usize>, resume: bool, out: &Path) -> Result<()> {
    let mut cfg: ExperimentConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.grid.seeds = vec![s];
    }
    if let Some(s) = steps {
        cfg.attack.steps = s;
    }
    cfg.validate()?;
    ensure_dir(out)?;
    write_json(&out.join("experiment_config.json"), &cfg)?;
    let total = cfg.grid.cells().len();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let outcomes = run_grid(&cfg, Some(out), resume, |o| {
        let n = done.fetch_add(1, std::sync::atomic::Ordering::SeqCst) + 1;
        eprintln!("[{n}/{total}] {} selected epoch {}", o.cell.tag(), o.log.selected_epoch);
    })?;
    let rows: Vec<ReportRow> = outcomes.into_iter().flat_map(|o| o.rows).collect();
    let hash = cfg.hash();
    fs::write(out.join("report.csv"), rows_to_csv(&rows, &hash))?;
    let written = write_report(&rows, &hash, out)?;
    println!("wrote report.csv, {} to {}", written.join(", "), out.display());
    Ok(())
}

fn load_reports(inputs: &[PathBuf]) -> Result<(Vec<ReportRow>, String)> {
    let mut rows = Vec::new();
    let mut hashes = Vec::new();
    for p in inputs {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        rows.extend(rows_from_csv(&text).with_context(|| format!("parsing {}", p.display()))?);
        let h = report_config_hash(&text).unwrap_or("unknown").to_string();
        if !hashes.contains(&h) {
            hashes.push(h);
        }
    }
    Ok((rows, hashes.join("+")))
}

fn report(inputs: &[PathBuf], out: &Path, trend_steps: &[usize]) -> Result<()> {
    let (rows, hash) = load_reports(inputs)?;
    let written = write_report(&rows, &hash, out)?;
    println!("wrote {} to {}", written.join(", "), out.display());
    match trend_check(&rows, trend_steps) {
        Ok(outcomes) => {
            let text = trend_report(&outcomes);
            fs::write(out.join("trend.txt"), &text)?;
            print!("{text}");
        }
        Err(e) => eprintln!("trend check skipped: {e}"),
    }
    Ok(())
}

fn trend(inputs: &[PathBuf], steps: &[usize]) -> Result<bool> {
    let (rows, _) = load_reports(inputs)?;
    let outcomes = trend_check(&rows, steps)?;
    print!("{}", trend_report(&outcomes));
    Ok(outcomes.iter().all(|o| o.passed))
}

fn defaults(kind: ConfigKind) -> Result<()> {
    let text = match kind {
        ConfigKind::Data => serde_json::to_string_pretty(&DataConfig::default())?,
        ConfigKind::Run => serde_json::to_string_pretty(&RunConfig::default())?,
        ConfigKind::Attack => serde_json::to_string_pretty(&AttackSettings::default())?,
        ConfigKind::Experiment => serde_json::to_string_pretty(&ExperimentConfig::default())?,
    };
    println!("{text}");
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { config, seed, out } => gen_data(config.as_deref(), seed, &out),
        Command::Train {
            data,
            config,
            lambda_a,
            lambda_c,
            seed,
            epochs,
            out,
        } => train(&data, config.as_deref(), lambda_a, lambda_c, seed, epochs, &out),
        Command::Eval {
            data,
            checkpoint,
            mode,
            out,
        } => eval(&data, &checkpoint, mode, out.as_deref()),
        Command::Attack {
            data,
            checkpoint,
            config,
            steps,
            mode,
            out,
        } => attack(&data, &checkpoint, config.as_deref(), steps, mode, &out),
        Command::Grid {
            config,
            seed,
            steps,
            resume,
            out,
        } => grid(config.as_deref(), seed, steps, resume, &out),
        Command::Report {
            inputs,
            out,
            trend_steps,
        } => report(&inputs, &out, &trend_steps),
        Command::Trend { inputs, steps } => {
            if !trend(&inputs, &steps)? {
                std::process::exit(1);
            }
            Ok(())
        }
        Command::Defaults { kind } => defaults(kind),
    }
}
