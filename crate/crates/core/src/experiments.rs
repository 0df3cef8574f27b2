//! Experiment grid: train one model per (λ(t)_A, λ(t)_C, seed), attack it
//! under each inference mode, and aggregate the report rows.
//!
//! Report CSV layout (version 1):
//!
//! ```text
//! # advmtl-report v1 config=<16 hex> wer=pooled
//! lambda_t_a,lambda_t_c,lambda_i_c,mode,seed,attack_steps,benign_wer,accent_acc,adv_twer,n_samples,n_skipped
//! ...
//! ```
//!
//! WER and AdvTWER are pooled over the test split (total edits over total
//! reference words).

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{pgd_attack, target_feasible, AttackConfig, DEFAULT_EPSILON, DEFAULT_REPORT_AT, DEFAULT_STEPS};
use crate::data::{gen_adv_targets, select_adv_target, DataConfig, DatasetSplit, SpeechWorld, Transcript, Utterance};
use crate::decode::{recognize, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::losses::MtlWeights;
use crate::metrics::{edit_counts, EditCounts};
use crate::model::{ModelConfig, ModelParams};
use crate::training::{evaluate_benign, train_mtl, BenignEval, TrainConfig, TrainLog};

pub const REPORT_VERSION: &str = "advmtl-report v1";

const REPORT_COLUMNS: &str = "lambda_t_a,lambda_t_c,lambda_i_c,mode,seed,attack_steps,\
benign_wer,accent_acc,adv_twer,n_samples,n_skipped";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// `λ(i)_C = λ(t)_C`.
    Match,
    /// `λ(i)_C = 0`: the CTC head is not used at inference.
    DropCtc,
}

impl InferenceMode {
    pub fn lambda_i_c(self, lambda_t_c: f64) -> f64 {
        match self {
            InferenceMode::Match => lambda_t_c,
            InferenceMode::DropCtc => 0.0,
        }
    }

    /// Dropping CTC from a model whose decoder was never trained is not a
    /// meaningful configuration.
    pub fn applies_to(self, lambda_t_c: f64) -> bool {
        !(self == InferenceMode::DropCtc && lambda_t_c >= 1.0)
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceMode::Match => "match",
            InferenceMode::DropCtc => "drop_ctc",
        })
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "match" => Ok(InferenceMode::Match),
            "drop_ctc" => Ok(InferenceMode::DropCtc),
            other => Err(Error::InvalidConfig(format!("unknown inference mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub lambda_t_a: Vec<f64>,
    pub lambda_t_c: Vec<f64>,
    pub modes: Vec<InferenceMode>,
    pub seeds: Vec<u64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lambda_t_a: vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5],
            lambda_t_c: vec![0.0, 0.3, 0.5, 0.7, 1.0],
            modes: vec![InferenceMode::Match, InferenceMode::DropCtc],
            seeds: vec![1, 2, 3],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_t_a.is_empty() || self.lambda_t_c.is_empty() {
            return Err(Error::InvalidConfig("lambda grids must be nonempty".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::InvalidConfig("mode set must be nonempty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list must be nonempty".into()));
        }
        for &a in &self.lambda_t_a {
            for &c in &self.lambda_t_c {
                MtlWeights::new(a, c)?;
            }
        }
        Ok(())
    }

    /// Every `(λ(t)_A, λ(t)_C, seed)` in row-major order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &lambda_t_a in &self.lambda_t_a {
            for &lambda_t_c in &self.lambda_t_c {
                for &seed in &self.seeds {
                    out.push(Cell {
                        lambda_t_a,
                        lambda_t_c,
                        seed,
                    });
                }
            }
        }
        out
    }
}

/// Attack schedule. `epsilon` defaults to [`DEFAULT_EPSILON`]; `null` selects
/// a tenth of the median test feature norm. `alpha` defaults to `epsilon / 40`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSettings {
    pub epsilon: Option<f64>,
    pub alpha: Option<f64>,
    pub steps: usize,
    pub report_at: Vec<usize>,
}

impl Default for AttackSettings {
    fn default() -> Self {
        AttackSettings {
            epsilon: Some(DEFAULT_EPSILON),
            alpha: None,
            steps: DEFAULT_STEPS,
            report_at: DEFAULT_REPORT_AT.to_vec(),
        }
    }
}

impl AttackSettings {
    /// Resolve against a test split for the given inference weights. Report
    /// steps beyond `steps` are dropped and `steps` itself is always reported.
    pub fn resolve(&self, test: &[Utterance], weights: MtlWeights) -> Result<AttackConfig> {
        let mut cfg = match self.epsilon {
            Some(e) => AttackConfig::with_radius(e, weights, self.steps)?,
            None => AttackConfig::calibrated(test, weights, self.steps)?,
        };
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        let mut at: Vec<usize> = self.report_at.iter().copied().filter(|&s| s <= self.steps).collect();
        at.push(self.steps);
        at.sort_unstable();
        at.dedup();
        cfg.report_at = at;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Template; weights and seed are set per cell.
    pub train: TrainConfig,
    pub attack: AttackSettings,
    pub grid: GridSpec,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.grid.validate()?;
        if self.model.vocab_size != self.data.vocab.n_words() {
            return Err(Error::InvalidConfig(format!(
                "model vocab_size {} but data has {} words",
                self.model.vocab_size,
                self.data.vocab.n_words()
            )));
        }
        if self.model.feat_dim != self.data.render.feat_dim {
            return Err(Error::InvalidConfig("model feat_dim differs from data feat_dim".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn cell_model(&self, cell: &Cell) -> ModelConfig {
        ModelConfig {
            seed: cell.seed,
            ..self.model.clone()
        }
    }

    pub fn cell_train(&self, cell: &Cell) -> Result<TrainConfig> {
        Ok(TrainConfig {
            weights: MtlWeights::new(cell.lambda_t_a, cell.lambda_t_c)?,
            seed: cell.seed,
            ..self.train.clone()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub lambda_t_a: f64,
    pub lambda_t_c: f64,
    pub seed: u64,
}

impl Cell {
    /// File-name stem, e.g. `a0.7_c0.5_s2`.
    pub fn tag(&self) -> String {
        format!("a{}_c{}_s{}", self.lambda_t_a, self.lambda_t_c, self.seed)
    }
}

/// Generated data shared by every cell.
pub struct Workbench {
    pub world: SpeechWorld,
    pub split: DatasetSplit,
    pub targets: Vec<Transcript>,
}

impl Workbench {
    pub fn new(cfg: &DataConfig) -> Result<Self> {
        let world = SpeechWorld::from_config(cfg)?;
        let split = world.gen_from_config(cfg)?;
        let targets = gen_adv_targets(&world.vocab, cfg.seed, cfg.n_targets, cfg.target_len_range)?;
        Ok(Workbench { world, split, targets })
    }

    /// Target transcription for each test utterance.
    pub fn test_targets(&self) -> Result<Vec<Transcript>> {
        self.split
            .test
            .iter()
            .map(|u| select_adv_target(&u.transcript, &self.targets).cloned())
            .collect()
    }
}

/// Attack outcome over one split.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSummary {
    /// Pooled edit counts of predictions against targets at each report step.
    pub per_step: BTreeMap<usize, EditCounts>,
    pub n_samples: usize,
    pub n_skipped: usize,
    /// Attacked samples whose final `L_ADV` is at most the initial one.
    pub n_descended: usize,
}

/// Per-step edit counts and whether the loss descended; `None` when skipped.
type SampleOutcome = Option<(Vec<(usize, EditCounts)>, bool)>;

/// Attack every utterance towards its target and decode each snapshot with
/// the same inference weights as the attack objective.
pub fn attack_split(
    params: &ModelParams,
    utts: &[Utterance],
    targets: &[Transcript],
    cfg: &AttackConfig,
) -> Result<AttackSummary> {
    if utts.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: utts.len(),
            right: targets.len(),
        });
    }
    cfg.validate()?;
    let outcomes: Vec<SampleOutcome> = utts
        .par_iter()
        .zip(targets)
        .map(|(u, target)| {
            if !target_feasible(target, u.frames(), &cfg.weights) {
                return Ok(None);
            }
            let r = pgd_attack(params, &u.features, target, cfg)?;
            let mut per = Vec::with_capacity(r.snapshots.len());
            for (&step, x) in &r.snapshots {
                let hyp = recognize(params, x, &cfg.weights, DEFAULT_MAX_LEN)?.hypothesis;
                per.push((step, edit_counts(&target.0[..], &hyp.0[..])));
            }
            let descended = r.loss_trace.last() <= r.loss_trace.first();
            Ok(Some((per, descended)))
        })
        .collect::<Result<_>>()?;
    let mut summary = AttackSummary {
        per_step: cfg.report_at.iter().map(|&s| (s, EditCounts::default())).collect(),
        n_samples: 0,
        n_skipped: 0,
        n_descended: 0,
    };
    for o in outcomes {
        match o {
            None => summary.n_skipped += 1,
            Some((per, descended)) => {
                summary.n_samples += 1;
                summary.n_descended += usize::from(descended);
                for (step, c) in per {
                    *summary.per_step.get_mut(&step).expect("snapshot at report step") += c;
                }
            }
        }
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub lambda_t_a: f64,
    pub lambda_t_c: f64,
    pub lambda_i_c: f64,
    pub mode: InferenceMode,
    pub seed: u64,
    pub attack_steps: usize,
    pub benign_wer: f64,
    pub accent_acc: f64,
    /// Pooled AdvTWER; absent on benign-only rows.
    pub adv_twer: Option<f64>,
    pub n_samples: usize,
    pub n_skipped: usize,
}

impl ReportRow {
    fn key(&self) -> ConfigKey {
        ConfigKey::new(self.lambda_t_a, self.lambda_t_c, self.mode)
    }
}

/// Rows for one model under one inference mode, one per report step.
pub fn attack_rows(
    cell: &Cell,
    mode: InferenceMode,
    benign: &BenignEval,
    summary: &AttackSummary,
) -> Result<Vec<ReportRow>> {
    summary
        .per_step
        .iter()
        .map(|(&step, counts)| {
            let adv = if summary.n_samples == 0 {
                None
            } else {
                Some(counts.wer()?)
            };
            Ok(ReportRow {
                lambda_t_a: cell.lambda_t_a,
                lambda_t_c: cell.lambda_t_c,
                lambda_i_c: mode.lambda_i_c(cell.lambda_t_c),
                mode,
                seed: cell.seed,
                attack_steps: step,
                benign_wer: benign.wer.wer,
                accent_acc: benign.accent_acc,
                adv_twer: adv,
                n_samples: summary.n_samples,
                n_skipped: summary.n_skipped,
            })
        })
        .collect()
}

/// Everything produced for one grid cell.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub cell: Cell,
    pub params: ModelParams,
    pub log: TrainLog,
    pub rows: Vec<ReportRow>,
    /// Empty when the rows were loaded from a previous run.
    pub summaries: BTreeMap<InferenceMode, AttackSummary>,
}

/// Attack `params` under each applicable mode. Modes that share an
/// inference weight share one attack run.
pub fn evaluate_cell(
    cfg: &ExperimentConfig,
    bench: &Workbench,
    targets: &[Transcript],
    cell: &Cell,
    params: &ModelParams,
) -> Result<(Vec<ReportRow>, BTreeMap<InferenceMode, AttackSummary>)> {
    let test = &bench.split.test;
    let mut rows = Vec::new();
    let mut summaries: BTreeMap<InferenceMode, AttackSummary> = BTreeMap::new();
    let mut done: Vec<(u64, BenignEval, AttackSummary)> = Vec::new();
    for &mode in &cfg.grid.modes {
        if !mode.applies_to(cell.lambda_t_c) {
            continue;
        }
        let lambda_i = mode.lambda_i_c(cell.lambda_t_c);
        let weights = MtlWeights::with_inference(cell.lambda_t_a, cell.lambda_t_c, lambda_i)?;
        let (benign, summary) = match done.iter().find(|(l, _, _)| *l == lambda_i.to_bits()) {
            Some((_, b, s)) => (b.clone(), s.clone()),
            None => {
                let benign = evaluate_benign(params, test, &weights)?;
                let acfg = cfg.attack.resolve(test, weights)?;
                let summary = attack_split(params, test, targets, &acfg)?;
                done.push((lambda_i.to_bits(), benign.clone(), summary.clone()));
                (benign, summary)
            }
        };
        rows.extend(attack_rows(cell, mode, &benign, &summary)?);
        summaries.insert(mode, summary);
    }
    Ok((rows, summaries))
}

#[derive(Serialize, Deserialize)]
struct CachedTraining {
    train: TrainConfig,
    log: TrainLog,
}

/// Train and attack one cell. With `artifacts`, the checkpoint, training log
/// and report rows are written to `artifacts/cells/<tag>.*`; with `resume`,
/// a matching checkpoint is reused instead of retraining and matching rows
/// instead of re-attacking.
pub fn run_cell(
    cfg: &ExperimentConfig,
    bench: &Workbench,
    targets: &[Transcript],
    cell: &Cell,
    artifacts: Option<&Path>,
    resume: bool,
) -> Result<CellOutcome> {
    let tag = cell.tag();
    let path = |ext: &str| artifacts.map(|d| d.join("cells").join(format!("{tag}.{ext}")));
    let (ckpt, train_json, rows_csv) = (path("ckpt"), path("train.json"), path("rows.csv"));
    let model_cfg = cfg.cell_model(cell);
    let train_cfg = cfg.cell_train(cell)?;
    let cached = match (&ckpt, &train_json) {
        (Some(c), Some(t)) if resume && c.exists() && t.exists() => {
            let params = ModelParams::load(c)?;
            let cached: CachedTraining = serde_json::from_str(&fs::read_to_string(t)?)?;
            (params.config == model_cfg && cached.train == train_cfg).then_some((params, cached.log))
        }
        _ => None,
    };
    let started = Instant::now();
    let (params, log) = match cached {
        Some(pl) => pl,
        None => {
            let (params, log) = train_mtl(&model_cfg, &train_cfg, &bench.split.train, &bench.split.valid)?;
            if let (Some(c), Some(t)) = (&ckpt, &train_json) {
                fs::create_dir_all(c.parent().expect("cells dir"))?;
                params.save(c)?;
                let record = CachedTraining {
                    train: train_cfg.clone(),
                    log: log.clone(),
                };
                fs::write(t, serde_json::to_string(&record)?)?;
                if let Some(p) = path("train.csv") {
                    fs::write(p, log.to_csv())?;
                }
            }
            (params, log)
        }
    };
    let hash = cfg.hash();
    if let Some(r) = rows_csv.as_ref().filter(|r| resume && r.exists()) {
        let text = fs::read_to_string(r)?;
        if report_config_hash(&text) == Some(hash.as_str()) {
            return Ok(CellOutcome {
                cell: *cell,
                params,
                log,
                rows: rows_from_csv(&text)?,
                summaries: BTreeMap::new(),
            });
        }
    }
    let (rows, summaries) = evaluate_cell(cfg, bench, targets, cell, &params)?;
    if let (Some(r), Some(t)) = (&rows_csv, path("secs")) {
        fs::create_dir_all(r.parent().expect("cells dir"))?;
        fs::write(r, rows_to_csv(&rows, &hash))?;
        fs::write(t, format!("{}\n", started.elapsed().as_secs_f64()))?;
    }
    Ok(CellOutcome {
        cell: *cell,
        params,
        log,
        rows,
        summaries,
    })
}

/// Wall-clock seconds recorded when the cell's rows were last computed
/// (training included unless the checkpoint was reused).
pub fn cell_seconds(artifacts: &Path, cell: &Cell) -> Option<f64> {
    let text = fs::read_to_string(artifacts.join("cells").join(format!("{}.secs", cell.tag()))).ok()?;
    text.trim().parse().ok()
}

/// Run every cell (in parallel) and return outcomes in grid order.
pub fn run_grid(
    cfg: &ExperimentConfig,
    artifacts: Option<&Path>,
    resume: bool,
    on_cell: impl Fn(&CellOutcome) + Sync,
) -> Result<Vec<CellOutcome>> {
    cfg.validate()?;
    let bench = Workbench::new(&cfg.data)?;
    let targets = bench.test_targets()?;
    cfg.grid
        .cells()
        .par_iter()
        .map(|cell| {
            let out = run_cell(cfg, &bench, &targets, cell, artifacts, resume)?;
            on_cell(&out);
            Ok(out)
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

pub fn rows_to_csv(rows: &[ReportRow], config_hash: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {REPORT_VERSION} config={config_hash} wer=pooled");
    let _ = writeln!(out, "{REPORT_COLUMNS}");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.lambda_t_a,
            r.lambda_t_c,
            r.lambda_i_c,
            r.mode,
            r.seed,
            r.attack_steps,
            r.benign_wer,
            r.accent_acc,
            fmt_opt(r.adv_twer),
            r.n_samples,
            r.n_skipped
        );
    }
    out
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            if line != REPORT_COLUMNS {
                return Err(Error::parse(ln, "unexpected column header"));
            }
            saw_header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(Error::parse(ln, format!("expected 11 fields, got {}", f.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::parse(ln, format!("bad number {s:?}")))
        };
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(ln, format!("bad count {s:?}")))
        };
        rows.push(ReportRow {
            lambda_t_a: num(f[0])?,
            lambda_t_c: num(f[1])?,
            lambda_i_c: num(f[2])?,
            mode: f[3].parse().map_err(|e: Error| Error::parse(ln, e.to_string()))?,
            seed: f[4].parse().map_err(|_| Error::parse(ln, "bad seed"))?,
            attack_steps: int(f[5])?,
            benign_wer: num(f[6])?,
            accent_acc: num(f[7])?,
            adv_twer: if f[8].is_empty() { None } else { Some(num(f[8])?) },
            n_samples: int(f[9])?,
            n_skipped: int(f[10])?,
        });
    }
    if !saw_header {
        return Err(Error::parse(0, "missing column header"));
    }
    Ok(rows)
}

/// Identity of a configuration across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConfigKey {
    a_bits: u64,
    c_bits: u64,
    pub mode: InferenceMode,
}

impl ConfigKey {
    pub fn new(lambda_t_a: f64, lambda_t_c: f64, mode: InferenceMode) -> Self {
        ConfigKey {
            a_bits: lambda_t_a.to_bits(),
            c_bits: lambda_t_c.to_bits(),
            mode,
        }
    }

    pub fn lambda_t_a(&self) -> f64 {
        f64::from_bits(self.a_bits)
    }

    pub fn lambda_t_c(&self) -> f64 {
        f64::from_bits(self.c_bits)
    }

    pub fn lambda_i_c(&self) -> f64 {
        self.mode.lambda_i_c(self.lambda_t_c())
    }
}

impl fmt::Display for ConfigKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "λA={} λC={} λi={} ({})",
            self.lambda_t_a(),
            self.lambda_t_c(),
            self.lambda_i_c(),
            self.mode
        )
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Seed-median summaries per configuration.
#[derive(Clone, Debug, Default)]
pub struct Aggregate {
    /// `(config, step) -> AdvTWER per seed`.
    adv: BTreeMap<(ConfigKey, usize), Vec<f64>>,
    benign: BTreeMap<ConfigKey, Vec<(u64, f64, f64)>>,
    pub steps: Vec<usize>,
}

impl Aggregate {
    pub fn from_rows(rows: &[ReportRow]) -> Self {
        let mut agg = Aggregate::default();
        for r in rows {
            let key = r.key();
            if let Some(a) = r.adv_twer {
                agg.adv.entry((key, r.attack_steps)).or_default().push(a);
                agg.steps.push(r.attack_steps);
            }
            let b = agg.benign.entry(key).or_default();
            if !b.iter().any(|(s, _, _)| *s == r.seed) {
                b.push((r.seed, r.benign_wer, r.accent_acc));
            }
        }
        agg.steps.sort_unstable();
        agg.steps.dedup();
        agg
    }

    pub fn configs(&self) -> Vec<ConfigKey> {
        self.benign.keys().copied().collect()
    }

    pub fn adv_median(&self, key: ConfigKey, step: usize) -> Option<f64> {
        self.adv.get(&(key, step)).and_then(|v| median(v))
    }

    pub fn adv_range(&self, key: ConfigKey, step: usize) -> Option<(f64, f64, usize)> {
        let v = self.adv.get(&(key, step))?;
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some((lo, hi, v.len()))
    }

    pub fn benign_median(&self, key: ConfigKey) -> Option<(f64, f64)> {
        let b = self.benign.get(&key)?;
        let w: Vec<f64> = b.iter().map(|x| x.1).collect();
        let a: Vec<f64> = b.iter().map(|x| x.2).collect();
        Some((median(&w)?, median(&a)?))
    }

    fn require(&self, key: ConfigKey, step: usize) -> Result<f64> {
        self.adv_median(key, step)
            .ok_or_else(|| Error::MissingCell(format!("{key} at {step} steps")))
    }
}

/// Which configurations belong in each table shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableShape {
    /// `λ(t)_A = 1`: CTC + decoder.
    CtcDecoder,
    /// `λ(t)_C = 0`: decoder + discriminator.
    DecoderDiscriminator,
    /// `λ(t)_A < 1`, `λ(t)_C > 0`: all three heads.
    AllHeads,
}

impl TableShape {
    pub const ALL: [TableShape; 3] = [
        TableShape::CtcDecoder,
        TableShape::DecoderDiscriminator,
        TableShape::AllHeads,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            TableShape::CtcDecoder => "table_ctc_decoder",
            TableShape::DecoderDiscriminator => "table_decoder_discriminator",
            TableShape::AllHeads => "table_all_heads",
        }
    }

    pub fn contains(self, key: &ConfigKey) -> bool {
        let (a, c) = (key.lambda_t_a(), key.lambda_t_c());
        match self {
            TableShape::CtcDecoder => a == 1.0,
            TableShape::DecoderDiscriminator => c == 0.0,
            TableShape::AllHeads => a < 1.0 && c > 0.0,
        }
    }
}

/// One row per configuration: seed-median benign metrics and AdvTWER at
/// every report step.
pub fn table_csv(agg: &Aggregate, shape: TableShape, config_hash: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# {REPORT_VERSION} config={config_hash} wer=pooled stat=seed_median"
    );
    let mut header = "lambda_t_a,lambda_t_c,lambda_i_c,mode,n_seeds,benign_wer,accent_acc".to_string();
    for s in &agg.steps {
        let _ = write!(header, ",adv_twer_{s}");
    }
    let _ = writeln!(out, "{header}");
    for key in agg.configs().into_iter().filter(|k| shape.contains(k)) {
        let (wer, acc) = agg.benign_median(key).expect("benign entry per config");
        let n = agg.benign[&key].len();
        let _ = write!(
            out,
            "{},{},{},{},{n},{wer},{acc}",
            key.lambda_t_a(),
            key.lambda_t_c(),
            key.lambda_i_c(),
            key.mode
        );
        for &s in &agg.steps {
            let _ = write!(out, ",{}", fmt_opt(agg.adv_median(key, s)));
        }
        let _ = writeln!(out);
    }
    out
}

/// Long format for plotting AdvTWER against attack steps.
pub fn curve_csv(agg: &Aggregate, config_hash: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {REPORT_VERSION} config={config_hash} wer=pooled");
    let _ = writeln!(
        out,
        "lambda_t_a,lambda_t_c,lambda_i_c,mode,attack_steps,adv_twer_median,adv_twer_min,adv_twer_max,n_seeds"
    );
    for key in agg.configs() {
        for &s in &agg.steps {
            if let (Some(m), Some((lo, hi, n))) = (agg.adv_median(key, s), agg.adv_range(key, s)) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{s},{m},{lo},{hi},{n}",
                    key.lambda_t_a(),
                    key.lambda_t_c(),
                    key.lambda_i_c(),
                    key.mode
                );
            }
        }
    }
    out
}

/// Outcome of one ordering assertion at one attack step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendOutcome {
    pub id: String,
    pub step: usize,
    pub passed: bool,
    pub detail: String,
}

/// Tolerance for the "not higher than" and "at least" comparisons.
pub const TREND_TOLERANCE: f64 = 0.02;

/// Seed-median ordering checks at each of `steps`:
///
/// - a: CTC-only model is more vulnerable than the decoder-only model;
/// - b: CTC+decoder at λ(t)_C = 0.5, decoded jointly, is no more robust
///   than the decoder-only model (within tolerance);
/// - c: the same model with CTC dropped at inference beats both
///   single-task models;
/// - d: three heads (λ(t)_A = 0.7, λ(t)_C = 0.5, CTC dropped) is within
///   tolerance of the best configuration tested.
pub fn trend_check(rows: &[ReportRow], steps: &[usize]) -> Result<Vec<TrendOutcome>> {
    use InferenceMode::{DropCtc, Match};
    let agg = Aggregate::from_rows(rows);
    let stl_ctc = ConfigKey::new(1.0, 1.0, Match);
    let stl_dec = ConfigKey::new(1.0, 0.0, Match);
    let mtl_match = ConfigKey::new(1.0, 0.5, Match);
    let mtl_drop = ConfigKey::new(1.0, 0.5, DropCtc);
    let three = ConfigKey::new(0.7, 0.5, DropCtc);
    let mut out = Vec::new();
    for &step in steps {
        let ctc = agg.require(stl_ctc, step)?;
        let dec = agg.require(stl_dec, step)?;
        let m_match = agg.require(mtl_match, step)?;
        let m_drop = agg.require(mtl_drop, step)?;
        let all3 = agg.require(three, step)?;
        out.push(TrendOutcome {
            id: "a".into(),
            step,
            passed: ctc < dec,
            detail: format!("STL-CTC {ctc:.4} < STL-DEC {dec:.4}"),
        });
        out.push(TrendOutcome {
            id: "b".into(),
            step,
            passed: m_match <= dec + TREND_TOLERANCE,
            detail: format!("MTL λC=0.5 joint {m_match:.4} <= STL-DEC {dec:.4} + {TREND_TOLERANCE}"),
        });
        out.push(TrendOutcome {
            id: "c".into(),
            step,
            passed: m_drop > ctc && m_drop > dec,
            detail: format!("MTL λC=0.5 CTC dropped {m_drop:.4} > STL-CTC {ctc:.4} and STL-DEC {dec:.4}"),
        });
        let mut best: Option<(ConfigKey, f64)> = None;
        for key in agg.configs() {
            if key == three {
                continue;
            }
            if let Some(v) = agg.adv_median(key, step) {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((key, v));
                }
            }
        }
        let (best_key, best_v) = best.ok_or_else(|| Error::MissingCell("no other configurations".into()))?;
        out.push(TrendOutcome {
            id: "d".into(),
            step,
            passed: all3 >= best_v - TREND_TOLERANCE,
            detail: format!("three heads {all3:.4} >= best other {best_v:.4} [{best_key}] - {TREND_TOLERANCE}"),
        });
    }
    Ok(out)
}

pub fn trend_report(outcomes: &[TrendOutcome]) -> String {
    let mut out = String::new();
    for o in outcomes {
        let _ = writeln!(
            out,
            "{} {}@{}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.id,
            o.step,
            o.detail
        );
    }
    out
}

/// Write the table shapes and the curve file for `rows` into `dir`.
pub fn write_report(rows: &[ReportRow], config_hash: &str, dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let agg = Aggregate::from_rows(rows);
    let mut written = Vec::new();
    for shape in TableShape::ALL {
        let name = format!("{}.csv", shape.file_stem());
        fs::write(dir.join(&name), table_csv(&agg, shape, config_hash))?;
        written.push(name);
    }
    fs::write(dir.join("adv_twer_curves.csv"), curve_csv(&agg, config_hash))?;
    written.push("adv_twer_curves.csv".into());
    Ok(written)
}

/// Config hash recorded in a report's header comment.
pub fn report_config_hash(text: &str) -> Option<&str> {
    text.lines()
        .next()?
        .strip_prefix(&format!("# {REPORT_VERSION} config="))?
        .split_whitespace()
        .next()
}

#[cfg(test)]
mod tests {
    use super::*;
    use InferenceMode::{DropCtc, Match};

    fn row(a: f64, c: f64, mode: InferenceMode, seed: u64, step: usize, adv: f64) -> ReportRow {
        ReportRow {
            lambda_t_a: a,
            lambda_t_c: c,
            lambda_i_c: mode.lambda_i_c(c),
            mode,
            seed,
            attack_steps: step,
            benign_wer: 0.05,
            accent_acc: 0.9,
            adv_twer: Some(adv),
            n_samples: 10,
            n_skipped: 0,
        }
    }

    /// Seeds 1..=3 with AdvTWER `v - 0.01`, `v`, `v + 0.05`: median `v`.
    fn config_rows(a: f64, c: f64, mode: InferenceMode, v: f64) -> Vec<ReportRow> {
        let mut out = Vec::new();
        for step in [100, 200] {
            for (seed, d) in [(1, -0.01), (2, 0.0), (3, 0.05)] {
                out.push(row(a, c, mode, seed, step, v + d));
            }
        }
        out
    }

    fn satisfying() -> Vec<ReportRow> {
        [
            config_rows(1.0, 1.0, Match, 0.2),
            config_rows(1.0, 0.0, Match, 0.5),
            config_rows(1.0, 0.0, DropCtc, 0.5),
            config_rows(1.0, 0.5, Match, 0.45),
            config_rows(1.0, 0.5, DropCtc, 0.6),
            config_rows(0.7, 0.5, DropCtc, 0.7),
            config_rows(0.7, 0.5, Match, 0.69),
        ]
        .concat()
    }

    #[test]
    fn satisfying_report_passes_every_check() {
        let out = trend_check(&satisfying(), &[100, 200]).unwrap();
        assert_eq!(out.len(), 8);
        assert!(out.iter().all(|o| o.passed), "{}", trend_report(&out));
    }

    #[test]
    fn vulnerable_decoder_fails_first_check_only_there() {
        let mut rows = satisfying();
        for r in rows.iter_mut().filter(|r| r.lambda_t_c == 1.0) {
            r.adv_twer = Some(0.55);
        }
        let out = trend_check(&rows, &[100]).unwrap();
        let a = out.iter().find(|o| o.id == "a").unwrap();
        assert!(!a.passed);
        assert!(out.iter().find(|o| o.id == "b").unwrap().passed);
    }

    #[test]
    fn missing_cell_is_an_error() {
        let rows: Vec<ReportRow> = satisfying().into_iter().filter(|r| r.lambda_t_a != 0.7).collect();
        assert!(matches!(trend_check(&rows, &[100]), Err(Error::MissingCell(_))));
        assert!(trend_check(&satisfying(), &[50]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut rows = satisfying();
        rows[0].adv_twer = None;
        let text = rows_to_csv(&rows, "0123456789abcdef");
        assert_eq!(report_config_hash(&text), Some("0123456789abcdef"));
        let back = rows_from_csv(&text).unwrap();
        assert_eq!(back, rows);
        assert!(rows_from_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn seed_median_and_tables() {
        let agg = Aggregate::from_rows(&satisfying());
        let key = ConfigKey::new(1.0, 0.5, DropCtc);
        assert_eq!(agg.adv_median(key, 100), Some(0.6));
        assert_eq!(agg.adv_range(key, 200).unwrap().2, 3);
        assert_eq!(agg.steps, vec![100, 200]);
        let t = table_csv(&agg, TableShape::CtcDecoder, "h");
        // Header comment, column header, and five λA = 1 configurations.
        assert_eq!(t.lines().count(), 7);
        let t = table_csv(&agg, TableShape::AllHeads, "h");
        assert_eq!(t.lines().count(), 4);
        let t = table_csv(&agg, TableShape::DecoderDiscriminator, "h");
        assert_eq!(t.lines().count(), 4);
        let c = curve_csv(&agg, "h");
        assert_eq!(c.lines().count(), 2 + 7 * 2);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), Some(2.5));
    }

    #[test]
    fn default_grid_shape() {
        let g = GridSpec::default();
        assert_eq!(g.cells().len(), 6 * 5 * 3);
        assert!(!DropCtc.applies_to(1.0));
        assert!(DropCtc.applies_to(0.7));
        assert_eq!(DropCtc.lambda_i_c(0.7), 0.0);
        assert_eq!(Match.lambda_i_c(0.7), 0.7);
        assert!(GridSpec {
            modes: vec![],
            ..g.clone()
        }
        .validate()
        .is_err());
        assert!(GridSpec {
            lambda_t_a: vec![1.5],
            ..g
        }
        .validate()
        .is_err());
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.attack.steps = 7;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        a.validate().unwrap();
    }
}
