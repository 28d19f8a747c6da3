//! `moe-forge` command line: `train`, `eval` and `ablate`.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
//! configuration error (including an unsupported checkpoint version).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::{
    base_accuracy, base_reliability, best_experts, gate_assignments, gate_disagreement, specialization_table, top1_accuracy,
    DEFAULT_RELIABILITY_BINS,
};
use crate::anytime::{convex_envelope, ilp_exit_assignment, select_threshold, sweep_thresholds, train_exit_gate, Policy, TradeoffCurve};
use crate::config::{hex, RunConfig};
use crate::data::{load_csv, LabeledDataset};
use crate::error::{Error, Result};
use crate::json::fmt_f64;
use crate::matrix::argmax;
use crate::moe::MoEModel;
use crate::rng::sub_seed;
use crate::training::{run_algorithm1_with, run_em_with, NoStore, StageStore, TrainOutcome, TrainPlan};

#[derive(Debug, Parser)]
#[command(name = "moe-forge", version, about = "Train and evaluate single-gate mixtures of experts with anytime inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the full training pipeline described by a config file.
    Train { config: PathBuf },
    /// Evaluate a saved model on a CSV dataset.
    Eval(EvalArgs),
    /// Retrain once per value of one hyperparameter.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, clap::Args)]
pub struct EvalArgs {
    pub model: PathBuf,
    pub data: PathBuf,
    /// Comma-separated thresholds for a trade-off sweep.
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long, default_value = "alpha_threshold")]
    pub policy: String,
    /// Write specialization, reliability and disagreement tables.
    #[arg(long)]
    pub analyze: bool,
    /// Output directory; defaults to `eval/` next to the model.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Axis {
    /// Values are tap indices (the last shared base layer).
    SharedPrefix,
    Gamma,
    NumExperts,
    /// Values are E-step counts `N_E` within the fixed expert budget.
    #[value(name = "n_e_schedule")]
    NESchedule,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::SharedPrefix => "shared_prefix",
            Axis::Gamma => "gamma",
            Axis::NumExperts => "num_experts",
            Axis::NESchedule => "n_e_schedule",
        }
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct AblateArgs {
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated axis values.
    #[arg(long)]
    pub values: String,
    /// Training seeds per value.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
}

/// Runs the command line and maps errors to exit codes.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::VersionMismatch { .. } => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Train { config } => {
            let report = cmd_train(&config)?;
            writeln!(out, "run {} ({})", report.output_dir.display(), report.tag)?;
            for (k, v) in &report.metrics {
                writeln!(out, "{k}: {}", fmt_metric(*v))?;
            }
        }
        Command::Eval(args) => {
            let report = cmd_eval(&args)?;
            for (k, v) in &report.metrics {
                writeln!(out, "{k}: {}", fmt_metric(*v))?;
            }
            for f in &report.files {
                writeln!(out, "wrote {}", f.display())?;
            }
        }
        Command::Ablate(args) => {
            let report = cmd_ablate(&args)?;
            for r in &report.rows {
                let label = r.label.map(|l| format!(" [{l}]")).unwrap_or_default();
                writeln!(
                    out,
                    "{}={} seed={} accuracy={} mean_macs={}{label}",
                    args.axis.name(),
                    r.value,
                    r.seed,
                    fmt_metric(r.accuracy),
                    fmt_metric(r.mean_macs)
                )?;
            }
            writeln!(out, "wrote {}", report.csv.display())?;
        }
    }
    Ok(())
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

/// Stage checkpoints as JSON files, with completion times.
struct FileStore {
    dir: PathBuf,
    start: Instant,
    log: Mutex<Vec<StageRecord>>,
}

#[derive(Debug, Clone, Serialize)]
struct StageRecord {
    stage: String,
    cached: bool,
    completed_after_seconds: f64,
}

const STAGE_HASH_FILE: &str = "config.sha256";

impl FileStore {
    /// Opens `dir`, discarding checkpoints written under another config.
    fn open(dir: PathBuf, config_hash: &str) -> Result<Self> {
        let marker = dir.join(STAGE_HASH_FILE);
        let current = fs::read_to_string(&marker).ok();
        if current.as_deref() != Some(config_hash) && dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        fs::write(&marker, config_hash)?;
        Ok(FileStore {
            dir,
            start: Instant::now(),
            log: Mutex::new(Vec::new()),
        })
    }

    fn record(&self, stage: &str, cached: bool) {
        let rec = StageRecord {
            stage: stage.to_string(),
            cached,
            completed_after_seconds: self.start.elapsed().as_secs_f64(),
        };
        self.log.lock().expect("stage log").push(rec);
    }

    fn records(&self) -> Vec<StageRecord> {
        let mut v = self.log.lock().expect("stage log").clone();
        v.sort_by(|a, b| a.completed_after_seconds.total_cmp(&b.completed_after_seconds));
        v
    }
}

impl StageStore for FileStore {
    fn load<T: DeserializeOwned>(&self, name: &str) -> Result<Option<T>> {
        let path = self.dir.join(format!("{name}.json"));
        if !path.is_file() {
            return Ok(None);
        }
        let value = serde_json::from_str(&fs::read_to_string(&path)?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        self.record(name, true);
        Ok(Some(value))
    }

    fn save<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        // write then rename so an interrupted run never leaves a partial file
        let path = self.dir.join(format!("{name}.json"));
        let tmp = self.dir.join(format!("{name}.json.tmp"));
        fs::write(&tmp, serde_json::to_string(value)?)?;
        fs::rename(&tmp, &path)?;
        self.record(name, false);
        Ok(())
    }
}

fn train_with<S: StageStore>(train: &LabeledDataset, plan: &TrainPlan, store: &S) -> Result<TrainOutcome> {
    if plan.em_steps == 0 {
        run_algorithm1_with(train, plan, store)
    } else {
        run_em_with(train, plan, store)
    }
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn write_curves(dir: &Path, policy: Policy, curve: &TradeoffCurve) -> Result<Vec<PathBuf>> {
    let tradeoff = dir.join(format!("tradeoff_{policy}.csv"));
    write_file(&tradeoff, |w| curve.write_csv(w))?;
    let envelope = dir.join("envelope.csv");
    write_file(&envelope, |w| convex_envelope(std::slice::from_ref(curve))?.write_csv(w))?;
    Ok(vec![tradeoff, envelope])
}

fn mean_top1_macs(m: &MoEModel, ds: &LabeledDataset) -> Result<f64> {
    let mut total = 0u128;
    for i in 0..ds.len() {
        total += u128::from(m.top1_macs(argmax(&m.gate_distribution(ds.x(i))?)));
    }
    Ok(total as f64 / ds.len() as f64)
}

pub const BASELINE_TAG: &str = "ensembling-baseline";

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub output_dir: PathBuf,
    pub tag: &'static str,
    pub metrics: BTreeMap<&'static str, f64>,
}

/// Runs the pipeline for one config and writes every artifact into its
/// output directory.
pub fn cmd_train(config_path: &Path) -> Result<TrainReport> {
    let cfg = RunConfig::load(config_path)?;
    let workers = cfg.workers()?;
    let hash = cfg.hash()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let store = FileStore::open(dir.join("stages"), &hash)?;

    let (train, test) = cfg.datasets()?;
    let mut artifacts = vec![dir.join("train.csv"), dir.join("test.csv")];
    train.save_csv(&artifacts[0])?;
    test.save_csv(&artifacts[1])?;

    let plan = cfg.plan(workers);
    let outcome = train_with(&train, &plan, &store)?;
    let mut model = outcome.model;
    if cfg.anytime.policy == Policy::LearnedGate {
        let labels = ilp_exit_assignment(&model, &train, cfg.anytime.exit_budget)?;
        let sgd = cfg.anytime.exit_gate_sgd.with_seed(sub_seed(cfg.seed, "exit_gate"));
        let exit = train_exit_gate(&model, &train, &labels, &sgd)?;
        model = model.with_exit(exit)?;
        store.record("exit_gate", false);
    }
    let model_path = dir.join("model.json");
    model.save_json(&model_path)?;
    artifacts.push(model_path);

    let expert_csv = dir.join("expert_diagnostics.csv");
    write_file(&expert_csv, |w| outcome.diagnostics.write_expert_csv(w))?;
    artifacts.push(expert_csv);
    let disagreement = gate_disagreement(
        &outcome.g0.assignments(),
        &gate_assignments(&model, &train)?,
        train.labels(),
        model.num_experts(),
    )?;
    let dis_csv = dir.join("gate_disagreement.csv");
    write_file(&dis_csv, |w| disagreement.write_csv(w))?;
    artifacts.push(dis_csv);

    let policy = cfg.anytime.policy;
    let curve = sweep_thresholds(&model, &test, &cfg.anytime.taus, policy)?;
    artifacts.extend(write_curves(&dir, policy, &curve)?);
    let tau = select_threshold(&model, &train, &cfg.anytime.taus, cfg.anytime.max_acc_drop, policy)?;
    let at_tau = sweep_thresholds(&model, &test, &[tau], policy)?.points[0];

    let mut metrics = BTreeMap::new();
    metrics.insert("base_accuracy", base_accuracy(&model, &test)?);
    metrics.insert("top1_accuracy", top1_accuracy(&model, &test)?);
    metrics.insert("top1_mean_macs", mean_top1_macs(&model, &test)?);
    metrics.insert("gate_disagreement", disagreement.fraction);
    metrics.insert("selected_tau", tau);
    metrics.insert("selected_tau_accuracy", at_tau.accuracy);
    metrics.insert("selected_tau_mean_macs", at_tau.mean_macs);
    let summary = dir.join("summary.csv");
    write_file(&summary, |w| {
        writeln!(w, "metric,value")?;
        for (k, v) in &metrics {
            writeln!(w, "{k},{}", fmt_f64(*v))?;
        }
        Ok(())
    })?;
    artifacts.push(summary);

    let tag = if cfg.model.num_experts == 1 { BASELINE_TAG } else { "mixture" };
    let mut hashes = BTreeMap::new();
    for a in &artifacts {
        let name = a.file_name().expect("artifact file").to_string_lossy().into_owned();
        hashes.insert(name, hex(&Sha256::digest(fs::read(a)?)));
    }
    let manifest = serde_json::json!({
        "format_version": 1,
        "tag": tag,
        "seed": cfg.seed,
        "config_hash": hash,
        "config": serde_json::from_str::<serde_json::Value>(&cfg.normalized_json()?)?,
        "workers": workers,
        "em_segments": outcome.diagnostics.segments,
        "em_zero_mass_rows": outcome.diagnostics.zero_mass_rows,
        "stages": store.records(),
        "artifacts": hashes,
    });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(TrainReport {
        output_dir: dir,
        tag,
        metrics,
    })
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metrics: BTreeMap<&'static str, f64>,
    pub files: Vec<PathBuf>,
}

pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    let items: Vec<&str> = text.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(Error::Config(format!("{what}: empty list")));
    }
    items
        .iter()
        .map(|s| s.parse().map_err(|_| Error::Config(format!("{what}: cannot parse {s:?}"))))
        .collect()
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let policy: Policy = args.policy.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    let taus = args.sweep.as_deref().map(|s| parse_list::<f64>(s, "--sweep")).transpose()?;
    let model = MoEModel::load_json(&args.model)?;
    let ds = load_csv(&args.data, Some(model.num_classes()))?;
    if ds.dim() != model.input_dim() {
        return Err(Error::Shape {
            context: "data dimension vs model input",
            expected: model.input_dim(),
            got: ds.dim(),
        });
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("accuracy", top1_accuracy(&model, &ds)?);
    metrics.insert("mean_macs", mean_top1_macs(&model, &ds)?);
    metrics.insert("base_accuracy", base_accuracy(&model, &ds)?);
    let mut files = Vec::new();
    if taus.is_none() && !args.analyze {
        return Ok(EvalReport { metrics, files });
    }
    let out = match &args.out {
        Some(o) => o.clone(),
        None => args.model.parent().unwrap_or(Path::new("")).join("eval"),
    };
    fs::create_dir_all(&out)?;
    if let Some(taus) = taus {
        let curve = sweep_thresholds(&model, &ds, &taus, policy)?;
        files.extend(write_curves(&out, policy, &curve)?);
    }
    if args.analyze {
        let spec = out.join("specialization.csv");
        write_file(&spec, |w| specialization_table(&model, &ds)?.write_csv(w))?;
        let rel = out.join("reliability.csv");
        write_file(&rel, |w| base_reliability(&model, &ds, DEFAULT_RELIABILITY_BINS)?.write_csv(w))?;
        // gate choice against the expert that actually fits best
        let d = gate_disagreement(&gate_assignments(&model, &ds)?, &best_experts(&model, &ds)?, ds.labels(), model.num_experts())?;
        metrics.insert("gate_vs_best_expert_disagreement", d.fraction);
        let dis = out.join("gate_disagreement.csv");
        write_file(&dis, |w| d.write_csv(w))?;
        files.extend([spec, rel, dis]);
    }
    Ok(EvalReport { metrics, files })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub seed: u64,
    pub accuracy: f64,
    pub mean_macs: f64,
    pub label: Option<&'static str>,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub csv: PathBuf,
}

fn apply_axis(cfg: &mut RunConfig, axis: Axis, value: &str) -> Result<Option<&'static str>> {
    let bad = || Error::Config(format!("{}: invalid value {value:?}", axis.name()));
    Ok(match axis {
        Axis::SharedPrefix => {
            cfg.model.tap_index = value.parse().map_err(|_| bad())?;
            None
        }
        Axis::Gamma => {
            cfg.train.gamma = value.parse().map_err(|_| bad())?;
            (cfg.train.gamma == crate::gate_init::DEFAULT_GAMMA).then_some("default")
        }
        Axis::NumExperts => {
            cfg.model.num_experts = value.parse().map_err(|_| bad())?;
            (cfg.model.num_experts == 1).then_some(BASELINE_TAG)
        }
        Axis::NESchedule => {
            cfg.train.em.steps = value.parse().map_err(|_| bad())?;
            (cfg.train.em.steps == 0).then_some("asynchronous")
        }
    })
}

/// Trains once per value and seed. Seeds depend only on the repetition, so
/// every value sees the same data split and seeds.
pub fn cmd_ablate(args: &AblateArgs) -> Result<AblationReport> {
    let base = RunConfig::load(&args.config)?;
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let values: Vec<String> = parse_list(&args.values, "--values")?;
    let mut runs = Vec::new();
    for v in &values {
        let mut cfg = base.clone();
        let label = apply_axis(&mut cfg, args.axis, v)?;
        cfg.validate()?;
        runs.push((v.clone(), cfg, label));
    }
    let workers = base.workers()?;
    let (train, test) = base.datasets()?;
    let mut rows = Vec::new();
    for (value, cfg, label) in runs {
        for r in 0..args.seeds {
            let seed = sub_seed(base.seed, &format!("ablate/{r}"));
            let mut plan = cfg.plan(workers);
            plan.seed = seed;
            let model = train_with(&train, &plan, &NoStore)?.model;
            rows.push(AblationRow {
                value: value.clone(),
                seed,
                accuracy: top1_accuracy(&model, &test)?,
                mean_macs: mean_top1_macs(&model, &test)?,
                label,
            });
        }
    }
    fs::create_dir_all(&base.output_dir)?;
    let csv = base.output_dir.join(format!("ablate_{}.csv", args.axis.name()));
    write_file(&csv, |w| {
        writeln!(w, "axis_value,seed,accuracy,mean_macs")?;
        for r in &rows {
            writeln!(w, "{},{},{},{}", r.value, r.seed, fmt_f64(r.accuracy), fmt_f64(r.mean_macs))?;
        }
        Ok(())
    })?;
    Ok(AblationReport { rows, csv })
}
