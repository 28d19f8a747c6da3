//! Training of the mixture.
//!
//! The asynchronous scheme runs five stages: train the base model, cluster
//! its pre-logits into the initial gate `g0`, fit the gate to `g0`, then for
//! every expert independently train the expert on `Γ(g0)`-weighted data and
//! fit its ensembler. Experts never communicate and `g0` stays fixed, so the
//! per-expert work is embarrassingly parallel.
//!
//! The EM variant splits the expert epochs into `N_E + 1` segments with an E
//! step (posterior over experts) between them; the posterior replaces `g0`
//! as the experts' weights and the gate is refit to it. `N_E = 0` is the
//! asynchronous scheme.

use std::io::Write;
use std::ops::Range;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::gate_init::{build_g0, default_temperature, kmeans, per_class_gate, smooth_gamma, Centroids, GateInit, DEFAULT_GAMMA};
use crate::json::fmt_f64;
use crate::matrix::{argmax, Matrix};
use crate::moe::{stacking_features, Ensembler, EnsemblerKind, Gate, MoEModel};
use crate::nn::{clamped_ln, kl_divergence, sgd_train, sgd_train_epochs, sgd_train_logged, Activation, Layer, Network, SgdConfig, Targets, TrainSet, Weighting};
use crate::rng::{rng_from, sub_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeHandling {
    /// `Γ(g0)` multiplies each sample's loss.
    Reweight,
    /// `Γ(g0)` gives sampling probabilities for batch construction.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Soft per-sample `g0` from clustering.
    PerSample,
    /// Every sample of a class goes to the class's majority expert.
    PerClass,
}

/// Hidden layer widths of the base model and the index of the layer whose
/// output feeds the experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub tap_index: usize,
}

impl Architecture {
    pub fn dims(&self, input: usize, classes: usize) -> Vec<usize> {
        std::iter::once(input)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(classes))
            .collect()
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if self.tap_index + 1 >= self.num_layers() {
            return Err(Error::invalid(format!(
                "tap_index {} must be below the last layer ({} layers)",
                self.tap_index,
                self.num_layers()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSgd {
    pub base: SgdConfig,
    pub gate: SgdConfig,
    /// Its `epochs` is the total expert budget `n_e`.
    pub expert: SgdConfig,
    pub ensembler: SgdConfig,
}

impl Default for StageSgd {
    fn default() -> Self {
        StageSgd {
            base: SgdConfig::default(),
            gate: SgdConfig {
                epochs: 30,
                ..SgdConfig::default()
            },
            expert: SgdConfig::default(),
            ensembler: SgdConfig {
                epochs: 20,
                momentum: 0.5,
                ..SgdConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub architecture: Architecture,
    pub num_experts: usize,
    pub gamma: f64,
    /// `None` selects the median pairwise squared centroid distance.
    pub temperature: Option<f64>,
    pub negative_handling: NegativeHandling,
    pub ensembler: EnsemblerKind,
    pub routing: Routing,
    pub sgd: StageSgd,
    /// Number of E steps `N_E`.
    pub em_steps: usize,
    pub kmeans: KMeansConfig,
    pub seed: u64,
    /// Worker threads for per-expert stages.
    pub workers: usize,
}

impl TrainPlan {
    pub fn new(architecture: Architecture, num_experts: usize) -> Self {
        TrainPlan {
            architecture,
            num_experts,
            gamma: DEFAULT_GAMMA,
            temperature: None,
            negative_handling: NegativeHandling::Reweight,
            ensembler: EnsemblerKind::Bagging,
            routing: Routing::PerSample,
            sgd: StageSgd::default(),
            em_steps: 0,
            kmeans: KMeansConfig::default(),
            seed: 0,
            workers: 1,
        }
    }

    /// Total expert epochs `n_e`.
    pub fn expert_epochs(&self) -> usize {
        self.sgd.expert.epochs
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        if self.num_experts == 0 {
            return Err(Error::invalid("num_experts must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma must be in [0, 1]"));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid("temperature must be positive"));
            }
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        for cfg in [&self.sgd.base, &self.sgd.gate, &self.sgd.expert, &self.sgd.ensembler] {
            cfg.validate()?;
        }
        Ok(())
    }

    pub fn base_cfg(&self) -> SgdConfig {
        self.sgd.base.with_seed(sub_seed(self.seed, "base"))
    }

    pub fn gate_cfg(&self) -> SgdConfig {
        self.sgd.gate.with_seed(sub_seed(self.seed, "gate"))
    }

    pub fn expert_cfg(&self, k: usize) -> SgdConfig {
        self.sgd.expert.with_seed(sub_seed(self.seed, &format!("expert/{k}")))
    }

    pub fn ensembler_cfg(&self, k: usize) -> SgdConfig {
        self.sgd.ensembler.with_seed(sub_seed(self.seed, &format!("ensembler/{k}")))
    }

    fn kmeans_seed(&self) -> u64 {
        sub_seed(self.seed, "kmeans")
    }
}

/// Base-model outputs for every sample of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseFeatures {
    pub tap: Matrix,
    pub prelogits: Matrix,
    pub probs: Matrix,
}

impl BaseFeatures {
    pub fn compute(base: &Network, ds: &LabeledDataset) -> Result<Self> {
        let n = ds.len();
        let mut tap = Matrix::zeros(n, base.tap_dim());
        let mut prelogits = Matrix::zeros(n, base.prelogit_dim());
        let mut probs = Matrix::zeros(n, base.output_dim());
        for i in 0..n {
            let f = base.forward(ds.x(i))?;
            tap.row_mut(i).copy_from_slice(&f.tap);
            prelogits.row_mut(i).copy_from_slice(&f.prelogits);
            probs.row_mut(i).copy_from_slice(&f.probs);
        }
        Ok(Self { tap, prelogits, probs })
    }
}

/// Trains the base model from a seeded random initialization.
pub fn train_base(ds: &LabeledDataset, arch: &Architecture, cfg: &SgdConfig) -> Result<Network> {
    arch.validate()?;
    let dims = arch.dims(ds.dim(), ds.num_classes());
    let init = Network::random(&dims, arch.tap_index, &mut rng_from(sub_seed(cfg.seed, "init")))?;
    let data = TrainSet {
        inputs: ds.features(),
        targets: Targets::Labels(ds.labels()),
        weighting: Weighting::Uniform,
    };
    sgd_train(&init, &data, cfg, 0)
}

/// Clusters base pre-logits and builds `g0`.
pub fn initial_gate(feats: &BaseFeatures, plan: &TrainPlan, labels: &[usize], num_classes: usize) -> Result<(Centroids, GateInit)> {
    let centroids = kmeans(
        &feats.prelogits,
        plan.num_experts,
        plan.kmeans_seed(),
        plan.kmeans.max_iters,
        plan.kmeans.tol,
    )?;
    let temperature = plan.temperature.unwrap_or_else(|| default_temperature(&centroids));
    let g0 = build_g0(&feats.prelogits, &centroids, temperature)?;
    let g0 = match plan.routing {
        Routing::PerSample => g0,
        Routing::PerClass => {
            let routing = per_class_gate(&g0, labels, num_classes)?;
            GateInit::from_weights(routing.one_hot(labels), temperature)?
        }
    };
    Ok((centroids, g0))
}

/// Fits a linear gate to soft targets by minimizing the mean
/// `KL(target ‖ gate)`, starting from `init`. Returns the per-epoch loss.
pub fn fit_gate(init: &Gate, prelogits: &Matrix, targets: &Matrix, cfg: &SgdConfig) -> Result<(Gate, Vec<f64>)> {
    let data = TrainSet {
        inputs: prelogits,
        targets: Targets::Soft(targets),
        weighting: Weighting::Uniform,
    };
    let (net, history) = sgd_train_logged(init.net(), &data, cfg, 0)?;
    Ok((Gate::new(net)?, history))
}

/// Trains the gate from zero weights to match `g0`; the base stays frozen.
pub fn train_gate(g0: &GateInit, base: &Network, ds: &LabeledDataset, cfg: &SgdConfig) -> Result<Gate> {
    let feats = BaseFeatures::compute(base, ds)?;
    train_gate_on(g0.weights(), &feats, cfg)
}

pub fn train_gate_on(targets: &Matrix, feats: &BaseFeatures, cfg: &SgdConfig) -> Result<Gate> {
    if targets.rows() != feats.prelogits.rows() {
        return Err(Error::Shape {
            context: "g0 rows vs dataset",
            expected: feats.prelogits.rows(),
            got: targets.rows(),
        });
    }
    let init = Gate::zeros(feats.prelogits.cols(), targets.cols());
    fit_gate(&init, &feats.prelogits, targets, cfg).map(|(g, _)| g)
}

fn expert_weights(weights: &Matrix, k: usize) -> Result<Vec<f64>> {
    if k >= weights.cols() {
        return Err(Error::invalid(format!("expert {k} out of range")));
    }
    let col = weights.column(k);
    if col.iter().all(|&w| w == 0.0) {
        return Err(Error::DeadExpert(k));
    }
    Ok(col)
}

fn weighting(handling: NegativeHandling, w: &[f64]) -> Weighting<'_> {
    match handling {
        NegativeHandling::Reweight => Weighting::Loss(w),
        NegativeHandling::Sample => Weighting::Sample(w),
    }
}

/// Trains expert `k` starting from the base model's tail beyond the shared
/// prefix. `weights` is the clipped gate (`N × K`).
pub fn train_expert(
    k: usize,
    base: &Network,
    weights: &Matrix,
    ds: &LabeledDataset,
    cfg: &SgdConfig,
    handling: NegativeHandling,
) -> Result<Network> {
    let feats = BaseFeatures::compute(base, ds)?;
    let init = base.tail(base.tap_index() + 1)?;
    continue_expert(k, &init, weights, &feats, ds.labels(), cfg, handling, 0..cfg.epochs)
}

/// Continues training an expert tail over `epochs` of `cfg`'s schedule.
#[allow(clippy::too_many_arguments)]
pub fn continue_expert(
    k: usize,
    expert: &Network,
    weights: &Matrix,
    feats: &BaseFeatures,
    labels: &[usize],
    cfg: &SgdConfig,
    handling: NegativeHandling,
    epochs: Range<usize>,
) -> Result<Network> {
    let w = expert_weights(weights, k)?;
    let data = TrainSet {
        inputs: &feats.tap,
        targets: Targets::Labels(labels),
        weighting: weighting(handling, &w),
    };
    sgd_train_epochs(expert, &data, cfg, 0, epochs)
}

/// An expert slot during the asynchronous phase.
#[derive(Debug, Clone, PartialEq)]
pub enum ExpertSlot {
    Pending,
    Trained(Network),
}

/// Fits ensembler `k` once its expert is fully trained.
#[allow(clippy::too_many_arguments)]
pub fn train_ensembler(
    k: usize,
    kind: EnsemblerKind,
    feats: &BaseFeatures,
    slot: &ExpertSlot,
    weights: &Matrix,
    labels: &[usize],
    cfg: &SgdConfig,
    handling: NegativeHandling,
) -> Result<Ensembler> {
    let ExpertSlot::Trained(expert) = slot else {
        return Err(Error::Pipeline(format!(
            "ensembler {k} requested before expert {k} finished training"
        )));
    };
    Ok(match kind {
        EnsemblerKind::None => Ensembler::None,
        EnsemblerKind::Bagging => Ensembler::Bagging,
        EnsemblerKind::Top2 => Ensembler::Top2,
        EnsemblerKind::Stacking => {
            let c = feats.probs.cols();
            let n = feats.probs.rows();
            let mut inputs = Matrix::zeros(n, 2 * c);
            for i in 0..n {
                let e = expert.probs(feats.tap.row(i))?;
                inputs.row_mut(i).copy_from_slice(&stacking_features(feats.probs.row(i), &e));
            }
            let w = expert_weights(weights, k)?;
            let data = TrainSet {
                inputs: &inputs,
                targets: Targets::Labels(labels),
                weighting: weighting(handling, &w),
            };
            Ensembler::Stacking {
                net: sgd_train(&geometric_mean_stack(c), &data, cfg, 0)?,
            }
        }
    })
}

/// Stacking layer computing `softmax(½ ln base + ½ ln expert)`.
pub fn geometric_mean_stack(classes: usize) -> Network {
    let mut w = Matrix::zeros(classes, 2 * classes);
    for c in 0..classes {
        w.set(c, c, 0.5);
        w.set(c, classes + c, 0.5);
    }
    let layer = Layer::new(w, vec![0.0; classes], Activation::Identity).expect("square blocks");
    Network::new(vec![layer], 0).expect("single linear layer")
}

/// Persistence hook for resumable pipelines.
pub trait StageStore: Sync {
    fn load<T: DeserializeOwned>(&self, name: &str) -> Result<Option<T>>;
    fn save<T: Serialize>(&self, name: &str, value: &T) -> Result<()>;
}

/// Keeps nothing.
pub struct NoStore;

impl StageStore for NoStore {
    fn load<T: DeserializeOwned>(&self, _: &str) -> Result<Option<T>> {
        Ok(None)
    }

    fn save<T: Serialize>(&self, _: &str, _: &T) -> Result<()> {
        Ok(())
    }
}

fn cached<T, S, F>(store: &S, name: &str, make: F) -> Result<T>
where
    T: Serialize + DeserializeOwned,
    S: StageStore,
    F: FnOnce() -> Result<T>,
{
    if let Some(v) = store.load(name)? {
        return Ok(v);
    }
    let v = make()?;
    store.save(name, &v)?;
    Ok(v)
}

/// Maps `f` over `0..n`, on `workers` threads when more than one. Output
/// order is the index order regardless of scheduling.
pub fn par_map<T, F>(workers: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateStage {
    pub centroids: Centroids,
    pub g0: GateInit,
}

/// Stages 1–3, shared by both training schemes.
struct Prepared {
    base: Network,
    feats: BaseFeatures,
    stage: GateStage,
    gate: Gate,
}

fn prepare<S: StageStore>(ds: &LabeledDataset, plan: &TrainPlan, store: &S) -> Result<Prepared> {
    plan.validate()?;
    let base = cached(store, "base", || train_base(ds, &plan.architecture, &plan.base_cfg()))?;
    let feats = BaseFeatures::compute(&base, ds)?;
    let stage = cached(store, "g0", || {
        let (centroids, g0) = initial_gate(&feats, plan, ds.labels(), ds.num_classes())?;
        Ok(GateStage { centroids, g0 })
    })?;
    let gate = cached(store, "gate", || train_gate_on(stage.g0.weights(), &feats, &plan.gate_cfg()))?;
    Ok(Prepared {
        base,
        feats,
        stage,
        gate,
    })
}

/// Per-run diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `Σ_i g0(k|x_i)` per expert.
    pub g0_mass: Vec<f64>,
    /// `Σ_i Γ(g0)(k|x_i)` per expert: the expert's total loss weight.
    pub smoothed_mass: Vec<f64>,
    /// Samples whose `g0` argmax is each expert.
    pub g0_assigned: Vec<usize>,
    /// Samples whose final-gate argmax is each expert.
    pub gate_assigned: Vec<usize>,
    /// Fraction of training samples whose argmax expert differs between
    /// `g0` and the final gate.
    pub gate_disagreement: f64,
    /// Mean total-variation distance between the final gate and `g0`.
    pub gate_tv: f64,
    /// Epochs per M segment.
    pub segments: Vec<usize>,
    /// E-step rows with zero mass, per E step.
    pub zero_mass_rows: Vec<usize>,
}

impl Diagnostics {
    fn compute(g0: &GateInit, smoothed: &Matrix, gate: &Gate, feats: &BaseFeatures) -> Result<Self> {
        let k = g0.num_experts();
        let n = feats.prelogits.rows();
        let mut g0_mass = vec![0.0; k];
        let mut smoothed_mass = vec![0.0; k];
        let mut g0_assigned = vec![0; k];
        let mut gate_assigned = vec![0; k];
        let mut moved = 0;
        let mut tv = 0.0;
        for i in 0..n {
            let row = g0.weights().row(i);
            let g = gate.distribution(feats.prelogits.row(i))?;
            for j in 0..k {
                g0_mass[j] += row[j];
                smoothed_mass[j] += smoothed.get(i, j);
            }
            let (a, b) = (argmax(row), argmax(&g));
            g0_assigned[a] += 1;
            gate_assigned[b] += 1;
            moved += usize::from(a != b);
            tv += 0.5 * row.iter().zip(&g).map(|(p, q)| (p - q).abs()).sum::<f64>();
        }
        Ok(Diagnostics {
            g0_mass,
            smoothed_mass,
            g0_assigned,
            gate_assigned,
            gate_disagreement: moved as f64 / n as f64,
            gate_tv: tv / n as f64,
            segments: Vec::new(),
            zero_mass_rows: Vec::new(),
        })
    }

    /// `expert,g0_mass,smoothed_mass,g0_assigned,gate_assigned`.
    pub fn write_expert_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "expert,g0_mass,smoothed_mass,g0_assigned,gate_assigned")?;
        for k in 0..self.g0_mass.len() {
            writeln!(
                w,
                "{k},{},{},{},{}",
                fmt_f64(self.g0_mass[k]),
                fmt_f64(self.smoothed_mass[k]),
                self.g0_assigned[k],
                self.gate_assigned[k]
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: MoEModel,
    pub centroids: Centroids,
    pub g0: GateInit,
    pub diagnostics: Diagnostics,
}

pub fn run_algorithm1(ds: &LabeledDataset, plan: &TrainPlan) -> Result<TrainOutcome> {
    run_algorithm1_with(ds, plan, &NoStore)
}

/// The asynchronous scheme with stage checkpoints in `store`.
pub fn run_algorithm1_with<S: StageStore>(ds: &LabeledDataset, plan: &TrainPlan, store: &S) -> Result<TrainOutcome> {
    let Prepared {
        base,
        feats,
        stage,
        gate,
    } = prepare(ds, plan, store)?;
    let smoothed = smooth_gamma(stage.g0.weights(), plan.gamma)?;
    let init = base.tail(base.tap_index() + 1)?;
    let per_expert = par_map(plan.workers, plan.num_experts, |k| {
        let cfg = plan.expert_cfg(k);
        let expert = cached(store, &format!("expert_{k}"), || {
            continue_expert(k, &init, &smoothed, &feats, ds.labels(), &cfg, plan.negative_handling, 0..cfg.epochs)
        })?;
        let slot = ExpertSlot::Trained(expert);
        let ensembler = cached(store, &format!("ensembler_{k}"), || {
            train_ensembler(
                k,
                plan.ensembler,
                &feats,
                &slot,
                &smoothed,
                ds.labels(),
                &plan.ensembler_cfg(k),
                plan.negative_handling,
            )
        })?;
        let ExpertSlot::Trained(expert) = slot else { unreachable!() };
        Ok((expert, ensembler))
    })?;
    let (experts, ensemblers): (Vec<_>, Vec<_>) = per_expert.into_iter().unzip();
    let mut diagnostics = Diagnostics::compute(&stage.g0, &smoothed, &gate, &feats)?;
    diagnostics.segments = vec![plan.expert_epochs()];
    Ok(TrainOutcome {
        model: MoEModel::new(base, gate, experts, ensemblers)?,
        centroids: stage.centroids,
        g0: stage.g0,
        diagnostics,
    })
}

/// Epochs per M segment: `n_e / (N_E + 1)` each, remainder on the last.
pub fn segment_lengths(total_epochs: usize, em_steps: usize) -> Vec<usize> {
    let parts = em_steps + 1;
    let base = total_epochs / parts;
    let mut out = vec![base; parts];
    out[parts - 1] += total_epochs - base * parts;
    out
}

/// Posterior over experts, `N × K`, row-stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub q: Matrix,
    /// Rows where every `g · e` product was zero (replaced by uniform).
    pub zero_mass_rows: usize,
}

/// `q[i,k] ∝ g(k|x_i) e_k(y_i|x_i)` with raw experts.
pub fn em_e_step(model: &MoEModel, ds: &LabeledDataset) -> Result<Posterior> {
    let k = model.num_experts();
    let mut q = Matrix::zeros(ds.len(), k);
    let mut zero = 0;
    for i in 0..ds.len() {
        let y = ds.label(i);
        let mut pass = model.pass(ds.x(i))?;
        let mut row = vec![0.0; k];
        for (j, r) in row.iter_mut().enumerate() {
            *r = pass.gate[j] * pass.expert(j)?[y];
        }
        let s: f64 = row.iter().sum();
        if s > 0.0 && s.is_finite() {
            row.iter_mut().for_each(|r| *r /= s);
        } else {
            zero += 1;
            row.fill(1.0 / k as f64);
        }
        q.row_mut(i).copy_from_slice(&row);
    }
    Ok(Posterior {
        q,
        zero_mass_rows: zero,
    })
}

/// Mean over samples of `Σ_k q log e_k(y|x) − KL(q ‖ g)`.
pub fn elbo(model: &MoEModel, q: &Matrix, ds: &LabeledDataset) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..ds.len() {
        let y = ds.label(i);
        let mut pass = model.pass(ds.x(i))?;
        let qi = q.row(i);
        let mut fit = 0.0;
        for (j, &qj) in qi.iter().enumerate() {
            if qj > 0.0 {
                fit += qj * clamped_ln(pass.expert(j)?[y]);
            }
        }
        total += fit - kl_divergence(qi, &pass.gate);
    }
    Ok(total / ds.len() as f64)
}

/// One M segment: where it sits in the expert schedule and its index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub index: usize,
    pub epochs: Range<usize>,
}

impl Segment {
    fn expert_cfg(&self, plan: &TrainPlan, k: usize) -> SgdConfig {
        let cfg = plan.expert_cfg(k);
        if self.index == 0 {
            cfg
        } else {
            let seed = sub_seed(cfg.seed, &format!("segment/{}", self.index));
            cfg.with_seed(seed)
        }
    }

    fn gate_cfg(&self, plan: &TrainPlan) -> SgdConfig {
        plan.gate_cfg().with_seed(sub_seed(plan.seed, &format!("em/{}/gate", self.index)))
    }
}

/// Continues every expert on `Γ(q)` and refits the gate to `q`.
pub fn em_m_step(model: &MoEModel, q: &Posterior, ds: &LabeledDataset, plan: &TrainPlan, segment: &Segment) -> Result<MoEModel> {
    let feats = BaseFeatures::compute(model.base(), ds)?;
    let weights = smooth_gamma(&q.q, plan.gamma)?;
    let experts = train_segment(model.experts(), &weights, &feats, ds, plan, segment)?;
    let (gate, _) = fit_gate(model.gate(), &feats.prelogits, &q.q, &segment.gate_cfg(plan))?;
    MoEModel::with_exit_gate(model.base().clone(), gate, None, experts, model.ensemblers().to_vec())
}

fn train_segment(
    experts: &[Network],
    weights: &Matrix,
    feats: &BaseFeatures,
    ds: &LabeledDataset,
    plan: &TrainPlan,
    segment: &Segment,
) -> Result<Vec<Network>> {
    par_map(plan.workers, experts.len(), |k| {
        continue_expert(
            k,
            &experts[k],
            weights,
            feats,
            ds.labels(),
            &segment.expert_cfg(plan, k),
            plan.negative_handling,
            segment.epochs.clone(),
        )
    })
}

pub fn run_em(ds: &LabeledDataset, plan: &TrainPlan) -> Result<TrainOutcome> {
    run_em_with(ds, plan, &NoStore)
}

/// EM variant. The first segment trains on `Γ(g0)` exactly as the
/// asynchronous scheme does; every later segment is preceded by an E step.
pub fn run_em_with<S: StageStore>(ds: &LabeledDataset, plan: &TrainPlan, store: &S) -> Result<TrainOutcome> {
    let Prepared {
        base,
        feats,
        stage,
        gate,
    } = prepare(ds, plan, store)?;
    let lengths = segment_lengths(plan.expert_epochs(), plan.em_steps);
    let g0_smoothed = smooth_gamma(stage.g0.weights(), plan.gamma)?;
    let k = plan.num_experts;
    let init = base.tail(base.tap_index() + 1)?;
    let placeholders = vec![Ensembler::None; k];

    let first = Segment {
        index: 0,
        epochs: 0..lengths[0],
    };
    let experts = train_segment(&vec![init; k], &g0_smoothed, &feats, ds, plan, &first)?;
    let mut model = MoEModel::new(base, gate, experts, placeholders)?;
    let mut weights = g0_smoothed.clone();
    let mut zero_rows = Vec::new();
    let mut start = lengths[0];
    for (index, &len) in lengths.iter().enumerate().skip(1) {
        let q = em_e_step(&model, ds)?;
        zero_rows.push(q.zero_mass_rows);
        let segment = Segment {
            index,
            epochs: start..start + len,
        };
        model = em_m_step(&model, &q, ds, plan, &segment)?;
        weights = smooth_gamma(&q.q, plan.gamma)?;
        start += len;
    }

    let ensemblers = par_map(plan.workers, k, |j| {
        train_ensembler(
            j,
            plan.ensembler,
            &feats,
            &ExpertSlot::Trained(model.experts()[j].clone()),
            &weights,
            ds.labels(),
            &plan.ensembler_cfg(j),
            plan.negative_handling,
        )
    })?;
    let model = model.with_ensemblers(ensemblers)?;
    let mut diagnostics = Diagnostics::compute(&stage.g0, &g0_smoothed, model.gate(), &feats)?;
    diagnostics.segments = lengths;
    diagnostics.zero_mass_rows = zero_rows;
    Ok(TrainOutcome {
        model,
        centroids: stage.centroids,
        g0: stage.g0,
        diagnostics,
    })
}
