//! Anytime inference: early exit to the base model and dynamic expert
//! selection from one threshold, plus threshold sweeps and exit-gate
//! training.
//!
//! With `α_k(x) = g(k|x) (1 − max_y φ(y|x))`, a sample exits early when every
//! `α_k < τ`; otherwise the experts with `α_k ≥ τ` run and their ensembled
//! outputs are mixed by gate weight.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::json::fmt_f64;
use crate::matrix::{argmax, Matrix};
use crate::moe::{Ensembler, Gate, MoEModel, Pass, Trace};
use crate::nn::{sgd_train, Activation, Layer, Network, SgdConfig, Targets, TrainSet, Weighting};
use crate::training::BaseFeatures;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Threshold on `α_k`; mixes every expert that clears it.
    #[default]
    AlphaThreshold,
    /// Exit when `1 − max φ < τ`; otherwise run the top-1 expert.
    BaseConfidence,
    /// Exit when `max g < τ`; otherwise run the top-1 expert.
    GateConfidence,
    /// Exit when the exit gate's extra output wins; `τ` is ignored.
    LearnedGate,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::AlphaThreshold,
        Policy::BaseConfidence,
        Policy::GateConfidence,
        Policy::LearnedGate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::AlphaThreshold => "alpha_threshold",
            Policy::BaseConfidence => "base_confidence",
            Policy::GateConfidence => "gate_confidence",
            Policy::LearnedGate => "learned_gate",
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown policy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnytimeConfig {
    pub tau: f64,
    pub policy: Policy,
    /// Rescale gate weights to sum to one over the executed experts.
    pub renormalize: bool,
}

impl AnytimeConfig {
    pub fn new(tau: f64, policy: Policy) -> Self {
        AnytimeConfig {
            tau,
            policy,
            renormalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::invalid(format!("tau {tau} outside [0, 1]")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnytimeOutput {
    pub probs: Vec<f64>,
    pub early_exited: bool,
    /// Executed experts in increasing index order; empty iff exited.
    pub executed: Vec<usize>,
    pub macs: u64,
}

fn alphas(pass: &Pass<'_>) -> Vec<f64> {
    let not_exit = 1.0 - pass.base.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    pass.gate.iter().map(|g| g * not_exit).collect()
}

pub fn alpha_scores(m: &MoEModel, x: &[f64]) -> Result<Vec<f64>> {
    Ok(alphas(&m.pass(x)?))
}

fn trace(m: &MoEModel, gate: bool, exit_gate: bool, executed: &[usize]) -> Trace {
    let top2 = executed.iter().any(|&k| matches!(m.ensemblers()[k], Ensembler::Top2));
    Trace {
        base: true,
        gate: gate || top2,
        exit_gate,
        experts: executed.to_vec(),
        ensemblers: executed.to_vec(),
    }
}

fn finish(m: &MoEModel, pass: &mut Pass<'_>, executed: Vec<usize>, renormalize: bool, gate: bool, exit_gate: bool) -> Result<AnytimeOutput> {
    let macs = m.mac_count(&trace(m, gate, exit_gate, &executed))?;
    if executed.is_empty() {
        return Ok(AnytimeOutput {
            probs: pass.base.probs.clone(),
            early_exited: true,
            executed,
            macs,
        });
    }
    let probs = pass.mixture(&executed, renormalize)?;
    Ok(AnytimeOutput {
        probs,
        early_exited: false,
        executed,
        macs,
    })
}

pub fn anytime_predict(m: &MoEModel, x: &[f64], cfg: &AnytimeConfig) -> Result<AnytimeOutput> {
    cfg.validate()?;
    let mut pass = m.pass(x)?;
    match cfg.policy {
        Policy::AlphaThreshold => {
            let executed: Vec<usize> = alphas(&pass)
                .iter()
                .enumerate()
                .filter(|(_, &a)| a >= cfg.tau)
                .map(|(k, _)| k)
                .collect();
            finish(m, &mut pass, executed, cfg.renormalize, true, false)
        }
        Policy::BaseConfidence => {
            let unsure = 1.0 - pass.base.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if unsure < cfg.tau {
                finish(m, &mut pass, Vec::new(), cfg.renormalize, false, false)
            } else {
                let top = argmax(&pass.gate);
                finish(m, &mut pass, vec![top], cfg.renormalize, true, false)
            }
        }
        Policy::GateConfidence => gate_confidence(m, &mut pass, cfg.tau),
        Policy::LearnedGate => {
            let exit = m
                .exit_gate()
                .ok_or_else(|| Error::invalid("learned_gate policy needs a model with an exit gate"))?;
            let scores = exit.distribution(&pass.base.prelogits)?;
            let k = m.num_experts();
            let executed = if argmax(&scores) == k {
                Vec::new()
            } else {
                vec![argmax(&scores[..k])]
            };
            finish(m, &mut pass, executed, cfg.renormalize, false, true)
        }
    }
}

fn gate_confidence(m: &MoEModel, pass: &mut Pass<'_>, tau: f64) -> Result<AnytimeOutput> {
    let top = argmax(&pass.gate);
    let executed = if pass.gate[top] < tau { Vec::new() } else { vec![top] };
    finish(m, pass, executed, true, true, false)
}

/// Exits to the base model when the gate's top probability is below `tau`,
/// otherwise runs the top-1 expert.
pub fn gate_confidence_exit(m: &MoEModel, x: &[f64], tau: f64) -> Result<AnytimeOutput> {
    check_tau(tau)?;
    gate_confidence(m, &mut m.pass(x)?, tau)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeoffPoint {
    pub tau: f64,
    pub accuracy: f64,
    pub mean_macs: f64,
    pub exit_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TradeoffCurve {
    pub points: Vec<TradeoffPoint>,
}

impl TradeoffCurve {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "tau,accuracy,mean_macs,exit_ratio")?;
        for p in &self.points {
            writeln!(
                w,
                "{},{},{},{}",
                fmt_f64(p.tau),
                fmt_f64(p.accuracy),
                fmt_f64(p.mean_macs),
                fmt_f64(p.exit_ratio)
            )?;
        }
        Ok(())
    }
}

/// Evaluates one point of the trade-off curve.
pub fn evaluate(m: &MoEModel, ds: &LabeledDataset, cfg: &AnytimeConfig) -> Result<TradeoffPoint> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut hits, mut macs, mut exits) = (0usize, 0u128, 0usize);
    for i in 0..ds.len() {
        let out = anytime_predict(m, ds.x(i), cfg)?;
        hits += usize::from(argmax(&out.probs) == ds.label(i));
        macs += u128::from(out.macs);
        exits += usize::from(out.early_exited);
    }
    let n = ds.len() as f64;
    Ok(TradeoffPoint {
        tau: cfg.tau,
        accuracy: hits as f64 / n,
        mean_macs: macs as f64 / n,
        exit_ratio: exits as f64 / n,
    })
}

pub fn sweep_thresholds(m: &MoEModel, ds: &LabeledDataset, taus: &[f64], policy: Policy) -> Result<TradeoffCurve> {
    if taus.is_empty() {
        return Err(Error::invalid("taus must be nonempty"));
    }
    for (i, &t) in taus.iter().enumerate() {
        check_tau(t)?;
        if taus[..i].contains(&t) {
            return Err(Error::invalid(format!("duplicate tau {t}")));
        }
    }
    let points = taus
        .iter()
        .map(|&tau| evaluate(m, ds, &AnytimeConfig::new(tau, policy)))
        .collect::<Result<_>>()?;
    Ok(TradeoffCurve { points })
}

/// `q` lies strictly below the chord from `a` to `c` in (MACs, accuracy).
fn below(a: &TradeoffPoint, q: &TradeoffPoint, c: &TradeoffPoint) -> bool {
    let cross = (q.mean_macs - a.mean_macs) * (c.accuracy - a.accuracy) - (q.accuracy - a.accuracy) * (c.mean_macs - a.mean_macs);
    cross > 0.0
}

/// Pareto-optimal points (fewer MACs, higher accuracy) that lie on the
/// upper concave envelope, sorted by MACs. Points sharing both coordinates
/// keep the first occurrence.
pub fn convex_envelope(curves: &[TradeoffCurve]) -> Result<TradeoffCurve> {
    let mut pts: Vec<TradeoffPoint> = curves.iter().flat_map(|c| c.points.iter().copied()).collect();
    if pts.is_empty() {
        return Err(Error::invalid("no points to envelope"));
    }
    // stable: equal points keep input order
    pts.sort_by(|a, b| a.mean_macs.total_cmp(&b.mean_macs).then(b.accuracy.total_cmp(&a.accuracy)));
    let mut pareto: Vec<TradeoffPoint> = Vec::new();
    for p in pts {
        match pareto.last() {
            Some(last) if p.accuracy <= last.accuracy => {}
            _ => pareto.push(p),
        }
    }
    let mut hull: Vec<TradeoffPoint> = Vec::with_capacity(pareto.len());
    for p in pareto {
        while hull.len() >= 2 && below(&hull[hull.len() - 2], &hull[hull.len() - 1], &p) {
            hull.pop();
        }
        hull.push(p);
    }
    Ok(TradeoffCurve { points: hull })
}

/// Largest `τ` whose accuracy is within `max_acc_drop` of `reference`;
/// 0 when none qualifies.
pub fn select_from_curve(reference: f64, curve: &TradeoffCurve, max_acc_drop: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| reference - p.accuracy <= max_acc_drop)
        .map(|p| p.tau)
        .fold(None, |best: Option<f64>, t| Some(best.map_or(t, |b| b.max(t))))
        .unwrap_or(0.0)
}

/// Picks the largest threshold whose accuracy on `subset` stays within
/// `max_acc_drop` of the `τ = 0` accuracy.
pub fn select_threshold(m: &MoEModel, subset: &LabeledDataset, taus: &[f64], max_acc_drop: f64, policy: Policy) -> Result<f64> {
    let reference = evaluate(m, subset, &AnytimeConfig::new(0.0, policy))?.accuracy;
    let curve = sweep_thresholds(m, subset, taus, policy)?;
    Ok(select_from_curve(reference, &curve, max_acc_drop))
}

/// Marks the `budget` largest gains (ties → lower index).
pub fn ilp_select(gains: &[f64], budget: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..gains.len()).collect();
    order.sort_by(|&a, &b| gains[b].total_cmp(&gains[a]).then(a.cmp(&b)));
    let mut out = vec![false; gains.len()];
    for &i in order.iter().take(budget) {
        out[i] = true;
    }
    out
}

/// `φ(y|x) − Σ_k g(k|x) e'_k(y|x)` per sample.
pub fn exit_gains(m: &MoEModel, ds: &LabeledDataset) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..m.num_experts()).collect();
    (0..ds.len())
        .map(|i| {
            let y = ds.label(i);
            let mut pass = m.pass(ds.x(i))?;
            let mix = pass.mixture(&all, false)?;
            Ok(pass.base.probs[y] - mix[y])
        })
        .collect()
}

/// `⌊τN⌋` with a small allowance for `τN` landing just under an integer.
pub fn exit_budget(tau_budget: f64, n: usize) -> Result<usize> {
    check_tau(tau_budget)?;
    Ok(((tau_budget * n as f64 + 1e-9).floor() as usize).min(n))
}

/// Optimal exit labels: exit the `⌊τN⌋` samples that lose the least
/// likelihood of the truth by skipping the experts.
pub fn ilp_exit_assignment(m: &MoEModel, ds: &LabeledDataset, tau_budget: f64) -> Result<Vec<bool>> {
    let budget = exit_budget(tau_budget, ds.len())?;
    Ok(ilp_select(&exit_gains(m, ds)?, budget))
}

/// Extends the gate with an exit output (index `K`) and trains it on
/// `labels`: exit samples target `K`, the rest target the current gate's
/// argmax expert. The base model is untouched.
pub fn train_exit_gate(m: &MoEModel, ds: &LabeledDataset, labels: &[bool], cfg: &SgdConfig) -> Result<Gate> {
    if labels.len() != ds.len() {
        return Err(Error::Shape {
            context: "exit labels",
            expected: ds.len(),
            got: labels.len(),
        });
    }
    let feats = BaseFeatures::compute(m.base(), ds)?;
    let k = m.num_experts();
    let targets: Vec<usize> = (0..ds.len())
        .map(|i| {
            if labels[i] {
                Ok(k)
            } else {
                Ok(argmax(&m.gate().distribution(feats.prelogits.row(i))?))
            }
        })
        .collect::<Result<_>>()?;
    let layer = &m.gate().net().layers()[0];
    let d = layer.in_dim();
    let mut w = Matrix::zeros(k + 1, d);
    for r in 0..k {
        w.row_mut(r).copy_from_slice(layer.weight().row(r));
    }
    let mut b = layer.bias().to_vec();
    b.push(0.0);
    let init = Network::new(vec![Layer::new(w, b, Activation::Identity)?], 0)?;
    let data = TrainSet {
        inputs: &feats.prelogits,
        targets: Targets::Labels(&targets),
        weighting: Weighting::Uniform,
    };
    Gate::new(sgd_train(&init, &data, cfg, 0)?)
}
