//! The assembled mixture: a full-depth base model, a linear gate on the base
//! pre-logits, expert tails fed by the base tap, and one ensembler per
//! expert that combines the expert with the base prediction.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::argmax;
use crate::nn::{check_format_version, clamped_ln, softmax, Forward, Network, FORMAT_VERSION};

/// Linear router over experts, fed by the base model's pre-logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Network", into = "Network")]
pub struct Gate {
    net: Network,
}

impl TryFrom<Network> for Gate {
    type Error = Error;

    fn try_from(net: Network) -> Result<Self> {
        Gate::new(net)
    }
}

impl From<Gate> for Network {
    fn from(g: Gate) -> Network {
        g.net
    }
}

impl Gate {
    pub fn new(net: Network) -> Result<Self> {
        if net.num_layers() != 1 {
            return Err(Error::invalid("gate must be a single linear layer"));
        }
        Ok(Self { net })
    }

    pub fn zeros(prelogit_dim: usize, outputs: usize) -> Self {
        Self {
            net: Network::zeros_linear(prelogit_dim, outputs),
        }
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn num_outputs(&self) -> usize {
        self.net.output_dim()
    }

    pub fn macs(&self) -> u64 {
        self.net.macs()
    }

    pub fn distribution(&self, prelogits: &[f64]) -> Result<Vec<f64>> {
        self.net.probs(prelogits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsemblerKind {
    None,
    Bagging,
    Stacking,
    Top2,
}

impl std::fmt::Display for EnsemblerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnsemblerKind::None => "none",
            EnsemblerKind::Bagging => "bagging",
            EnsemblerKind::Stacking => "stacking",
            EnsemblerKind::Top2 => "top2",
        })
    }
}

/// Combiner `d_k` producing `e'_k` from the base and expert outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Ensembler {
    /// Expert output passes through.
    None,
    /// Mean of base and expert probabilities.
    Bagging,
    /// Linear map over concatenated `(ln base, ln expert)` probabilities.
    Stacking { net: Network },
    /// Mean of this expert and the gate's best other expert; base unused.
    Top2,
}

impl Ensembler {
    pub fn kind(&self) -> EnsemblerKind {
        match self {
            Ensembler::None => EnsemblerKind::None,
            Ensembler::Bagging => EnsemblerKind::Bagging,
            Ensembler::Stacking { .. } => EnsemblerKind::Stacking,
            Ensembler::Top2 => EnsemblerKind::Top2,
        }
    }
}

/// Concatenated log-probabilities fed to a stacking ensembler.
pub fn stacking_features(base: &[f64], expert: &[f64]) -> Vec<f64> {
    base.iter().chain(expert).map(|&p| clamped_ln(p)).collect()
}

/// Dense multiply-accumulate counts per component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub macs_base: u64,
    /// Base layers up to and including the tap; reused by every expert.
    pub macs_prefix: u64,
    pub macs_expert_tail: Vec<u64>,
    pub macs_gate: u64,
    #[serde(default)]
    pub macs_exit_gate: Option<u64>,
    pub macs_ensembler: Vec<u64>,
}

impl CostModel {
    fn build(base: &Network, gate: &Gate, exit_gate: Option<&Gate>, experts: &[Network], ensemblers: &[Ensembler]) -> Self {
        let tail_max = experts.iter().map(Network::macs).max().unwrap_or(0);
        CostModel {
            macs_base: base.macs(),
            macs_prefix: base.prefix_macs(),
            macs_expert_tail: experts.iter().map(Network::macs).collect(),
            macs_gate: gate.macs(),
            macs_exit_gate: exit_gate.map(Gate::macs),
            macs_ensembler: ensemblers
                .iter()
                .map(|e| match e {
                    Ensembler::None | Ensembler::Bagging => 0,
                    Ensembler::Stacking { net } => net.macs(),
                    // the partner expert's tail
                    Ensembler::Top2 => {
                        if experts.len() > 1 {
                            tail_max
                        } else {
                            0
                        }
                    }
                })
                .collect(),
        }
    }
}

/// Components that ran for one input.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub base: bool,
    pub gate: bool,
    pub exit_gate: bool,
    pub experts: Vec<usize>,
    pub ensemblers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub expert: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelCheckpoint", into = "ModelCheckpoint")]
pub struct MoEModel {
    base: Network,
    gate: Gate,
    exit_gate: Option<Gate>,
    experts: Vec<Network>,
    ensemblers: Vec<Ensembler>,
    cost: CostModel,
}

impl MoEModel {
    pub fn new(base: Network, gate: Gate, experts: Vec<Network>, ensemblers: Vec<Ensembler>) -> Result<Self> {
        Self::with_exit_gate(base, gate, None, experts, ensemblers)
    }

    pub fn with_exit_gate(
        base: Network,
        gate: Gate,
        exit_gate: Option<Gate>,
        experts: Vec<Network>,
        ensemblers: Vec<Ensembler>,
    ) -> Result<Self> {
        let k = experts.len();
        if k == 0 {
            return Err(Error::invalid("model needs at least one expert"));
        }
        if base.tap_index() + 1 >= base.num_layers() {
            return Err(Error::invalid(
                "base tap must leave at least one layer for the experts",
            ));
        }
        let shape = |context, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(Error::Shape {
                    context,
                    expected,
                    got,
                })
            }
        };
        shape("gate input", base.prelogit_dim(), gate.input_dim())?;
        shape("gate outputs", k, gate.num_outputs())?;
        if let Some(eg) = &exit_gate {
            shape("exit gate input", base.prelogit_dim(), eg.input_dim())?;
            shape("exit gate outputs", k + 1, eg.num_outputs())?;
        }
        let c = base.output_dim();
        for e in &experts {
            shape("expert input", base.tap_dim(), e.input_dim())?;
            shape("expert classes", c, e.output_dim())?;
        }
        shape("ensembler count", k, ensemblers.len())?;
        for e in &ensemblers {
            if let Ensembler::Stacking { net } = e {
                shape("stacking input", 2 * c, net.input_dim())?;
                shape("stacking output", c, net.output_dim())?;
            }
        }
        let cost = CostModel::build(&base, &gate, exit_gate.as_ref(), &experts, &ensemblers);
        Ok(Self {
            base,
            gate,
            exit_gate,
            experts,
            ensemblers,
            cost,
        })
    }

    pub fn base(&self) -> &Network {
        &self.base
    }

    pub fn gate(&self) -> &Gate {
        &self.gate
    }

    pub fn exit_gate(&self) -> Option<&Gate> {
        self.exit_gate.as_ref()
    }

    pub fn experts(&self) -> &[Network] {
        &self.experts
    }

    pub fn ensemblers(&self) -> &[Ensembler] {
        &self.ensemblers
    }

    pub fn cost(&self) -> &CostModel {
        &self.cost
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn num_classes(&self) -> usize {
        self.base.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    /// Number of base layers shared (frozen) by every expert.
    pub fn shared_prefix(&self) -> usize {
        self.base.tap_index() + 1
    }

    pub fn with_gate(&self, gate: Gate) -> Result<MoEModel> {
        Self::with_exit_gate(
            self.base.clone(),
            gate,
            self.exit_gate.clone(),
            self.experts.clone(),
            self.ensemblers.clone(),
        )
    }

    pub fn with_ensemblers(&self, ensemblers: Vec<Ensembler>) -> Result<MoEModel> {
        Self::with_exit_gate(
            self.base.clone(),
            self.gate.clone(),
            self.exit_gate.clone(),
            self.experts.clone(),
            ensemblers,
        )
    }

    pub fn with_exit(&self, exit_gate: Gate) -> Result<MoEModel> {
        Self::with_exit_gate(
            self.base.clone(),
            self.gate.clone(),
            Some(exit_gate),
            self.experts.clone(),
            self.ensemblers.clone(),
        )
    }

    /// Runs the base model and the gate; experts are evaluated on demand.
    pub fn pass(&self, x: &[f64]) -> Result<Pass<'_>> {
        let base = self.base.forward(x)?;
        let gate = self.gate.distribution(&base.prelogits)?;
        Ok(Pass {
            model: self,
            base,
            gate,
            experts: vec![None; self.experts.len()],
        })
    }

    pub fn gate_distribution(&self, x: &[f64]) -> Result<Vec<f64>> {
        let base = self.base.forward(x)?;
        self.gate.distribution(&base.prelogits)
    }

    /// `e'_k(·|x)`.
    pub fn ensemble_output(&self, k: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.check_expert(k)?;
        self.pass(x)?.ensemble(k)
    }

    /// Executes only the most probable expert (ties → lowest index).
    pub fn top1_predict(&self, x: &[f64]) -> Result<Prediction> {
        let mut pass = self.pass(x)?;
        let expert = argmax(&pass.gate);
        let probs = pass.ensemble(expert)?;
        Ok(Prediction { probs, expert })
    }

    /// Full soft mixture `Σ_k g(k|x) e'_k(·|x)` over every expert.
    pub fn soft_mixture(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut pass = self.pass(x)?;
        pass.mixture((0..self.num_experts()).collect::<Vec<_>>().as_slice(), false)
    }

    /// MACs of top-1 inference for the given expert.
    pub fn top1_macs(&self, expert: usize) -> u64 {
        self.cost.macs_base + self.cost.macs_gate + self.cost.macs_expert_tail[expert] + self.cost.macs_ensembler[expert]
    }

    pub fn mac_count(&self, trace: &Trace) -> Result<u64> {
        let k = self.num_experts();
        let mut seen = vec![false; k];
        let mut total = 0;
        if trace.base {
            total += self.cost.macs_base;
        }
        if trace.gate {
            total += self.cost.macs_gate;
        }
        if trace.exit_gate {
            total += self
                .cost
                .macs_exit_gate
                .ok_or_else(|| Error::UnknownComponent("exit_gate".into()))?;
        }
        for &e in &trace.experts {
            if e >= k {
                return Err(Error::UnknownComponent(format!("expert {e}")));
            }
            if !std::mem::replace(&mut seen[e], true) {
                total += self.cost.macs_expert_tail[e];
            }
        }
        if !trace.base && seen.iter().any(|&s| s) {
            // experts still need the shared prefix
            total += self.cost.macs_prefix;
        }
        let mut seen_ens = vec![false; k];
        for &e in &trace.ensemblers {
            if e >= k {
                return Err(Error::UnknownComponent(format!("ensembler {e}")));
            }
            if !std::mem::replace(&mut seen_ens[e], true) {
                total += self.cost.macs_ensembler[e];
            }
        }
        Ok(total)
    }

    fn check_expert(&self, k: usize) -> Result<()> {
        if k >= self.num_experts() {
            return Err(Error::invalid(format!(
                "expert {k} out of range for {} experts",
                self.num_experts()
            )));
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<MoEModel> {
        check_format_version(text)?;
        Ok(serde_json::from_str(text)?)
    }

    pub fn load_json(path: &Path) -> Result<MoEModel> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }
}

/// One input's base forward pass and gate distribution, with lazily
/// evaluated experts.
#[derive(Debug, Clone)]
pub struct Pass<'m> {
    model: &'m MoEModel,
    pub base: Forward,
    pub gate: Vec<f64>,
    experts: Vec<Option<Vec<f64>>>,
}

impl Pass<'_> {
    /// Raw expert probabilities `e_k(·|x)`.
    pub fn expert(&mut self, k: usize) -> Result<&[f64]> {
        self.model.check_expert(k)?;
        if self.experts[k].is_none() {
            self.experts[k] = Some(self.model.experts[k].probs(&self.base.tap)?);
        }
        Ok(self.experts[k].as_deref().expect("filled above"))
    }

    /// Ensembled output `e'_k(·|x)`.
    pub fn ensemble(&mut self, k: usize) -> Result<Vec<f64>> {
        let expert = self.expert(k)?.to_vec();
        let base = &self.base.probs;
        Ok(match &self.model.ensemblers[k] {
            Ensembler::None => expert,
            Ensembler::Bagging => base.iter().zip(&expert).map(|(a, b)| 0.5 * (a + b)).collect(),
            Ensembler::Stacking { net } => softmax(&net.logits(&stacking_features(base, &expert))?),
            Ensembler::Top2 => {
                let partner = (0..self.gate.len())
                    .filter(|&j| j != k)
                    .fold(None, |best: Option<usize>, j| match best {
                        Some(b) if self.gate[b] >= self.gate[j] => Some(b),
                        _ => Some(j),
                    });
                match partner {
                    None => expert,
                    Some(j) => {
                        let other = self.expert(j)?;
                        expert.iter().zip(other).map(|(a, b)| 0.5 * (a + b)).collect()
                    }
                }
            }
        })
    }

    /// `Σ_{k ∈ set} g(k|x) e'_k`, optionally renormalizing the gate weights
    /// over `set`.
    pub fn mixture(&mut self, set: &[usize], renormalize: bool) -> Result<Vec<f64>> {
        let mass: f64 = set.iter().map(|&k| self.gate[k]).sum();
        let scale = if renormalize && mass > 0.0 { 1.0 / mass } else { 1.0 };
        let mut out = vec![0.0; self.base.probs.len()];
        for &k in set {
            let w = self.gate[k] * scale;
            let e = self.ensemble(k)?;
            for (o, v) in out.iter_mut().zip(e) {
                *o += w * v;
            }
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelCheckpoint {
    format_version: u32,
    shared_prefix: usize,
    base: Network,
    gate: Gate,
    #[serde(default)]
    exit_gate: Option<Gate>,
    experts: Vec<Network>,
    ensemblers: Vec<Ensembler>,
    cost: CostModel,
}

impl From<MoEModel> for ModelCheckpoint {
    fn from(m: MoEModel) -> Self {
        ModelCheckpoint {
            format_version: FORMAT_VERSION,
            shared_prefix: m.shared_prefix(),
            base: m.base,
            gate: m.gate,
            exit_gate: m.exit_gate,
            experts: m.experts,
            ensemblers: m.ensemblers,
            cost: m.cost,
        }
    }
}

impl TryFrom<ModelCheckpoint> for MoEModel {
    type Error = Error;

    fn try_from(c: ModelCheckpoint) -> Result<Self> {
        if c.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: c.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let m = MoEModel::with_exit_gate(c.base, c.gate, c.exit_gate, c.experts, c.ensemblers)?;
        if m.shared_prefix() != c.shared_prefix {
            return Err(Error::Checkpoint(format!(
                "shared_prefix {} disagrees with base tap ({})",
                c.shared_prefix,
                m.shared_prefix()
            )));
        }
        if m.cost != c.cost {
            return Err(Error::Checkpoint("stored cost model disagrees with networks".into()));
        }
        Ok(m)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::nn::{Activation, Layer};
    use crate::rng::rng_for;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    pub(crate) fn linear(rows: &[&[f64]], bias: &[f64]) -> Network {
        Network::new(
            vec![Layer::new(Matrix::from_rows(rows).unwrap(), bias.to_vec(), Activation::Identity).unwrap()],
            0,
        )
        .unwrap()
    }

    /// base [4 -> 8 -> 3], K experts [8 -> 3], gate [8 -> K].
    pub(crate) fn random_model(k: usize, kind: EnsemblerKind, seed: u64) -> MoEModel {
        let mut rng = rng_for(seed, "model");
        let base = Network::random(&[4, 8, 3], 0, &mut rng).unwrap();
        let gate_net = Network::random(&[8, k], 0, &mut rng).unwrap();
        let experts: Vec<Network> = (0..k).map(|_| Network::random(&[8, 3], 0, &mut rng).unwrap()).collect();
        let ensemblers = (0..k)
            .map(|_| match kind {
                EnsemblerKind::None => Ensembler::None,
                EnsemblerKind::Bagging => Ensembler::Bagging,
                EnsemblerKind::Top2 => Ensembler::Top2,
                EnsemblerKind::Stacking => Ensembler::Stacking {
                    net: Network::random(&[6, 3], 0, &mut rng).unwrap(),
                },
            })
            .collect();
        MoEModel::new(base, Gate::new(gate_net).unwrap(), experts, ensemblers).unwrap()
    }

    fn with_gate_rows(m: &MoEModel, rows: &[&[f64]], bias: &[f64]) -> MoEModel {
        m.with_gate(Gate::new(linear(rows, bias)).unwrap()).unwrap()
    }

    #[test]
    fn zero_gate_is_uniform() {
        let m = random_model(4, EnsemblerKind::Bagging, 1);
        let m = m.with_gate(Gate::zeros(8, 4)).unwrap();
        let g = m.gate_distribution(&[0.3, -1.0, 2.0, 0.5]).unwrap();
        assert_eq!(g, vec![0.25; 4]);
    }

    #[test]
    fn hand_set_gate_matches_softmax() {
        let m = random_model(2, EnsemblerKind::None, 2);
        let x = [1.0, 0.5, -0.5, 2.0];
        let pre = m.base().forward(&x).unwrap().prelogits;
        let w0: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let w1 = vec![-0.2; 8];
        let m = with_gate_rows(&m, &[&w0, &w1], &[0.3, -0.1]);
        let z0: f64 = w0.iter().zip(&pre).map(|(a, b)| a * b).sum::<f64>() + 0.3;
        let z1: f64 = w1.iter().zip(&pre).map(|(a, b)| a * b).sum::<f64>() - 0.1;
        let g = m.gate_distribution(&x).unwrap();
        assert_abs_diff_eq!(g[0], 1.0 / (1.0 + (z1 - z0).exp()), epsilon = 1e-14);
    }

    #[test]
    fn bagging_examples() {
        // base=(1,0)-ish and expert=(0,1)-ish via saturated logits is inexact;
        // build the ensembler output directly from a pass instead.
        let m = random_model(1, EnsemblerKind::Bagging, 3);
        let mut pass = m.pass(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        pass.base.probs = vec![1.0, 0.0, 0.0];
        pass.experts[0] = Some(vec![0.0, 1.0, 0.0]);
        assert_eq!(pass.ensemble(0).unwrap(), vec![0.5, 0.5, 0.0]);
        pass.experts[0] = Some(vec![1.0, 0.0, 0.0]);
        assert_eq!(pass.ensemble(0).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn stacking_sum_of_log_blocks() {
        let id_sum = linear(
            &[
                &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
                &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0],
                &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
            ],
            &[0.0; 3],
        );
        let m = random_model(1, EnsemblerKind::None, 4)
            .with_ensemblers(vec![Ensembler::Stacking { net: id_sum }])
            .unwrap();
        let mut pass = m.pass(&[0.5, 0.5, 0.5, 0.5]).unwrap();
        pass.base.probs = vec![0.5, 0.3, 0.2];
        pass.experts[0] = Some(vec![0.2, 0.2, 0.6]);
        // softmax(ln b + ln e) = normalized product
        let prod = [0.1, 0.06, 0.12];
        let z: f64 = prod.iter().sum();
        let out = pass.ensemble(0).unwrap();
        for (o, p) in out.iter().zip(prod) {
            assert_abs_diff_eq!(*o, p / z, epsilon = 1e-14);
        }
    }

    #[test]
    fn top1_follows_gate_and_ties_go_low() {
        let m = random_model(2, EnsemblerKind::Bagging, 5);
        let tie = m.with_gate(Gate::zeros(8, 2)).unwrap();
        let x = [0.2, 0.1, -0.4, 0.9];
        let p = tie.top1_predict(&x).unwrap();
        assert_eq!(p.expert, 0);
        assert_eq!(p.probs, tie.ensemble_output(0, &x).unwrap());

        let one_hot = with_gate_rows(&m, &[&[0.0; 8], &[0.0; 8]], &[-50.0, 50.0]);
        let p = one_hot.top1_predict(&x).unwrap();
        assert_eq!(p.expert, 1);
        assert_eq!(p.probs, one_hot.ensemble_output(1, &x).unwrap());
    }

    #[test]
    fn mac_fixtures() {
        // base [4 -> 8 -> 3], tap 0, experts [8 -> 3], gate [8 -> 2]
        let m = random_model(2, EnsemblerKind::Bagging, 6);
        assert_eq!(m.mac_count(&Trace::default()).unwrap(), 0);
        let base_only = Trace {
            base: true,
            ..Trace::default()
        };
        assert_eq!(m.mac_count(&base_only).unwrap(), 56);
        let with_expert = Trace {
            base: true,
            gate: true,
            experts: vec![1],
            ensemblers: vec![1],
            ..Trace::default()
        };
        assert_eq!(m.mac_count(&with_expert).unwrap(), 96);
        assert_eq!(m.top1_macs(1), 96);
        let bad = Trace {
            experts: vec![2],
            ..Trace::default()
        };
        assert!(matches!(m.mac_count(&bad), Err(Error::UnknownComponent(_))));
        let no_exit = Trace {
            exit_gate: true,
            ..Trace::default()
        };
        assert!(m.mac_count(&no_exit).is_err());

        let stacked = random_model(2, EnsemblerKind::Stacking, 6);
        assert_eq!(stacked.cost().macs_ensembler, vec![18, 18]);
    }

    #[test]
    fn checkpoint_roundtrip_and_version_check() {
        for kind in [EnsemblerKind::Stacking, EnsemblerKind::Top2] {
            let m = random_model(3, kind, 7);
            let text = serde_json::to_string(&m).unwrap();
            assert_eq!(MoEModel::from_json_str(&text).unwrap(), m);
            let bad = text.replacen("\"format_version\":1", "\"format_version\":9", 1);
            assert!(matches!(
                MoEModel::from_json_str(&bad),
                Err(Error::VersionMismatch { found: 9, .. })
            ));
        }
    }

    #[test]
    fn rejects_mismatched_experts() {
        let m = random_model(2, EnsemblerKind::None, 8);
        let wrong = Network::zeros_linear(5, 3);
        assert!(MoEModel::new(
            m.base().clone(),
            m.gate().clone(),
            vec![wrong.clone(), wrong],
            vec![Ensembler::None, Ensembler::None]
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn soft_mixture_matches_direct_sum(
            x in proptest::collection::vec(-3.0f64..3.0, 4),
            seed in 0u64..50,
            kind_idx in 0usize..4,
        ) {
            let kind = [EnsemblerKind::None, EnsemblerKind::Bagging, EnsemblerKind::Stacking, EnsemblerKind::Top2][kind_idx];
            let m = random_model(3, kind, seed);
            let mix = m.soft_mixture(&x).unwrap();
            let g = m.gate_distribution(&x).unwrap();
            let mut direct = vec![0.0; 3];
            for k in 0..3 {
                let e = m.ensemble_output(k, &x).unwrap();
                prop_assert!((e.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(e.iter().all(|&v| v >= 0.0));
                for c in 0..3 {
                    direct[c] += g[k] * e[c];
                }
            }
            for c in 0..3 {
                prop_assert!((mix[c] - direct[c]).abs() <= 1e-12);
            }
            let s: f64 = g.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            let p = m.top1_predict(&x).unwrap();
            prop_assert_eq!(
                m.top1_macs(p.expert),
                m.cost().macs_base + m.cost().macs_gate + m.cost().macs_expert_tail[0] + m.cost().macs_ensembler[0]
            );
        }
    }
}
