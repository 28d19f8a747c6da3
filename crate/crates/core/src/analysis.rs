//! Diagnostic tables: expert specialization, reliability, oracle routing
//! and gate disagreement.

use std::io::Write;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::json::fmt_f64;
use crate::matrix::{argmax, Matrix};
use crate::moe::MoEModel;
use crate::nn::clamped_ln;

pub const DEFAULT_RELIABILITY_BINS: usize = 10;

/// Samples per (expert, class) where the expert had the lowest loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecializationTable {
    /// `K × C` raw counts.
    pub counts: Vec<Vec<usize>>,
}

impl SpecializationTable {
    /// Counts divided by each class's total; empty classes stay 0.
    pub fn per_class(&self) -> Matrix {
        let k = self.counts.len();
        let c = self.counts.first().map_or(0, Vec::len);
        let mut m = Matrix::zeros(k, c);
        for j in 0..c {
            let total: usize = self.counts.iter().map(|r| r[j]).sum();
            if total > 0 {
                for i in 0..k {
                    m.set(i, j, self.counts[i][j] as f64 / total as f64);
                }
            }
        }
        m
    }

    /// `expert,class,count,fraction_of_class`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let norm = self.per_class();
        writeln!(w, "expert,class,count,fraction_of_class")?;
        for (k, row) in self.counts.iter().enumerate() {
            for (c, &n) in row.iter().enumerate() {
                writeln!(w, "{k},{c},{n},{}", fmt_f64(norm.get(k, c)))?;
            }
        }
        Ok(())
    }
}

/// Per sample, the raw expert with the smallest cross-entropy on the true
/// label (ties → lowest index).
pub fn best_experts(m: &MoEModel, ds: &LabeledDataset) -> Result<Vec<usize>> {
    (0..ds.len())
        .map(|i| {
            let y = ds.label(i);
            let mut pass = m.pass(ds.x(i))?;
            let mut best = 0;
            let mut best_loss = f64::INFINITY;
            for j in 0..m.num_experts() {
                let loss = -clamped_ln(pass.expert(j)?[y]);
                if loss < best_loss {
                    best = j;
                    best_loss = loss;
                }
            }
            Ok(best)
        })
        .collect()
}

/// Per sample, the gate's top expert.
pub fn gate_assignments(m: &MoEModel, ds: &LabeledDataset) -> Result<Vec<usize>> {
    (0..ds.len()).map(|i| Ok(argmax(&m.gate_distribution(ds.x(i))?))).collect()
}

/// Credits each sample's [`best_experts`] choice under its label.
pub fn specialization_table(m: &MoEModel, ds: &LabeledDataset) -> Result<SpecializationTable> {
    let mut counts = vec![vec![0; ds.num_classes()]; m.num_experts()];
    for (i, k) in best_experts(m, ds)?.into_iter().enumerate() {
        counts[k][ds.label(i)] += 1;
    }
    Ok(SpecializationTable { counts })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// NaN for an empty bin.
    pub mean_confidence: f64,
    /// NaN for an empty bin.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityTable {
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityTable {
    /// `bin,lower,upper,count,mean_confidence,accuracy`; empty bins print
    /// `nan`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let f = |v: f64| if v.is_nan() { "nan".to_string() } else { fmt_f64(v) };
        writeln!(w, "bin,lower,upper,count,mean_confidence,accuracy")?;
        for (b, bin) in self.bins.iter().enumerate() {
            writeln!(
                w,
                "{b},{},{},{},{},{}",
                fmt_f64(bin.lower),
                fmt_f64(bin.upper),
                bin.count,
                f(bin.mean_confidence),
                f(bin.accuracy)
            )?;
        }
        Ok(())
    }
}

/// Equal-width bins `[i/B, (i+1)/B)` with the last bin closed at 1.
pub fn reliability_table(confidences: &[f64], correct: &[bool], bins: usize) -> Result<ReliabilityTable> {
    if confidences.len() != correct.len() {
        return Err(Error::Shape {
            context: "confidences vs correctness flags",
            expected: confidences.len(),
            got: correct.len(),
        });
    }
    if bins == 0 {
        return Err(Error::invalid("at least one bin is required"));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::invalid(format!("confidence {c} outside [0, 1]")));
        }
        let b = ((c * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += c;
        hits[b] += usize::from(ok);
    }
    let bins = (0..bins)
        .map(|b| {
            let n = count[b] as f64;
            ReliabilityBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: count[b],
                mean_confidence: if count[b] == 0 { f64::NAN } else { conf[b] / n },
                accuracy: if count[b] == 0 { f64::NAN } else { hits[b] as f64 / n },
            }
        })
        .collect();
    Ok(ReliabilityTable { bins })
}

/// Base-model confidence and correctness per sample.
pub fn base_reliability(m: &MoEModel, ds: &LabeledDataset, bins: usize) -> Result<ReliabilityTable> {
    let mut conf = Vec::with_capacity(ds.len());
    let mut ok = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let p = m.base().probs(ds.x(i))?;
        let top = argmax(&p);
        conf.push(p[top].clamp(0.0, 1.0));
        ok.push(top == ds.label(i));
    }
    reliability_table(&conf, &ok, bins)
}

/// Accuracy when every sample goes to `class_map[label]`.
pub fn oracle_per_class_eval(m: &MoEModel, class_map: &[usize], ds: &LabeledDataset) -> Result<f64> {
    if class_map.len() != ds.num_classes() {
        return Err(Error::Shape {
            context: "class map",
            expected: ds.num_classes(),
            got: class_map.len(),
        });
    }
    if let Some(&bad) = class_map.iter().find(|&&k| k >= m.num_experts()) {
        return Err(Error::invalid(format!("class map names expert {bad}")));
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hits = 0;
    for i in 0..ds.len() {
        let y = ds.label(i);
        let out = m.ensemble_output(class_map[y], ds.x(i))?;
        hits += usize::from(argmax(&out) == y);
    }
    Ok(hits as f64 / ds.len() as f64)
}

/// Routes by the gate's top expert; accuracy of its ensembled output.
pub fn top1_accuracy(m: &MoEModel, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hits = 0;
    for i in 0..ds.len() {
        hits += usize::from(argmax(&m.top1_predict(ds.x(i))?.probs) == ds.label(i));
    }
    Ok(hits as f64 / ds.len() as f64)
}

pub fn base_accuracy(m: &MoEModel, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hits = 0;
    for i in 0..ds.len() {
        hits += usize::from(argmax(&m.base().probs(ds.x(i))?) == ds.label(i));
    }
    Ok(hits as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassTransition {
    pub class: usize,
    pub from: usize,
    pub to: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Disagreement {
    pub fraction: f64,
    /// `K × K`; entry `[a][b]` counts samples moving from `a` to `b`.
    pub transitions: Vec<Vec<usize>>,
    /// Off-diagonal moves per class, by count (descending), then class,
    /// source and target.
    pub per_class: Vec<ClassTransition>,
}

impl Disagreement {
    /// `class,from_expert,to_expert,count`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "class,from_expert,to_expert,count")?;
        for t in &self.per_class {
            writeln!(w, "{},{},{},{}", t.class, t.from, t.to, t.count)?;
        }
        Ok(())
    }
}

pub fn gate_disagreement(a: &[usize], b: &[usize], labels: &[usize], num_experts: usize) -> Result<Disagreement> {
    if a.len() != b.len() || a.len() != labels.len() {
        return Err(Error::invalid("assignment and label vectors differ in length"));
    }
    if a.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if a.iter().chain(b).any(|&k| k >= num_experts) {
        return Err(Error::invalid("assignment names an unknown expert"));
    }
    let mut transitions = vec![vec![0; num_experts]; num_experts];
    let mut per_class = std::collections::BTreeMap::new();
    let mut moved = 0;
    for ((&x, &y), &c) in a.iter().zip(b).zip(labels) {
        transitions[x][y] += 1;
        if x != y {
            moved += 1;
            *per_class.entry((c, x, y)).or_insert(0usize) += 1;
        }
    }
    let mut per_class: Vec<ClassTransition> = per_class
        .into_iter()
        .map(|((class, from, to), count)| ClassTransition { class, from, to, count })
        .collect();
    per_class.sort_by(|p, q| q.count.cmp(&p.count).then((p.class, p.from, p.to).cmp(&(q.class, q.from, q.to))));
    Ok(Disagreement {
        fraction: moved as f64 / a.len() as f64,
        transitions,
        per_class,
    })
}
