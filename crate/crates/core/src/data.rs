//! Labeled datasets: synthetic mode mixtures, CSV files, stratified splits
//! and weighted batch sampling.

use std::collections::HashSet;
use std::fs::File;
use std::path::Path;
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json::fmt_f64;
use crate::matrix::Matrix;
use crate::rng::{rng_for, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if labels.len() != features.rows() {
            return Err(Error::Shape {
                context: "labels",
                expected: features.rows(),
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} >= num_classes {num_classes}"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        LabeledDataset::new(
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    /// Writes `label,f1,..,fD` rows with a header line.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "label")?;
        for j in 0..self.dim() {
            write!(w, ",x{j}")?;
        }
        writeln!(w)?;
        for i in 0..self.len() {
            write!(w, "{}", self.labels[i])?;
            for &v in self.x(i) {
                write!(w, ",{}", fmt_f64(v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Gaussian mode mixture: `num_classes · modes_per_class` isotropic modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub modes_per_class: usize,
    pub dim: usize,
    /// One mean per mode, class-major (`mode = class · M + j`). Generated on
    /// a lattice when absent.
    #[serde(default)]
    pub mode_means: Option<Vec<Vec<f64>>>,
    pub mode_stddev: f64,
    pub samples_per_mode: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn num_modes(&self) -> usize {
        self.num_classes * self.modes_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 || self.samples_per_mode == 0 {
            return Err(Error::invalid(
                "num_classes, dim and samples_per_mode must be positive",
            ));
        }
        if self.modes_per_class == 0 {
            return Err(Error::invalid("modes_per_class must be at least 1"));
        }
        if !(self.mode_stddev > 0.0 && self.mode_stddev.is_finite()) {
            return Err(Error::invalid("mode_stddev must be positive"));
        }
        if let Some(means) = &self.mode_means {
            if means.len() != self.num_modes() {
                return Err(Error::Shape {
                    context: "mode_means",
                    expected: self.num_modes(),
                    got: means.len(),
                });
            }
            if let Some(m) = means.iter().find(|m| m.len() != self.dim) {
                return Err(Error::Shape {
                    context: "mode mean dimension",
                    expected: self.dim,
                    got: m.len(),
                });
            }
        }
        Ok(())
    }

    /// Distinct points of the lattice `{0, s, .., (b-1)s}^D` with
    /// `s = 10 · stddev` and the smallest base `b ≥ 2` that has enough points.
    pub fn lattice_means(&self, rng: &mut Rng) -> Vec<Vec<f64>> {
        let modes = self.num_modes();
        let spacing = 10.0 * self.mode_stddev;
        let mut base = 2usize;
        while (base as f64).powi(self.dim as i32) < modes as f64 {
            base += 1;
        }
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(modes);
        while out.len() < modes {
            let digits: Vec<usize> = (0..self.dim).map(|_| rng.random_range(0..base)).collect();
            if seen.insert(digits.clone()) {
                out.push(digits.iter().map(|&d| d as f64 * spacing).collect());
            }
        }
        out
    }
}

/// A generated dataset plus the mode of every sample (oracle-only metadata).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: LabeledDataset,
    pub modes: Vec<usize>,
    pub means: Vec<Vec<f64>>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, "synthetic");
    let means = match &spec.mode_means {
        Some(m) => m.clone(),
        None => spec.lattice_means(&mut rng),
    };
    let n = spec.num_modes() * spec.samples_per_mode;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    let mut modes = Vec::with_capacity(n);
    for (mode, mean) in means.iter().enumerate() {
        let class = mode / spec.modes_per_class;
        for _ in 0..spec.samples_per_mode {
            for &mu in mean {
                let z: f64 = rng.sample(StandardNormal);
                data.push(mu + spec.mode_stddev * z);
            }
            labels.push(class);
            modes.push(mode);
        }
    }
    let dataset = LabeledDataset::new(
        Matrix::new(n, spec.dim, data)?,
        labels,
        spec.num_classes,
    )?;
    Ok(SyntheticData {
        dataset,
        modes,
        means,
    })
}

/// Parses `label,f1,..,fD` rows. A first row whose first cell is not an
/// integer is treated as a header. Without `num_classes` the class count is
/// `max label + 1`.
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut dim: Option<usize> = None;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(row as u64 + 1, |p| p.line());
        let Some(first) = record.get(0) else { continue };
        if record.len() == 1 && first.is_empty() {
            continue;
        }
        let label: usize = match first.parse() {
            Ok(l) => l,
            Err(_) if row == 0 => continue,
            Err(_) => return Err(parse_err(line, format!("label {first:?} is not a class index"))),
        };
        if let Some(c) = num_classes {
            if label >= c {
                return Err(parse_err(line, format!("label {label} >= declared class count {c}")));
            }
        }
        let d = record.len() - 1;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(parse_err(
                    line,
                    format!("expected {expected} features, found {d}"),
                ))
            }
            _ => {}
        }
        for cell in record.iter().skip(1) {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, format!("feature {cell:?} is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("feature {cell:?} is not finite")));
            }
            values.push(v);
        }
        labels.push(label);
    }
    let d = dim.ok_or(Error::EmptyDataset)?;
    if d == 0 {
        return Err(parse_err(1, "rows have no features".into()));
    }
    let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    LabeledDataset::new(Matrix::new(labels.len(), d, values)?, labels, c)
}

/// Stratified split. Per class, the stratum is shuffled and cut by the
/// fractions, with rounding remainders going to the largest fractional
/// parts. Each split keeps the original sample order.
pub fn split(ds: &LabeledDataset, fractions: &[f64], seed: u64) -> Result<Vec<LabeledDataset>> {
    if fractions.is_empty() || fractions.iter().any(|&f| f.is_nan() || f < 0.0) {
        return Err(Error::invalid("fractions must be non-negative and nonempty"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("fractions sum to {total}, not 1")));
    }
    let mut rng = rng_for(seed, "split");
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for class in 0..ds.num_classes() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let counts = apportion(members.len(), fractions);
        let mut start = 0;
        for (s, &count) in counts.iter().enumerate() {
            if count == 0 {
                return Err(Error::EmptyStratum { class, split: s });
            }
            parts[s].extend_from_slice(&members[start..start + count]);
            start += count;
        }
    }
    parts
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            ds.subset(&idx)
        })
        .collect()
}

/// Largest-remainder apportionment of `n` items.
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// I.i.d. sampling of indices with probability proportional to weights.
#[derive(Debug, Clone)]
pub struct WeightedSampler {
    dist: WeightedIndex<f64>,
}

impl WeightedSampler {
    pub fn new(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid("sampling weights must be finite and >= 0"));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::ZeroWeights);
        }
        let dist = WeightedIndex::new(weights).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(Self { dist })
    }

    pub fn draw(&mut self, rng: &mut Rng) -> usize {
        self.dist.sample(rng)
    }
}

/// Endless stream of index batches drawn by [`WeightedSampler`].
#[derive(Debug, Clone)]
pub struct WeightedBatches {
    sampler: WeightedSampler,
    rng: Rng,
    batch_size: usize,
}

impl Iterator for WeightedBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(
            (0..self.batch_size)
                .map(|_| self.sampler.draw(&mut self.rng))
                .collect(),
        )
    }
}

pub fn weighted_batches(
    ds: &LabeledDataset,
    weights: &[f64],
    batch_size: usize,
    seed: u64,
) -> Result<WeightedBatches> {
    if weights.len() != ds.len() {
        return Err(Error::Shape {
            context: "sampling weights",
            expected: ds.len(),
            got: weights.len(),
        });
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    Ok(WeightedBatches {
        sampler: WeightedSampler::new(weights)?,
        rng: rng_for(seed, "weighted-batches"),
        batch_size,
    })
}
