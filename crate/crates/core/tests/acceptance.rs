//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Exits non-zero on failure only when `ACCEPTANCE_STRICT` is set, so the
//! report is always printed in full under `cargo test`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use moe_forge::analysis::{base_accuracy, oracle_per_class_eval, top1_accuracy};
use moe_forge::anytime::{anytime_predict, evaluate, ilp_select, sweep_thresholds, AnytimeConfig, Policy};
use moe_forge::cli::cmd_train;
use moe_forge::data::{generate_synthetic, split, LabeledDataset, SyntheticSpec};
use moe_forge::gate_init::per_class_gate;
use moe_forge::moe::{EnsemblerKind, Gate, MoEModel, Trace};
use moe_forge::nn::{backward, batch_loss, Example, Layer, Network, Target};
use moe_forge::rng::rng_for;
use moe_forge::training::{
    elbo, em_e_step, em_m_step, run_algorithm1, run_em, Architecture, Routing, Segment, TrainPlan,
};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn run(id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let pass = out.pass && in_time;
    let timing = if in_time {
        format!("{:.1}s", elapsed.as_secs_f64())
    } else {
        format!("{:.1}s, over the {}s limit", elapsed.as_secs_f64(), limit.as_secs())
    };
    println!(
        "{} {id:>2} {name}: {} ({timing})",
        if pass { "PASS" } else { "FAIL" },
        out.detail
    );
    pass
}

// ---------------------------------------------------------------- datasets

fn lattice(classes: usize, modes: usize, dim: usize, per_mode: usize, seed: u64) -> LabeledDataset {
    generate_synthetic(&SyntheticSpec {
        num_classes: classes,
        modes_per_class: modes,
        dim,
        mode_means: None,
        mode_stddev: 1.0,
        samples_per_mode: per_mode,
        seed,
    })
    .unwrap()
    .dataset
}

/// Four classes, two modes each, laid out in two rows of a 2D plane that is
/// embedded at random in 16 dimensions. Column `c` holds class `c` on the
/// first row and class `c−1` on the second, so every mode sits next to a
/// mode of another class.
fn overlap_split(seed: u64) -> (LabeledDataset, LabeledDataset) {
    const DIM: usize = 16;
    const SCALE: f64 = 8.0;
    const ROW_GAP: f64 = 0.8;
    let mut rng = rng_for(seed, "overlap-plane");
    let unit = |rng: &mut moe_forge::rng::Rng, against: Option<&[f64]>| {
        let mut v: Vec<f64> = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Some(u) = against {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        v
    };
    let u = unit(&mut rng, None);
    let w = unit(&mut rng, Some(&u));
    let means = (0..4)
        .flat_map(|c| [(c as f64, 0.0), (((c + 1) % 4) as f64, ROW_GAP)])
        .map(|(a, b)| (0..DIM).map(|i| SCALE * (a * u[i] + b * w[i])).collect())
        .collect();
    let ds = generate_synthetic(&SyntheticSpec {
        num_classes: 4,
        modes_per_class: 2,
        dim: DIM,
        mode_means: Some(means),
        mode_stddev: 1.0,
        samples_per_mode: 500,
        seed,
    })
    .unwrap()
    .dataset;
    let mut parts = split(&ds, &[0.75, 0.25], seed).unwrap();
    let test = parts.pop().unwrap();
    (parts.pop().unwrap(), test)
}

fn plan(hidden: &[usize], k: usize, ensembler: EnsemblerKind, seed: u64) -> TrainPlan {
    let mut p = TrainPlan::new(
        Architecture {
            hidden: hidden.to_vec(),
            tap_index: 0,
        },
        k,
    );
    p.ensembler = ensembler;
    p.seed = seed;
    p
}

/// Small trained models covering every ensembler kind and K ∈ {1, 4}.
fn trained_models() -> Vec<(String, MoEModel, LabeledDataset)> {
    let mut out = Vec::new();
    for (seed, kind, k) in [
        (0, EnsemblerKind::Bagging, 1),
        (1, EnsemblerKind::Bagging, 4),
        (2, EnsemblerKind::Stacking, 4),
        (3, EnsemblerKind::Top2, 4),
        (4, EnsemblerKind::None, 4),
    ] {
        let ds = lattice(4, 2, 8, 60, seed);
        let mut parts = split(&ds, &[0.75, 0.25], seed).unwrap();
        let test = parts.pop().unwrap();
        let train = parts.pop().unwrap();
        let mut p = plan(&[16, 8], k, kind, seed);
        p.sgd.base.epochs = 15;
        p.sgd.expert.epochs = 8;
        p.sgd.ensembler.epochs = 5;
        let m = run_algorithm1(&train, &p).unwrap().model;
        out.push((format!("K={k} {}", kind_name(kind)), m, test));
    }
    out
}

fn kind_name(kind: EnsemblerKind) -> &'static str {
    match kind {
        EnsemblerKind::None => "none",
        EnsemblerKind::Bagging => "bagging",
        EnsemblerKind::Stacking => "stacking",
        EnsemblerKind::Top2 => "top2",
    }
}

// ---------------------------------------------------------------- criteria

fn perturbed(net: &Network, l: usize, idx: usize, is_bias: bool, h: f64) -> Network {
    let layers = net
        .layers()
        .iter()
        .enumerate()
        .map(|(j, layer)| {
            let mut weight = layer.weight().clone();
            let mut bias = layer.bias().to_vec();
            if j == l {
                if is_bias {
                    bias[idx] += h;
                } else {
                    weight.as_mut_slice()[idx] += h;
                }
            }
            Layer::new(weight, bias, layer.activation()).unwrap()
        })
        .collect();
    Network::new(layers, net.tap_index()).unwrap()
}

/// Zero biases put dead-layer pre-activations exactly on the ReLU kink.
fn with_random_biases(net: &Network, rng: &mut moe_forge::rng::Rng) -> Network {
    let layers = net
        .layers()
        .iter()
        .map(|layer| {
            let bias = (0..layer.out_dim()).map(|_| rng.random_range(-0.5..0.5)).collect();
            Layer::new(layer.weight().clone(), bias, layer.activation()).unwrap()
        })
        .collect();
    Network::new(layers, net.tap_index()).unwrap()
}

fn gradient_check() -> Outcome {
    let h = 1e-5;
    let mut rng = rng_for(1, "gradient-check");
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let depth = rng.random_range(2..=4);
        let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(2..=6)).collect();
        let tap = rng.random_range(0..depth - 1);
        let net = with_random_biases(&Network::random(&dims, tap, &mut rng).unwrap(), &mut rng);
        let c = *dims.last().unwrap();
        let xs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..dims[0]).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let mut soft: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = soft.iter().sum();
        soft.iter_mut().for_each(|v| *v /= s);
        let labels: Vec<usize> = (0..xs.len()).map(|_| rng.random_range(0..c)).collect();
        let weights: Vec<f64> = (0..xs.len()).map(|_| rng.random_range(0.05..1.0)).collect();
        let batch: Vec<Example<'_>> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| Example {
                x,
                target: if i % 2 == 0 {
                    Target::Class(labels[i])
                } else {
                    Target::Soft(&soft)
                },
                weight: weights[i],
            })
            .collect();
        let g = backward(&net, &batch).unwrap();
        for l in 0..net.num_layers() {
            let counts = [
                (false, net.layers()[l].weight().as_slice().len()),
                (true, net.layers()[l].bias().len()),
            ];
            for (is_bias, count) in counts {
                for idx in 0..count {
                    let plus = batch_loss(&perturbed(&net, l, idx, is_bias, h), &batch).unwrap();
                    let minus = batch_loss(&perturbed(&net, l, idx, is_bias, -h), &batch).unwrap();
                    let fd = (plus - minus) / (2.0 * h);
                    let an = if is_bias {
                        g.biases[l][idx]
                    } else {
                        g.weights[l].as_slice()[idx]
                    };
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    worst = worst.max(rel);
                }
            }
        }
    }
    Outcome::new(worst <= 1e-4, format!("worst relative error {worst:.2e} over 100 networks (limit 1e-4)"))
}

fn boundary_exactness(models: &[(String, MoEModel, LabeledDataset)]) -> Outcome {
    let mut issues = Vec::new();
    for (name, m, ds) in models {
        let at_one = evaluate(m, ds, &AnytimeConfig::new(1.0, Policy::AlphaThreshold)).unwrap();
        let base = base_accuracy(m, ds).unwrap();
        if at_one.accuracy.to_bits() != base.to_bits() {
            issues.push(format!("{name}: tau=1 accuracy {} vs base {}", at_one.accuracy, base));
        }
        let all: Vec<usize> = (0..m.num_experts()).collect();
        let cfg = AnytimeConfig::new(0.0, Policy::AlphaThreshold);
        let partial = (0..ds.len())
            .filter(|&i| anytime_predict(m, ds.x(i), &cfg).unwrap().executed != all)
            .count();
        if partial > 0 {
            issues.push(format!("{name}: {partial} samples skipped experts at tau=0"));
        }
    }
    if issues.is_empty() {
        Outcome::new(true, format!("{} models: tau=1 equals base bit for bit, tau=0 runs all experts", models.len()))
    } else {
        Outcome::new(false, issues.join("; "))
    }
}

fn ilp_optimality() -> Outcome {
    let mut rng = rng_for(2, "ilp");
    let mut mismatches = 0;
    let mut checked = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..=12usize);
        let gains: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for budget in 0..=n {
            let mut best = (f64::NEG_INFINITY, 0u32);
            for mask in 0u32..(1 << n) {
                if mask.count_ones() as usize != budget {
                    continue;
                }
                let v: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| gains[i]).sum();
                if v > best.0 {
                    best = (v, mask);
                }
            }
            let got = ilp_select(&gains, budget);
            let mask = (0..n).filter(|&i| got[i]).fold(0u32, |m, i| m | 1 << i);
            checked += 1;
            if mask != best.1 {
                mismatches += 1;
            }
        }
    }
    Outcome::new(
        mismatches == 0,
        format!("{checked} (instance, budget) pairs, {mismatches} differ from enumeration"),
    )
}

fn anti_collapse() -> Outcome {
    let mut worst_share = f64::INFINITY;
    let mut zero_weight = 0;
    for seed in 0..3 {
        let ds = lattice(2, 2, 8, 250, seed);
        for k in [4, 10] {
            let mut p = plan(&[16, 8], k, EnsemblerKind::Bagging, seed);
            p.sgd.base.epochs = 10;
            p.sgd.expert.epochs = 3;
            p.sgd.ensembler.epochs = 2;
            match run_algorithm1(&ds, &p) {
                Ok(o) => {
                    let n = ds.len() as f64;
                    for &a in &o.diagnostics.g0_assigned {
                        worst_share = worst_share.min(a as f64 / n);
                    }
                    zero_weight += o.diagnostics.smoothed_mass.iter().filter(|&&m| m <= 0.0).count();
                }
                Err(e) => return Outcome::new(false, format!("seed {seed}, K={k}: {e}")),
            }
        }
    }
    Outcome::new(
        worst_share >= 0.01 && zero_weight == 0,
        format!(
            "smallest g0 share {:.2}% (limit 1%), {zero_weight} experts with zero loss weight",
            100.0 * worst_share
        ),
    )
}

/// Mean test accuracies on the overlap set, keyed by configuration.
fn ordering_runs() -> BTreeMap<&'static str, f64> {
    let mut acc: BTreeMap<&'static str, f64> = BTreeMap::new();
    let seeds = 3;
    for seed in 0..seeds {
        let (train, test) = overlap_split(seed);
        let fit = |k: usize, kind: EnsemblerKind, routing: Routing| {
            let mut p = plan(&[32, 4], k, kind, seed);
            p.routing = routing;
            p.sgd.base.epochs = 40;
            p.sgd.expert.epochs = 20;
            run_algorithm1(&train, &p).unwrap()
        };
        let k1 = fit(1, EnsemblerKind::Bagging, Routing::PerSample);
        let k4 = fit(4, EnsemblerKind::Bagging, Routing::PerSample);
        let none = fit(4, EnsemblerKind::None, Routing::PerSample);
        let stack = fit(4, EnsemblerKind::Stacking, Routing::PerSample);
        let per_class = fit(4, EnsemblerKind::Bagging, Routing::PerClass);
        let map = per_class_gate(&per_class.g0, train.labels(), 4).unwrap();
        let mut add = |key, v: f64| *acc.entry(key).or_default() += v / seeds as f64;
        add("base", base_accuracy(&k1.model, &test).unwrap());
        add("k1", top1_accuracy(&k1.model, &test).unwrap());
        add("k4", top1_accuracy(&k4.model, &test).unwrap());
        add("none", top1_accuracy(&none.model, &test).unwrap());
        add("stacking", top1_accuracy(&stack.model, &test).unwrap());
        add("per_class", top1_accuracy(&per_class.model, &test).unwrap());
        add(
            "oracle",
            oracle_per_class_eval(&per_class.model, &map.class_to_expert, &test).unwrap(),
        );
    }
    acc
}

fn pts(v: f64) -> f64 {
    100.0 * v
}

fn mixture_ordering(acc: &BTreeMap<&'static str, f64>) -> Outcome {
    let (base, k1, k4) = (acc["base"], acc["k1"], acc["k4"]);
    Outcome::new(
        k4 >= k1 && k1 >= base && pts(k4 - base) >= 2.0,
        format!(
            "K=4 {:.2} >= K=1 {:.2} >= base {:.2}, gain {:.2} points (need 2)",
            pts(k4),
            pts(k1),
            pts(base),
            pts(k4 - base)
        ),
    )
}

fn routing_ordering(acc: &BTreeMap<&'static str, f64>) -> Outcome {
    let (per_sample, per_class, oracle) = (acc["k4"], acc["per_class"], acc["oracle"]);
    Outcome::new(
        pts(per_sample - per_class) >= 1.0 && pts(oracle - per_class) >= 1.0,
        format!(
            "per-sample {:.2}, per-class {:.2}, per-class+oracle {:.2}: margins {:.2} and {:.2} points (need 1)",
            pts(per_sample),
            pts(per_class),
            pts(oracle),
            pts(per_sample - per_class),
            pts(oracle - per_class)
        ),
    )
}

fn ensembler_ordering(acc: &BTreeMap<&'static str, f64>) -> Outcome {
    let (bagging, stacking, none) = (acc["k4"], acc["stacking"], acc["none"]);
    Outcome::new(
        pts(bagging - none) >= 0.5 && pts(stacking - none) >= 0.5,
        format!(
            "bagging {:.2}, stacking {:.2}, none {:.2}: margins {:.2} and {:.2} points (need 0.5)",
            pts(bagging),
            pts(stacking),
            pts(none),
            pts(bagging - none),
            pts(stacking - none)
        ),
    )
}

fn em_checks() -> Outcome {
    // bit-identical reduction
    let ds = lattice(4, 2, 8, 50, 5);
    let mut p = plan(&[16, 8], 4, EnsemblerKind::Stacking, 5);
    p.sgd.base.epochs = 10;
    p.sgd.expert.epochs = 6;
    p.sgd.ensembler.epochs = 3;
    let a = serde_json::to_string(&run_algorithm1(&ds, &p).unwrap().model).unwrap();
    let b = serde_json::to_string(&run_em(&ds, &p).unwrap().model).unwrap();
    if a != b {
        return Outcome::new(false, "N_E=0 checkpoint differs from the asynchronous one");
    }

    // linear experts and gate, full-batch descent without momentum
    let mut rng = rng_for(6, "em-toy");
    let means = (0..6)
        .map(|_| (0..4).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    let ds = generate_synthetic(&SyntheticSpec {
        num_classes: 3,
        modes_per_class: 2,
        dim: 4,
        mode_means: Some(means),
        mode_stddev: 1.0,
        samples_per_mode: 40,
        seed: 6,
    })
    .unwrap()
    .dataset;
    let mut p = TrainPlan::new(
        Architecture {
            hidden: vec![8],
            tap_index: 0,
        },
        3,
    );
    p.seed = 6;
    p.gamma = 0.0;
    p.sgd.base.epochs = 5;
    for cfg in [&mut p.sgd.expert, &mut p.sgd.gate] {
        cfg.momentum = 0.0;
        cfg.batch_size = ds.len();
        cfg.learning_rate = 0.02;
    }
    p.sgd.expert.epochs = 2;
    p.sgd.gate.epochs = 10;
    let mut model = run_algorithm1(&ds, &p).unwrap().model;
    let mut trace = Vec::new();
    let mut worst_drop: f64 = 0.0;
    let mut start = p.sgd.expert.epochs;
    for index in 1..=4 {
        let q = em_e_step(&model, &ds).unwrap();
        let after_e = elbo(&model, &q.q, &ds).unwrap();
        if let Some(&prev) = trace.last() {
            worst_drop = worst_drop.max(prev - after_e);
        }
        let segment = Segment {
            index,
            epochs: start..start + 5,
        };
        start += 5;
        model = em_m_step(&model, &q, &ds, &p, &segment).unwrap();
        let after_m = elbo(&model, &q.q, &ds).unwrap();
        worst_drop = worst_drop.max(after_e - after_m);
        trace.push(after_e);
        trace.push(after_m);
    }
    let shown: Vec<String> = trace.iter().map(|v| format!("{v:.4}")).collect();
    Outcome::new(
        worst_drop <= 1e-6,
        format!(
            "N_E=0 bit-identical; ELBO {} (largest drop {worst_drop:.1e}, slack 1e-6)",
            shown.join(" -> ")
        ),
    )
}

fn mac_accounting(models: &[(String, MoEModel, LabeledDataset)]) -> Outcome {
    let mut rng = rng_for(9, "mac-fixture");
    let base = Network::random(&[4, 8, 3], 0, &mut rng).unwrap();
    let gate = Gate::new(Network::random(&[8, 2], 0, &mut rng).unwrap()).unwrap();
    let experts = (0..2).map(|_| Network::random(&[8, 3], 0, &mut rng).unwrap()).collect();
    let m = MoEModel::new(base, gate, experts, vec![moe_forge::moe::Ensembler::Bagging; 2]).unwrap();
    let base_only = Trace {
        base: true,
        ..Trace::default()
    };
    let routed = Trace {
        base: true,
        gate: true,
        experts: vec![0],
        ensemblers: vec![0],
        ..Trace::default()
    };
    let fixtures = [
        (m.mac_count(&Trace::default()).unwrap(), 0),
        (m.mac_count(&base_only).unwrap(), 56),
        (m.mac_count(&routed).unwrap(), 96),
    ];
    if let Some((got, want)) = fixtures.iter().find(|(g, w)| g != w) {
        return Outcome::new(false, format!("fixture gave {got} MACs, expected {want}"));
    }

    let taus: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let mut violations = Vec::new();
    for (name, m, ds) in models {
        for policy in [Policy::AlphaThreshold, Policy::BaseConfidence, Policy::GateConfidence] {
            let curve = sweep_thresholds(m, ds, &taus, policy).unwrap();
            for w in curve.points.windows(2) {
                if w[1].mean_macs > w[0].mean_macs {
                    violations.push(format!("{name} {} at tau {}", policy.name(), w[1].tau));
                }
            }
        }
    }
    Outcome::new(
        violations.is_empty(),
        if violations.is_empty() {
            format!("fixtures 0/56/96 exact; mean MACs non-increasing on {} models x 3 policies", models.len())
        } else {
            format!("MACs increase: {}", violations.join(", "))
        },
    )
}

fn write_config(dir: &Path, workers: usize) -> PathBuf {
    let config = serde_json::json!({
        "seed": 11,
        "output_dir": "out",
        "data": {"synthetic": {
            "num_classes": 4, "modes_per_class": 2, "dim": 8,
            "mode_stddev": 1.0, "samples_per_mode": 60, "seed": 4
        }},
        "model": {"hidden": [16, 8], "tap_index": 0, "num_experts": 4, "ensembler": "stacking"},
        "train": {
            "workers": workers,
            "em": {"steps": 1},
            "sgd": {"base": {"epochs": 10}, "expert": {"epochs": 6}, "ensembler": {"epochs": 3}}
        }
    });
    fs::create_dir_all(dir).unwrap();
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

/// Checkpoint and CSV bytes, keyed by file name.
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy();
            name == "model.json" || name.ends_with(".csv")
        })
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn determinism() -> Outcome {
    if std::env::var_os(moe_forge::config::WORKERS_ENV).is_some() {
        return Outcome::new(false, format!("{} is set; unset it to compare worker counts", moe_forge::config::WORKERS_ENV));
    }
    let root = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for (name, workers) in [("a", 1), ("b", 1), ("c", 4)] {
        let cfg = write_config(&root.path().join(name), workers);
        let report = cmd_train(&cfg).unwrap();
        runs.push((name, workers, artifacts(&report.output_dir)));
    }
    let reference = &runs[0].2;
    if !reference.contains_key("model.json") || reference.len() < 2 {
        return Outcome::new(false, "missing artifacts");
    }
    let differing: Vec<String> = runs[1..]
        .iter()
        .flat_map(|(name, workers, files)| {
            let mut diff: Vec<String> = reference
                .iter()
                .filter(|(k, v)| files.get(*k) != Some(v))
                .map(|(k, _)| format!("{k} (run {name}, {workers} workers)"))
                .collect();
            if files.len() != reference.len() {
                diff.push(format!("file set (run {name})"));
            }
            diff
        })
        .collect();
    Outcome::new(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across 3 runs (1, 1 and 4 workers)", reference.len())
        } else {
            format!("differs: {}", differing.join(", "))
        },
    )
}

fn main() {
    let secs = Duration::from_secs;
    let mut results = Vec::new();
    results.push(run(1, "gradient correctness", secs(5), gradient_check));

    let mut models = Vec::new();
    results.push(run(2, "anytime boundary exactness", secs(10), || {
        models = trained_models();
        boundary_exactness(&models)
    }));
    results.push(run(3, "exit assignment optimality", secs(30), ilp_optimality));
    results.push(run(4, "anti-collapse", secs(120), anti_collapse));

    let mut acc = BTreeMap::new();
    results.push(run(5, "mixture vs ensembling vs base", secs(300), || {
        acc = ordering_runs();
        mixture_ordering(&acc)
    }));
    results.push(run(6, "per-sample vs per-class routing", secs(300), || routing_ordering(&acc)));
    results.push(run(7, "ensemblers vs no ensembling", secs(300), || ensembler_ordering(&acc)));
    results.push(run(8, "EM reduction and ELBO monotonicity", secs(120), em_checks));
    results.push(run(9, "MAC accounting", secs(10), || mac_accounting(&models)));
    results.push(run(10, "determinism", secs(600), determinism));

    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed < results.len() && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
