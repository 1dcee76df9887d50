//! Acceptance suite. Each check prints one PASS/FAIL line; the process exits
//! nonzero if any check fails.

mod common;

use std::f64::consts::PI;
use std::path::Path;
use std::time::{Duration, Instant};

use care_core::alignment::{check_gradients, cycle_consistency_loss, AlignmentKind, AlignmentOptions};
use care_core::annotations::{load_auto, DetectionDataset, Domain, LoadOptions};
use care_core::content_stats::{inverse_frequency_weights, BoxRatioModel, Kde2, Smoothing, WeightMode, MIN_BANDWIDTH};
use care_core::toy::{
    check_model_gradients, fixtures, generate_domain, to_dataset, AlignmentTerm, ModelShape, ToyModel, WeightedInstance,
};
use care_core::trainer::{prepare_data, CareConfig, CareWeights, DataConfig, Method, Trainer};
use care_core::verify::identity_report;
use common::{care, fixture, golden, read, s, without_wall_time};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn within(limit: Duration, started: Instant) -> Result<String, String> {
    let took = started.elapsed();
    check(
        took < limit,
        format!("{:.2}s (limit {}s)", took.as_secs_f64(), limit.as_secs()),
    )
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn identity() -> Outcome {
    let started = Instant::now();
    let report = identity_report(1000, 0);
    let main = report.max_abs_discrepancy;
    let equal = report.max_abs_discrepancy_equal_appearance;
    let time = within(Duration::from_secs(10), started);
    let msg = format!(
        "max |lhs-rhs| {main:.3e}, equal appearance {equal:.3e}, {}",
        time.clone().unwrap_or_else(|e| e)
    );
    check(main < 1e-10 && equal < 1e-10 && time.is_ok(), msg)
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_cycle: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(1..=6);
        let fs = random_matrix(rng.random_range(2..=6), d, &mut rng);
        let ft = random_matrix(rng.random_range(1..=6), d, &mut rng);
        worst_cycle = worst_cycle.max(check_gradients(fs.view(), ft.view(), 1e-5).unwrap());
    }

    let spec = fixtures::imbalanced_shift();
    let mut worst_model: f64 = 0.0;
    for case in 0..100u64 {
        let source = generate_domain(&spec, Domain::Source, rng.random_range(4..=12), case).unwrap();
        let target = generate_domain(&spec, Domain::Target, rng.random_range(2..=8), case + 1000).unwrap();
        let shape = ModelShape {
            raw_dim: source[0].features.len(),
            hidden: rng.random_range(2..=8),
            embed_dim: rng.random_range(2..=6),
            num_classes: spec.num_classes(),
        };
        let model = ToyModel::init(shape, case);
        let batch: Vec<WeightedInstance> = source
            .iter()
            .chain(&target)
            .map(|instance| WeightedInstance {
                instance,
                weight: rng.random_range(0.2..4.0),
            })
            .collect();
        let kind = [AlignmentKind::Cycle, AlignmentKind::Mmd, AlignmentKind::None][case as usize % 3];
        let term = AlignmentTerm {
            kind,
            options: AlignmentOptions {
                symmetric: rng.random(),
                max_per_class: None,
            },
        };
        let lambda = rng.random_range(0.0..2.0);
        worst_model = worst_model.max(check_model_gradients(&model, &batch, lambda, term, 1e-5));
    }
    let time = within(Duration::from_secs(30), started);
    let msg = format!(
        "cycle worst rel err {worst_cycle:.2e}, model worst rel err {worst_model:.2e}, {}",
        time.clone().unwrap_or_else(|e| e)
    );
    check(worst_cycle < 1e-6 && worst_model < 1e-5 && time.is_ok(), msg)
}

fn load(name: &str, domain: Domain) -> DetectionDataset {
    load_auto(fixture(name), None, domain, LoadOptions::default()).unwrap()
}

/// Dataset pairs used by the weighting checks: the COCO pair, the identical
/// toy file against itself and a freshly generated toy source/target pair.
fn dataset_pairs() -> Vec<(String, DetectionDataset, DetectionDataset)> {
    let spec = fixtures::imbalanced_shift();
    let classes = spec.classes.clone();
    let toy = |domain, n, seed| to_dataset(&generate_domain(&spec, domain, n, seed).unwrap(), &classes, domain);
    vec![
        (
            "coco".into(),
            load("coco_source.json", Domain::Source),
            load("coco_target.json", Domain::Target),
        ),
        (
            "toy_identical".into(),
            load("toy_identical.jsonl", Domain::Source),
            load("toy_identical.jsonl", Domain::Target),
        ),
        (
            "toy_generated".into(),
            toy(Domain::Source, 3000, 11),
            toy(Domain::Target, 300, 12),
        ),
    ]
}

fn reweighting() -> Outcome {
    let mut failures = Vec::new();
    let mut count = 0usize;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (name, source, target) in dataset_pairs() {
        let model = BoxRatioModel::fit(&source, &target, Smoothing::default(), MIN_BANDWIDTH).unwrap();
        for ann in source.annotations.iter().chain(&target.annotations) {
            let v = model.box_ratio(ann, WeightMode::Smoothed).v;
            count += 1;
            lo = lo.min(v);
            hi = hi.max(v);
            if !(1.0..11.0).contains(&v) {
                failures.push(format!("{name}: v = {v}"));
            }
        }
    }

    let at_one = Smoothing::default().squash(1.0);
    let independent = 20.0 / (1.0 + (-1.0f64).exp()) - 9.0;
    if (at_one - 5.621172).abs() > 1e-6 || (at_one - independent).abs() > 1e-12 {
        failures.push(format!("squash(1) = {at_one}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = rng.random_range(1..=30);
        let counts: Vec<usize> = (0..k).map(|_| rng.random_range(1..=5000)).collect();
        let total: usize = counts.iter().sum();
        let w = inverse_frequency_weights(&counts).unwrap();
        let mass: f64 = counts.iter().enumerate().map(|(c, &n)| w.get(c) * n as f64).sum();
        worst = worst.max((mass - total as f64).abs() / total as f64);
    }
    if worst > 1e-9 {
        failures.push(format!("conservation rel err {worst:e}"));
    }
    let msg = format!(
        "{count} smoothed weights in [{lo:.4}, {hi:.4}], squash(1) = {at_one:.7}, conservation rel err {worst:.1e}"
    );
    if failures.is_empty() {
        Ok(msg)
    } else {
        Err(format!("{msg}; {}", failures.join("; ")))
    }
}

fn brute_pdf(points: &[[f64; 2]], h: [f64; 2], p: [f64; 2]) -> f64 {
    let mut acc = 0.0;
    for x in points {
        let u = (p[0] - x[0]) / h[0];
        let v = (p[1] - x[1]) / h[1];
        acc += (-0.5 * (u * u + v * v)).exp();
    }
    acc / (2.0 * PI * h[0] * h[1] * points.len() as f64)
}

fn kde() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for n in 1..=50 {
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
        let kde = Kde2::fit(&pts, MIN_BANDWIDTH).unwrap();
        for _ in 0..20 {
            let q = [rng.random_range(-0.2..1.2), rng.random_range(-0.2..1.2)];
            let want = brute_pdf(&pts, kde.bandwidth(), q);
            if want > 0.0 {
                worst = worst.max((kde.pdf(q) - want).abs() / want);
            }
        }
    }

    let mut masses = Vec::new();
    for (name, source, target) in dataset_pairs().into_iter().filter(|p| p.0 != "toy_generated") {
        let model = BoxRatioModel::fit(&source, &target, Smoothing::default(), MIN_BANDWIDTH).unwrap();
        for (part, cond) in [
            ("size_source", &model.size_source),
            ("size_target", &model.size_target),
            ("loc_source", &model.loc_source),
            ("loc_target", &model.loc_target),
        ] {
            for c in 0..source.num_classes() {
                if let Some(k) = cond.class(c) {
                    masses.push((format!("{name}/{part}/{c}"), k.grid_mass(-0.5, 1.5, 400)));
                }
            }
        }
    }
    let bad: Vec<_> = masses.iter().filter(|(_, m)| !(0.98..=1.0).contains(m)).collect();
    let (lo, hi) = masses
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (_, m)| {
            (a.min(*m), b.max(*m))
        });
    let msg = format!(
        "pdf worst rel err {worst:.1e}; {} fitted class densities, grid mass in [{lo:.5}, {hi:.5}]",
        masses.len()
    );
    check(
        worst <= 1e-12 && bad.is_empty() && !masses.is_empty(),
        format!("{msg} {bad:?}"),
    )
}

fn baseline_equivalence() -> Outcome {
    let spec = fixtures::imbalanced_shift();
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for seed in 0..3u64 {
        let data_cfg = DataConfig {
            source_train: 600,
            target_train: 150,
            target_test: 100,
            target_fraction: 1.0,
            seed,
        };
        let data = prepare_data(&spec, &data_cfg).unwrap();
        let mixing = CareConfig {
            method: Method::Mixing,
            steps: 300,
            seed,
            ..CareConfig::default()
        };
        let care = CareConfig {
            method: Method::Care,
            lambda: 0.0,
            ..mixing.clone()
        };
        let mut a = Trainer::new(&mixing, &data).unwrap();
        let mut b = Trainer::with_weights(&care, &data, CareWeights::unit()).unwrap();
        for _ in 0..mixing.steps {
            a.step();
            b.step();
            steps += 1;
            let diff = a
                .model()
                .params()
                .iter()
                .zip(b.model().params())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            worst = worst.max(diff);
        }
    }
    check(
        worst <= 1e-12,
        format!("{steps} steps over 3 seeds, max |param diff| {worst:.1e}"),
    )
}

fn medians(report: &Value) -> Vec<(String, f64, Vec<f64>)> {
    report["cells"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| {
            let runs = c["runs"]
                .as_array()
                .unwrap()
                .iter()
                .map(|r| r["balanced_accuracy"].as_f64().unwrap())
                .collect();
            (
                c["cell"]["name"].as_str().unwrap().to_string(),
                c["balanced_accuracy"]["median"].as_f64().unwrap(),
                runs,
            )
        })
        .collect()
}

fn ordering() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("bench.toml");
    if let Err(e) = care_core::cli::cmd_bench(&cfg, dir.path()) {
        return Err(format!("bench failed: {e}"));
    }
    let time = within(Duration::from_secs(300), started);
    let got = read(&dir.path().join("bench.json"));
    let frozen = got == read(&golden("bench").join("bench.json"));
    let report: Value = serde_json::from_slice(&got).unwrap();
    let cells = medians(&report);
    let find = |name: &str| {
        cells
            .iter()
            .find(|c| c.0 == name)
            .unwrap_or_else(|| panic!("cell {name}"))
    };
    let (mix, align, full) = (find("mixing"), find("mixing+cycle"), find("care"));
    let wins = full.2.iter().zip(&mix.2).filter(|(c, m)| c > m).count();

    let clauses = [
        (
            full.1 >= align.1,
            format!("care {:.4} >= mixing+cycle {:.4}", full.1, align.1),
        ),
        (
            align.1 >= mix.1,
            format!("mixing+cycle {:.4} >= mixing {:.4}", align.1, mix.1),
        ),
        (wins >= 4, format!("care beats mixing in {wins}/{} seeds", full.2.len())),
        (frozen, "matches frozen regression values".to_string()),
        (time.is_ok(), time.clone().unwrap_or_else(|e| e)),
    ];
    let msg = clauses
        .iter()
        .map(|(ok, m)| format!("{}{m}", if *ok { "" } else { "NOT " }))
        .collect::<Vec<_>>()
        .join("; ");
    check(clauses.iter().all(|c| c.0), msg)
}

fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut q = Array2::<f64>::from_shape_fn((d, d), |_| rng.sample(StandardNormal));
    for i in 0..d {
        for j in 0..i {
            let proj = q.column(i).dot(&q.column(j));
            let cj = q.column(j).to_owned();
            q.column_mut(i).scaled_add(-proj, &cj);
        }
        let norm = q.column(i).dot(&q.column(i)).sqrt();
        q.column_mut(i).mapv_inplace(|v| v / norm);
    }
    q
}

fn cycle_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let loss = |s: &Array2<f64>, t: &Array2<f64>| cycle_consistency_loss(s.view(), t.view()).unwrap().0;
    let (mut identical, mut perm, mut trans, mut rot): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..100 {
        let d = rng.random_range(1..=5);
        let k = rng.random_range(2..=6);
        // points on a line spaced 10 apart, then rotated and jittered
        let base = Array2::from_shape_fn((k, d), |(i, j)| if j == 0 { 10.0 * i as f64 } else { 0.0 });
        let q = random_orthogonal(d, &mut rng);
        let jitter = random_matrix(k, d, &mut rng) * 0.5;
        let sep = base.dot(&q) + jitter;
        identical = identical.max(loss(&sep, &sep));

        let (ks, kt) = (rng.random_range(2..=6), rng.random_range(1..=6));
        let fs = random_matrix(ks, d, &mut rng) * 2.0;
        let ft = random_matrix(kt, d, &mut rng) * 2.0;
        let l0 = loss(&fs, &ft);

        let mut ps: Vec<usize> = (0..ks).collect();
        let mut pt: Vec<usize> = (0..kt).collect();
        ps.shuffle(&mut rng);
        pt.shuffle(&mut rng);
        perm = perm.max((loss(&fs.select(Axis(0), &ps), &ft.select(Axis(0), &pt)) - l0).abs());

        let shift = random_matrix(1, d, &mut rng).row(0).to_owned() * 5.0;
        trans = trans.max((loss(&(&fs + &shift), &(&ft + &shift)) - l0).abs());

        let q = random_orthogonal(d, &mut rng);
        rot = rot.max((loss(&fs.dot(&q), &ft.dot(&q)) - l0).abs());
    }
    check(
        identical <= 1e-10 && perm <= 1e-12 && trans <= 1e-10 && rot <= 1e-9,
        format!("identical {identical:.1e}, permutation {perm:.1e}, translation {trans:.1e}, rotation {rot:.1e}"),
    )
}

/// Runs `args` twice into the same outputs; returns the first run's files.
fn rerun(args: &[&str], outputs: &[&Path], normalize: bool) -> Result<Vec<Vec<u8>>, String> {
    let mut runs = Vec::new();
    for _ in 0..2 {
        let out = care(args);
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], common::stderr(&out)));
        }
        runs.push(outputs.iter().map(|p| read(p)).collect::<Vec<_>>());
    }
    let strip = |b: &Vec<u8>| {
        if normalize {
            without_wall_time(b).into_bytes()
        } else {
            b.clone()
        }
    };
    for (a, b) in runs[0].iter().zip(&runs[1]) {
        if strip(a) != strip(b) {
            return Err(format!("{} rerun differs", args[0]));
        }
    }
    Ok(runs.swap_remove(0))
}

struct CliRun {
    args: Vec<String>,
    outputs: Vec<std::path::PathBuf>,
    /// `(output index, golden name)`
    goldens: Vec<(usize, &'static str)>,
    normalize: bool,
}

fn cli() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let manifest = |n: &str| p(&format!("{n}.manifest.json"));
    let (src, tgt) = (
        s(&fixture("coco_source.json")).to_string(),
        s(&fixture("coco_target.json")).to_string(),
    );
    let strs = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let pair = |cmd: &str, out: &str, extra: &[&str]| {
        let mut a = strs(&[cmd, "--source", &src, "--target", &tgt, "--out", s(&p(out))]);
        a.extend(strs(extra));
        a
    };
    let bench_dir = p("bench");
    let runs = vec![
        CliRun {
            args: pair("stats", "stats.json", &[]),
            outputs: vec![p("stats.json"), manifest("stats.json")],
            goldens: vec![(0, "stats_coco.json")],
            normalize: false,
        },
        CliRun {
            args: pair("weights", "w.csv", &[]),
            outputs: vec![p("w.csv"), manifest("w.csv")],
            goldens: vec![(0, "weights_coco.csv")],
            normalize: false,
        },
        CliRun {
            args: pair("weights", "raw.csv", &["--raw-ratio"]),
            outputs: vec![p("raw.csv"), manifest("raw.csv")],
            goldens: vec![(0, "weights_coco_raw.csv")],
            normalize: false,
        },
        CliRun {
            args: strs(&[
                "verify",
                "--trials",
                "1000",
                "--seed",
                "0",
                "--out",
                s(&p("verify.json")),
            ]),
            outputs: vec![p("verify.json"), manifest("verify.json")],
            goldens: vec![(0, "verify_1000.json")],
            normalize: false,
        },
        CliRun {
            args: strs(&[
                "generate",
                "--domain",
                "target",
                "--n",
                "20",
                "--seed",
                "7",
                "--out",
                s(&p("gen.jsonl")),
            ]),
            outputs: vec![p("gen.jsonl"), manifest("gen.jsonl")],
            goldens: vec![(0, "generate_target.jsonl")],
            normalize: false,
        },
        CliRun {
            args: strs(&[
                "train",
                "--config",
                s(&fixture("train_small.toml")),
                "--seed",
                "3",
                "--out",
                s(&p("train.json")),
            ]),
            outputs: vec![p("train.json"), manifest("train.json")],
            goldens: vec![(0, "train_small.json")],
            normalize: true,
        },
        CliRun {
            args: strs(&[
                "bench",
                "--config",
                s(&fixture("bench_small.toml")),
                "--out",
                s(&bench_dir),
            ]),
            outputs: ["bench.json", "bench.txt", "manifest.json"]
                .iter()
                .map(|f| bench_dir.join(f))
                .collect(),
            goldens: vec![(0, "bench_small/bench.json"), (1, "bench_small/bench.txt")],
            normalize: false,
        },
    ];

    let mut problems = Vec::new();
    let mut goldens = 0;
    for run in &runs {
        let args: Vec<&str> = run.args.iter().map(String::as_str).collect();
        let outputs: Vec<&Path> = run.outputs.iter().map(|p| p.as_path()).collect();
        let files = match rerun(&args, &outputs, run.normalize) {
            Ok(f) => f,
            Err(e) => {
                problems.push(e);
                continue;
            }
        };
        for &(idx, name) in &run.goldens {
            goldens += 1;
            let want = read(&golden(name));
            let same = if run.normalize {
                without_wall_time(&files[idx]) == without_wall_time(&want)
            } else {
                files[idx] == want
            };
            if !same {
                problems.push(format!("golden {name} differs"));
            }
        }
    }
    let msg = format!("{} subcommand runs rerun, {goldens} golden files compared", runs.len());
    if problems.is_empty() {
        Ok(msg)
    } else {
        Err(format!("{msg}; {}", problems.join("; ")))
    }
}

type Check = (&'static str, fn() -> Outcome);

fn main() {
    // single core for the timing budgets
    std::env::set_var("CARE_THREADS", "1");
    let checks: [Check; 8] = [
        ("identity", identity),
        ("gradients", gradients),
        ("reweighting", reweighting),
        ("kde", kde),
        ("baseline equivalence", baseline_equivalence),
        ("toy ordering", ordering),
        ("cycle sanity", cycle_sanity),
        ("cli reproducibility", cli),
    ];
    let mut failed = 0;
    for (i, (name, f)) in checks.iter().enumerate() {
        let outcome = f();
        let (tag, msg) = match &outcome {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        println!("criterion {} [{tag}] {name}: {msg}", i + 1);
        failed += outcome.is_err() as usize;
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", checks.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", checks.len());
}
