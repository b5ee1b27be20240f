//! End-to-end acceptance checks. Prints one line per criterion and exits
//! non-zero if any fails.

use std::path::Path;
use std::thread;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use splitnet::archspec::{cost_report, ArchSpec, FlopConvention};
use splitnet::cli::goldens;
use splitnet::cotrain::{
    cot_loss, cross_entropy, gradcheck, lambda_schedule, lr_schedule, softmax, train, EpochRecord, ProbBatch,
    TrainConfig,
};
use splitnet::datagen::{spirals, stream_rng, Dataset, Transform, ViewPipeline};
use splitnet::divider::{divide_arch, WdKind, WdPolicy};
use splitnet::ensemble::EnsembleRule;
use splitnet::numerics::{MemberModel, Tensor};
use splitnet::parallel::{bench, execution_units, Mode};

struct Outcome {
    pass: bool,
    /// Precondition unmet: reported, not counted as a failure.
    skipped: bool,
    detail: String,
}

impl Outcome {
    fn check(pass: bool, detail: String) -> Self {
        Outcome {
            pass,
            skipped: false,
            detail,
        }
    }
}

/// Closed-form WRN-d-w weight count, written out independently of the
/// layer expansion.
fn wrn_params_oracle(depth: u64, w: u64, classes: u64) -> u64 {
    let n = (depth - 4) / 6;
    let mut total = 27 * 16;
    let mut c_in = 16;
    for base in [16, 32, 64] {
        let c = base * w;
        total += 9 * c_in * c + 9 * c * c + if c_in != c { c_in * c } else { 0 };
        total += (n - 1) * 2 * 9 * c * c;
        c_in = c;
    }
    total + c_in * classes
}

fn criterion_1() -> Outcome {
    let checks = goldens::cost_checks().expect("cost presets expand");
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} = {} (want {})", c.name, c.actual, c.expected))
        .collect();
    let mut oracle_ok = true;
    for (d, w) in [(16, 8), (28, 10), (40, 10)] {
        let r = cost_report(&ArchSpec::wrn(d, w as f64, 100), FlopConvention::Mac).unwrap();
        oracle_ok &= r.total_params == wrn_params_oracle(d as u64, w, 100);
    }
    let summary: Vec<String> = checks.iter().map(|c| format!("{}={}", c.name.trim_start_matches("cost "), c.actual)).collect();
    Outcome::check(
        failed.is_empty() && oracle_ok,
        if failed.is_empty() {
            format!("{}; closed-form WRN oracle agrees: {oracle_ok}", summary.join(", "))
        } else {
            failed.join("; ")
        },
    )
}

fn criterion_2() -> Outcome {
    let checks = goldens::division_checks().expect("division presets");
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{}: {} != {}", c.name, c.actual, c.expected))
        .collect();
    Outcome::check(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{}/{} tables reproduced exactly", checks.len(), checks.len())
        } else {
            failed.join("; ")
        },
    )
}

fn criterion_3() -> Outcome {
    let spec = ArchSpec::wrn(28, 10.0, 100);
    let original = cost_report(&spec, FlopConvention::Mac).unwrap().total_params as f64;
    let policy = WdPolicy::new(WdKind::None, 5e-4).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for s in [2u32, 4] {
        let plan = divide_arch(&spec, s, &policy).unwrap();
        let member = cost_report(&plan.members[0], FlopConvention::Mac).unwrap().total_params as f64;
        let ratio = s as f64 * member / original;
        ok &= (0.90..=1.10).contains(&ratio);
        parts.push(format!("S={s}: {s}x{:.2}M / {:.2}M = {ratio:.3}", member / 1e6, original / 1e6));
    }
    Outcome::check(ok, parts.join(", "))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 1..=3 {
        let r = gradcheck(seed, 3, 120, 0.5).expect("gradcheck runs");
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::check(
        worst < 1e-5 && secs < 60.0 && checked >= 100,
        format!("max rel error {worst:.2e} over {checked} parameters of 3 random 3-member sets, {secs:.1}s"),
    )
}

/// Entropy of one distribution, by direct summation.
fn h(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn criterion_5() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let uniform = ProbBatch::new(Tensor::new(vec![1, 10], vec![0.1; 10]).unwrap()).unwrap();
    let ce = cross_entropy(&uniform, &[3]).unwrap();
    ok &= (ce - 10f64.ln()).abs() <= 1e-10;
    notes.push(format!("CE(uniform,10)={ce:.12}"));

    let p1 = ProbBatch::new(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
    let p2 = ProbBatch::new(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap()).unwrap();
    let js = cot_loss(&[p1, p2]).unwrap();
    ok &= (js - 2f64.ln()).abs() <= 1e-10;
    notes.push(format!("cot(disjoint)={js:.12}"));

    let mut rng = stream_rng(&[5]);
    let mut out_of_range = 0;
    let mut oracle_gap: f64 = 0.0;
    for _ in 0..10_000 {
        let s = rng.gen_range(2..6usize);
        let c = rng.gen_range(2..8usize);
        let n = rng.gen_range(1..4usize);
        let probs: Vec<ProbBatch<f64>> = (0..s)
            .map(|_| {
                let scale = rng.gen_range(0.1..20.0);
                let z: Vec<f64> = (0..n * c).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
                softmax(&Tensor::new(vec![n, c], z).unwrap()).unwrap()
            })
            .collect();
        let v = cot_loss(&probs).unwrap();
        if !(-1e-12..=(s as f64).ln() + 1e-12).contains(&v) {
            out_of_range += 1;
        }
        let mut direct = 0.0;
        for row in 0..n {
            let mean: Vec<f64> = (0..c)
                .map(|k| probs.iter().map(|p| p.values().row(row)[k]).sum::<f64>() / s as f64)
                .collect();
            let avg_h = probs.iter().map(|p| h(p.values().row(row))).sum::<f64>() / s as f64;
            direct += (h(&mean) - avg_h) / n as f64;
        }
        oracle_gap = oracle_gap.max((direct - v).abs());
    }
    ok &= out_of_range == 0;
    notes.push(format!("cot in [0, ln S] on 10^4 inputs ({out_of_range} violations, oracle gap {oracle_gap:.1e})"));

    let cfg = TrainConfig {
        max_epoch: 300,
        slow_epoch: 20,
        lr: 0.1,
        lambda_cot: 0.5,
        cot_warm_epochs: 40,
        ..TrainConfig::default()
    };
    let points = [
        (lr_schedule(20, &cfg), 0.1),
        (lr_schedule(300, &cfg), 0.0),
        (lr_schedule(160, &cfg), 0.05),
        (lr_schedule(10, &cfg), 0.05),
        (lambda_schedule(0, &cfg), 0.0),
        (lambda_schedule(20, &cfg), 0.25),
        (lambda_schedule(40, &cfg), 0.5),
        (lambda_schedule(299, &cfg), 0.5),
    ];
    let sched_err = points.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ok &= sched_err <= 1e-12;
    notes.push(format!("schedule points max err {sched_err:.1e}"));
    Outcome::check(ok, notes.join(", "))
}

const SEEDS: u64 = 10;

struct SeedRun {
    baseline: EpochRecord,
    cot: EpochRecord,
    no_cot: EpochRecord,
}

fn experiment_data() -> (Dataset, Dataset) {
    spirals(5000, 3, 0.15, 0).unwrap().split_at(4000).unwrap()
}

fn run_seed(seed: u64, train_set: &Dataset, test_set: &Dataset) -> SeedRun {
    let base = TrainConfig {
        s: 1,
        max_epoch: 200,
        slow_epoch: 5,
        lr: 0.05,
        momentum: 0.9,
        lambda_cot: 0.5,
        cot_warm_epochs: 40,
        batch_size: 32,
        base_seed: seed,
        ..TrainConfig::default()
    };
    let baseline = train::<f64>(&base, &[ArchSpec::mlp("baseline", 2, &[64, 64], 3)], &[], train_set, test_set)
        .expect("baseline trains");
    let members = vec![ArchSpec::mlp("member", 2, &[45, 45], 3); 2];
    let views: Vec<ViewPipeline> = (0..2)
        .map(|i| ViewPipeline::new(i, seed, vec![Transform::FeatureJitter { sigma: 0.05 }]).unwrap())
        .collect();
    let run = |lambda_cot: f64| {
        let cfg = TrainConfig {
            s: 2,
            lambda_cot,
            ..base.clone()
        };
        let out = train::<f64>(&cfg, &members, &views, train_set, test_set).expect("members train");
        out.record.last().cloned().expect("non-empty record")
    };
    SeedRun {
        cot: run(0.5),
        no_cot: run(0.0),
        baseline: baseline.record.last().cloned().expect("non-empty record"),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn spirals_experiment() -> (Vec<SeedRun>, f64) {
    let start = Instant::now();
    let (train_set, test_set) = experiment_data();
    let lanes = execution_units().min(SEEDS as usize).max(1);
    let mut runs: Vec<(u64, SeedRun)> = thread::scope(|scope| {
        let handles: Vec<_> = (0..lanes as u64)
            .map(|lane| {
                let (tr, te) = (&train_set, &test_set);
                scope.spawn(move || {
                    (lane..SEEDS)
                        .step_by(lanes)
                        .map(|seed| (seed, run_seed(seed, tr, te)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("seed worker")).collect()
    });
    runs.sort_by_key(|(s, _)| *s);
    (runs.into_iter().map(|(_, r)| r).collect(), start.elapsed().as_secs_f64())
}

fn criterion_6(runs: &[SeedRun], secs: f64) -> Outcome {
    let wins = runs
        .iter()
        .filter(|r| r.cot.acc_ensemble >= r.cot.acc.iter().sum::<f64>() / r.cot.acc.len() as f64)
        .count();
    let ens = median(runs.iter().map(|r| r.cot.acc_ensemble).collect());
    let base = median(runs.iter().map(|r| r.baseline.acc_ensemble).collect());
    let mean_member = median(runs.iter().map(|r| r.cot.acc.iter().sum::<f64>() / 2.0).collect());
    for (i, r) in runs.iter().enumerate() {
        println!(
            "    seed {i}: baseline {:.4}  members {:.4} {:.4}  ensemble {:.4}",
            r.baseline.acc_ensemble, r.cot.acc[0], r.cot.acc[1], r.cot.acc_ensemble
        );
    }
    Outcome::check(
        wins >= 9 && ens >= base - 0.005,
        format!(
            "(a) ensemble >= mean member in {wins}/{SEEDS} seeds; (b) median ensemble {ens:.4} vs median baseline {base:.4} (median mean member {mean_member:.4}); {secs:.0}s on {} execution unit(s)",
            execution_units()
        ),
    )
}

fn criterion_7(runs: &[SeedRun]) -> Outcome {
    let with = median(runs.iter().map(|r| r.cot.cot.expect("S = 2")).collect());
    let without = median(runs.iter().map(|r| r.no_cot.cot.expect("S = 2")).collect());
    Outcome::check(
        with < without,
        format!("median final cot loss {with:.6} (lambda 0.5) vs {without:.6} (lambda 0)"),
    )
}

fn bench_members() -> (Vec<MemberModel<f64>>, Tensor<f64>) {
    let members: Vec<MemberModel<f64>> = (0..2)
        .map(|i| {
            let mut m = MemberModel::mlp(256, &[512, 512], 10).unwrap().with_member_index(i);
            m.init_params(100 + i as u64);
            m
        })
        .collect();
    let mut rng = stream_rng(&[8]);
    let x = Tensor::new(vec![100, 256], (0..100 * 256).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
    (members, x)
}

fn criterion_8() -> Outcome {
    let (members, x) = bench_members();
    let single = {
        let t = Instant::now();
        for _ in 0..5 {
            members[0].infer(&x).unwrap();
        }
        t.elapsed().as_secs_f64() * 1e3 / 5.0
    };
    let out = bench(&members, &x, Mode::Concurrent, 2, 20, EnsembleRule::default()).expect("bench runs");
    let r = &out.report;
    let units = execution_units();
    let detail = format!(
        "single pass {single:.2} ms, sequential median {:.2} ms, concurrent median {:.2} ms, speedup {:.2}x, outputs identical: {}, {units} execution unit(s)",
        r.sequential_median_ms, r.median_ms, r.speedup, r.outputs_identical
    );
    if units < 2 {
        return Outcome {
            pass: r.outputs_identical && single >= 1.0,
            skipped: true,
            detail: format!("speedup requires >= 2 execution units; only bitwise identity checked. {detail}"),
        };
    }
    Outcome::check(r.outputs_identical && single >= 1.0 && r.speedup >= 1.2, detail)
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    std::fs::write(
        &cfg_path,
        r#"{
            "s": 2, "max_epoch": 15, "slow_epoch": 2, "cot_warm_epochs": 5, "lr": 0.05,
            "batch_size": 32, "base_seed": 3, "weight_decay": 5e-4, "wd_policy": "exp",
            "arch": null,
            "data": {"kind": "spirals", "n_total": 600, "n_train": 450, "classes": 3, "noise": 0.15, "seed": 1},
            "views": [[{"kind": "feature-jitter", "sigma": 0.05}]]
        }"#,
    )
    .unwrap();
    let run = |config: &Path, out: &Path| {
        splitnet::cli::run([
            "splitnet",
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
    };
    let (first, second) = (dir.path().join("a"), dir.path().join("b"));
    let code_a = run(&cfg_path, &first);
    let code_b = run(&first.join("manifest.json"), &second);
    let read = |p: &Path| std::fs::read(p.join("metrics.csv")).unwrap_or_default();
    let (a, b) = (read(&first), read(&second));
    Outcome::check(
        code_a == 0 && code_b == 0 && !a.is_empty() && a == b,
        format!(
            "exit codes {code_a}/{code_b}; metrics.csv {} bytes, replay from manifest identical: {}",
            a.len(),
            a == b
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "cost model reproduces published params/GFLOPs", criterion_1()),
        (2, "division presets reproduced exactly", criterion_2()),
        (3, "WRN-28-10 division cost parity", criterion_3()),
        (4, "joint-loss gradients match finite differences", criterion_4()),
        (5, "loss and schedule unit values", criterion_5()),
    ];
    let (runs, secs) = spirals_experiment();
    results.push((6, "desk-scale co-training experiment", criterion_6(&runs, secs)));
    results.push((7, "co-training term lowers final cot loss", criterion_7(&runs)));
    results.push((8, "concurrent inference speedup", criterion_8()));
    results.push((9, "train replay from manifest is byte-identical", criterion_9()));

    let mut failed = 0;
    for (n, name, o) in &results {
        let tag = match (o.pass, o.skipped) {
            (true, false) => "PASS",
            (true, true) => "SKIP",
            (false, _) => {
                failed += 1;
                "FAIL"
            }
        };
        println!("criterion {n} [{tag}] {name}: {}", o.detail);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
