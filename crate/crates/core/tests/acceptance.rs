//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness so the lines always
//! print.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use atvr::attack::{AttackConfig, StepSize};
use atvr::experiments::{
    expansion_study, gap_study, verify_bounds, EvalSet, ExpansionConfig, ExpansionMode, GapConfig, VerifyConfig,
};
use atvr::model::{Classifier, Extractor, Model, Objective, ObjectiveSample};
use atvr::numerics::{finite_diff_check, norm2, svd_spectrum, Matrix, RandomSource};
use atvr::threat::{Ball, Norm, ThreatModel};
use atvr::training::{RiskMethod, TrainConfig};
use atvr::variation::{hausdorff_estimate, variation_bounds, variation_exact_linear, variation_pgd, HausdorffConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn linear_model(w: Matrix) -> Model {
    let d = w.rows();
    Model::new(Extractor::Linear { weight: w, bias: vec![0.0; d] }, Classifier { weight: None, bias: vec![0.0; d] })
        .unwrap()
}

fn within_time(pass: bool, elapsed: Duration, limit: Option<u64>) -> bool {
    pass && limit.map_or(true, |s| elapsed.as_secs_f64() < s as f64)
}

// 1. l2 variation: PGD reaches 95% of 2 eps sigma_max and never exceeds it.
fn l2_exactness() -> Outcome {
    let mut rng = RandomSource::new(1);
    let cfg = AttackConfig { steps: 100, restarts: 10, step_size: StepSize::Relative(0.25), ..AttackConfig::variation() };
    let ball = Ball::l2(0.1);
    let (mut worst_ratio, mut worst_excess) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..100 {
        let w = Matrix::random_normal(5, 25, 1.0, &mut rng);
        let exact = 2.0 * ball.eps * svd_spectrum(&w).unwrap().sigma_max;
        let x = rng.normal_vec(25);
        let v = variation_pgd(&linear_model(w), &x, &ball, &cfg, &mut rng).unwrap().value;
        worst_ratio = worst_ratio.min(v / exact);
        worst_excess = worst_excess.max(v - exact);
    }
    Outcome {
        pass: worst_ratio >= 0.95 && worst_excess <= 1e-9,
        detail: format!("min pgd/exact {worst_ratio:.6}, max excess {worst_excess:.2e}"),
    }
}

// 2. l_inf variation: PGD within 5% of vertex enumeration for n <= 12.
fn linf_vertex_oracle() -> Outcome {
    let mut rng = RandomSource::new(2);
    let cfg = AttackConfig { steps: 100, restarts: 10, step_size: StepSize::Relative(0.25), ..AttackConfig::variation() };
    let ball = Ball::linf(0.1);
    let mut worst: f64 = 0.0;
    for k in 0..50 {
        let n = 2 + k % 11;
        let w = Matrix::random_normal(5, n, 1.0, &mut rng);
        let x = rng.normal_vec(n);
        let exact = variation_exact_linear(&w, &ball, &x).unwrap().value;
        let v = variation_pgd(&linear_model(w), &x, &ball, &cfg, &mut rng).unwrap().value;
        worst = worst.max((v - exact).abs() / exact);
    }
    Outcome { pass: worst <= 0.05, detail: format!("max relative deviation {worst:.2e} over 50 models, n in 2..=12") }
}

// 3. Singular-value sandwich on full-column-rank extractors.
fn lemma_sandwich() -> Outcome {
    let mut violations = 0;
    let mut checked = 0;
    for seed in 0..100u64 {
        let mut rng = RandomSource::new(seed);
        let w = Matrix::random_normal(8, 5, 1.0, &mut rng);
        assert!(svd_spectrum(&w).unwrap().sigma_min > 0.0, "seed {seed} is rank deficient");
        for p in [Norm::L1, Norm::L2, Norm::LInf] {
            let ball = Ball::new(p, 0.05).unwrap();
            let v = variation_exact_linear(&w, &ball, &[0.0; 5]).unwrap().value;
            let b = variation_bounds(&w, &ball).unwrap();
            let tol = 1e-12 * b.upper;
            let lower = b.lower.expect("full column rank");
            checked += 1;
            if !(lower <= v + tol && v <= b.upper + tol) {
                violations += 1;
            }
        }
    }
    Outcome { pass: violations == 0, detail: format!("{violations} violations in {checked} (seed, p) cases") }
}

// 4 and 5 share the verification run: soundness of the variation bound and
// Hausdorff domination on the same instances.
fn verification_run() -> (Outcome, Outcome) {
    let cfg = VerifyConfig {
        models: 100,
        input_dim: 5,
        features: 8,
        points_per_model: 2,
        norms: vec![Norm::LInf, Norm::L2],
        source_eps: 0.05,
        target_eps: vec![0.05, 0.1, 0.3],
        ..Default::default()
    };
    let (report, rows) = verify_bounds(&cfg).unwrap();
    let get = |name: &str| report.invariants.iter().find(|i| i.name == name).unwrap();
    let sound = get("bound_soundness");
    let haus = get("hausdorff_domination");
    let tightest = rows
        .iter()
        .filter(|r| r.invariant == "bound_soundness" && r.rhs > 0.0)
        .map(|r| r.lhs / r.rhs)
        .fold(0.0, f64::max);
    let c4 = Outcome {
        pass: sound.pass && sound.checked > 0,
        detail: format!(
            "{} violations in {} (model, point, pair) cases; max (L_T-L_S)/bound {tightest:.3}",
            sound.failures.len(),
            sound.checked
        ),
    };

    // identity features on nested boxes: H = (eps2 - eps1) sqrt(n)
    let n = 10;
    let model = linear_model(Matrix::identity(n));
    let (e1, e2) = (0.01, 0.05);
    let x = vec![0.5; n];
    let h = hausdorff_estimate(
        &model,
        &x,
        &Ball::linf(e1).into(),
        &ThreatModel::ball(Ball::linf(e1)).with(Ball::linf(e2)),
        &HausdorffConfig::default(),
        &mut RandomSource::new(5),
    )
    .unwrap()
    .value;
    let expect = (e2 - e1) * (n as f64).sqrt();
    let rel = (h - expect).abs() / expect;
    let c5 = Outcome {
        pass: haus.pass && haus.checked == sound.checked && rel <= 0.05,
        detail: format!(
            "{} of {} instances with Hausdorff bound above variation bound; identity boxes rel. error {rel:.2e}",
            haus.failures.len(),
            haus.checked
        ),
    };
    (c4, c5)
}

// 6. Expansion slope for l2(0.01) -> l_inf(0.05), 100 standard-normal 5 x n extractors.
fn expansion_slopes() -> (Outcome, Vec<(String, f64, f64)>) {
    let mut lines = Vec::new();
    let mut families = Vec::new();
    let mut pass = true;
    for (n, target) in [(25, 21.0), (100, 39.09)] {
        for seed in 0..3 {
            let cfg = ExpansionConfig {
                seed,
                mode: ExpansionMode::RandomNormal { models: 100, input_dim: n, features: 5 },
                ..Default::default()
            };
            let s = expansion_study(&cfg).unwrap();
            let ok = (s.slope - target).abs() <= 0.2 * target;
            pass &= ok;
            lines.push(format!("n={n} seed={seed}: {:.2}", s.slope));
            families.push((format!("l2->linf n={n} seed={seed}"), s.slope, s.theoretical_slope.unwrap()));
        }
    }
    (Outcome { pass, detail: lines.join(", ") }, families)
}

// 7. Fitted slope never above the theoretical slope at the measured bound.
fn dominance(mut families: Vec<(String, f64, f64)>) -> Outcome {
    let norms = [Norm::L1, Norm::L2, Norm::LInf];
    for p in norms {
        for q in norms {
            for (n, d) in [(12, 5), (6, 10)] {
                let cfg = ExpansionConfig {
                    seed: 7,
                    source: Ball::new(p, 0.01).unwrap(),
                    target: Ball::new(q, 0.05).unwrap(),
                    mode: ExpansionMode::RandomNormal { models: 100, input_dim: n, features: d },
                    ..Default::default()
                };
                let s = expansion_study(&cfg).unwrap();
                families.push((format!("l{p}->l{q} {d}x{n}"), s.slope, s.theoretical_slope.unwrap()));
            }
        }
    }
    let bad: Vec<&String> = families.iter().filter(|(_, e, t)| *e > t * (1.0 + 1e-12)).map(|f| &f.0).collect();
    let tightest = families.iter().map(|(_, e, t)| e / t).fold(0.0, f64::max);
    Outcome {
        pass: bad.is_empty(),
        detail: if bad.is_empty() {
            format!("0 violations over {} families; max fitted/theory {tightest:.3}", families.len())
        } else {
            format!("{} violations over {} families: {bad:?}", bad.len(), families.len())
        },
    }
}

// 8. AT-VR on the Gaussian task shrinks the exact gap at target eps 0.05.
fn gap_reduction() -> Outcome {
    let mut wins = 0;
    let mut accs = Vec::new();
    let mut gaps = Vec::new();
    for seed in 0..5 {
        let cfg = GapConfig {
            seed,
            eval_set: EvalSet::Train,
            train: TrainConfig::default(),
            lambdas: vec![0.0, 1.0],
            target_eps: vec![0.05],
            target_norms: vec![Norm::LInf],
            method: RiskMethod::ExactLinear,
            ..Default::default()
        };
        let rows = gap_study(&cfg).unwrap();
        let (plain, reg) = (&rows[0], &rows[1]);
        assert_eq!((plain.lambda, reg.lambda), (0.0, 1.0));
        if reg.gap < plain.gap {
            wins += 1;
        }
        accs.push(plain.clean_acc);
        gaps.push(format!("{:.4}/{:.4}", plain.gap, reg.gap));
    }
    let min_acc = accs.iter().cloned().fold(1.0, f64::min);
    Outcome {
        pass: wins >= 4 && min_acc >= 0.95,
        detail: format!("lambda=1 smaller gap in {wins}/5 seeds (gap lambda0/lambda1: {}); min clean acc lambda=0 {min_acc:.4}", gaps.join(" ")),
    }
}

// 9. Finite-difference checks of every analytic gradient.
fn gradient_integrity() -> Outcome {
    let mut rng = RandomSource::new(9);
    let mut worst = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0f64);
        *w = w.max(e);
    };
    let h = 1e-6;
    for i in 0..20 {
        let (n, d, k) = (4 + i % 3, 3, 2 + i % 2);
        let model = if i % 2 == 0 {
            Model::linear_random(n, d, k, false, &mut rng).unwrap()
        } else {
            Model::mlp_random(n, 6, d, k, Default::default(), false, &mut rng).unwrap()
        };
        let x = rng.normal_vec(n);
        let x1 = rng.normal_vec(n);
        let x2 = rng.normal_vec(n);
        let y = rng.index(k);

        let e = finite_diff_check(|z| model.loss(z, y).unwrap(), |z| model.grad_input(z, y).unwrap(), &x, h).unwrap();
        note("loss/input", e);

        let lambda = rng.uniform(0.1, 2.0);
        let objective = |obj: Objective| {
            let m = model.clone();
            let (xs, x1s, x2s) = (x.clone(), x1.clone(), x2.clone());
            move |p: &[f64]| {
                let mut m = m.clone();
                m.set_params(p).unwrap();
                let s = [ObjectiveSample { input: &xs, label: y, pair: Some((&x1s, &x2s)) }];
                m.grad_params(&s, obj).unwrap()
            }
        };
        let reg = objective(Objective::Regularized { lambda });
        let e = finite_diff_check(|p| reg(p).0, |p| reg(p).1, &model.params(), h).unwrap();
        note("objective/params", e);
        let var = objective(Objective::Variation);
        let e = finite_diff_check(|p| var(p).0, |p| var(p).1, &model.params(), h).unwrap();
        note("variation/params", e);

        // d/dx1 ||h(x1) - h(x2)||
        let v = |z: &[f64]| {
            let a = model.features(z).unwrap();
            let b = model.features(&x2).unwrap();
            norm2(&a.iter().zip(&b).map(|(p, q)| p - q).collect::<Vec<_>>())
        };
        let g = |z: &[f64]| {
            let a = model.features(z).unwrap();
            let b = model.features(&x2).unwrap();
            let diff: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p - q).collect();
            let r = norm2(&diff);
            model.extractor_vjp(z, &diff.iter().map(|t| t / r).collect::<Vec<_>>()).unwrap()
        };
        note("variation/input", finite_diff_check(v, g, &x1, h).unwrap());
    }
    let pass = worst.values().all(|e| *e < 1e-4);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    Outcome { pass, detail: format!("max relative error over 20 instances each: {detail}") }
}

// 10. Every subcommand, run twice with the same config and seed (and
// different thread counts), writes byte-identical CSVs.
fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_atvr");
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = r#""data": {"gaussian": {"n": 6, "samples_per_class": 30}}"#;
    let small_train = r#""train": {"epochs": 5, "lambda": 0.5}"#;
    let configs: Vec<(&str, String)> = vec![
        ("gen-data", r#"{"n": 6, "samples_per_class": 30, "held_out_per_class": 10}"#.into()),
        ("train", format!("{{{data}, {small_train}, \"checkpoint_every\": 2}}")),
        (
            "eval",
            format!(r#"{{{data}, "eval_set": "held_out", "threat_models": [{{"p": "inf", "eps": 0.05}}, {{"p": "2", "eps": 0.1}}], "method": "pgd"}}"#),
        ),
        ("variation", format!(r#"{{{data}, "eval_set": "train", "threat_model": {{"p": "2", "eps": 0.1}}, "estimator": {{"standard": {{"kind": "pgd"}}}}}}"#)),
        ("expansion", r#"{"mode": {"random_normal": {"models": 20, "input_dim": 30, "features": 5}}}"#.into()),
        ("gap", format!(r#"{{{data}, "eval_set": "held_out", {small_train}, "target_eps": [0.02, 0.05]}}"#)),
        ("hausdorff", format!(r#"{{{data}, "eval_set": "train", "target": [{{"p": "inf", "eps": 0.05}}], "max_samples": 5}}"#)),
        ("verify-bounds", r#"{"models": 5}"#.into()),
        ("predict-loss", format!(r#"{{{data}, "eval_set": "train", "targets": [{{"p": "inf", "eps": 0.05}}, {{"p": "2", "eps": 0.1}}]}}"#)),
    ];
    let mut mismatched = Vec::new();
    let mut compared = 0;
    for (cmd, cfg) in &configs {
        let cfg_path = root.join(format!("{cmd}.json"));
        std::fs::write(&cfg_path, cfg).unwrap();
        let mut outputs = Vec::new();
        for (run, threads) in [("a", "1"), ("b", "3")] {
            let out = root.join(cmd).join(run);
            let status = Command::new(bin)
                .arg(cmd)
                .args(["--config", cfg_path.to_str().unwrap(), "--seed", "4", "--threads", threads])
                .arg("--out-dir")
                .arg(&out)
                .output()
                .unwrap();
            if !status.status.success() {
                return Outcome {
                    pass: false,
                    detail: format!("{cmd} failed: {}", String::from_utf8_lossy(&status.stderr)),
                };
            }
            outputs.push(out);
        }
        for f in csv_files(&outputs[0]) {
            compared += 1;
            let rel = f.strip_prefix(&outputs[0]).unwrap();
            if std::fs::read(&f).unwrap() != std::fs::read(outputs[1].join(rel)).unwrap_or_default() {
                mismatched.push(format!("{cmd}/{}", rel.display()));
            }
        }
    }
    Outcome {
        pass: mismatched.is_empty() && compared >= configs.len(),
        detail: format!("{compared} CSVs from {} subcommands compared, mismatches: {mismatched:?}", configs.len()),
    }
}

fn csv_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(csv_files(&p));
        } else if p.extension().is_some_and(|x| x == "csv") {
            out.push(p);
        }
    }
    out.sort();
    out
}

type Row = (usize, &'static str, Outcome, Duration, Option<u64>);

fn timed(id: usize, name: &'static str, limit: Option<u64>, f: impl FnOnce() -> Outcome) -> Row {
    let t = Instant::now();
    let o = f();
    (id, name, o, t.elapsed(), limit)
}

fn main() {
    let mut results: Vec<Row> = vec![
        timed(1, "l2 variation exactness", Some(30), l2_exactness),
        timed(2, "l_inf vertex oracle", Some(60), linf_vertex_oracle),
        timed(3, "lemma sandwich", None, lemma_sandwich),
    ];
    let t = Instant::now();
    let (c4, c5) = verification_run();
    let shared = t.elapsed();
    results.push((4, "bound soundness", c4, shared, None));
    results.push((5, "Hausdorff tightening", c5, shared, None));
    let t = Instant::now();
    let (c6, families) = expansion_slopes();
    results.push((6, "expansion slope reproduction", c6, t.elapsed(), Some(60)));
    results.push(timed(7, "theoretical dominance", None, || dominance(families)));
    results.push(timed(8, "AT-VR gap reduction", Some(300), gap_reduction));
    results.push(timed(9, "gradient integrity", None, gradient_integrity));
    results.push(timed(10, "determinism", None, determinism));

    let mut failed = 0;
    for (id, name, o, elapsed, limit) in &results {
        let pass = within_time(o.pass, *elapsed, *limit);
        if !pass {
            failed += 1;
        }
        let budget = limit.map(|s| format!(" / limit {s}s")).unwrap_or_default();
        println!(
            "criterion {id:>2} {} {name}: {} [{:.1}s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {}/{} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
