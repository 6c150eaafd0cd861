//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and an
//! `INFO` line for each non-gating reproduction; the process exit status is
//! zero regardless, so the verdicts are read from the output.

use std::time::Instant;

use naed::datagen::{self, DiffusionParams, GeneratorConfig, System};
use naed::gradients::{convergence_study, gradcheck_problem};
use naed::integrator::solve_forward;
use naed::model::{self, param_count};
use naed::stability::{stability_check, StabilityConfig};
use naed::trainer::{self, BatchSize, TrainConfig, LAMBDA_GRID};
use naed::{Dataset, DictionarySpec, Parameters, SolverConfig, TimeSeries};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdicts {
    passed: usize,
    total: usize,
}

impl Verdicts {
    fn record(&mut self, id: &str, name: &str, ok: bool, detail: String) {
        self.total += 1;
        if ok {
            self.passed += 1;
        }
        println!("{} [{id}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }

    fn error(&mut self, id: &str, name: &str, err: impl std::fmt::Display) {
        self.record(id, name, false, format!("error: {err}"));
    }
}

fn info(name: &str, detail: String) {
    println!("INFO {name}: {detail}");
}

fn gradient_oracle(v: &mut Verdicts) {
    let started = Instant::now();
    let mut worst_error: f64 = 0.0;
    let mut min_coarse: f64 = f64::INFINITY;
    let mut min_fine: f64 = f64::INFINITY;
    for c in 0..20u64 {
        let m = [1, 2, 3][(c % 3) as usize];
        let n = 1 + ((c / 3) % 2) as usize;
        let classes = 2 + ((c / 2) % 2) as usize;
        let spec = if c % 2 == 0 {
            DictionarySpec::polynomial(m, if m < 3 { 3 } else { 2 })
        } else {
            DictionarySpec::fourier(m, if m < 3 { 2 } else { 1 }, 10.0)
        };
        let result = spec
            .and_then(|spec| {
                let (params, batch) = gradcheck_problem(&spec, n, classes, 6, 100 + c)?;
                convergence_study(&params, &spec, &batch, &[4, 8, 16], 1e-5)
            })
            .map(|report| {
                worst_error = worst_error.max(report.levels[1].max_error);
                min_coarse = min_coarse.min(report.ratios[0]);
                min_fine = min_fine.min(report.ratios[1]);
            });
        if let Err(e) = result {
            return v.error("1", "gradient oracle", format!("config {c}: {e}"));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let ok = worst_error < 1e-3 && min_coarse >= 4.0 && min_fine >= 4.0 && secs < 120.0;
    v.record(
        "1",
        "gradient oracle (20 configs)",
        ok,
        format!(
            "max rel err at s=8 {worst_error:.2e} (< 1e-3), min error ratio 4->8 {min_coarse:.2}, 8->16 {min_fine:.2} (>= 4), {secs:.1} s (< 120 s)"
        ),
    );
}

fn rk4_order(v: &mut Verdicts) {
    // h1' = h2, h2' = -h1 + 1 from rest: h1 = 1 - cos t, h2 = sin t.
    let spec = DictionarySpec::polynomial(2, 1).unwrap();
    let mut p = Parameters::zeros(&spec, 1, 2);
    p.beta.set(0, 2, 1.0);
    p.beta.set(1, 1, -1.0);
    p.forcing.set(1, 0, 1.0);
    let times: Vec<f64> = (0..=20).map(|j| 0.5 * f64::from(j)).collect();
    let ts = TimeSeries::new("step", times, vec![vec![1.0]; 21], None).unwrap();
    let mut errors = Vec::new();
    for s in [1, 2, 4, 8] {
        let traj = solve_forward(&p, &spec, &ts, SolverConfig::with_substeps(s)).unwrap();
        let h = traj.final_state();
        errors.push((h[0] - (1.0 - 10f64.cos())).abs().max((h[1] - 10f64.sin()).abs()));
    }
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[0] / w[1]).collect();
    let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    v.record(
        "2",
        "RK4 order, samples every 0.5 on [0, 10]",
        min >= 15.0,
        format!(
            "errors {} for s = 1, 2, 4, 8; min ratio {min:.2} (>= 15)",
            errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(", ")
        ),
    );
}

fn param_counts(v: &mut Verdicts) {
    let poly = |m, k| DictionarySpec::polynomial(m, k).unwrap();
    let fourier = |m, k| DictionarySpec::fourier(m, k, 10.0).unwrap();
    let tables: [(&str, Vec<(DictionarySpec, usize)>); 5] = [
        ("1", vec![(poly(2, 1), 14), (poly(3, 1), 23), (poly(4, 1), 34), (poly(2, 2), 20), (fourier(2, 1), 26), (fourier(2, 2), 58)]),
        (
            "2",
            vec![
                (poly(2, 1), 14),
                (poly(3, 1), 23),
                (poly(4, 1), 34),
                (poly(2, 2), 20),
                (poly(2, 3), 28),
                (fourier(2, 1), 26),
                (fourier(2, 2), 58),
            ],
        ),
        (
            "3",
            vec![
                (poly(2, 1), 14),
                (poly(3, 1), 23),
                (poly(4, 1), 34),
                (poly(2, 2), 20),
                (poly(3, 2), 41),
                (fourier(2, 1), 26),
                (fourier(3, 1), 92),
                (fourier(2, 2), 58),
            ],
        ),
        ("4a", vec![(poly(2, 1), 14), (poly(2, 3), 28), (fourier(2, 1), 26), (fourier(3, 1), 92)]),
        ("4b", vec![(poly(2, 1), 14), (poly(3, 3), 71), (fourier(2, 1), 26), (fourier(3, 1), 92), (fourier(2, 2), 58)]),
    ];
    let mut mismatches = Vec::new();
    let mut checked = 0;
    for (table, rows) in &tables {
        for (spec, expected) in rows {
            checked += 1;
            let got = param_count(spec, 1, 2);
            if got != *expected {
                mismatches.push(format!("table {table} {spec:?}: {got} != {expected}"));
            }
        }
    }
    v.record(
        "3",
        "parameter counts",
        mismatches.is_empty(),
        if mismatches.is_empty() { format!("{checked}/{checked} table entries exact") } else { mismatches.join("; ") },
    );
}

fn dataset(system: System, samples: usize, seed: u64, noise: f64) -> (Dataset, Dataset) {
    let mut cfg = GeneratorConfig::new(system, seed);
    cfg.samples = samples;
    cfg.noise_variance = noise;
    datagen::generate(&cfg).expect("generate")
}

fn train_config(seed: u64, learning_rate: f64, epochs: usize, init_beta_scale: f64) -> TrainConfig {
    TrainConfig {
        learning_rate,
        max_epochs: epochs,
        seed,
        init_beta_scale,
        ..TrainConfig::default()
    }
}

struct BestOf {
    accuracy: f64,
    params: Option<Parameters>,
    tried: Vec<String>,
}

/// Trains from up to five seeded initializations, stopping at the first whose
/// test accuracy meets `threshold`.
fn best_of_five(train: &Dataset, test: &Dataset, spec: &DictionarySpec, config: TrainConfig, threshold: f64) -> BestOf {
    let mut best = BestOf {
        accuracy: 0.0,
        params: None,
        tried: Vec::new(),
    };
    for seed in 0..5 {
        match trainer::train(train, Some(test), spec, &TrainConfig { seed, ..config.clone() }) {
            Ok((params, report)) => {
                let acc = report.test_accuracy.unwrap_or(0.0);
                best.tried.push(format!("seed {seed}: {acc:.4}"));
                if acc > best.accuracy || best.params.is_none() {
                    best.accuracy = acc;
                    best.params = Some(params);
                }
            }
            Err(e) => best.tried.push(format!("seed {seed}: {e}")),
        }
        if best.accuracy >= threshold {
            break;
        }
    }
    best
}

fn oscillator(v: &mut Verdicts) -> Option<(Parameters, Dataset)> {
    let spec = DictionarySpec::polynomial(2, 1).unwrap();

    let started = Instant::now();
    let (train, test) = dataset(System::Oscillator, 2000, 1, 0.0);
    let smoke = best_of_five(&train, &test, &spec, train_config(0, 0.05, 200, 1.0), 0.93);
    let secs = started.elapsed().as_secs_f64();
    v.record(
        "4s",
        "oscillator Poly(2,1) smoke, N=2000, 200 epochs",
        smoke.accuracy >= 0.93 && secs < 300.0,
        format!("best test accuracy {:.4} (>= 0.93), {secs:.0} s (< 300 s) [{}]", smoke.accuracy, smoke.tried.join(", ")),
    );

    let started = Instant::now();
    let (full_train, full_test) = dataset(System::Oscillator, 10_000, 1, 0.0);
    let full = best_of_five(&full_train, &full_test, &spec, train_config(0, 0.05, 200, 1.0), 0.96);
    let secs = started.elapsed().as_secs_f64();
    v.record(
        "4",
        "oscillator Poly(2,1), N=10000, full batch, best of 5",
        full.accuracy >= 0.96 && secs < 1800.0,
        format!("best test accuracy {:.4} (>= 0.96), {secs:.0} s (< 1800 s) [{}]", full.accuracy, full.tried.join(", ")),
    );
    if let Some(p) = &full.params {
        if let Ok(eig) = naed::portrait::linear_part_eigenvalues(p, &spec) {
            info("oscillator learned linear part", format!("eigenvalues {:.4} ± {:.4}i", eig[0].0, eig[0].1.abs()));
        }
    }
    smoke.params.map(|p| (p, test))
}

fn van_der_pol(v: &mut Verdicts) {
    let spec = DictionarySpec::fourier(2, 2, 10.0).unwrap();
    let started = Instant::now();
    let (train, test) = dataset(System::VanDerPol, 2000, 0, 0.0);
    let best = best_of_five(&train, &test, &spec, train_config(0, 0.05, 200, 0.1), 0.95);
    let secs = started.elapsed().as_secs_f64();
    v.record(
        "5",
        "Van der Pol Fourier(2,2), N=2000, 200 epochs, initial beta scaled by 0.1, best of 5",
        best.accuracy >= 0.95,
        format!("best test accuracy {:.4} (>= 0.95), {secs:.0} s [{}]", best.accuracy, best.tried.join(", ")),
    );
}

fn sparse_noisy(v: &mut Verdicts) {
    let spec = DictionarySpec::fourier(2, 2, 10.0).unwrap();
    let started = Instant::now();
    let (train, test) = dataset(System::Oscillator, 2000, 2, 1e-4);
    let cv_subset: Vec<usize> = (0..400).collect();
    let cv_config = train_config(0, 0.05, 150, 0.1);
    let cv = match trainer::cross_validate_lambda(&train.subset(&cv_subset), &spec, &cv_config, &LAMBDA_GRID) {
        Ok(cv) => cv,
        Err(e) => return v.error("6", "sparse noisy oscillator", e),
    };
    let mut best: Option<(f64, usize, u64)> = None;
    for seed in 0..5 {
        let config = TrainConfig {
            sparse_lambda: cv.chosen,
            ..train_config(seed, 0.05, 400, 0.1)
        };
        match trainer::train(&train, Some(&test), &spec, &config) {
            Ok((_, report)) => {
                let acc = report.test_accuracy.unwrap_or(0.0);
                if best.map_or(true, |(a, _, _)| acc > a) {
                    best = Some((acc, report.nonzero_beta_count, seed));
                }
                if acc >= 0.94 && report.nonzero_beta_count <= 30 {
                    break;
                }
            }
            Err(e) => info("sparse noisy oscillator", format!("seed {seed}: {e}")),
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let (acc, nnz, seed) = best.unwrap_or((0.0, 50, 0));
    v.record(
        "6",
        "sparse noisy oscillator Fourier(2,2), N=2000, 400 epochs, initial beta scaled by 0.1, CV on 400 samples x 150 epochs",
        acc >= 0.94 && nnz <= 30,
        format!("lambda {} chosen by CV; seed {seed}: test accuracy {acc:.4} (>= 0.94), nonzero beta {nnz}/50 (<= 30), {secs:.0} s", cv.chosen),
    );
}

fn threshold_property(v: &mut Verdicts) {
    let spec = DictionarySpec::fourier(2, 1, 10.0).unwrap();
    let (train, _) = dataset(System::Oscillator, 60, 7, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut steps = 0usize;
    let mut violations = 0usize;
    let cases = 24;
    for _ in 0..cases {
        let lambda = rng.gen_range(0.005..0.8);
        let seed = rng.gen::<u64>() % 10_000;
        let config = TrainConfig {
            sparse_lambda: lambda,
            batch_size: BatchSize::Mini(16),
            ..train_config(seed, 0.05, 10, 1.0)
        };
        let init = model::initialize(&spec, 1, 2, seed);
        let outcome = trainer::train_with_observer(&train, None, &spec, &config, init, |event| {
            steps += 1;
            let bad = event.params.beta.data.iter().filter(|b| **b != 0.0 && b.abs() < event.lambda).count();
            violations += bad;
        });
        if let Err(e) = outcome {
            info("threshold property", format!("lambda {lambda:.3}, seed {seed}: {e}"));
        }
    }
    v.record(
        "7",
        "threshold property",
        violations == 0 && steps > 0,
        format!("{cases} random (lambda, seed) runs, {steps} threshold steps, {violations} entries in (0, lambda)"),
    );
}

fn stability(v: &mut Verdicts, model: Option<(Parameters, Dataset)>) {
    let Some((params, test)) = model else {
        return v.record("8", "stability bounds", false, "no trained oscillator model".into());
    };
    let spec = DictionarySpec::polynomial(2, 1).unwrap();
    let samples: Vec<TimeSeries> = test.series.iter().take(100).cloned().collect();
    let started = Instant::now();
    match stability_check(&params, &spec, &samples, &StabilityConfig::default()) {
        Ok(r) => v.record(
            "8",
            "stability bounds",
            r.passed(),
            format!(
                "L1: {} trials, {} violations, max ratio {:.3}; Wiener: {} paths, {} pathwise violations, tail {:.4} / sup tail {:.4} vs bound {:.4}; L = {:.3}; {:.0} s",
                r.l1.trials,
                r.l1.violations,
                r.l1.max_ratio,
                r.wiener.paths,
                r.wiener.pathwise_violations,
                r.wiener.empirical_tail,
                r.wiener.sup_tail,
                r.wiener.tail_bound,
                r.l1.constant.value,
                started.elapsed().as_secs_f64()
            ),
        ),
        Err(e) => v.error("8", "stability bounds", e),
    }
}

fn diffusion(v: &mut Verdicts) {
    let cfg = GeneratorConfig::new(System::GatedDiffusion, 0);
    let result = DiffusionParams::from_config(&cfg).and_then(|p| {
        p.check_cfl()?;
        let history = datagen::diffusion_survival(&p, &[])?;
        let drift = history.iter().map(|s| (s - history[0]).abs()).fold(0.0, f64::max);
        Ok((p, drift))
    });
    match result {
        Ok((p, drift)) => v.record(
            "9",
            "diffusion conservation and CFL",
            drift < 1e-10,
            format!(
                "max |S(t) - S(0)| without switching {drift:.1e} (< 1e-10); mesh ratio {:.2} split into {} steps of {:.2} (<= 0.5)",
                p.cfl_number(),
                p.inner_steps(),
                p.cfl_number() / p.inner_steps() as f64
            ),
        ),
        Err(e) => v.error("9", "diffusion conservation and CFL", e),
    }
}

fn class_balance() {
    for system in [System::Lorenz, System::GatedDiffusion, System::LotkaVolterra] {
        let (train, test) = dataset(system, 1000, 0, 0.0);
        let mut counts = train.class_counts();
        for (c, n) in test.class_counts().into_iter().enumerate() {
            counts[c] += n;
        }
        info(&format!("{} class balance", system.name()), format!("{counts:?} over 1000 samples"));
    }
}

fn main() {
    let started = Instant::now();
    let mut v = Verdicts { passed: 0, total: 0 };
    gradient_oracle(&mut v);
    rk4_order(&mut v);
    param_counts(&mut v);
    let model = oscillator(&mut v);
    van_der_pol(&mut v);
    sparse_noisy(&mut v);
    threshold_property(&mut v);
    stability(&mut v, model);
    diffusion(&mut v);
    class_balance();
    println!("{}/{} acceptance criteria passed in {:.0} s", v.passed, v.total, started.elapsed().as_secs_f64());
}
