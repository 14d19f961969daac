//! End-to-end acceptance checks. Each check prints one PASS/FAIL line; the
//! process exits nonzero if any check fails.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use fedsched::analysis::{self, BoundParams, GridSpec, Variant};
use fedsched::cli;
use fedsched::engine::{ExperimentConfig, GlobalScheduler, LocalScheduler, ModelKind, Simulation};
use fedsched::models::{Batch, ModelSpec};
use fedsched::schedulers::{
    fedexp_step, fedhyper_cl_step, fedhyper_g_step, fedhyper_sl_step, BetaClipMode, ClipBounds, GlobalLrState,
    LocalLrState,
};
use fedsched::vecmath::{dot, ParamVector};
use fedsched::MetricsRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn gradients_match_finite_differences() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for kind in 0..3 {
        for _ in 0..100 {
            let input_dim = rng.random_range(1..6);
            let num_classes = rng.random_range(2..5);
            let spec = match kind {
                0 => ModelSpec::Quadratic {
                    center: ParamVector::new(rand_vec(&mut rng, input_dim, 3.0)),
                },
                1 => ModelSpec::LogisticRegression { input_dim, num_classes },
                _ => ModelSpec::Mlp {
                    input_dim,
                    hidden_dim: rng.random_range(1..6),
                    num_classes,
                },
            };
            let n = rng.random_range(1..9);
            let labels = (0..n).map(|_| rng.random_range(0..num_classes)).collect();
            let batch = Batch::new(rand_vec(&mut rng, n * input_dim, 2.0), labels, input_dim).unwrap();
            let w = ParamVector::new(rand_vec(&mut rng, spec.dim(), 1.5));
            let analytic = spec.grad(&w, &batch).unwrap();
            let h = 1e-6;
            let mut numeric = Vec::with_capacity(w.len());
            for i in 0..w.len() {
                let mut plus = w.clone();
                plus.as_mut_slice()[i] += h;
                let mut minus = w.clone();
                minus.as_mut_slice()[i] -= h;
                numeric.push((spec.loss(&plus, &batch).unwrap() - spec.loss(&minus, &batch).unwrap()) / (2.0 * h));
            }
            let diff = analytic
                .as_slice()
                .iter()
                .zip(&numeric)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let scale = analytic
                .as_slice()
                .iter()
                .chain(&numeric)
                .fold(1e-8f64, |m, v| m.max(v.abs()));
            worst = worst.max(diff / scale);
        }
    }
    ensure(worst < 1e-5, || format!("max relative error {worst:e}"))?;
    Ok(format!("300 cases, max relative error {worst:.2e}"))
}

fn engine_matches_plain_fedavg() -> Result<String, String> {
    let centers = [vec![2.0, -1.0], vec![-0.5, 4.0]];
    let (alpha, beta, k) = (0.7, 0.1, 3);
    let cfg = ExperimentConfig {
        model: ModelKind::Quadratic,
        quadratic_center: vec![0.0, 0.0],
        client_centers: Some(centers.to_vec()),
        num_clients: 2,
        clients_per_round: 2,
        rounds: 3,
        local_steps: k,
        initial_alpha: alpha,
        initial_beta: beta,
        ..Default::default()
    };
    let sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
    let mut server = sim.initial_state();

    let mut w = [0.0f64; 2];
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let mut sum = [0.0f64; 2];
        for c in &centers {
            let mut local = w;
            for _ in 0..k {
                for d in 0..2 {
                    local[d] -= beta * (local[d] - c[d]);
                }
            }
            for d in 0..2 {
                sum[d] += w[d] - local[d];
            }
        }
        for d in 0..2 {
            w[d] -= alpha * (sum[d] / 2.0);
        }
        server = sim.run_round(&server).map_err(|e| e.to_string())?.0;
        for (a, b) in server.weights.as_slice().iter().zip(&w) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("3 rounds, max deviation {worst:.1e}"))
}

fn clipping_holds_under_fuzz() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut steps = 0usize;
    for _ in 0..10_000 {
        let bounds = ClipBounds::new(
            rng.random_range(1.01..20.0),
            rng.random_range(1.01..20.0),
            BetaClipMode::Relative,
        )
        .unwrap();
        let dim = rng.random_range(1..5);
        let alpha0 = rng.random_range(1.0 / bounds.gamma_alpha..=bounds.gamma_alpha);
        let beta0 = 10f64.powf(rng.random_range(-4.0..0.0));
        let mut g = GlobalLrState::new(alpha0);
        let mut sl = LocalLrState::new(beta0);
        let mut cl = LocalLrState::new(beta0);
        let mut prev: Option<ParamVector> = None;
        for _ in 0..rng.random_range(1..8) {
            let scale = 10f64.powf(rng.random_range(-3.0..3.0));
            let delta = ParamVector::new(rand_vec(&mut rng, dim, scale));
            g = fedhyper_g_step(&g, &delta, &bounds).map_err(|e| e.to_string())?;
            sl = fedhyper_sl_step(&sl, &delta, prev.as_ref(), &bounds).map_err(|e| e.to_string())?;
            let grad = ParamVector::new(rand_vec(&mut rng, dim, scale));
            cl = fedhyper_cl_step(&cl, &grad, prev.as_ref(), rng.random_range(1..6), &bounds)
                .map_err(|e| e.to_string())?;
            prev = Some(delta);
            steps += 1;
            let a = g.alpha;
            ensure(a >= 1.0 / bounds.gamma_alpha && a <= bounds.gamma_alpha, || {
                format!("alpha {a} outside box for gamma {}", bounds.gamma_alpha)
            })?;
            for b in [sl.beta_round_start, cl.beta_current] {
                let r = b / beta0;
                // one ulp of slack for the ratio itself
                let tol = 4.0 * f64::EPSILON;
                ensure(
                    r >= (1.0 / bounds.gamma_beta) * (1.0 - tol) && r <= bounds.gamma_beta * (1.0 + tol),
                    || format!("beta ratio {r} outside box for gamma {}", bounds.gamma_beta),
                )?;
            }
        }
    }
    Ok(format!("10000 sequences, {steps} steps"))
}

fn hypergradient_signs() -> Result<String, String> {
    let cfg = ExperimentConfig {
        model: ModelKind::Quadratic,
        quadratic_center: vec![0.0],
        client_centers: Some(vec![vec![-1.0], vec![3.0]]),
        num_clients: 2,
        clients_per_round: 2,
        rounds: 40,
        local_steps: 1,
        initial_alpha: 1.0,
        initial_beta: 0.05,
        scheduler_global: GlobalScheduler::FedHyperG,
        ..Default::default()
    };
    let mut checked = 0;
    // rounds where the dot product is below half an ulp of alpha
    let mut absorbed = 0;
    for (alpha0, beta0) in [(1.0, 0.05), (2.5, 0.9)] {
        let sim = Simulation::new(ExperimentConfig {
            initial_alpha: alpha0,
            initial_beta: beta0,
            ..cfg.clone()
        })
        .map_err(|e| e.to_string())?;
        let bounds = sim.config().bounds;
        let mut server = sim.initial_state();
        let mut prev_delta: Option<ParamVector> = None;
        for t in 0..40 {
            let alpha_before = server.global_lr.alpha;
            let (next, out) = sim.run_round(&server).map_err(|e| e.to_string())?;
            if let Some(p) = &prev_delta {
                let d = dot(&out.delta_t, p).unwrap();
                let raw = alpha_before + d;
                if raw == alpha_before {
                    absorbed += 1;
                } else if raw > 1.0 / bounds.gamma_alpha && raw < bounds.gamma_alpha {
                    let change = next.global_lr.alpha - alpha_before;
                    ensure(change.signum() == d.signum() || (d == 0.0 && change == 0.0), || {
                        format!("round {t}: alpha change {change} but dot {d}")
                    })?;
                    checked += 1;
                }
            }
            prev_delta = Some(out.delta_t);
            server = next;
        }
    }
    ensure(checked >= 20, || format!("only {checked} unclipped rounds"))?;

    let bounds = ClipBounds::default();
    let e = |v: f64| ParamVector::new(vec![v]);
    // (g_{k-1}, g_k, Δ^{t-1}) chosen so X and Y take each sign pattern.
    let quadrants = [
        (0.1, 0.2, 0.5, 1.0),
        (0.5, 0.2, -0.25, 1.0),
        (-0.5, 0.2, 0.25, -1.0),
        (-0.1, 0.2, -0.5, -1.0),
    ];
    for (prev_g, g, delta, expected) in quadrants {
        let state = LocalLrState {
            prev_local_grad: Some(e(prev_g)),
            ..LocalLrState::new(0.05)
        };
        let next = fedhyper_cl_step(&state, &e(g), Some(&e(delta)), 1, &bounds).map_err(|e| e.to_string())?;
        let x = g * prev_g;
        let y = g * delta;
        let change = next.beta_current - 0.05;
        ensure(
            change.signum() == (x + y).signum() && (x + y).signum() == expected,
            || format!("X={x} Y={y}: beta change {change}"),
        )?;
    }
    Ok(format!(
        "{checked} unclipped global steps ({absorbed} below rounding skipped), 4 local quadrants"
    ))
}

fn run_desk(seed: u64, global: GlobalScheduler) -> Vec<MetricsRecord> {
    fedsched::run_experiment(&ExperimentConfig {
        seed,
        scheduler_global: global,
        ..Default::default()
    })
    .expect("desk run finishes")
}

fn first_round_at_or_below(records: &[MetricsRecord], target: f64) -> Option<usize> {
    analysis::time_to_target(records, target, analysis::TargetMetric::LossBelow)
}

fn hypergradient_global_rate_converges_faster() -> Result<String, String> {
    let mut strictly = 0;
    let mut notes = Vec::new();
    for seed in 0..3 {
        let fixed = run_desk(seed, GlobalScheduler::Fixed);
        let hyper = run_desk(seed, GlobalScheduler::FedHyperG);
        let target = fixed.last().unwrap().train_loss;
        let fixed_rounds = first_round_at_or_below(&fixed, target).unwrap();
        let hyper_rounds = first_round_at_or_below(&hyper, target)
            .ok_or_else(|| format!("seed {seed}: never reached fixed final loss {target}"))?;
        ensure(hyper_rounds <= fixed_rounds, || {
            format!("seed {seed}: {hyper_rounds} rounds vs fixed {fixed_rounds}")
        })?;
        if hyper_rounds < fixed_rounds {
            strictly += 1;
        }
        notes.push(format!("{hyper_rounds}/{fixed_rounds}"));
    }
    ensure(strictly >= 2, || format!("strictly faster on {strictly} of 3 seeds"))?;
    Ok(format!(
        "rounds to fixed final loss (hyper/fixed): {}",
        notes.join(", ")
    ))
}

fn grid_improves_worst_cell() -> Result<String, String> {
    let fixed = Variant {
        global: GlobalScheduler::Fixed,
        local: LocalScheduler::Fixed,
    };
    let hyper = Variant {
        global: GlobalScheduler::FedHyperG,
        local: LocalScheduler::FedHyperCL,
    };
    let spec = GridSpec {
        alpha0_values: vec![0.5, 1.0, 2.0],
        beta0_values: vec![0.005, 0.05, 0.5],
        base: ExperimentConfig::default(),
        variants: vec![fixed, hyper],
        seeds: 3,
    };
    let grid = analysis::robustness_grid(&spec).map_err(|e| e.to_string())?;
    let delta = grid.delta(1);
    let cells: Vec<(usize, usize)> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
    let ok = cells.iter().filter(|&&(i, j)| delta[i][j] >= -0.005).count();
    let &(wi, wj) = cells
        .iter()
        .min_by(|a, b| grid.accuracy[0][a.0][a.1].total_cmp(&grid.accuracy[0][b.0][b.1]))
        .unwrap();
    let gain = delta[wi][wj];
    ensure(ok * 10 >= cells.len() * 8, || {
        format!("only {ok}/9 cells within -0.5 points")
    })?;
    ensure(gain >= 0.05, || {
        format!(
            "worst fixed cell ({}, {}) gains {:.2} points",
            spec.alpha0_values[wi],
            spec.beta0_values[wj],
            gain * 100.0
        )
    })?;
    Ok(format!(
        "{ok}/9 cells within -0.5 points, worst fixed cell ({}, {}) gains {:.2} points",
        spec.alpha0_values[wi],
        spec.beta0_values[wj],
        gain * 100.0
    ))
}

fn bound_values_and_decrease() -> Result<String, String> {
    let params = BoundParams::new(3.0, 1.0, 1.0, 1.0, 2, 2, 100).map_err(|e| e.to_string())?;
    let text = cli::cmd_bound(&params, None).map_err(|e| e.to_string())?;
    ensure(text == "P=6\nQ=10\nbound=0.35\n", || format!("report was {text:?}"))?;
    ensure(
        analysis::bound_p(&params) == 6.0
            && analysis::bound_q(&params) == 10.0
            && analysis::bound_value(&params) == 0.35,
        || "values differ from 6, 10, 0.35".into(),
    )?;
    let sweep: Vec<f64> = [10, 100, 1000, 10_000]
        .iter()
        .map(|&t| analysis::bound_value(&params.with_rounds(t)))
        .collect();
    ensure(sweep.windows(2).all(|w| w[1] < w[0]), || format!("sweep {sweep:?}"))?;
    Ok(format!("P=6 Q=10 bound=0.35, sweep {sweep:.4?}"))
}

fn fedexp_never_below_one() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..10_000 {
        let m = rng.random_range(1..8);
        let dim = rng.random_range(1..6);
        let scale = 10f64.powf(rng.random_range(-4.0..4.0));
        let updates: Vec<ParamVector> = (0..m)
            .map(|_| ParamVector::new(rand_vec(&mut rng, dim, scale)))
            .collect();
        let mut mean = vec![0.0; dim];
        for u in &updates {
            for (acc, v) in mean.iter_mut().zip(u.as_slice()) {
                *acc += v;
            }
        }
        let delta = ParamVector::new(mean.iter().map(|v| v / m as f64).collect());
        let eps = 10f64.powf(rng.random_range(-6.0..0.0));
        let a = fedexp_step(&updates, &delta, eps).map_err(|e| e.to_string())?;
        ensure(a >= 1.0, || format!("case {case}: alpha {a}"))?;
    }
    let u = ParamVector::new(vec![0.3, -1.2, 2.0]);
    let a = fedexp_step(&[u.clone(), u.clone(), u.clone()], &u, 1e-3).map_err(|e| e.to_string())?;
    ensure(a == 1.0, || format!("homogeneous case gave {a}"))?;
    Ok("10000 fuzzed inputs, homogeneous case = 1".into())
}

fn runs_are_byte_identical() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("run.cfg");
    std::fs::write(
        &config,
        "scheduler_global = fedhyper_g\nscheduler_local = fedhyper_cl\nrounds = 60\n",
    )
    .map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for (i, workers) in [1, 1, 4].into_iter().enumerate() {
        let out = dir.path().join(format!("m{i}.csv"));
        cli::cmd_run(&config, &out, Some(workers)).map_err(|e| e.to_string())?;
        outputs.push(std::fs::read(&out).map_err(|e| e.to_string())?);
    }
    ensure(outputs[0] == outputs[1], || "repeat run differs".into())?;
    ensure(outputs[0] == outputs[2], || "run with 4 workers differs".into())?;
    Ok(format!("3 runs, {} bytes each", outputs[0].len()))
}

fn global_rate_rises_then_settles() -> Result<String, String> {
    let mut notes = Vec::new();
    for seed in 0..3 {
        let alphas: Vec<f64> = run_desk(seed, GlobalScheduler::FedHyperG)
            .iter()
            .map(|r| r.alpha)
            .collect();
        let quarter = alphas.len() / 4;
        let a0 = alphas[0];
        ensure(alphas[..quarter].iter().any(|&a| a > a0), || {
            format!("seed {seed}: no rise in the first {quarter} rounds")
        })?;
        let peak = alphas.iter().copied().fold(f64::MIN, f64::max);
        let last = *alphas.last().unwrap();
        ensure(last < peak, || {
            format!("seed {seed}: final alpha {last} is the maximum")
        })?;
        notes.push(format!("peak {peak:.4} end {last:.4}"));
    }
    Ok(notes.join("; "))
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 10] = [
        ("gradient correctness", gradients_match_finite_differences),
        ("engine vs plain FedAvg oracle", engine_matches_plain_fedavg),
        ("learning-rate clipping", clipping_holds_under_fuzz),
        ("hypergradient sign semantics", hypergradient_signs),
        ("convergence speed", hypergradient_global_rate_converges_faster),
        ("learning-rate robustness grid", grid_improves_worst_cell),
        ("convergence bound", bound_values_and_decrease),
        ("fedexp lower bound", fedexp_never_below_one),
        ("determinism across worker counts", runs_are_byte_identical),
        ("global rate curve shape", global_rate_rises_then_settles),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {:>2} {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
