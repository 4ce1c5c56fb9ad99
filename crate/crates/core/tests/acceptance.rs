//! Acceptance criteria, one PASS/FAIL line each. Run with
//! `cargo test -p hyperlab-core --test acceptance -- --nocapture`.
//! Failures are reported, not raised: some targets are known to be out of reach.

use std::time::Instant;

use hyperlab_core::gradcheck;
use hyperlab_core::hyperp::Scheme;
use hyperlab_core::reference_data::{self, COMPUTE_LOSSES};
use hyperlab_core::scalefit::{self, cel, chinchilla_flops, fit_power_law, loo_cv_power, param_count, SweepPoint};
use hyperlab_core::theoremlab::{self, Budget};
use hyperlab_core::train::{self, DataSource, RunConfig};
use hyperlab_core::ModelConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn ok(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn within_rel(x: f64, target: f64, rel: f64) -> bool {
    (x - target).abs() <= rel * target.abs()
}

fn data_law() -> Outcome {
    let fit = fit_power_law(&reference_data::token_budget_curve(), false).expect("fit");
    ok(
        within(fit.exponent, 0.320, 0.005) && within_rel(fit.amplitude, 24.27, 0.05),
        format!("b={:.4} (0.320±0.005) A={:.3} (24.27±5%)", fit.exponent, fit.amplitude),
    )
}

fn loo() -> Outcome {
    let e = loo_cv_power(&reference_data::token_budget_curve()).expect("loo");
    ok((1.0..=2.0).contains(&e), format!("LOO error={e:.3}% (1.0–2.0%)"))
}

fn batch_law() -> Outcome {
    let fit = fit_power_law(&reference_data::batch_curve(), false).expect("fit");
    // η* grows with batch size, so the fitted exponent is negative.
    let b = -fit.exponent;
    ok(
        within(b, 0.558, 0.010) && within_rel(fit.amplitude, 4.66e-6, 0.10),
        format!("b={b:.4} (0.558±0.010) A={:.4e} (4.66e-6±10%)", fit.amplitude),
    )
}

fn leverage() -> Outcome {
    let base = fit_power_law(&reference_data::muon_compute_curve(), true).expect("fit");
    let last = COMPUTE_LOSSES[COMPUTE_LOSSES.len() - 1];
    let rho_h = cel(&base, last.1, last.3);
    let rho_m = cel(&base, last.1, last.4);
    let fmt = |r: &hyperlab_core::Result<f64>| match r {
        Ok(v) => format!("{v:.3}"),
        Err(e) => format!("error: {e}"),
    };
    let pass = within(base.floor, 1.23, 0.15)
        && rho_h.as_ref().is_ok_and(|v| within(*v, 1.58, 0.08))
        && rho_m.as_ref().is_ok_and(|v| within(*v, 0.70, 0.08));
    ok(
        pass,
        format!(
            "C0={:.3} (1.23±0.15) rho(MuonH+HyperP)={} (1.58±0.08) rho(MuonH)={} (0.70±0.08)",
            base.floor,
            fmt(&rho_h),
            fmt(&rho_m)
        ),
    )
}

fn flops() -> Outcome {
    let cfg = ModelConfig::full_scale(8, 32_000);
    let tokens = 10.4e9;
    let c = chinchilla_flops(&cfg, tokens, cfg.context).expect("flops");
    let small = chinchilla_flops(&cfg, tokens, 1).expect("flops");
    let n = param_count(&cfg).expect("count").total as f64;
    let six = 6.0 * n * tokens;
    ok(
        within_rel(c, 2.14e19, 0.05) && within_rel(small, six, 0.02),
        format!(
            "C={c:.4e} (2.14e19±5%, V=32000, N={n:.4e}) s=1: {small:.4e} vs 6NT={six:.4e} ({:+.2}%)",
            100.0 * (small / six - 1.0)
        ),
    )
}

fn theorems() -> Outcome {
    let reports = theoremlab::run_all(0, Budget::FULL).expect("theorem suite");
    for r in &reports {
        println!("        {} {:<28} stat={:.4e} threshold={:.3e}", if r.pass { "pass" } else { "FAIL" }, r.name, r.statistic, r.threshold);
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    ok(
        failed.is_empty(),
        format!("{}/{} checks pass{}", reports.len() - failed.len(), reports.len(), if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(", ")) }),
    )
}

fn sphere() -> Outcome {
    let mut cfg = RunConfig::desk_copy(2, Scheme::HyperP);
    cfg.tokens = 500 * cfg.batch_tokens as u64;
    cfg.anchor.t0 = cfg.tokens as f64;
    cfg.log_wall_time = false;
    let out = train::train(&cfg).expect("train");
    let worst = out.records.iter().map(|r| r.sphere_dev).fold(0.0, f64::max);
    ok(
        worst <= 1e-10 && out.summary.steps == 500,
        format!("{} steps, {} logged, max relative ‖W‖_F deviation={worst:.2e} (≤1e-10)", out.summary.steps, out.records.len()),
    )
}

fn gradients() -> Outcome {
    let checks = gradcheck::check_all(20, 0).expect("gradcheck");
    let worst = checks.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).expect("primitives");
    ok(
        checks.iter().all(|c| c.max_rel_err < 1e-5),
        format!("{} primitives × 20 instances, worst {} at {:.2e} (<1e-5)", checks.len(), worst.primitive, worst.max_rel_err),
    )
}

fn sensitivity() -> Outcome {
    let lrs: Vec<f64> = (1..=8).map(|i| 0.0025 * i as f64).collect();
    let (eta_star, loss_star, curvature) = (0.009, 2.47, 0.055);
    let noise = Normal::new(0.0, 0.002).expect("normal");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trials = 100;
    let ks: Vec<usize> = (3..lrs.len()).collect();
    let mut lr_err = vec![0.0; ks.len()];
    let mut loss_err = vec![0.0; ks.len()];
    for _ in 0..trials {
        let pts: Vec<SweepPoint> = lrs
            .iter()
            .map(|&lr| SweepPoint::new(lr, curvature * (lr / eta_star).ln().powi(2) + loss_star + noise.sample(&mut rng)))
            .collect();
        for (i, &k) in ks.iter().enumerate() {
            let s = scalefit::sensitivity(&pts, k).expect("sensitivity");
            lr_err[i] += s.lr_rel_err_pct / trials as f64;
            loss_err[i] += s.loss_rel_err_pct / trials as f64;
        }
    }
    let ratio_ok = lr_err.iter().zip(&loss_err).all(|(a, b)| *b * 10.0 <= *a);
    let mono = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0]);
    let min_ratio = lr_err.iter().zip(&loss_err).map(|(a, b)| a / b).fold(f64::INFINITY, f64::min);
    let rows: Vec<String> = ks
        .iter()
        .zip(lr_err.iter().zip(&loss_err))
        .map(|(k, (a, b))| format!("k={k}: {a:.2}%/{b:.4}%"))
        .collect();
    ok(
        ratio_ok && mono(&lr_err) && mono(&loss_err),
        format!("lr/loss err {} ; min ratio {min_ratio:.0}× (≥10×)", rows.join(", ")),
    )
}

fn desk_sweep(depth: usize, depth_mup: bool, grid: &[f64]) -> Option<usize> {
    let mut cfg = RunConfig::desk_copy(depth, Scheme::HyperP);
    cfg.anchor.d0 = 2;
    cfg.tokens = 100 * cfg.batch_tokens as u64;
    cfg.anchor.t0 = cfg.tokens as f64;
    cfg.model.depth_mup = depth_mup;
    cfg.data = DataSource::Copy {
        period: 48,
        length: 200_000,
        noise: 0.1,
    };
    cfg.log_wall_time = false;
    train::sweep(&cfg, grid).expect("sweep").argmin()
}

fn transfer() -> Outcome {
    let grid = [0.02, 0.04, 0.08, 0.16, 0.32];
    let h2 = desk_sweep(2, true, &grid);
    let h4 = desk_sweep(4, true, &grid);
    let p2 = desk_sweep(2, false, &grid);
    let p4 = desk_sweep(4, false, &grid);
    let pass = match (h2, h4, p2, p4) {
        (Some(a), Some(b), Some(c), Some(d)) => a.abs_diff(b) <= 1 && d <= c,
        _ => false,
    };
    ok(
        pass,
        format!("argmin index HyperP d2={h2:?} d4={h4:?}; without depth scaling d2={p2:?} d4={p4:?}"),
    )
}

fn main() {
    let criteria: [(&str, &str, fn() -> Outcome); 10] = [
        ("1", "data-law recovery", data_law),
        ("2", "leave-one-out error", loo),
        ("3", "batch-law recovery", batch_law),
        ("4", "compute efficiency leverage", leverage),
        ("5", "FLOPs accounting", flops),
        ("6", "theorem suite", theorems),
        ("7", "sphere preservation", sphere),
        ("8", "gradient integrity", gradients),
        ("9", "sensitivity property", sensitivity),
        ("10", "desk-scale transfer (soft)", transfer),
    ];
    let mut passed = 0;
    for (id, name, f) in criteria {
        let start = Instant::now();
        let o = f();
        let tag = match (o.pass, id) {
            (true, _) => "PASS",
            (false, "10") => "SOFT-FAIL",
            (false, _) => "FAIL",
        };
        passed += usize::from(o.pass);
        println!("{tag} [{id:>2}] {name}: {} ({:.2}s)", o.detail, start.elapsed().as_secs_f64());
    }
    println!("{passed}/{} criteria pass", criteria.len());
}
