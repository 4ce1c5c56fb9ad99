//! Monte-Carlo checks of the sphere-optimization theory: first-order tangent
//! form, weight-decay no-op, width and depth transfer, bounded logits, gating
//! RMS and the LayerNorm Jacobian.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::{layer_norm_rows, Graph};
use crate::error::Result;
use crate::hyperp::Scheme;
use crate::linalg::{frobenius_norm, l2_norm, mat_vec, newton_schulz_orthogonalize, vector_rms, Mat};
use crate::optim::{hypersphere_project, muonh_step_decayed, tangent_project, OptimConfig, OptimizerKind, OptimizerState};
use crate::train::{train, DataSource, RunConfig};

/// Every pass/fail band in one place.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Thresholds {
    /// Accepted band for `R(ε/2)/R(ε)` and `D(η/2)/D(η)`.
    pub quarter_band: (f64, f64),
    /// Fraction of random trials that must land in the band.
    pub min_pass_fraction: f64,
    /// Relative tolerance of the analytic residual for `Δ ⟂ W`.
    pub orthogonal_residual_rel: f64,
    pub width_ratio_tol: f64,
    pub depth_slope_tol: f64,
    /// Bound on `max/min − 1` of `‖Δx_L‖` across depths with `η ∝ 1/√L`.
    pub depth_flat_tol: f64,
    pub bounded_logit_violations: usize,
    pub gating_rms_rel: f64,
    pub ln_jacobian_abs: f64,
    /// Multiple of the across-seed loss band allowed between decay settings.
    pub wd_training_band_mult: f64,
}

pub const THRESHOLDS: Thresholds = Thresholds {
    quarter_band: (0.2, 0.3),
    min_pass_fraction: 0.99,
    orthogonal_residual_rel: 0.2,
    width_ratio_tol: 0.1,
    depth_slope_tol: 0.07,
    depth_flat_tol: 0.15,
    bounded_logit_violations: 0,
    gating_rms_rel: 0.05,
    ln_jacobian_abs: 1e-6,
    wd_training_band_mult: 3.0,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Pass when `statistic ≤ threshold`.
    AtMost,
    /// Pass when `statistic ≥ threshold`.
    AtLeast,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    pub statistic: f64,
    pub threshold: f64,
    pub direction: Direction,
    pub pass: bool,
    pub details: Value,
}

impl CheckReport {
    fn new(name: &str, trials: usize, statistic: f64, threshold: f64, direction: Direction, details: Value) -> Self {
        let pass = statistic.is_finite()
            && match direction {
                Direction::AtMost => statistic <= threshold,
                Direction::AtLeast => statistic >= threshold,
            };
        Self {
            name: name.to_string(),
            trials,
            statistic,
            threshold,
            direction,
            pass,
            details,
        }
    }
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
}

fn in_band(x: f64, band: (f64, f64)) -> bool {
    x >= band.0 && x <= band.1
}

fn sphere_residual(w: &Mat, delta: &Mat, eps: f64) -> Result<f64> {
    let c = frobenius_norm(w);
    let step = delta.scale(eps);
    let projected = hypersphere_project(&w.add(&step), c)?;
    let tangent = tangent_project(&step, w)?;
    Ok(frobenius_norm(&projected.sub(w).sub(&tangent)))
}

/// Residual of the tangent-space expansion shrinks quadratically.
pub fn check_first_order_expansion(seed: u64, trials: usize) -> Result<CheckReport> {
    let mut r = rng(seed, 1);
    let band = THRESHOLDS.quarter_band;
    let mut passed = 0usize;
    let mut ratios = Vec::new();
    for _ in 0..trials {
        let (m, n) = (r.random_range(2..24), r.random_range(2..24));
        let w = Mat::randn(m, n, &mut r);
        let delta = Mat::randn(m, n, &mut r);
        let mut ok = true;
        for eps in [1e-2, 1e-3] {
            let ratio = sphere_residual(&w, &delta, eps / 2.0)? / sphere_residual(&w, &delta, eps)?;
            ok &= in_band(ratio, band);
            ratios.push(ratio);
        }
        passed += usize::from(ok);
    }

    let w = Mat::randn(8, 12, &mut r);
    let radial = sphere_residual(&w, &w, 1e-2)?;
    let raw = Mat::randn(8, 12, &mut r);
    let perp = tangent_project(&raw, &w)?;
    let eps = 1e-3;
    let predicted = frobenius_norm(&perp).powi(2) * eps * eps / (2.0 * frobenius_norm(&w));
    let observed = sphere_residual(&w, &perp, eps)?;
    let perp_rel = (observed - predicted).abs() / predicted;

    let frac = passed as f64 / trials.max(1) as f64;
    let stat = if perp_rel <= THRESHOLDS.orthogonal_residual_rel && radial <= 1e-12 {
        frac
    } else {
        0.0
    };
    let (lo, hi) = ratios.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    Ok(CheckReport::new(
        "first_order_expansion",
        trials,
        stat,
        THRESHOLDS.min_pass_fraction,
        Direction::AtLeast,
        json!({
            "pass_fraction": frac,
            "ratio_min": lo,
            "ratio_max": hi,
            "radial_residual": radial,
            "orthogonal_residual": observed,
            "orthogonal_predicted": predicted,
            "orthogonal_rel_err": perp_rel,
        }),
    ))
}

fn decayed_step(w: &Mat, g: &Mat, eta: f64, lambda: f64) -> Result<Mat> {
    let mut state = OptimizerState::new(OptimizerKind::MuonH, w, OptimConfig::default())?;
    muonh_step_decayed(w, g, eta, lambda, &mut state)
}

fn decay_gap(w: &Mat, g: &Mat, eta: f64, lambda: f64) -> Result<f64> {
    Ok(frobenius_norm(&decayed_step(w, g, eta, lambda)?.sub(&decayed_step(w, g, eta, 0.0)?)))
}

/// Decay applied before re-projection changes the step only at second order.
pub fn check_wd_noop(seed: u64, trials: usize) -> Result<CheckReport> {
    let mut r = rng(seed, 2);
    let band = THRESHOLDS.quarter_band;
    let mut passed = 0usize;
    let mut total = 0usize;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (m, n) = (r.random_range(4..20), r.random_range(4..20));
        let w = Mat::randn(m, n, &mut r);
        let g = Mat::randn(m, n, &mut r);
        for eta in [1e-2, 1e-3] {
            for lambda in [0.1, 1.0] {
                let ratio = decay_gap(&w, &g, eta / 2.0, lambda)? / decay_gap(&w, &g, eta, lambda)?;
                total += 1;
                if in_band(ratio, band) {
                    passed += 1;
                } else {
                    worst = worst.max((ratio - 0.25).abs());
                }
            }
        }
    }
    let w = Mat::randn(10, 6, &mut r);
    let g = Mat::randn(10, 6, &mut r);
    let zero_decay = decay_gap(&w, &g, 1e-2, 0.0)?;
    let c3 = decay_gap(&w, &g, 1e-3, 0.5)? / 1e-6;
    let c4 = decay_gap(&w, &g, 1e-4, 0.5)? / 1e-8;
    let limit_ratio = c4 / c3;
    let frac = passed as f64 / total.max(1) as f64;
    let stat = if zero_decay == 0.0 && (0.5..=2.0).contains(&limit_ratio) {
        frac
    } else {
        0.0
    };
    Ok(CheckReport::new(
        "wd_noop",
        total,
        stat,
        THRESHOLDS.min_pass_fraction,
        Direction::AtLeast,
        json!({
            "pass_fraction": frac,
            "worst_off_band": worst,
            "zero_decay_gap": zero_decay,
            "gap_over_eta2_1e-3": c3,
            "gap_over_eta2_1e-4": c4,
            "limit_ratio": limit_ratio,
        }),
    ))
}

/// Two short MuonH trainings differing only in sphere decay end within a
/// multiple of the across-seed loss band.
pub fn check_wd_training(seed: u64, seeds: usize, steps: usize) -> Result<CheckReport> {
    let run = |s: u64, lambda: f64| -> Result<f64> {
        let mut cfg = RunConfig::desk_copy(2, Scheme::HyperP);
        cfg.seed = s;
        cfg.tokens = (steps * cfg.batch_tokens) as u64;
        cfg.anchor.t0 = cfg.tokens as f64;
        cfg.data = DataSource::Copy {
            period: 48,
            length: 20_000,
            noise: 0.1,
        };
        cfg.sphere_weight_decay = lambda;
        cfg.log_wall_time = false;
        Ok(train(&cfg)?.summary.val_loss)
    };
    let mut base = Vec::new();
    let mut decayed = Vec::new();
    for i in 0..seeds as u64 {
        base.push(run(seed + i, 0.0)?);
        decayed.push(run(seed + i, 0.1)?);
    }
    let band = base.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - base.iter().cloned().fold(f64::INFINITY, f64::min);
    let worst_gap = base
        .iter()
        .zip(&decayed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let stat = if band > 0.0 { worst_gap / band } else { f64::INFINITY };
    Ok(CheckReport::new(
        "wd_noop_training",
        2 * seeds,
        stat,
        THRESHOLDS.wd_training_band_mult,
        Direction::AtMost,
        json!({ "loss_no_decay": base, "loss_decay_0.1": decayed, "seed_band": band, "worst_gap": worst_gap }),
    ))
}

fn exact_polar(m: &Mat) -> Mat {
    let d = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let svd = d.svd(true, true);
    let q = svd.u.expect("u requested") * svd.v_t.expect("v_t requested");
    Mat::from_vec(m.rows(), m.cols(), q.transpose().as_slice().to_vec()).expect("finite polar factor")
}

/// Flat-spectrum matrices on the `C·√d_out` sphere keep output RMS at `C·RMS(x)`.
pub fn check_width_transfer(seed: u64, mats_per_width: usize, inputs_per_mat: usize) -> Result<CheckReport> {
    let mut r = rng(seed, 3);
    let c = 0.7;
    let widths = [64usize, 128, 256, 512];
    let mut means = Vec::new();
    for &d in &widths {
        let mut acc = 0.0;
        for _ in 0..mats_per_width {
            let ms = newton_schulz_orthogonalize(&Mat::randn(d, d, &mut r), 5);
            let w = ms.scale(c * (d as f64).sqrt() / frobenius_norm(&ms));
            for _ in 0..inputs_per_mat {
                let x: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
                acc += vector_rms(&mat_vec(&w, &x)) / (c * vector_rms(&x));
            }
        }
        means.push(acc / (mats_per_width * inputs_per_mat) as f64);
    }
    let worst = means.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    let drift = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - means.iter().cloned().fold(f64::INFINITY, f64::min);

    let d = 64;
    let q = exact_polar(&Mat::randn(d, d, &mut r));
    let w = q.scale(c);
    let x: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
    let isometry_ratio = vector_rms(&mat_vec(&w, &x)) / (c * vector_rms(&x));

    // Negative control: rank one with the same Frobenius norm, probed along its row space.
    let u: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
    let v: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
    let (nu, nv) = (l2_norm(&u), l2_norm(&v));
    let mut rank1 = Mat::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            rank1.set(i, j, c * (d as f64).sqrt() * (u[i] / nu) * (v[j] / nv));
        }
    }
    let aligned: Vec<f64> = v.iter().map(|x| x / nv).collect();
    let rank1_ratio = vector_rms(&mat_vec(&rank1, &aligned)) / (c * vector_rms(&aligned));

    Ok(CheckReport::new(
        "width_transfer",
        widths.len() * mats_per_width * inputs_per_mat,
        worst.max(drift),
        THRESHOLDS.width_ratio_tol,
        Direction::AtMost,
        json!({
            "widths": widths,
            "mean_ratio": means,
            "max_abs_dev": worst,
            "drift": drift,
            "isometry_ratio": isometry_ratio,
            "rank1_aligned_ratio": rank1_ratio,
        }),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DepthRegime {
    /// `‖U_l‖_F = c_G`.
    Normalized,
    /// Raw gradient steps, whose norm carries one factor of `α_L`.
    GradientScaled,
}

/// Linear residual stack `x ← x + α·x·W_lᵀ`, optionally post-LayerNorm; returns
/// `‖Δx_L‖_F` after one update of every layer toward `⟨C, x_L⟩`.
fn depth_perturbation(depth: usize, eta: f64, regime: DepthRegime, post_norm: bool, seed: u64) -> Result<f64> {
    let n = 32;
    let batch = 16;
    let mut r = rng(seed, depth as u64);
    let alpha = 1.0 / (depth as f64).sqrt();
    let mut g = Graph::new();
    let x0 = g.data("x0", batch, n)?;
    let target = g.data("c", batch, n)?;
    let mut x = x0;
    for l in 0..depth {
        let w = g.param(&format!("w{l}"), n, n)?;
        let branch = g.linear(x, w)?;
        let scaled = g.scale(branch, alpha)?;
        x = g.add(x, scaled)?;
        if post_norm {
            x = g.layer_norm(x, 1e-12)?;
        }
    }
    let prod = g.mul(x, target)?;
    let obj = g.sum(prod)?;
    g.set_output(obj);

    let mut bind: HashMap<String, Mat> = HashMap::new();
    let mut start = Mat::randn(batch, n, &mut r);
    if post_norm {
        start = layer_norm_rows(&start, 1e-12);
    }
    bind.insert("x0".into(), start);
    bind.insert("c".into(), Mat::randn(batch, n, &mut r));
    for l in 0..depth {
        // Orthogonal weights pin each block's Jacobian to O(1).
        bind.insert(format!("w{l}"), Mat::random_orthogonal(n, &mut r));
    }
    let vals = g.evaluate(&bind)?;
    let before = vals.get(x).clone();
    let grads = g.backward(&vals, &Mat::filled(1, 1, 1.0))?;
    let c_g = 1.0;
    for l in 0..depth {
        let name = format!("w{l}");
        let w = &bind[&name];
        let grad = &grads[&name];
        let step = match regime {
            DepthRegime::Normalized => grad.scale(eta * c_g / frobenius_norm(grad)),
            DepthRegime::GradientScaled => grad.scale(eta),
        };
        let next = hypersphere_project(&w.add(&step), frobenius_norm(w))?;
        bind.insert(name, next);
    }
    let after = g.evaluate(&bind)?;
    Ok(frobenius_norm(&after.get(x).sub(&before)))
}

fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

pub const DEPTHS: [usize; 5] = [16, 32, 64, 128, 256];

fn depth_curve(regime: DepthRegime, post_norm: bool, lr_scaled: bool, seed: u64, trials: usize) -> Result<Vec<f64>> {
    let eta0 = 1e-3;
    DEPTHS
        .iter()
        .map(|&l| {
            let eta = if lr_scaled { eta0 / (l as f64).sqrt() } else { eta0 };
            let mut acc = 0.0;
            for t in 0..trials as u64 {
                acc += depth_perturbation(l, eta, regime, post_norm, seed.wrapping_add(t * 7919))?;
            }
            Ok(acc / trials as f64)
        })
        .collect()
}

/// Depth exponents of the accumulated perturbation in four settings.
pub fn check_depth_scaling(seed: u64, trials: usize) -> Result<Vec<CheckReport>> {
    let ls: Vec<f64> = DEPTHS.iter().map(|&l| l as f64).collect();
    let tol = THRESHOLDS.depth_slope_tol;
    let mut out = Vec::new();
    let n = DEPTHS.len() * trials;

    let norm = depth_curve(DepthRegime::Normalized, false, false, seed, trials)?;
    let s = loglog_slope(&ls, &norm);
    out.push(CheckReport::new(
        "depth_normalized_slope",
        n,
        (s - 0.5).abs(),
        tol,
        Direction::AtMost,
        json!({ "depths": DEPTHS, "delta_norm": norm, "slope": s, "expected": 0.5 }),
    ));

    let grad = depth_curve(DepthRegime::GradientScaled, false, false, seed, trials)?;
    let s = loglog_slope(&ls, &grad);
    out.push(CheckReport::new(
        "depth_gradient_scaled_slope",
        n,
        s.abs(),
        tol,
        Direction::AtMost,
        json!({ "depths": DEPTHS, "delta_norm": grad, "slope": s, "expected": 0.0 }),
    ));

    let flat = depth_curve(DepthRegime::Normalized, false, true, seed, trials)?;
    let (lo, hi) = flat.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let s = loglog_slope(&ls, &flat);
    out.push(CheckReport::new(
        "depth_lr_flattening",
        n,
        hi / lo - 1.0,
        THRESHOLDS.depth_flat_tol,
        Direction::AtMost,
        json!({ "depths": DEPTHS, "delta_norm": flat, "slope": s }),
    ));

    let post = depth_curve(DepthRegime::Normalized, true, false, seed, trials)?;
    let s = loglog_slope(&ls, &post);
    out.push(CheckReport::new(
        "depth_postnorm_slope",
        n,
        (s - 0.5).abs(),
        tol,
        Direction::AtMost,
        json!({ "depths": DEPTHS, "delta_norm": post, "slope": s, "expected": 0.5 }),
    ));
    Ok(out)
}

/// `‖Wx‖ ≤ C‖x‖`, the RMS form, and the per-element bound on the Frobenius sphere.
pub fn check_bounded_logits(seed: u64, trials: usize) -> Result<CheckReport> {
    let mut r = rng(seed, 5);
    let mut violations = 0usize;
    let mut tightest: f64 = 0.0;
    for _ in 0..trials {
        let (d_out, d_in) = (r.random_range(1..33), r.random_range(1..33));
        let c = r.random_range(0.1..10.0);
        let raw = Mat::randn(d_out, d_in, &mut r);
        let w = hypersphere_project(&raw, c)?;
        let x: Vec<f64> = (0..d_in).map(|_| r.sample(StandardNormal)).collect();
        let y = mat_vec(&w, &x);
        let (ny, nx) = (l2_norm(&y), l2_norm(&x));
        let slack = 1e-12 * c * nx;
        let rms_bound = c * (d_in as f64 / d_out as f64).sqrt() * vector_rms(&x);
        let elem = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if ny > c * nx + slack || vector_rms(&y) > rms_bound + slack || elem > c * nx + slack {
            violations += 1;
        }
        tightest = tightest.max(ny / (c * nx));
    }
    let mut e = Mat::zeros(3, 3);
    e.set(0, 0, 2.5);
    let tight = l2_norm(&mat_vec(&e, &[1.0, 0.0, 0.0])) / 2.5;
    Ok(CheckReport::new(
        "bounded_logits",
        trials,
        violations as f64,
        THRESHOLDS.bounded_logit_violations as f64,
        Direction::AtMost,
        json!({ "max_ratio_observed": tightest, "rank1_tight_ratio": tight }),
    ))
}

fn combined_rms(gates: &[f64], dim: usize, trials: usize, sqrt_gate: bool, r: &mut ChaCha8Rng) -> f64 {
    let weights: Vec<f64> = gates.iter().map(|&g| if sqrt_gate { g.sqrt() } else { g }).collect();
    let mut y = vec![0.0; dim];
    let mut acc = 0.0;
    for _ in 0..trials {
        y.iter_mut().for_each(|v| *v = 0.0);
        for &w in &weights {
            for v in y.iter_mut() {
                let e: f64 = r.sample(StandardNormal);
                *v += w * e;
            }
        }
        acc += vector_rms(&y);
    }
    acc / trials as f64
}

pub const GATING_KS: [usize; 6] = [2, 4, 8, 16, 32, 64];

/// Classical gating shrinks the routed output as `1/√k`; square-root gating keeps it at `r`.
pub fn check_gating_rms(seed: u64, trials: usize, dim: usize) -> Result<CheckReport> {
    let mut r = rng(seed, 6);
    let mut worst: f64 = 0.0;
    let mut classical = Vec::new();
    let mut sqrt = Vec::new();
    for &k in &GATING_KS {
        let gates = vec![1.0 / k as f64; k];
        let c = combined_rms(&gates, dim, trials, false, &mut r);
        let s = combined_rms(&gates, dim, trials, true, &mut r);
        worst = worst.max((c * (k as f64).sqrt() - 1.0).abs()).max((s - 1.0).abs());
        classical.push(c);
        sqrt.push(s);
    }
    let one_hot = combined_rms(&[0.97, 0.01, 0.01, 0.01], dim, trials / 10 + 1, false, &mut r);
    let mut r1 = rng(seed, 60);
    let mut r2 = rng(seed, 60);
    let k1_classical = combined_rms(&[1.0], dim, 100, false, &mut r1);
    let k1_sqrt = combined_rms(&[1.0], dim, 100, true, &mut r2);
    Ok(CheckReport::new(
        "gating_rms",
        trials * GATING_KS.len() * 2,
        worst,
        THRESHOLDS.gating_rms_rel,
        Direction::AtMost,
        json!({
            "k": GATING_KS,
            "classical_rms": classical,
            "sqrt_rms": sqrt,
            "near_one_hot_classical": one_hot,
            "k1_identical": k1_classical == k1_sqrt,
        }),
    ))
}

/// `J = (1/σ)(P − v vᵀ/(d σ²))` for `LN(u) = (u − μ)/σ`.
pub fn ln_jacobian(u: &[f64], eps: f64) -> Mat {
    let d = u.len();
    let df = d as f64;
    let mu = u.iter().sum::<f64>() / df;
    let v: Vec<f64> = u.iter().map(|x| x - mu).collect();
    let sigma = (v.iter().map(|x| x * x).sum::<f64>() / df + eps).sqrt();
    let mut j = Mat::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            let p = if a == b { 1.0 } else { 0.0 } - 1.0 / df;
            j.set(a, b, (p - v[a] * v[b] / (df * sigma * sigma)) / sigma);
        }
    }
    j
}

fn ln_fd_jacobian(u: &[f64], eps: f64, h: f64) -> Mat {
    let d = u.len();
    let mut j = Mat::zeros(d, d);
    for b in 0..d {
        let mut up = u.to_vec();
        let mut dn = u.to_vec();
        up[b] += h;
        dn[b] -= h;
        let fu = layer_norm_rows(&Mat::row_vector(&up), eps);
        let fd = layer_norm_rows(&Mat::row_vector(&dn), eps);
        for a in 0..d {
            j.set(a, b, (fu.get(0, a) - fd.get(0, a)) / (2.0 * h));
        }
    }
    j
}

/// Analytic LayerNorm Jacobian against central differences.
pub fn check_ln_jacobian(seed: u64, trials: usize) -> Result<CheckReport> {
    let mut r = rng(seed, 7);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut nullspace: f64 = 0.0;
    for t in 0..trials {
        let d = if t % 2 == 0 { 8 } else { 64 };
        let scale = r.random_range(0.5..3.0);
        let shift = r.random_range(-2.0..2.0);
        let u: Vec<f64> = (0..d).map(|_| shift + scale * r.sample::<f64, _>(StandardNormal)).collect();
        let ja = ln_jacobian(&u, eps);
        let jf = ln_fd_jacobian(&u, eps, 1e-5);
        worst = worst.max(ja.max_abs_diff(&jf));
        let ones = vec![1.0; d];
        nullspace = nullspace.max(mat_vec(&ja, &ones).iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    // Unit-σ, zero-mean input: J = P − v vᵀ/d.
    let mut u: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
    let s = (u.iter().map(|x| x * x).sum::<f64>() / 8.0).sqrt();
    u.iter_mut().for_each(|x| *x /= s);
    let j = ln_jacobian(&u, 0.0);
    let mut simple = Mat::zeros(8, 8);
    for a in 0..8 {
        for b in 0..8 {
            let p = if a == b { 1.0 } else { 0.0 } - 1.0 / 8.0;
            simple.set(a, b, p - u[a] * u[b] / 8.0);
        }
    }
    let unit_sigma_err = j.max_abs_diff(&simple);
    Ok(CheckReport::new(
        "ln_jacobian",
        trials,
        worst,
        THRESHOLDS.ln_jacobian_abs,
        Direction::AtMost,
        json!({ "max_nullspace_residual": nullspace, "unit_sigma_err": unit_sigma_err }),
    ))
}

/// Trial counts for a full run.
#[derive(Clone, Copy, Debug)]
pub struct Budget {
    pub expansion_trials: usize,
    pub wd_trials: usize,
    pub wd_training_seeds: usize,
    pub wd_training_steps: usize,
    pub width_mats: usize,
    pub width_inputs: usize,
    pub depth_trials: usize,
    pub logit_trials: usize,
    pub gating_trials: usize,
    pub gating_dim: usize,
    pub ln_trials: usize,
}

impl Budget {
    pub const FULL: Budget = Budget {
        expansion_trials: 200,
        wd_trials: 100,
        wd_training_seeds: 3,
        wd_training_steps: 50,
        width_mats: 2,
        width_inputs: 32,
        depth_trials: 32,
        logit_trials: 100_000,
        gating_trials: 10_000,
        gating_dim: 256,
        ln_trials: 100,
    };

    /// A few seconds of work; same checks at lower trial counts.
    pub const QUICK: Budget = Budget {
        expansion_trials: 40,
        wd_trials: 20,
        wd_training_seeds: 2,
        wd_training_steps: 20,
        width_mats: 1,
        width_inputs: 16,
        depth_trials: 32,
        logit_trials: 5_000,
        gating_trials: 1_000,
        gating_dim: 256,
        ln_trials: 20,
    };
}

/// Every check in a fixed order.
pub fn run_all(seed: u64, budget: Budget) -> Result<Vec<CheckReport>> {
    let mut out = vec![
        check_first_order_expansion(seed, budget.expansion_trials)?,
        check_wd_noop(seed, budget.wd_trials)?,
        check_wd_training(seed, budget.wd_training_seeds, budget.wd_training_steps)?,
        check_width_transfer(seed, budget.width_mats, budget.width_inputs)?,
    ];
    out.extend(check_depth_scaling(seed, budget.depth_trials)?);
    out.push(check_bounded_logits(seed, budget.logit_trials)?);
    out.push(check_gating_rms(seed, budget.gating_trials, budget.gating_dim)?);
    out.push(check_ln_jacobian(seed, budget.ln_trials)?);
    Ok(out)
}

/// Fixed-width summary table.
pub fn summary_table(reports: &[CheckReport]) -> String {
    let mut s = format!("{:<30} {:>8} {:>14} {:>12}  {}\n", "check", "trials", "statistic", "threshold", "result");
    for r in reports {
        let op = match r.direction {
            Direction::AtMost => "<=",
            Direction::AtLeast => ">=",
        };
        s.push_str(&format!(
            "{:<30} {:>8} {:>14.6e} {:>2}{:>10.3e}  {}\n",
            r.name,
            r.trials,
            r.statistic,
            op,
            r.threshold,
            if r.pass { "PASS" } else { "FAIL" }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radial_direction_has_no_residual() {
        let mut r = rng(0, 0);
        let w = Mat::randn(5, 7, &mut r);
        assert!(sphere_residual(&w, &w, 1e-2).unwrap() < 1e-14);
    }

    #[test]
    fn expansion_quick() {
        let rep = check_first_order_expansion(1, 30).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn wd_noop_quick() {
        let rep = check_wd_noop(2, 10).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert_eq!(rep.details["zero_decay_gap"], 0.0);
    }

    #[test]
    fn ln_jacobian_annihilates_ones() {
        let rep = check_ln_jacobian(3, 10).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.details["max_nullspace_residual"].as_f64().unwrap() < 1e-10);
        assert!(rep.details["unit_sigma_err"].as_f64().unwrap() < 1e-14);
    }

    #[test]
    fn bounded_logits_quick() {
        let rep = check_bounded_logits(4, 2_000).unwrap();
        assert!(rep.pass);
        assert!((rep.details["rank1_tight_ratio"].as_f64().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gating_one_hot_and_identity() {
        let rep = check_gating_rms(5, 500, 256).unwrap();
        assert_eq!(rep.details["k1_identical"], true);
        let oh = rep.details["near_one_hot_classical"].as_f64().unwrap();
        assert!((oh - 1.0).abs() < 0.05, "{oh}");
        let c4 = rep.details["classical_rms"][1].as_f64().unwrap();
        assert!((c4 - 0.5).abs() < 0.03, "{c4}");
    }

    #[test]
    fn slope_of_exact_power() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(0.5)).collect();
        assert!((loglog_slope(&xs, &ys) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn report_direction_semantics() {
        assert!(CheckReport::new("a", 1, 0.5, 1.0, Direction::AtMost, Value::Null).pass);
        assert!(!CheckReport::new("a", 1, 0.5, 1.0, Direction::AtLeast, Value::Null).pass);
        assert!(!CheckReport::new("a", 1, f64::NAN, 1.0, Direction::AtMost, Value::Null).pass);
    }

    #[test]
    fn polar_factor_is_isometry() {
        let mut r = rng(9, 9);
        let q = exact_polar(&Mat::randn(6, 6, &mut r));
        assert!(q.t_matmul(&q).max_abs_diff(&Mat::identity(6)) < 1e-12);
    }
}
