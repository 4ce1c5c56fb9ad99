//! Curve fits and accounting: LR-sweep parabolas, power laws with and without
//! a floor, parameter and FLOPs counts, compute efficiency leverage, subset
//! sensitivity and leave-one-out validation.

use std::collections::BTreeMap;

use itertools::Itertools;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyperp::Group;
use crate::model::{param_specs, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lr: f64,
    pub loss: f64,
}

impl SweepPoint {
    pub fn new(lr: f64, loss: f64) -> Self {
        Self { lr, loss }
    }
}

/// `loss = a·(ln η)² + b·ln η + c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadFit {
    pub eta_star: f64,
    pub loss_star: f64,
    pub curvature: f64,
    pub linear: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `eta_star` lies outside `[min lr / 4, max lr · 4]`.
    pub extrapolated: bool,
}

impl QuadFit {
    pub fn predict(&self, lr: f64) -> f64 {
        let x = lr.ln();
        self.curvature * x * x + self.linear * x + self.intercept
    }
}

/// Collapse repeated learning rates to their mean loss, sorted by lr.
fn collapse(points: &[SweepPoint]) -> Result<Vec<SweepPoint>> {
    let mut groups: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for p in points {
        if !(p.lr > 0.0 && p.lr.is_finite() && p.loss.is_finite()) {
            return Err(Error::InvalidInput(format!("bad sweep point {p:?}")));
        }
        let e = groups.entry(p.lr.to_bits()).or_insert((p.lr, 0.0, 0));
        e.1 += p.loss;
        e.2 += 1;
    }
    let mut out: Vec<SweepPoint> = groups
        .into_values()
        .map(|(lr, sum, n)| SweepPoint::new(lr, sum / n as f64))
        .collect();
    out.sort_by(|a, b| a.lr.total_cmp(&b.lr));
    Ok(out)
}

pub fn fit_quadratic_loglr(points: &[SweepPoint]) -> Result<QuadFit> {
    let pts = collapse(points)?;
    if pts.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "quadratic fit needs at least 3 distinct learning rates, got {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let xbar = pts.iter().map(|p| p.lr.ln()).sum::<f64>() / n;
    // Normal equations in the centered variable u = ln η − x̄.
    let mut ata = Matrix3::<f64>::zeros();
    let mut aty = Vector3::<f64>::zeros();
    for p in &pts {
        let u = p.lr.ln() - xbar;
        let row = Vector3::new(u * u, u, 1.0);
        ata += row * row.transpose();
        aty += row * p.loss;
    }
    let sol = ata
        .lu()
        .solve(&aty)
        .ok_or_else(|| Error::InvalidInput("singular quadratic design".into()))?;
    let (a, bu, cu) = (sol[0], sol[1], sol[2]);
    let linear = bu - 2.0 * a * xbar;
    let intercept = a * xbar * xbar - bu * xbar + cu;

    let mean = pts.iter().map(|p| p.loss).sum::<f64>() / n;
    let ss_tot: f64 = pts.iter().map(|p| (p.loss - mean).powi(2)).sum();
    let ss_res: f64 = pts
        .iter()
        .map(|p| {
            let u = p.lr.ln() - xbar;
            (p.loss - (a * u * u + bu * u + cu)).powi(2)
        })
        .sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };

    let u_star = -bu / (2.0 * a);
    let fit = QuadFit {
        eta_star: (xbar + u_star).exp(),
        loss_star: cu - bu * bu / (4.0 * a),
        curvature: a,
        linear,
        intercept,
        r_squared,
        extrapolated: false,
    };
    if !(a > 0.0) {
        return Err(Error::NoInteriorMinimum(Box::new(fit)));
    }
    let lo = pts[0].lr / 4.0;
    let hi = pts[pts.len() - 1].lr * 4.0;
    Ok(QuadFit {
        extrapolated: fit.eta_star < lo || fit.eta_star > hi,
        ..fit
    })
}

/// `y = A·x^{-b} + C0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub amplitude: f64,
    pub exponent: f64,
    pub floor: f64,
    /// Sum of squared residuals in `y`.
    pub residual: f64,
}

impl PowerFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.amplitude * x.powf(-self.exponent) + self.floor
    }
}

fn check_positive(points: &[(f64, f64)]) -> Result<()> {
    for &(x, y) in points {
        if !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "power-law fit needs positive finite data, got ({x}, {y})"
            )));
        }
    }
    Ok(())
}

/// Ordinary least squares of `ln y` on `ln x`; returns `(A, b)` with `y ≈ A·x^{-b}`.
fn loglog_ols(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    ((my - slope * mx).exp(), -slope)
}

/// Least-squares fit of `y = A·x^{-b}` in linear `y`, started from the
/// log-log regression and refined with Levenberg–Marquardt. Returns `(A, b, SSE)`.
fn fit_amplitude_exponent(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let (a0, b0) = loglog_ols(points);
    let n = points.len() as f64;
    // Reparametrize around the geometric-mean abscissa for conditioning:
    // y = K·(x/x_ref)^{-b}, θ = (ln K, b).
    let lref = points.iter().map(|p| p.0.ln()).sum::<f64>() / n;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln() - lref).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let sse = |lk: f64, b: f64| -> f64 {
        lx.iter()
            .zip(&ys)
            .map(|(u, y)| (lk - b * u).exp() - y)
            .map(|r| r * r)
            .sum()
    };
    let mut lk = a0.ln() - b0 * lref;
    let mut b = b0;
    let mut cur = sse(lk, b);
    let mut damping = 1e-3;
    for _ in 0..200 {
        let (mut j11, mut j12, mut j22, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (u, y) in lx.iter().zip(&ys) {
            let f = (lk - b * u).exp();
            let r = f - y;
            let (d1, d2) = (f, -f * u);
            j11 += d1 * d1;
            j12 += d1 * d2;
            j22 += d2 * d2;
            g1 += d1 * r;
            g2 += d2 * r;
        }
        let mut improved = false;
        for _ in 0..30 {
            let a11 = j11 * (1.0 + damping);
            let a22 = j22 * (1.0 + damping);
            let det = a11 * a22 - j12 * j12;
            if det.abs() < f64::MIN_POSITIVE {
                damping *= 10.0;
                continue;
            }
            let s1 = -(a22 * g1 - j12 * g2) / det;
            let s2 = -(a11 * g2 - j12 * g1) / det;
            let trial = sse(lk + s1, b + s2);
            if trial.is_finite() && trial <= cur {
                let small = s1.abs() < 1e-15 * (1.0 + lk.abs()) && s2.abs() < 1e-15 * (1.0 + b.abs());
                lk += s1;
                b += s2;
                let done = small || (cur - trial) <= 1e-30 * cur.max(f64::MIN_POSITIVE) || trial == 0.0;
                cur = trial;
                damping = (damping * 0.3).max(1e-12);
                improved = true;
                if done {
                    return (lk.exp() * (b * lref).exp(), b, cur);
                }
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    ((lk + b * lref).exp(), b, cur)
}

/// Power-law fit. Without a floor, `y = A·x^{-b}`; with one, a golden-section
/// search over `C0 ∈ [0, 0.999·min y]` wraps the same two-parameter fit.
pub fn fit_power_law(points: &[(f64, f64)], with_floor: bool) -> Result<PowerFit> {
    check_positive(points)?;
    let need = if with_floor { 4 } else { 2 };
    if points.len() < need {
        return Err(Error::InvalidInput(format!(
            "power-law fit needs at least {need} points, got {}",
            points.len()
        )));
    }
    if !with_floor {
        let (amplitude, exponent, residual) = fit_amplitude_exponent(points);
        return Ok(PowerFit {
            amplitude,
            exponent,
            floor: 0.0,
            residual,
        });
    }
    let ymin = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let profile = |c0: f64| -> (f64, f64, f64) {
        let shifted: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x, y - c0)).collect();
        fit_amplitude_exponent(&shifted)
    };
    let (mut lo, mut hi) = (0.0, 0.999 * ymin);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - phi * (hi - lo);
    let mut d = lo + phi * (hi - lo);
    let mut fc = profile(c).2;
    let mut fd = profile(d).2;
    while hi - lo > 1e-10 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = profile(c).2;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = profile(d).2;
        }
    }
    // The search interval includes its endpoints as candidates.
    let mut best = 0.5 * (lo + hi);
    let mut best_sse = profile(best).2;
    for cand in [0.0, 0.999 * ymin] {
        let s = profile(cand).2;
        if s < best_sse {
            best = cand;
            best_sse = s;
        }
    }
    let (amplitude, exponent, residual) = profile(best);
    Ok(PowerFit {
        amplitude,
        exponent,
        floor: best,
        residual,
    })
}

/// Compute efficiency leverage `C_base / C*` with `C_base = (A/(L* − C0))^{1/b}`.
pub fn cel(baseline: &PowerFit, c_star: f64, l_star: f64) -> Result<f64> {
    if !(baseline.amplitude > 0.0 && baseline.exponent != 0.0 && c_star > 0.0) {
        return Err(Error::InvalidInput(format!("invalid leverage inputs {baseline:?}, C*={c_star}")));
    }
    if l_star <= baseline.floor {
        return Err(Error::BelowFloor {
            loss: l_star,
            floor: baseline.floor,
        });
    }
    let c_base = (baseline.amplitude / (l_star - baseline.floor)).powf(1.0 / baseline.exponent);
    Ok(c_base / c_star)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    /// Parameters touched per token (routed experts weighted by selection).
    pub active: usize,
    /// Active parameters that belong to matrices (embedding and head included).
    pub active_matrix: usize,
    pub by_group: BTreeMap<String, usize>,
}

pub fn param_count(cfg: &ModelConfig) -> Result<ParamCount> {
    let specs = param_specs(cfg)?;
    let layout = cfg.moe_layout()?;
    let mut total = 0usize;
    let mut routed = 0usize;
    let mut routed_matrix = 0usize;
    let mut matrix = 0usize;
    let mut by_group: BTreeMap<String, usize> = Group::ALL.iter().map(|g| (g.name().to_string(), 0)).collect();
    for s in &specs {
        let n = s.len();
        total += n;
        *by_group.get_mut(s.group.name()).expect("all groups present") += n;
        if s.is_matrix() {
            matrix += n;
        }
        if s.routed_expert {
            routed += n;
            routed_matrix += n;
        }
    }
    let active_routed = |n: usize| match &layout {
        Some(l) => n * l.select / l.pool,
        None => n,
    };
    Ok(ParamCount {
        total,
        active: total - routed + active_routed(routed),
        active_matrix: matrix - routed_matrix + active_routed(routed_matrix),
        by_group,
    })
}

/// Training FLOPs: `3·(2·N_active_matrix + 2·s·(q_width + v_width)·layers)·T`.
pub fn chinchilla_flops(cfg: &ModelConfig, tokens: f64, context: usize) -> Result<f64> {
    if !(tokens > 0.0) || context == 0 {
        return Err(Error::InvalidInput("tokens and context must be positive".into()));
    }
    let counts = param_count(cfg)?;
    let attn = 2.0 * context as f64 * (cfg.q_width() + cfg.attn_out_width()) as f64 * cfg.depth as f64;
    let forward = 2.0 * counts.active_matrix as f64 + attn;
    Ok(3.0 * forward * tokens)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub k: usize,
    pub subsets: usize,
    /// Subsets whose parabola opened downward; excluded from the means.
    pub failed: usize,
    pub lr_rel_err_pct: f64,
    pub loss_rel_err_pct: f64,
}

/// Mean relative error of subset fits against the full fit over all `C(n,k)` subsets.
pub fn sensitivity(points: &[SweepPoint], k: usize) -> Result<Sensitivity> {
    let n = points.len();
    if k < 3 || k > n {
        return Err(Error::InvalidInput(format!("subset size {k} outside 3..={n}")));
    }
    let full = fit_quadratic_loglr(points)?;
    let combos: Vec<Vec<usize>> = (0..n).combinations(k).collect();
    let errs: Vec<Option<(f64, f64)>> = combos
        .par_iter()
        .map(|idx| {
            let subset: Vec<SweepPoint> = idx.iter().map(|&i| points[i]).collect();
            fit_quadratic_loglr(&subset).ok().map(|f| {
                (
                    (f.eta_star - full.eta_star).abs() / full.eta_star,
                    (f.loss_star - full.loss_star).abs() / full.loss_star.abs(),
                )
            })
        })
        .collect();
    let ok: Vec<(f64, f64)> = errs.iter().flatten().copied().collect();
    let failed = errs.len() - ok.len();
    let mean = |f: fn(&(f64, f64)) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            100.0 * ok.iter().map(f).sum::<f64>() / ok.len() as f64
        }
    };
    Ok(Sensitivity {
        k,
        subsets: combos.len(),
        failed,
        lr_rel_err_pct: mean(|e| e.0),
        loss_rel_err_pct: mean(|e| e.1),
    })
}

/// Leave-one-out mean absolute relative prediction error (%) of the floorless law.
pub fn loo_cv_power(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::InvalidInput("leave-one-out needs at least 3 points".into()));
    }
    let mut total = 0.0;
    for i in 0..points.len() {
        let rest: Vec<(f64, f64)> = points
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, p)| *p)
            .collect();
        let fit = fit_power_law(&rest, false)?;
        let (x, y) = points[i];
        total += (fit.predict(x) - y).abs() / y;
    }
    Ok(100.0 * total / points.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn parabola(a: f64, eta_star: f64, loss_star: f64, lrs: &[f64]) -> Vec<SweepPoint> {
        lrs.iter()
            .map(|&lr| {
                let u = (lr / eta_star).ln();
                SweepPoint::new(lr, loss_star + a * u * u)
            })
            .collect()
    }

    #[test]
    fn exact_parabola() {
        let pts = parabola(0.2, 0.01, 2.5, &[0.005, 0.01, 0.02]);
        let f = fit_quadratic_loglr(&pts).unwrap();
        assert_relative_eq!(f.eta_star, 0.01, max_relative = 1e-12);
        assert_relative_eq!(f.loss_star, 2.5, max_relative = 1e-12);
        assert_relative_eq!(f.r_squared, 1.0, epsilon = 1e-12);
        assert!(!f.extrapolated);
    }

    #[test]
    fn two_points_rejected_and_duplicates_collapse() {
        let two = [SweepPoint::new(0.01, 2.0), SweepPoint::new(0.02, 2.1)];
        assert!(matches!(fit_quadratic_loglr(&two), Err(Error::InvalidInput(_))));
        let dup = [
            SweepPoint::new(0.01, 2.0),
            SweepPoint::new(0.01, 2.2),
            SweepPoint::new(0.02, 2.1),
        ];
        assert!(fit_quadratic_loglr(&dup).is_err());
    }

    #[test]
    fn concave_data_reports_no_minimum() {
        let pts = parabola(-0.2, 0.01, 2.5, &[0.005, 0.01, 0.02, 0.04]);
        match fit_quadratic_loglr(&pts) {
            Err(Error::NoInteriorMinimum(f)) => assert!(f.curvature < 0.0),
            other => panic!("expected no interior minimum, got {other:?}"),
        }
    }

    #[test]
    fn floorless_power_law_recovery() {
        let pts: Vec<(f64, f64)> = (1..=6).map(|i| (10f64.powi(i), 3.0 * 10f64.powi(i).powf(-0.7))).collect();
        let f = fit_power_law(&pts, false).unwrap();
        assert_relative_eq!(f.amplitude, 3.0, max_relative = 1e-9);
        assert_relative_eq!(f.exponent, 0.7, max_relative = 1e-9);
        assert_eq!(f.floor, 0.0);
    }

    #[test]
    fn floored_power_law_recovery() {
        let pts: Vec<(f64, f64)> = (1..=6).map(|i| (i as f64, 2.0 * (i as f64).powf(-0.5) + 1.0)).collect();
        let f = fit_power_law(&pts, true).unwrap();
        assert!((f.amplitude - 2.0).abs() < 1e-6, "{f:?}");
        assert!((f.exponent - 0.5).abs() < 1e-6, "{f:?}");
        assert!((f.floor - 1.0).abs() < 1e-6, "{f:?}");
    }

    #[test]
    fn power_law_input_validation() {
        assert!(fit_power_law(&[(1.0, -1.0), (2.0, 1.0)], false).is_err());
        assert!(fit_power_law(&[(1.0, 1.0)], false).is_err());
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, 0.5), (3.0, 0.3)], true).is_err());
    }

    #[test]
    fn self_leverage_is_one() {
        let base = PowerFit {
            amplitude: 50.0,
            exponent: 0.1,
            floor: 1.2,
            residual: 0.0,
        };
        for c in [1e19, 1e20, 1e21] {
            assert_relative_eq!(cel(&base, c, base.predict(c)).unwrap(), 1.0, max_relative = 1e-9);
        }
        assert!(matches!(cel(&base, 1e20, 1.1), Err(Error::BelowFloor { .. })));
    }

    #[test]
    fn loo_noiseless_and_outlier() {
        let clean: Vec<(f64, f64)> = (1..=5).map(|i| (i as f64 * 1e9, 20.0 * (i as f64 * 1e9).powf(-0.3))).collect();
        assert!(loo_cv_power(&clean).unwrap() < 1e-8);
        let mut dirty = clean.clone();
        dirty[2].1 *= 2.0;
        assert!(loo_cv_power(&dirty).unwrap() > loo_cv_power(&clean).unwrap());
    }

    #[test]
    fn sensitivity_noiseless_is_zero() {
        let lrs = [0.004, 0.006, 0.008, 0.01, 0.012, 0.014, 0.016, 0.018];
        let pts = parabola(0.1, 0.01, 2.5, &lrs);
        for k in 3..=8 {
            let s = sensitivity(&pts, k).unwrap();
            assert!(s.lr_rel_err_pct < 1e-8 && s.loss_rel_err_pct < 1e-8, "{s:?}");
            assert_eq!(s.failed, 0);
        }
        assert!(sensitivity(&pts, 2).is_err());
    }

    proptest! {
        #[test]
        fn quad_fit_offset_invariance(shift in -5.0f64..5.0, a in 0.01f64..1.0, eta in 1e-3f64..1e-1) {
            let lrs: Vec<f64> = (0..6).map(|i| eta * 1.5f64.powi(i - 3)).collect();
            let mut pts = parabola(a, eta, 2.0, &lrs);
            // Small perturbation so the fit is not exact.
            for (i, p) in pts.iter_mut().enumerate() { p.loss += 1e-3 * ((i * 7 % 5) as f64 - 2.0); }
            let f0 = fit_quadratic_loglr(&pts).unwrap();
            let shifted: Vec<SweepPoint> = pts.iter().map(|p| SweepPoint::new(p.lr, p.loss + shift)).collect();
            let f1 = fit_quadratic_loglr(&shifted).unwrap();
            prop_assert!((f1.eta_star - f0.eta_star).abs() <= 1e-12 * f0.eta_star.max(1.0) * 1e2);
            prop_assert!((f1.loss_star - f0.loss_star - shift).abs() <= 1e-10);
        }

        #[test]
        fn power_law_floorless_recovery(a in 0.1f64..100.0, b in 0.05f64..1.5) {
            let pts: Vec<(f64, f64)> = (0..5).map(|i| { let x = 1e9 * 2f64.powi(i); (x, a * x.powf(-b)) }).collect();
            let f = fit_power_law(&pts, false).unwrap();
            prop_assert!((f.amplitude - a).abs() <= 1e-9 * a);
            prop_assert!((f.exponent - b).abs() <= 1e-9 * b);
        }

        #[test]
        fn cel_self_consistency(a in 1.0f64..100.0, b in 0.05f64..0.5, c0 in 0.0f64..2.0, lc in 18.0f64..22.0) {
            let fit = PowerFit { amplitude: a, exponent: b, floor: c0, residual: 0.0 };
            let c = 10f64.powf(lc);
            prop_assume!(a * c.powf(-b) > 1e-4 * (1.0 + c0));
            let r = cel(&fit, c, fit.predict(c)).unwrap();
            prop_assert!((r - 1.0).abs() < 1e-8);
        }
    }
}
