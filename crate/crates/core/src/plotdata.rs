//! Plot-ready CSV tables rebuilt from sweep points and fits.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::scalefit::{cel, PowerFit, QuadFit, SweepPoint};

/// Dense sample count for fitted curves.
pub const CURVE_SAMPLES: usize = 64;

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 || lo == hi {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut g: Vec<f64> = (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect();
    g[0] = lo;
    g[n - 1] = hi;
    g
}

fn span(xs: impl Iterator<Item = f64>) -> Result<(f64, f64)> {
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !(lo > 0.0 && hi.is_finite()) {
        return Err(Error::InvalidInput("plot axis needs positive finite values".into()));
    }
    Ok((lo, hi))
}

fn check_label(label: &str) -> Result<()> {
    if label.is_empty() || label.contains([',', '"', '\n', '\r']) {
        return Err(Error::InvalidInput(format!("series label {label:?} is not a plain CSV field")));
    }
    Ok(())
}

/// `series,kind,lr,loss`; `kind` is `observed` or `fit`, one series per sweep.
pub fn loss_vs_lr(series: &[(&str, &[SweepPoint], Option<&QuadFit>)]) -> Result<String> {
    let mut out = String::from("series,kind,lr,loss\n");
    for (label, points, fit) in series {
        check_label(label)?;
        for p in *points {
            writeln!(out, "{label},observed,{},{}", p.lr, p.loss).expect("string write");
        }
        if let Some(f) = fit {
            let (lo, hi) = span(points.iter().map(|p| p.lr))?;
            for lr in log_grid(lo, hi, CURVE_SAMPLES) {
                writeln!(out, "{label},fit,{lr},{}", f.predict(lr)).expect("string write");
            }
        }
    }
    Ok(out)
}

/// `series,kind,flops,loss` with an optional fitted power law per series.
pub fn loss_vs_flops(series: &[(&str, &[(f64, f64)], Option<&PowerFit>)]) -> Result<String> {
    let mut out = String::from("series,kind,flops,loss\n");
    for (label, points, fit) in series {
        check_label(label)?;
        for (c, l) in *points {
            writeln!(out, "{label},observed,{c},{l}").expect("string write");
        }
        if let Some(f) = fit {
            let (lo, hi) = span(points.iter().map(|p| p.0))?;
            for c in log_grid(lo, hi, CURVE_SAMPLES) {
                writeln!(out, "{label},fit,{c},{}", f.predict(c)).expect("string write");
            }
        }
    }
    Ok(out)
}

/// `series,flops,loss,cel`: leverage of each point against `baseline`.
/// Points at or below the baseline floor get an empty `cel` field.
pub fn cel_vs_flops(baseline: &PowerFit, series: &[(&str, &[(f64, f64)])]) -> Result<String> {
    let mut out = String::from("series,flops,loss,cel\n");
    for (label, points) in series {
        check_label(label)?;
        for &(c, l) in *points {
            let lev = match cel(baseline, c, l) {
                Ok(v) => v.to_string(),
                Err(Error::BelowFloor { .. }) => String::new(),
                Err(e) => return Err(e),
            };
            writeln!(out, "{label},{c},{l},{lev}").expect("string write");
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalefit::{fit_power_law, fit_quadratic_loglr};

    #[test]
    fn lr_table_has_observed_and_fit_rows() {
        let pts: Vec<SweepPoint> = [0.01, 0.02, 0.04, 0.08]
            .iter()
            .map(|&lr: &f64| SweepPoint::new(lr, (lr.ln() + 3.5).powi(2) + 2.0))
            .collect();
        let fit = fit_quadratic_loglr(&pts).unwrap();
        let csv = loss_vs_lr(&[("d2", &pts, Some(&fit))]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "series,kind,lr,loss");
        assert_eq!(lines.len(), 1 + 4 + CURVE_SAMPLES);
        assert!(lines[5].starts_with("d2,fit,0.01,"));
        let last: f64 = lines.last().unwrap().split(',').nth(2).unwrap().parse().unwrap();
        assert!((last - 0.08).abs() < 1e-15);
    }

    #[test]
    fn cel_of_baseline_points_is_one() {
        let pts: Vec<(f64, f64)> = [1e19, 1e20, 1e21].iter().map(|&c: &f64| (c, 50.0 * c.powf(-0.05))).collect();
        let fit = fit_power_law(&pts, false).unwrap();
        let csv = cel_vs_flops(&fit, &[("base", &pts)]).unwrap();
        for line in csv.lines().skip(1) {
            let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
            assert!((v - 1.0).abs() < 1e-6, "{line}");
        }
    }

    #[test]
    fn below_floor_leaves_blank() {
        let base = PowerFit {
            amplitude: 10.0,
            exponent: 0.1,
            floor: 2.0,
            residual: 0.0,
        };
        let csv = cel_vs_flops(&base, &[("x", &[(1e20, 1.5)])]).unwrap();
        assert_eq!(csv.lines().nth(1).unwrap(), "x,100000000000000000000,1.5,");
    }

    #[test]
    fn rejects_unsafe_labels() {
        assert!(loss_vs_flops(&[("a,b", &[(1.0, 1.0)], None)]).is_err());
    }
}
