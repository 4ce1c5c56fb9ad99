//! Training-stability indicators: Z-values, branch output RMS, 5σ activation
//! outliers and MoE load-balance violation.

use serde::{Deserialize, Serialize};

use crate::autodiff::log_sum_exp;
use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub step: usize,
    pub attn_z: f64,
    pub router_z: f64,
    pub attn_rms: f64,
    pub moe_rms: f64,
    pub attn_outlier_pct: f64,
    pub moe_outlier_pct: f64,
    pub mean_maxvio: f64,
}

/// Mean over rows of `LSE(row)²`.
pub fn z_metric<'a, I>(rows: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut total = 0.0;
    let mut n = 0usize;
    for row in rows {
        if row.is_empty() {
            return Err(Error::InvalidInput("z_metric over an empty row".into()));
        }
        let l = log_sum_exp(row);
        total += l * l;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidInput("z_metric over no rows".into()));
    }
    Ok(total / n as f64)
}

/// Z over the rows of a matrix.
pub fn z_metric_mat(m: &Mat) -> Result<f64> {
    z_metric((0..m.rows()).map(|r| m.row(r)))
}

/// Z over causal attention scores: row `i` only sees columns `0..=i`.
pub fn causal_z_rows(scores: &Mat) -> Vec<f64> {
    (0..scores.rows())
        .map(|i| {
            let l = log_sum_exp(&scores.row(i)[..=i.min(scores.cols() - 1)]);
            l * l
        })
        .collect()
}

/// RMS over every element of each layer's branch output, averaged over layers.
pub fn output_rms(layers: &[&Mat]) -> Result<f64> {
    if layers.is_empty() {
        return Err(Error::InvalidInput("output_rms over no layers".into()));
    }
    let sum: f64 = layers.iter().map(|m| crate::linalg::matrix_rms(m)).sum();
    Ok(sum / layers.len() as f64)
}

/// Percentage of entries farther than 5σ from their token's mean (population σ).
pub fn outlier_pct_single(m: &Mat) -> Result<f64> {
    if m.cols() < 2 {
        return Err(Error::InvalidInput("outlier_pct needs token vectors of length ≥ 2".into()));
    }
    let n = m.cols() as f64;
    let mut count = 0usize;
    for r in 0..m.rows() {
        let row = m.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd == 0.0 {
            continue;
        }
        count += row.iter().filter(|x| (*x - mean).abs() > 5.0 * sd).count();
    }
    Ok(100.0 * count as f64 / m.len() as f64)
}

/// [`outlier_pct_single`] averaged across layers.
pub fn outlier_pct(layers: &[&Mat]) -> Result<f64> {
    if layers.is_empty() {
        return Err(Error::InvalidInput("outlier_pct over no layers".into()));
    }
    let mut sum = 0.0;
    for m in layers {
        sum += outlier_pct_single(m)?;
    }
    Ok(sum / layers.len() as f64)
}

/// `(max c − c̄)/c̄`.
pub fn maxvio(counts: &[f64]) -> Result<f64> {
    let total: f64 = counts.iter().sum();
    if counts.is_empty() || !(total > 0.0) {
        return Err(Error::InvalidInput("maxvio needs a positive total count".into()));
    }
    let mean = total / counts.len() as f64;
    let max = counts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((max - mean) / mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn z_examples() {
        assert_eq!(z_metric([&[0.0][..]]).unwrap(), 0.0);
        let n = 7;
        assert_relative_eq!(z_metric([&vec![0.0; n][..]]).unwrap(), (n as f64).ln().powi(2), max_relative = 1e-14);
        assert_relative_eq!(z_metric([&[1.0, 0.0][..]]).unwrap(), (1f64.exp() + 1.0).ln().powi(2), max_relative = 1e-14);
        assert!((z_metric([&[1.0, 0.0][..]]).unwrap() - 1.7247).abs() < 1e-4);
        assert!(z_metric(std::iter::empty::<&[f64]>()).is_err());
    }

    #[test]
    fn z_handles_large_logits() {
        let z = z_metric([&[1e4, -1e4, 0.0][..]]).unwrap();
        assert!(z.is_finite());
        assert_relative_eq!(z, 1e8, max_relative = 1e-12);
    }

    #[test]
    fn causal_rows() {
        let s = Mat::from_rows(&[&[0.0, 50.0], &[0.0, 0.0]]);
        let z = causal_z_rows(&s);
        assert_eq!(z[0], 0.0);
        assert_relative_eq!(z[1], 2f64.ln().powi(2));
    }

    #[test]
    fn rms_examples() {
        assert_eq!(output_rms(&[&Mat::filled(3, 4, 1.0)]).unwrap(), 1.0);
        assert_eq!(output_rms(&[&Mat::zeros(3, 4)]).unwrap(), 0.0);
        assert_eq!(output_rms(&[&Mat::row_vector(&[3.0, 4.0, 0.0, 0.0])]).unwrap(), 2.5);
    }

    #[test]
    fn outlier_examples() {
        let mut spike = vec![0.0; 1000];
        spike[999] = 100.0;
        let pct = outlier_pct_single(&Mat::row_vector(&spike)).unwrap();
        assert_relative_eq!(pct, 0.1);
        assert_eq!(outlier_pct_single(&Mat::filled(4, 8, 3.0)).unwrap(), 0.0);
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let g = Mat::randn(1000, 1000, &mut r);
        assert!(outlier_pct_single(&g).unwrap() < 1e-3);
    }

    #[test]
    fn maxvio_examples() {
        assert_eq!(maxvio(&[5.0, 5.0, 5.0]).unwrap(), 0.0);
        assert_eq!(maxvio(&[4.0, 0.0, 0.0, 0.0]).unwrap(), 3.0);
        assert_eq!(maxvio(&[3.0, 1.0]).unwrap(), 0.5);
        assert!(maxvio(&[0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn z_translation_law(row in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
            let l = log_sum_exp(&row);
            let shifted: Vec<f64> = row.iter().map(|x| x + c).collect();
            let z = z_metric([&shifted[..]]).unwrap();
            prop_assert!((z - (l + c).powi(2)).abs() <= 1e-9 * (1.0 + z.abs()));
        }

        #[test]
        fn z_row_permutation(rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 2..8)) {
            let mut rev = rows.clone();
            rev.reverse();
            let a = z_metric(rows.iter().map(|r| &r[..])).unwrap();
            let b = z_metric(rev.iter().map(|r| &r[..])).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
        }

        #[test]
        fn maxvio_bounds(counts in prop::collection::vec(0.0f64..100.0, 1..16)) {
            prop_assume!(counts.iter().sum::<f64>() > 0.0);
            let v = maxvio(&counts).unwrap();
            prop_assert!(v >= -1e-12 && v <= counts.len() as f64 - 1.0 + 1e-12);
        }

        #[test]
        fn bounded_data_has_no_outliers(vals in prop::collection::vec(-1.0f64..1.0, 2..24)) {
            // At most n values: any deviation is below √n·σ ≤ 5σ when n ≤ 25.
            prop_assert_eq!(outlier_pct_single(&Mat::row_vector(&vals)).unwrap(), 0.0);
        }
    }
}
