//! Muon, MuonH, AdamW and AdamH, plus the sphere and tangent projections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_inner, frobenius_norm, newton_schulz_orthogonalize, Mat, NS_DEFAULT_STEPS};

pub const MUON_MOMENTUM: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Muon,
    MuonH,
    AdamW,
    AdamH,
}

impl OptimizerKind {
    /// Whether the parameter lives on a Frobenius sphere.
    pub fn is_sphere(self) -> bool {
        matches!(self, OptimizerKind::MuonH | OptimizerKind::AdamH)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_ns_steps")]
    pub ns_steps: usize,
    /// Update-norm target as a multiple of `c_W` (1 gives `c_G = c_W`).
    #[serde(default = "default_update_norm")]
    pub update_norm: f64,
}

fn default_momentum() -> f64 {
    MUON_MOMENTUM
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_ns_steps() -> usize {
    NS_DEFAULT_STEPS
}
fn default_update_norm() -> f64 {
    1.0
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            ns_steps: default_ns_steps(),
            update_norm: default_update_norm(),
        }
    }
}

/// Per-parameter optimizer buffers and sphere radii.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub config: OptimConfig,
    pub momentum: Option<Mat>,
    pub first_moment: Option<Mat>,
    pub second_moment: Option<Mat>,
    /// Sphere radius `‖W₀‖_F`, fixed at construction.
    pub c_w: Option<f64>,
    /// Update-norm target.
    pub c_g: Option<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, w0: &Mat, config: OptimConfig) -> Result<Self> {
        let (r, c) = w0.shape();
        let (c_w, c_g) = if kind.is_sphere() {
            let n = frobenius_norm(w0);
            if n <= 0.0 {
                return Err(Error::InvalidInput("sphere parameter initialized at zero".into()));
            }
            (Some(n), Some(config.update_norm * n))
        } else {
            (None, None)
        };
        let uses_momentum = matches!(kind, OptimizerKind::Muon | OptimizerKind::MuonH);
        Ok(Self {
            kind,
            config,
            momentum: uses_momentum.then(|| Mat::zeros(r, c)),
            first_moment: (!uses_momentum).then(|| Mat::zeros(r, c)),
            second_moment: (!uses_momentum).then(|| Mat::zeros(r, c)),
            c_w,
            c_g,
            step: 0,
        })
    }

    /// Apply one step of this state's optimizer. `lambda` is ignored by the
    /// sphere optimizers.
    pub fn step(&mut self, w: &Mat, grad: &Mat, eta: f64, lambda: f64) -> Result<Mat> {
        match self.kind {
            OptimizerKind::Muon => muon_step(w, grad, eta, lambda, self),
            OptimizerKind::MuonH => muonh_step(w, grad, eta, self),
            OptimizerKind::AdamW => adamw_step(w, grad, eta, lambda, self),
            OptimizerKind::AdamH => adamh_step(w, grad, eta, self),
        }
    }

    fn sphere(&self) -> Result<(f64, f64)> {
        match (self.c_w, self.c_g) {
            (Some(w), Some(g)) => Ok((w, g)),
            _ => Err(Error::Structural(format!("{:?} state has no sphere radii", self.kind))),
        }
    }
}

/// `Δ − (⟨Δ,W⟩/‖W‖²)·W`.
pub fn tangent_project(delta: &Mat, w: &Mat) -> Result<Mat> {
    if delta.shape() != w.shape() {
        return Err(Error::shape("tangent_project", format!("{:?} vs {:?}", delta.shape(), w.shape())));
    }
    let nn = frobenius_inner(w, w);
    if nn == 0.0 {
        return Err(Error::InvalidInput("tangent projection at zero weight".into()));
    }
    let mut out = delta.clone();
    out.axpy(-frobenius_inner(delta, w) / nn, w);
    Ok(out)
}

/// `c·W̃/‖W̃‖_F`.
pub fn hypersphere_project(w: &Mat, c: f64) -> Result<Mat> {
    let n = frobenius_norm(w);
    if n == 0.0 {
        return Err(Error::InvalidInput("sphere projection of a zero matrix".into()));
    }
    Ok(w.scale(c / n))
}

/// Nesterov momentum followed by Newton–Schulz orthogonalization.
pub fn muon_raw_update(grad: &Mat, state: &mut OptimizerState) -> Mat {
    let mu = state.config.momentum;
    let m = state
        .momentum
        .get_or_insert_with(|| Mat::zeros(grad.rows(), grad.cols()));
    m.scale_in_place(mu);
    m.axpy(1.0, grad);
    let mut blend = grad.clone();
    blend.axpy(mu, m);
    newton_schulz_orthogonalize(&blend, state.config.ns_steps)
}

/// Normalized update on the Frobenius sphere.
pub fn muonh_step(w: &Mat, grad: &Mat, eta: f64, state: &mut OptimizerState) -> Result<Mat> {
    let (c_w, c_g) = state.sphere()?;
    let g = muon_raw_update(grad, state);
    state.step += 1;
    sphere_update(w, &g, eta, c_w, c_g)
}

/// Shared tail of MuonH/AdamH: normalize the raw update to `c_G`, step, re-project.
fn sphere_update(w: &Mat, raw: &Mat, eta: f64, c_w: f64, c_g: f64) -> Result<Mat> {
    let gn = frobenius_norm(raw);
    if gn == 0.0 || eta == 0.0 {
        return Ok(w.clone());
    }
    let mut next = w.clone();
    next.axpy(-eta * c_g / gn, raw);
    hypersphere_project(&next, c_w)
}

/// MuonH step that also applies `η·λ·W` decay before re-projection.
pub fn muonh_step_decayed(w: &Mat, grad: &Mat, eta: f64, lambda: f64, state: &mut OptimizerState) -> Result<Mat> {
    let (c_w, c_g) = state.sphere()?;
    let g = muon_raw_update(grad, state);
    state.step += 1;
    let gn = frobenius_norm(&g);
    let mut next = w.scale(1.0 - eta * lambda);
    if gn > 0.0 {
        next.axpy(-eta * c_g / gn, &g);
    }
    hypersphere_project(&next, c_w)
}

/// `W − η·G − λ·W` with independent (not η-scaled) decay.
pub fn muon_step(w: &Mat, grad: &Mat, eta: f64, lambda: f64, state: &mut OptimizerState) -> Result<Mat> {
    let g = muon_raw_update(grad, state);
    state.step += 1;
    let mut next = w.scale(1.0 - lambda);
    next.axpy(-eta, &g);
    Ok(next)
}

fn adam_direction(grad: &Mat, state: &mut OptimizerState) -> Mat {
    let OptimConfig {
        beta1, beta2, adam_eps, ..
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let m = state
        .first_moment
        .get_or_insert_with(|| Mat::zeros(grad.rows(), grad.cols()));
    for (mv, g) in m.as_mut_slice().iter_mut().zip(grad.as_slice()) {
        *mv = beta1 * *mv + (1.0 - beta1) * g;
    }
    let m = m.clone();
    let v = state
        .second_moment
        .get_or_insert_with(|| Mat::zeros(grad.rows(), grad.cols()));
    for (vv, g) in v.as_mut_slice().iter_mut().zip(grad.as_slice()) {
        *vv = beta2 * *vv + (1.0 - beta2) * g * g;
    }
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    m.zip_map(v, |m, v| (m / bc1) / ((v / bc2).sqrt() + adam_eps))
}

/// Bias-corrected Adam with decoupled decay `W − η(u + λW)`.
pub fn adamw_step(w: &Mat, grad: &Mat, eta: f64, lambda: f64, state: &mut OptimizerState) -> Result<Mat> {
    let u = adam_direction(grad, state);
    let mut next = w.scale(1.0 - eta * lambda);
    next.axpy(-eta, &u);
    Ok(next)
}

/// Adam direction normalized to `c_G`, re-projected to the `c_W` sphere.
pub fn adamh_step(w: &Mat, grad: &Mat, eta: f64, state: &mut OptimizerState) -> Result<Mat> {
    let (c_w, c_g) = state.sphere()?;
    let u = adam_direction(grad, state);
    sphere_update(w, &u, eta, c_w, c_g)
}

/// Linear decay from `η_peak` to `0.1·η_peak`, no warm-up.
pub fn lr_schedule(step: usize, total_steps: usize, peak: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidInput("schedule with zero total steps".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidInput(format!("step {step} beyond {total_steps}")));
    }
    Ok(peak * (1.0 - 0.9 * step as f64 / total_steps as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn state(kind: OptimizerKind, w: &Mat) -> OptimizerState {
        OptimizerState::new(kind, w, OptimConfig::default()).unwrap()
    }

    #[test]
    fn tangent_examples() {
        let w = Mat::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(tangent_project(&w, &w).unwrap(), Mat::zeros(2, 2));
        let orth = Mat::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(tangent_project(&orth, &w).unwrap(), orth);
        let d = Mat::from_rows(&[&[1.0, 1.0], &[0.0, 0.0]]);
        assert_eq!(
            tangent_project(&d, &w).unwrap(),
            Mat::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]])
        );
        assert!(tangent_project(&d, &Mat::zeros(2, 2)).is_err());
    }

    #[test]
    fn sphere_projection_examples() {
        let i2 = Mat::identity(2);
        assert_eq!(hypersphere_project(&i2.scale(2.0), 2f64.sqrt()).unwrap().max_abs_diff(&i2) < 1e-15, true);
        let w = Mat::randn(3, 5, &mut rng(1));
        let n = frobenius_norm(&w);
        assert!(hypersphere_project(&w, n).unwrap().max_abs_diff(&w) < 1e-15);
        assert!(hypersphere_project(&Mat::zeros(2, 2), 1.0).is_err());
    }

    #[test]
    fn muon_first_step_is_orthogonalized_grad() {
        let g = Mat::randn(4, 6, &mut rng(2));
        let mut s = state(OptimizerKind::Muon, &g);
        let u = muon_raw_update(&g, &mut s);
        // First blend = g + μ·g.
        let expected = newton_schulz_orthogonalize(&g.scale(1.0 + MUON_MOMENTUM), NS_DEFAULT_STEPS);
        assert!(u.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn muon_zero_grad_gives_zero_update() {
        let z = Mat::zeros(3, 3);
        let mut s = state(OptimizerKind::Muon, &z);
        assert_eq!(muon_raw_update(&z, &mut s), z);
    }

    #[test]
    fn muon_second_blend_unrolls() {
        let g = Mat::randn(3, 4, &mut rng(3));
        let mut s = state(OptimizerKind::Muon, &g);
        muon_raw_update(&g, &mut s);
        muon_raw_update(&g, &mut s);
        // m₂ = (1+μ)g, blend = g + μ·m₂ = (1+μ+μ²)g.
        let mu = MUON_MOMENTUM;
        let m = s.momentum.as_ref().unwrap();
        let blend = g.add(&m.scale(mu));
        assert!(blend.max_abs_diff(&g.scale(1.0 + mu + mu * mu)) < 1e-12);
    }

    #[test]
    fn muonh_keeps_norm_and_eta_zero_is_identity() {
        let mut r = rng(4);
        let w = Mat::randn(8, 5, &mut r);
        let c = frobenius_norm(&w);
        let mut s = state(OptimizerKind::MuonH, &w);
        let g = Mat::randn(8, 5, &mut r);
        let w1 = muonh_step(&w, &g, 0.1, &mut s).unwrap();
        assert!((frobenius_norm(&w1) - c).abs() / c < 1e-12);
        let w2 = muonh_step(&w1, &g, 0.0, &mut s).unwrap();
        assert_eq!(w2, w1);
        let w3 = muonh_step(&w1, &Mat::zeros(8, 5), 0.1, &mut state(OptimizerKind::MuonH, &w1)).unwrap();
        assert_eq!(w3, w1);
    }

    #[test]
    fn muonh_second_order_residual() {
        let mut r = rng(5);
        for _ in 0..20 {
            let w = hypersphere_project(&Mat::randn(6, 6, &mut r), 3.0).unwrap();
            let ghat = hypersphere_project(&Mat::randn(6, 6, &mut r), 3.0).unwrap();
            let resid = |eta: f64| {
                let mut stepped = w.clone();
                stepped.axpy(-eta, &ghat);
                let next = hypersphere_project(&stepped, 3.0).unwrap();
                let lin = tangent_project(&ghat.scale(-eta), &w).unwrap();
                frobenius_norm(&next.sub(&w).sub(&lin))
            };
            let ratio = resid(1e-2) / resid(5e-3);
            assert!(ratio >= 3.5, "ratio {ratio}");
        }
    }

    #[test]
    fn muon_pure_decay() {
        let w = Mat::filled(2, 3, 4.0);
        let mut s = state(OptimizerKind::Muon, &w);
        let z = Mat::zeros(2, 3);
        assert_eq!(muon_step(&w, &z, 0.0, 0.0, &mut s).unwrap(), w);
        assert_eq!(muon_step(&w, &z, 0.3, 0.5, &mut s).unwrap(), w.scale(0.5));
        let mut s2 = state(OptimizerKind::Muon, &w);
        assert_eq!(muon_step(&w, &z, 7.0, 0.5, &mut s2).unwrap(), w.scale(0.5));
    }

    #[test]
    fn adamw_scalar_first_step() {
        let w = Mat::filled(1, 1, 1.0);
        let g = Mat::filled(1, 1, 0.3);
        let mut s = state(OptimizerKind::AdamW, &w);
        let next = adamw_step(&w, &g, 0.01, 0.0, &mut s).unwrap();
        // m̂ = g, v̂ = g², so the step is η·g/(|g| + ε).
        let expected = 1.0 - 0.01 * 0.3 / (0.3 + 1e-8);
        assert_relative_eq!(next.get(0, 0), expected, max_relative = 1e-15);
    }

    #[test]
    fn adamw_noop_without_grad_or_decay() {
        let w = Mat::filled(2, 2, 0.7);
        let mut s = state(OptimizerKind::AdamW, &w);
        assert_eq!(adamw_step(&w, &Mat::zeros(2, 2), 0.1, 0.0, &mut s).unwrap(), w);
    }

    #[test]
    fn adamh_keeps_norm() {
        let mut r = rng(6);
        let w = Mat::randn(7, 3, &mut r);
        let c = frobenius_norm(&w);
        let mut s = state(OptimizerKind::AdamH, &w);
        let mut cur = w;
        for _ in 0..10 {
            cur = adamh_step(&cur, &Mat::randn(7, 3, &mut r), 0.05, &mut s).unwrap();
            assert!((frobenius_norm(&cur) - c).abs() / c < 1e-12);
        }
    }

    #[test]
    fn sphere_state_requires_nonzero_init() {
        assert!(OptimizerState::new(OptimizerKind::MuonH, &Mat::zeros(2, 2), OptimConfig::default()).is_err());
        assert!(OptimizerState::new(OptimizerKind::Muon, &Mat::zeros(2, 2), OptimConfig::default()).is_ok());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0, 100, 0.02).unwrap(), 0.02);
        assert_relative_eq!(lr_schedule(100, 100, 0.02).unwrap(), 0.002, max_relative = 1e-14);
        assert_relative_eq!(lr_schedule(50, 100, 0.02).unwrap(), 0.011, max_relative = 1e-14);
        assert!(lr_schedule(0, 0, 0.02).is_err());
    }

    proptest! {
        #[test]
        fn sphere_preserved_over_many_steps(seed in 0u64..500, eta in 1e-4f64..0.5) {
            let mut r = rng(seed);
            let w0 = Mat::randn(5, 4, &mut r);
            let c = frobenius_norm(&w0);
            let mut mh = state(OptimizerKind::MuonH, &w0);
            let mut ah = state(OptimizerKind::AdamH, &w0);
            let (mut a, mut b) = (w0.clone(), w0);
            for _ in 0..25 {
                let g = Mat::randn(5, 4, &mut r);
                a = muonh_step(&a, &g, eta, &mut mh).unwrap();
                b = adamh_step(&b, &g, eta, &mut ah).unwrap();
            }
            prop_assert!((frobenius_norm(&a) - c).abs() / c < 1e-10);
            prop_assert!((frobenius_norm(&b) - c).abs() / c < 1e-10);
        }

        #[test]
        fn relative_update_depends_only_on_eta(seed in 0u64..500, eta in 1e-4f64..1e-2) {
            let mut r = rng(seed);
            let w = Mat::randn(6, 6, &mut r);
            let c = frobenius_norm(&w);
            let mut s = state(OptimizerKind::MuonH, &w);
            let g = muon_raw_update(&Mat::randn(6, 6, &mut r), &mut s);
            let ghat = g.scale(c / frobenius_norm(&g));
            prop_assert!((frobenius_norm(&ghat) - c).abs() < 1e-12 * c);
            prop_assert!((frobenius_norm(&ghat.scale(eta)) / c - eta).abs() < 1e-12);
        }

        #[test]
        fn tangent_output_is_orthogonal(seed in 0u64..500) {
            let mut r = rng(seed);
            let w = Mat::randn(4, 7, &mut r);
            let d = Mat::randn(4, 7, &mut r);
            let t = tangent_project(&d, &w).unwrap();
            prop_assert!(frobenius_inner(&t, &w).abs() < 1e-12 * frobenius_norm(&d) * frobenius_norm(&w));
        }
    }
}
