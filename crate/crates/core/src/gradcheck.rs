//! Central finite-difference checks of every differentiable graph primitive.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{top_k_indices, Graph, NodeId};
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Every primitive with a backward rule. `top_k` and `index_mask` appear as
/// index producers inside the gather/mask cases.
pub const PRIMITIVES: [&str; 27] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "transpose",
    "row_softmax",
    "rms_norm",
    "layer_norm",
    "silu",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "gather_rows",
    "gather_cols",
    "scatter_cols",
    "index_mask",
    "cross_entropy",
    "slice_cols",
    "slice_rows",
    "concat_cols",
    "concat_rows",
    "mul_row",
    "mul_col",
    "sum",
    "linear",
];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheck {
    pub primitive: String,
    pub instances: usize,
    /// Worst `max|g − ĝ| / max(‖g‖∞, ‖ĝ‖∞)` over instances and parameters.
    pub max_rel_err: f64,
}

struct Case {
    graph: Graph,
    bind: HashMap<String, Mat>,
    params: Vec<String>,
}

fn dim(r: &mut ChaCha8Rng) -> usize {
    r.random_range(2..7)
}

fn index_mat(rows: usize, cols: usize, bound: usize, r: &mut ChaCha8Rng) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = r.random_range(0..bound) as f64;
    }
    m
}

fn build(name: &str, r: &mut ChaCha8Rng) -> Result<Case> {
    let mut g = Graph::new();
    let mut bind = HashMap::new();
    let mut params = Vec::new();
    let (m, n) = (dim(r), dim(r));
    let mut param = |g: &mut Graph, bind: &mut HashMap<String, Mat>, label: &str, value: Mat| -> Result<NodeId> {
        let id = g.param(label, value.rows(), value.cols())?;
        bind.insert(label.to_string(), value);
        params.push(label.to_string());
        Ok(id)
    };
    let out = match name {
        "matmul" | "linear" => {
            let k = dim(r);
            let a = param(&mut g, &mut bind, "a", Mat::randn(m, k, r))?;
            if name == "matmul" {
                let b = param(&mut g, &mut bind, "b", Mat::randn(k, n, r))?;
                g.matmul(a, b)?
            } else {
                let w = param(&mut g, &mut bind, "w", Mat::randn(n, k, r))?;
                g.linear(a, w)?
            }
        }
        "add" | "sub" | "mul" => {
            let a = param(&mut g, &mut bind, "a", Mat::randn(m, n, r))?;
            let b = param(&mut g, &mut bind, "b", Mat::randn(m, n, r))?;
            match name {
                "add" => g.add(a, b)?,
                "sub" => g.sub(a, b)?,
                _ => g.mul(a, b)?,
            }
        }
        "layer_norm" => {
            // Two-column rows normalize to ±1 regardless of input; the Jacobian vanishes.
            let a = param(&mut g, &mut bind, "a", Mat::randn(m, n + 1, r))?;
            g.layer_norm(a, 1e-6)?
        }
        "scale" | "transpose" | "row_softmax" | "rms_norm" | "silu" | "sigmoid" | "exp" | "sum" => {
            let a = param(&mut g, &mut bind, "a", Mat::randn(m, n, r))?;
            match name {
                "scale" => g.scale(a, r.random_range(-3.0..3.0))?,
                "transpose" => g.transpose(a)?,
                "row_softmax" => g.row_softmax(a)?,
                "rms_norm" => g.rms_norm(a, 1e-6)?,
                "silu" => g.silu(a)?,
                "sigmoid" => g.sigmoid(a)?,
                "exp" => g.exp(a)?,
                _ => g.sum(a)?,
            }
        }
        "log" | "sqrt" => {
            let a = param(&mut g, &mut bind, "a", Mat::uniform(m, n, 1.0, r).map(|v| v + 1.5))?;
            if name == "log" {
                g.log(a)?
            } else {
                g.sqrt(a)?
            }
        }
        "gather_rows" => {
            let vocab = dim(r) + 2;
            let table = param(&mut g, &mut bind, "table", Mat::randn(vocab, n, r))?;
            let idx = g.data("idx", m, 1)?;
            bind.insert("idx".into(), index_mat(m, 1, vocab, r));
            g.gather_rows(table, idx)?
        }
        "gather_cols" | "index_mask" => {
            let x = param(&mut g, &mut bind, "x", Mat::randn(m, n, r))?;
            let k = r.random_range(1..=n);
            let top = g.top_k(x, k)?;
            if name == "gather_cols" {
                g.gather_cols(x, top)?
            } else {
                let mask = g.index_mask(top, n)?;
                g.mul(x, mask)?
            }
        }
        "scatter_cols" => {
            let k = r.random_range(1..=n);
            let v = param(&mut g, &mut bind, "v", Mat::randn(m, k, r))?;
            let idx = g.data("idx", m, k)?;
            bind.insert("idx".into(), top_k_indices(&Mat::randn(m, n, r), k));
            g.scatter_cols(v, idx, n)?
        }
        "cross_entropy" => {
            let logits = param(&mut g, &mut bind, "logits", Mat::randn(m, n, r).scale(2.0))?;
            let t = g.data("t", m, 1)?;
            bind.insert("t".into(), index_mat(m, 1, n, r));
            g.cross_entropy(logits, t)?
        }
        "slice_cols" | "slice_rows" => {
            let a = param(&mut g, &mut bind, "a", Mat::randn(m, n, r))?;
            if name == "slice_cols" {
                let s = r.random_range(0..n);
                g.slice_cols(a, s, r.random_range(1..=n - s))?
            } else {
                let s = r.random_range(0..m);
                g.slice_rows(a, s, r.random_range(1..=m - s))?
            }
        }
        "concat_cols" => {
            let a = param(&mut g, &mut bind, "a", Mat::randn(m, n, r))?;
            let b = param(&mut g, &mut bind, "b", Mat::randn(m, dim(r), r))?;
            g.concat_cols(&[a, b, a])?
        }
        "concat_rows" => {
            let a = param(&mut g, &mut bind, "a", Mat::randn(m, n, r))?;
            let b = param(&mut g, &mut bind, "b", Mat::randn(dim(r), n, r))?;
            g.concat_rows(&[b, a, b])?
        }
        "mul_row" => {
            let a = param(&mut g, &mut bind, "a", Mat::randn(m, n, r))?;
            let row = param(&mut g, &mut bind, "row", Mat::randn(1, n, r))?;
            g.mul_row(a, row)?
        }
        "mul_col" => {
            let a = param(&mut g, &mut bind, "a", Mat::randn(m, n, r))?;
            let col = param(&mut g, &mut bind, "col", Mat::randn(m, 1, r))?;
            g.mul_col(a, col)?
        }
        other => return Err(Error::InvalidInput(format!("unknown primitive '{other}'"))),
    };
    // Contract with a random weighting so every output entry reaches the scalar.
    let (orows, ocols) = g.shape(out);
    let w = g.data("weights", orows, ocols)?;
    bind.insert("weights".into(), Mat::randn(orows, ocols, r));
    let prod = g.mul(out, w)?;
    let obj = g.sum(prod)?;
    g.set_output(obj);
    Ok(Case { graph: g, bind, params })
}

fn objective(case: &Case, bind: &HashMap<String, Mat>) -> Result<f64> {
    case.graph
        .evaluate(bind)?
        .scalar()
        .ok_or_else(|| Error::Structural("gradient check objective is not a scalar".into()))
}

fn relative_error(case: &mut Case) -> Result<f64> {
    let vals = case.graph.evaluate(&case.bind)?;
    let grads = case.graph.backward(&vals, &Mat::filled(1, 1, 1.0))?;
    let mut worst: f64 = 0.0;
    for name in case.params.clone() {
        let analytic = &grads[&name];
        let base = case.bind[&name].clone();
        let mut numeric = Mat::zeros(base.rows(), base.cols());
        for i in 0..base.len() {
            let x = base.as_slice()[i];
            let h = 1e-6 * x.abs().max(1.0);
            let mut probe = base.clone();
            probe.as_mut_slice()[i] = x + h;
            case.bind.insert(name.clone(), probe.clone());
            let up = objective(case, &case.bind)?;
            probe.as_mut_slice()[i] = x - h;
            case.bind.insert(name.clone(), probe);
            let down = objective(case, &case.bind)?;
            numeric.as_mut_slice()[i] = (up - down) / (2.0 * h);
        }
        case.bind.insert(name.clone(), base);
        let scale = analytic.max_abs().max(numeric.max_abs());
        if scale > 0.0 {
            worst = worst.max(analytic.max_abs_diff(&numeric) / scale);
        }
    }
    Ok(worst)
}

pub fn check_primitive(name: &str, instances: usize, seed: u64) -> Result<GradCheck> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64)));
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let mut case = build(name, &mut r)?;
        worst = worst.max(relative_error(&mut case)?);
    }
    Ok(GradCheck {
        primitive: name.to_string(),
        instances,
        max_rel_err: worst,
    })
}

pub fn check_all(instances: usize, seed: u64) -> Result<Vec<GradCheck>> {
    PRIMITIVES.iter().map(|p| check_primitive(p, instances, seed)).collect()
}
