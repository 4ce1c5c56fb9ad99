//! Published full-scale measurements used as fit targets.

/// `(training tokens, fitted η*, fitted min loss)` at d=8.
pub const TOKEN_BUDGET_OPTIMA: [(f64, f64, f64); 5] = [
    (10.4e9, 0.01515, 2.4741),
    (20.8e9, 0.01208, 2.4189),
    (41.6e9, 0.00958, 2.3773),
    (83.2e9, 0.00772, 2.3456),
    (166.4e9, 0.00635, 2.3214),
];

/// `(batch tokens, fitted η*, fitted min loss)`; batch sizes in binary units.
pub const BATCH_OPTIMA: [(f64, f64, f64); 4] = [
    (262_144.0, 0.00504, 2.4711),
    (524_288.0, 0.00706, 2.4697),
    (1_048_576.0, 0.01056, 2.4700),
    (2_097_152.0, 0.01562, 2.4741),
];

/// Learning-rate grid shared by the depth sweeps.
pub const DEPTH_SWEEP_LRS: [f64; 10] = [0.002, 0.004, 0.006, 0.008, 0.010, 0.012, 0.014, 0.016, 0.018, 0.020];

/// Validation loss per depth over [`DEPTH_SWEEP_LRS`] at 10.4B tokens, without depth scaling.
pub const DEPTH_SWEEP_PLAIN: [(usize, [f64; 10]); 5] = [
    (8, [2.684, 2.569, 2.521, 2.498, 2.485, 2.474, 2.470, 2.469, 2.473, 2.492]),
    (12, [2.523, 2.405, 2.355, 2.328, 2.315, 2.308, 2.309, 2.319, 2.351, 2.386]),
    (16, [2.426, 2.307, 2.256, 2.230, 2.220, 2.225, 2.251, 2.288, 2.299, 2.315]),
    (20, [2.354, 2.235, 2.189, 2.166, 2.169, 2.191, 2.218, 2.235, 2.246, 2.264]),
    (24, [2.300, 2.183, 2.140, 2.126, 2.142, 2.165, 2.184, 2.196, 2.212, 2.221]),
];

/// As [`DEPTH_SWEEP_PLAIN`] with depth-scaled multipliers.
pub const DEPTH_SWEEP_SCALED: [(usize, [f64; 10]); 5] = [
    (8, [2.682, 2.568, 2.520, 2.496, 2.484, 2.476, 2.473, 2.474, 2.477, 2.479]),
    (12, [2.568, 2.437, 2.377, 2.347, 2.331, 2.319, 2.316, 2.315, 2.317, 2.321]),
    (16, [2.495, 2.359, 2.297, 2.264, 2.245, 2.235, 2.229, 2.225, 2.225, 2.234]),
    (20, [2.445, 2.309, 2.246, 2.211, 2.188, 2.177, 2.171, 2.169, 2.172, 2.188]),
    (24, [2.413, 2.272, 2.208, 2.172, 2.150, 2.137, 2.132, 2.132, 2.137, 2.152]),
];

/// `(depth, training FLOPs, Muon, MuonH+HyperP, MuonH)` final validation losses.
pub const COMPUTE_LOSSES: [(usize, f64, f64, f64, f64); 5] = [
    (8, 2.14e19, 2.4777, 2.4804, 2.4845),
    (12, 1.49e20, 2.2257, 2.2192, 2.2099),
    (16, 6.59e20, 2.0671, 2.0526, 2.0500),
    (20, 2.19e21, 1.9591, 1.9311, 1.9558),
    (24, 5.96e21, 1.8785, 1.8365, 1.9015),
];

/// `(depth, FLOPs, MuonH+HyperP leverage, MuonH leverage)` over Muon.
pub const PUBLISHED_LEVERAGE: [(usize, f64, f64, f64); 5] = [
    (8, 2.14e19, 0.99, 0.96),
    (12, 1.49e20, 1.04, 1.19),
    (16, 6.59e20, 1.16, 1.17),
    (20, 2.19e21, 1.35, 0.99),
    (24, 5.96e21, 1.58, 0.70),
];

/// Muon-column `(FLOPs, loss)` pairs.
pub fn muon_compute_curve() -> Vec<(f64, f64)> {
    COMPUTE_LOSSES.iter().map(|r| (r.1, r.2)).collect()
}

pub fn hyperp_compute_curve() -> Vec<(f64, f64)> {
    COMPUTE_LOSSES.iter().map(|r| (r.1, r.3)).collect()
}

pub fn muonh_compute_curve() -> Vec<(f64, f64)> {
    COMPUTE_LOSSES.iter().map(|r| (r.1, r.4)).collect()
}

/// `(tokens, η*)` pairs.
pub fn token_budget_curve() -> Vec<(f64, f64)> {
    TOKEN_BUDGET_OPTIMA.iter().map(|r| (r.0, r.1)).collect()
}

/// `(batch tokens, η*)` pairs.
pub fn batch_curve() -> Vec<(f64, f64)> {
    BATCH_OPTIMA.iter().map(|r| (r.0, r.1)).collect()
}
