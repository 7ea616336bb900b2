use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::LearnError;

/// Ridge strength used when the design matrix is rank-deficient.
pub const RIDGE_LAMBDA: f64 = 1e-6;

/// Linear value function over initial-state features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimator {
    pub weights: Vec<f64>,
}

impl ValueEstimator {
    pub fn predict(&self, features: &[f64]) -> f64 {
        self.weights.iter().zip(features).map(|(w, x)| w * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueFit {
    pub estimator: ValueEstimator,
    pub mse: f64,
    /// The design was rank-deficient and the ridge fallback was used.
    pub degenerate: bool,
}

/// Ordinary least squares.
pub fn fit_value(features: &[Vec<f64>], targets: &[f64]) -> Result<ValueFit, LearnError> {
    fit_value_weighted(features, targets, &vec![1.0; targets.len()])
}

/// Weighted least squares; weights are sample probabilities or counts.
pub fn fit_value_weighted(
    features: &[Vec<f64>],
    targets: &[f64],
    weights: &[f64],
) -> Result<ValueFit, LearnError> {
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    if n < d + 1 || d == 0 {
        return Err(LearnError::InsufficientSamples { needed: d + 1, got: n });
    }
    if targets.len() != n || weights.len() != n || features.iter().any(|f| f.len() != d) {
        return Err(LearnError::InvalidConfig("ragged value-fit inputs".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(LearnError::InvalidConfig("weights must be non-negative".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| weights[i].sqrt() * features[i][j]);
    let y = DVector::from_fn(n, |i, _| weights[i].sqrt() * targets[i]);

    let svd = x.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let tol = max_sv * (n.max(d) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    let (w, degenerate) = if rank == d {
        let w = svd.solve(&y, tol).map_err(|e| LearnError::InvalidConfig(e.to_string()))?;
        (w, false)
    } else {
        let xtx = x.transpose() * &x + DMatrix::identity(d, d) * RIDGE_LAMBDA;
        let w = xtx
            .cholesky()
            .ok_or_else(|| LearnError::InvalidConfig("ridge system not positive definite".into()))?
            .solve(&(x.transpose() * &y));
        (w, true)
    };
    let estimator = ValueEstimator { weights: w.iter().copied().collect() };
    if !estimator.is_finite() {
        return Err(LearnError::NonFinite);
    }
    let total_w: f64 = weights.iter().sum();
    let mse = features
        .iter()
        .zip(targets)
        .zip(weights)
        .map(|((f, t), w)| w * (estimator.predict(f) - t).powi(2))
        .sum::<f64>()
        / total_w.max(f64::MIN_POSITIVE);
    Ok(ValueFit { estimator, mse, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| vec![rng.gen_range(0.0..50.0), rng.gen(), rng.gen(), 1.0])
            .collect()
    }

    #[test]
    fn constant_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = random_features(&mut rng, 30);
        let fit = fit_value(&xs, &vec![0.7; 30]).unwrap();
        assert!(fit.mse < 1e-20);
        for x in &xs {
            assert!((fit.estimator.predict(x) - 0.7).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_targets_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = random_features(&mut rng, 40);
        let w = [0.01, -0.5, 2.0, 0.3];
        let ys: Vec<f64> = xs.iter().map(|x| x.iter().zip(&w).map(|(a, b)| a * b).sum()).collect();
        let fit = fit_value(&xs, &ys).unwrap();
        assert!(!fit.degenerate);
        for (a, b) in fit.estimator.weights.iter().zip(&w) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn random_targets_beat_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let xs = random_features(&mut rng, 25);
            let ys: Vec<f64> = (0..25).map(|_| rng.gen()).collect();
            let mean = ys.iter().sum::<f64>() / 25.0;
            let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / 25.0;
            let fit = fit_value(&xs, &ys).unwrap();
            assert!(fit.mse <= var + 1e-12);
        }
    }

    #[test]
    fn rank_deficient_design_uses_ridge() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, 1.0]).collect();
        let ys: Vec<f64> = (0..10).map(|i| 3.0 * i as f64 + 1.0).collect();
        let fit = fit_value(&xs, &ys).unwrap();
        assert!(fit.degenerate);
        assert!(fit.mse < 1e-6);
    }

    #[test]
    fn too_few_samples() {
        let xs = vec![vec![1.0, 2.0]; 2];
        assert!(matches!(
            fit_value(&xs, &[1.0, 2.0]),
            Err(LearnError::InsufficientSamples { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn weighted_fit_gives_conditional_means() {
        // one-hot features: the weighted LS solution is the weighted mean per group
        let xs = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let ys = [1.0, 0.0, 5.0, 3.0];
        let ws = [0.25, 0.75, 0.5, 0.5];
        let fit = fit_value_weighted(&xs, &ys, &ws).unwrap();
        assert!((fit.estimator.weights[0] - 0.25).abs() < 1e-12);
        assert!((fit.estimator.weights[1] - 4.0).abs() < 1e-12);
    }
}
