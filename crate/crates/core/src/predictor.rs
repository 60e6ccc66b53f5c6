//! Accuracy predictor: masked one-hot genome features and closed-form ridge
//! regression.

use serde::{Deserialize, Serialize};

use crate::archspace::{ArchGenome, SearchSpaceSpec};
use crate::error::{NasError, Result};

pub const DEFAULT_LAMBDA: f64 = 1e-3;
pub const MIN_LAMBDA: f64 = 1e-6;

/// Binary features: a one-hot layer-count block followed by one one-hot
/// width block per slot. Blocks of inactive slots are all zero, so genomes
/// with equal phenotypes featurize identically.
pub fn featurize(genome: &ArchGenome, space: &SearchSpaceSpec) -> Result<Vec<f64>> {
    let enc = genome.encode(space)?;
    let nl = space.layer_choices.len();
    let ns = space.inter_choices.len();
    let mut x = vec![0.0; nl + space.dims.max_layers * ns];
    x[enc[0]] = 1.0;
    for (slot, &idx) in enc[1..].iter().enumerate().take(genome.layer_count) {
        x[nl + slot * ns + idx] = 1.0;
    }
    Ok(x)
}

/// Linear model `w . x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub n_train: usize,
}

impl RidgeModel {
    pub fn predict_raw(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.intercept
    }

    /// Raw prediction clamped to [0, 1].
    pub fn predict_features(&self, x: &[f64]) -> f64 {
        self.predict_raw(x).clamp(0.0, 1.0)
    }
}

/// In-place Cholesky factorization of a symmetric positive-definite matrix
/// stored row-major; returns the lower factor.
fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(NasError::InvalidInput(
                        "normal equations not positive definite".into(),
                    ));
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    x
}

fn mat_vec(a: &[f64], n: usize, x: &[f64]) -> Vec<f64> {
    (0..n)
        .map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fits `min (1/n) sum (y - w.x - b)^2 + lambda |w|^2` (intercept not
/// penalized). `lambda` is floored at [`MIN_LAMBDA`].
pub fn fit(records: &[(Vec<f64>, f64)], lambda: f64) -> Result<RidgeModel> {
    if records.len() < 2 {
        return Err(NasError::InvalidInput("ridge fit needs at least 2 records".into()));
    }
    let p = records[0].0.len();
    if records.iter().any(|(x, _)| x.len() != p) {
        return Err(NasError::InvalidInput("feature vectors differ in length".into()));
    }
    if records.iter().any(|(x, y)| !y.is_finite() || x.iter().any(|v| !v.is_finite())) {
        return Err(NasError::NonFinite("ridge training data".into()));
    }
    let lambda = lambda.max(MIN_LAMBDA);
    let n = records.len() as f64;

    let mut x_mean = vec![0.0; p];
    let mut y_mean = 0.0;
    for (x, y) in records {
        for (m, v) in x_mean.iter_mut().zip(x) {
            *m += v;
        }
        y_mean += y;
    }
    x_mean.iter_mut().for_each(|m| *m /= n);
    y_mean /= n;

    let mut a = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    let mut xc = vec![0.0; p];
    for (x, y) in records {
        for j in 0..p {
            xc[j] = x[j] - x_mean[j];
        }
        let yc = y - y_mean;
        for i in 0..p {
            if xc[i] == 0.0 {
                continue;
            }
            rhs[i] += xc[i] * yc;
            for j in 0..p {
                a[i * p + j] += xc[i] * xc[j];
            }
        }
    }
    for v in a.iter_mut() {
        *v /= n;
    }
    for v in rhs.iter_mut() {
        *v /= n;
    }
    for i in 0..p {
        a[i * p + i] += lambda;
    }

    let l = cholesky(&a, p)?;
    let mut w = cholesky_solve(&l, p, &rhs);
    // one step of iterative refinement
    let r: Vec<f64> = rhs.iter().zip(mat_vec(&a, p, &w)).map(|(b, aw)| b - aw).collect();
    let dw = cholesky_solve(&l, p, &r);
    for (wi, d) in w.iter_mut().zip(dw) {
        *wi += d;
    }
    let residual: Vec<f64> = rhs.iter().zip(mat_vec(&a, p, &w)).map(|(b, aw)| b - aw).collect();
    let scale = norm(&rhs).max(f64::MIN_POSITIVE);
    if norm(&residual) > 1e-8 * scale.max(1.0) {
        return Err(NasError::InvalidInput(format!(
            "ridge solve residual {} too large",
            norm(&residual)
        )));
    }
    let intercept = y_mean - w.iter().zip(&x_mean).map(|(w, m)| w * m).sum::<f64>();
    Ok(RidgeModel {
        weights: w,
        intercept,
        lambda,
        n_train: records.len(),
    })
}

/// Predicted accuracy of `genome`, clamped to [0, 1].
pub fn predict(model: &RidgeModel, genome: &ArchGenome, space: &SearchSpaceSpec) -> Result<f64> {
    let x = featurize(genome, space)?;
    if x.len() != model.weights.len() {
        return Err(NasError::InvalidInput(format!(
            "model has {} weights, genome has {} features",
            model.weights.len(),
            x.len()
        )));
    }
    Ok(model.predict_features(&x))
}

/// Mean absolute error of [`fit`] over `folds` contiguous folds.
pub fn cv_mae(records: &[(Vec<f64>, f64)], folds: usize, lambda: f64) -> Result<f64> {
    if folds < 2 || records.len() < folds {
        return Err(NasError::InvalidInput(format!(
            "cross-validation needs >= {folds} records and >= 2 folds"
        )));
    }
    let n = records.len();
    let mut total = 0.0;
    for k in 0..folds {
        let (lo, hi) = (k * n / folds, (k + 1) * n / folds);
        let train: Vec<_> = records[..lo].iter().chain(&records[hi..]).cloned().collect();
        let model = fit(&train, lambda)?;
        total += records[lo..hi]
            .iter()
            .map(|(x, y)| (model.predict_features(x) - y).abs())
            .sum::<f64>();
    }
    Ok(total / n as f64)
}
