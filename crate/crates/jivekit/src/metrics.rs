//! Performance measures: variance proportions, subspace recovery error,
//! logistic scoring and AUC.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ajive::AjiveResult;
use crate::error::{Error, Result};
use crate::robust_svd::Matrix;

/// Fractions of a block's squared Frobenius norm captured by each part of
/// the decomposition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockVariance {
    pub joint: f64,
    pub individual: f64,
    pub residual: f64,
}

pub fn variance_explained(result: &AjiveResult, blocks: &[Matrix]) -> Result<Vec<BlockVariance>> {
    if blocks.len() != result.per_block.len() {
        return Err(Error::invalid("block count mismatch"));
    }
    blocks
        .iter()
        .zip(&result.per_block)
        .enumerate()
        .map(|(k, (x, d))| {
            let total = x.norm_squared();
            if total == 0.0 {
                return Err(Error::invalid(format!("block {k} has zero norm")));
            }
            Ok(BlockVariance {
                joint: d.joint.norm_squared() / total,
                individual: d.individual.norm_squared() / total,
                residual: d.noise.norm_squared() / total,
            })
        })
        .collect()
}

/// Projection distance between the estimated and true joint bases,
/// normalized by the true rank:
/// sqrt(r_hat + r - 2 ||V_hat^T U||_F^2) / r.
///
/// Both arguments must have orthonormal columns. An empty estimate gives
/// sqrt(r) / r.
pub fn subspace_recovery_error(estimated: &Matrix, truth: &Matrix) -> Result<f64> {
    let r = truth.ncols();
    if r == 0 {
        return Err(Error::invalid("true joint rank must be positive"));
    }
    if estimated.ncols() > 0 && estimated.nrows() != truth.nrows() {
        return Err(Error::invalid("basis dimension mismatch"));
    }
    check_orthonormal(truth, "true basis")?;
    let r_hat = estimated.ncols();
    if r_hat == 0 {
        return Ok((r as f64).sqrt() / r as f64);
    }
    check_orthonormal(estimated, "estimated basis")?;
    let cross = estimated.transpose() * truth;
    let overlap = cross.norm_squared();
    let sq = (r_hat as f64 + r as f64 - 2.0 * overlap).max(0.0);
    Ok(sq.sqrt() / r as f64)
}

fn check_orthonormal(m: &Matrix, what: &str) -> Result<()> {
    let gram = m.transpose() * m;
    let dev = (&gram - DMatrix::identity(m.ncols(), m.ncols())).norm();
    if dev > 1e-6 {
        return Err(Error::invalid(format!(
            "{what} is not orthonormal (deviation {dev:.2e})"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticFit {
    /// Intercept followed by one coefficient per score column.
    pub coefficients: Vec<f64>,
    pub converged: bool,
    /// Set when the optimizer diverged toward perfect separation; the
    /// returned coefficients are still usable for ranking.
    pub separated: bool,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Maximum-likelihood logistic regression of binary labels on score
/// columns, fitted by iteratively reweighted least squares with a small
/// ridge jitter for stability.
pub fn fit_logistic(scores: &Matrix, labels: &[bool]) -> Result<LogisticFit> {
    let n = labels.len();
    if scores.nrows() != n {
        return Err(Error::invalid("labels and scores disagree on length"));
    }
    if n == 0 {
        return Err(Error::invalid("no observations"));
    }
    let d = scores.ncols() + 1;
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for j in 0..scores.ncols() {
            x[(i, j + 1)] = scores[(i, j)];
        }
    }
    let y = DVector::from_fn(n, |i, _| if labels[i] { 1.0 } else { 0.0 });

    let mut beta = DVector::zeros(d);
    let mut converged = false;
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..50 {
        let eta = &x * &beta;
        let mu = eta.map(sigmoid);
        let mut ll = 0.0;
        for i in 0..n {
            let m = mu[i].clamp(1e-12, 1.0 - 1e-12);
            ll += y[i] * m.ln() + (1.0 - y[i]) * (1.0 - m).ln();
        }
        if (ll - prev_ll).abs() <= 1e-8 * (1.0 + ll.abs()) {
            converged = true;
            break;
        }
        prev_ll = ll;

        let w = mu.map(|m| (m * (1.0 - m)).max(1e-12));
        let mut xtwx = DMatrix::zeros(d, d);
        let mut xtr = DVector::zeros(d);
        for i in 0..n {
            let xi = x.row(i);
            let wi = w[i];
            let ri = y[i] - mu[i];
            for a in 0..d {
                xtr[a] += xi[a] * ri;
                for b in 0..d {
                    xtwx[(a, b)] += wi * xi[a] * xi[b];
                }
            }
        }
        for a in 0..d {
            xtwx[(a, a)] += 1e-8;
        }
        let step = xtwx
            .lu()
            .solve(&xtr)
            .ok_or_else(|| Error::invalid("singular IRLS system"))?;
        beta += step;
    }
    // perfect separation: every fitted probability pinned to its label
    let mu = (&x * &beta).map(sigmoid);
    let separated = (0..n).all(|i| (mu[i] - y[i]).abs() < 1e-4) || beta.norm() > 1e3;
    Ok(LogisticFit {
        coefficients: beta.iter().copied().collect(),
        converged,
        separated,
    })
}

pub fn predict_proba(fit: &LogisticFit, scores: &Matrix) -> Result<Vec<f64>> {
    if fit.coefficients.len() != scores.ncols() + 1 {
        return Err(Error::invalid("coefficient count mismatch"));
    }
    Ok((0..scores.nrows())
        .map(|i| {
            let mut z = fit.coefficients[0];
            for j in 0..scores.ncols() {
                z += fit.coefficients[j + 1] * scores[(i, j)];
            }
            sigmoid(z)
        })
        .collect())
}

/// Exact Mann-Whitney AUC: fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn auc(probs: &[f64], labels: &[bool]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::invalid("probs and labels disagree on length"));
    }
    let pos: Vec<f64> = probs
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(p, _)| *p)
        .collect();
    let neg: Vec<f64> = probs
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(p, _)| *p)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("need both classes to compute AUC"));
    }
    let mut score = 0.0;
    for p in &pos {
        for q in &neg {
            score += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(score / (pos.len() * neg.len()) as f64)
}

/// Convenience: fit on the scores, then AUC of in-sample predictions.
pub fn logistic_auc(scores: &Matrix, labels: &[bool]) -> Result<f64> {
    if scores.ncols() == 0 {
        // no usable scores; ranking is uninformative
        return Ok(0.5);
    }
    let fit = fit_logistic(scores, labels)?;
    let probs = predict_proba(&fit, scores)?;
    auc(&probs, labels)
}
