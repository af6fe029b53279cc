use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// `u·v / (‖u‖‖v‖)`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Region-to-embedding, embedding-to-region and averaged contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveLoss {
    pub r2e: f64,
    pub e2r: f64,
    pub total: f64,
}

impl ContrastiveLoss {
    pub const ZERO: ContrastiveLoss = ContrastiveLoss {
        r2e: 0.0,
        e2r: 0.0,
        total: 0.0,
    };
}

/// Mean taken relative to the first term, exact when all terms are equal.
fn shifted_mean(terms: &[f64]) -> f64 {
    let first = terms[0];
    first + terms.iter().map(|t| t - first).sum::<f64>() / terms.len() as f64
}

/// Symmetric cross-entropy over an `N×N` similarity matrix whose diagonal holds
/// the positive pairs. No temperature is applied.
pub fn contrastive_loss(sims: ArrayView2<'_, f64>) -> Result<ContrastiveLoss> {
    contrastive_loss_with_grad(sims).map(|(l, _)| l)
}

/// As [`contrastive_loss`], also returning `∂L_c/∂sims`.
pub fn contrastive_loss_with_grad(
    sims: ArrayView2<'_, f64>,
) -> Result<(ContrastiveLoss, Array2<f64>)> {
    let (rows, cols) = sims.dim();
    if rows != cols {
        return Err(Error::NonSquare { rows, cols });
    }
    let n = rows;
    let mut grad = Array2::zeros((n, n));
    if n == 0 {
        return Ok((ContrastiveLoss::ZERO, grad));
    }
    let inv_n = 1.0 / n as f64;
    let mut r2e = Vec::with_capacity(n);
    let mut e2r = Vec::with_capacity(n);

    for i in 0..n {
        let row = sims.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let lse = max + z.ln();
        r2e.push((max - sims[(i, i)]) + z.ln());
        for j in 0..n {
            let p = (sims[(i, j)] - lse).exp();
            grad[(i, j)] += 0.5 * inv_n * (p - if i == j { 1.0 } else { 0.0 });
        }
    }
    for i in 0..n {
        let col = sims.column(i);
        let max = col.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let z: f64 = col.iter().map(|&x| (x - max).exp()).sum();
        let lse = max + z.ln();
        e2r.push((max - sims[(i, i)]) + z.ln());
        for j in 0..n {
            let p = (sims[(j, i)] - lse).exp();
            grad[(j, i)] += 0.5 * inv_n * (p - if i == j { 1.0 } else { 0.0 });
        }
    }
    let r2e = shifted_mean(&r2e);
    let e2r = shifted_mean(&e2r);
    Ok((
        ContrastiveLoss {
            r2e,
            e2r,
            total: 0.5 * (r2e + e2r),
        },
        grad,
    ))
}
