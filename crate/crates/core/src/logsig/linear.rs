//! Action of a linear map A: R^d → R^e on the truncated tensor algebra.
//!
//! Level k transforms by A^{⊗k}. The induced map is an algebra morphism, so
//! it commutes with the tensor logarithm and sends Lie elements to Lie
//! elements: the log-signature of a linearly transformed path is the
//! transformed log-signature of the original path.

use super::tensor::TruncatedTensor;
use crate::error::{Error, Result};

/// Applies `a` (row-major, `rows × cols`) to tensor mode `mode` of a level
/// with per-mode extents `shape`.
fn mode_product(data: &[f64], shape: &[usize], mode: usize, a: &[f64], rows: usize) -> Vec<f64> {
    let cols = shape[mode];
    let outer: usize = shape[..mode].iter().product();
    let inner: usize = shape[mode + 1..].iter().product();
    let mut out = vec![0.0; outer * rows * inner];
    for o in 0..outer {
        for r in 0..rows {
            let dst = &mut out[(o * rows + r) * inner..(o * rows + r + 1) * inner];
            for c in 0..cols {
                let coef = a[r * cols + c];
                if coef == 0.0 {
                    continue;
                }
                let src = &data[(o * cols + c) * inner..(o * cols + c + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += coef * s;
                }
            }
        }
    }
    out
}

fn check_matrix(t: &TruncatedTensor, a: &[f64], rows: usize) -> Result<()> {
    if a.len() != rows * t.dim() {
        return Err(Error::ShapeMismatch(format!(
            "matrix has {} entries, expected {}×{}",
            a.len(),
            rows,
            t.dim()
        )));
    }
    Ok(())
}

/// Image of `t` under the tensor-algebra map induced by `a` (`rows × t.dim()`).
pub fn map_tensor(t: &TruncatedTensor, a: &[f64], rows: usize) -> Result<TruncatedTensor> {
    check_matrix(t, a, rows)?;
    let d = t.dim();
    let mut levels = Vec::with_capacity(t.depth() + 1);
    levels.push(t.level(0).to_vec());
    for k in 1..=t.depth() {
        let mut shape = vec![d; k];
        let mut data = t.level(k).to_vec();
        for m in 0..k {
            data = mode_product(&data, &shape, m, a, rows);
            shape[m] = rows;
        }
        levels.push(data);
    }
    TruncatedTensor::from_levels(rows, levels)
}

/// Gradient of ⟨cot, map_tensor(t, a)⟩ with respect to `a`, returned row-major.
pub fn map_tensor_grad(t: &TruncatedTensor, a: &[f64], rows: usize, cot: &TruncatedTensor) -> Result<Vec<f64>> {
    check_matrix(t, a, rows)?;
    let d = t.dim();
    if cot.dim() != rows || cot.depth() != t.depth() {
        return Err(Error::ShapeMismatch("cotangent tensor shape".into()));
    }
    let mut grad = vec![0.0; rows * d];
    for k in 1..=t.depth() {
        let c = cot.level(k);
        if c.iter().all(|x| *x == 0.0) {
            continue;
        }
        for m in 0..k {
            // Transform every mode except m; mode m keeps its source index.
            let mut shape = vec![d; k];
            let mut data = t.level(k).to_vec();
            for other in (0..k).filter(|&o| o != m) {
                data = mode_product(&data, &shape, other, a, rows);
                shape[other] = rows;
            }
            let outer: usize = shape[..m].iter().product();
            let inner: usize = shape[m + 1..].iter().product();
            for o in 0..outer {
                for r in 0..rows {
                    let cslice = &c[(o * rows + r) * inner..(o * rows + r + 1) * inner];
                    for s in 0..d {
                        let dslice = &data[(o * d + s) * inner..(o * d + s + 1) * inner];
                        grad[r * d + s] += cslice.iter().zip(dslice).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
        }
    }
    Ok(grad)
}
