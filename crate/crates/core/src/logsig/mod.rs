//! Truncated tensor algebra, path signatures and log-signatures in the Lyndon basis.

mod linear;
mod lyndon;
mod path;
mod tensor;

pub use linear::{map_tensor, map_tensor_grad};
pub use lyndon::{beta, lyndon_words, LyndonBasis, LIE_TOLERANCE};
pub use path::PiecewisePath;
pub use tensor::{segment_signature, tensor_log, tensor_mul, TruncatedTensor};

use crate::error::{Error, Result};

/// Depth-N log-signature coordinates in the Lyndon basis (degree-0 term dropped).
#[derive(Debug, Clone, PartialEq)]
pub struct LogSignature {
    dim: usize,
    depth: usize,
    coeffs: Vec<f64>,
}

impl LogSignature {
    pub fn new(dim: usize, depth: usize, coeffs: Vec<f64>) -> Result<Self> {
        let expected = beta(dim, depth)? as usize;
        if coeffs.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "log-signature of d={dim}, N={depth} needs {expected} coefficients, got {}",
                coeffs.len()
            )));
        }
        Ok(Self { dim, depth, coeffs })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// The Lie element Σ c_w P(w) in tensor coordinates.
    pub fn to_tensor(&self) -> Result<TruncatedTensor> {
        LyndonBasis::shared(self.dim, self.depth)?.expand(&self.coeffs)
    }
}

/// Signature of a piecewise-linear path via Chen's identity over its segments.
pub fn path_signature(path: &PiecewisePath, depth: usize) -> Result<TruncatedTensor> {
    if depth == 0 {
        return Err(Error::InvalidArgument("signature depth must be ≥ 1".into()));
    }
    let mut sig = TruncatedTensor::identity(path.dim(), depth);
    for k in 0..path.len() - 1 {
        sig.mul_segment(&path.increment(k));
    }
    Ok(sig)
}

pub fn project_lyndon(lie: &TruncatedTensor) -> Result<LogSignature> {
    let basis = LyndonBasis::shared(lie.dim(), lie.depth())?;
    let coeffs = basis.project(lie)?;
    LogSignature::new(lie.dim(), lie.depth(), coeffs)
}

/// Depth-N log-signature of a piecewise-linear path.
pub fn logsig(path: &PiecewisePath, depth: usize) -> Result<LogSignature> {
    project_lyndon(&path_signature(path, depth)?.log()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Samples of X(t) = (t, t²) on [0, 1].
    fn parabola(n: usize) -> PiecewisePath {
        let times: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let pts: Vec<Vec<f64>> = times.iter().map(|&t| vec![t, t * t]).collect();
        PiecewisePath::new(times, &pts).unwrap()
    }

    #[test]
    fn parabola_signature_depth_two() {
        let s = path_signature(&parabola(1000), 2).unwrap();
        let expected = [1.0, 1.0, 1.0, 0.5, 2.0 / 3.0, 1.0 / 3.0, 0.5];
        for (x, y) in s.flat().iter().zip(expected) {
            assert!((x - y).abs() < 1e-3, "{x} vs {y}");
        }
    }

    #[test]
    fn parabola_log_tensor() {
        let l = path_signature(&parabola(1000), 2).unwrap().log().unwrap();
        assert!((l.level(1)[0] - 1.0).abs() < 1e-3);
        assert!((l.level(1)[1] - 1.0).abs() < 1e-3);
        let expected = [0.0, 1.0 / 6.0, -1.0 / 6.0, 0.0];
        for (x, y) in l.level(2).iter().zip(expected) {
            assert!((x - y).abs() < 1e-3, "{x} vs {y}");
        }
    }

    #[test]
    fn parabola_logsig() {
        let ls = logsig(&parabola(1000), 2).unwrap();
        assert_eq!(ls.len(), 3);
        for (x, y) in ls.coeffs().iter().zip([1.0, 1.0, 1.0 / 6.0]) {
            assert!((x - y).abs() < 1e-3, "{x} vs {y}");
        }
    }

    #[test]
    fn straight_line_logsig_is_displacement() {
        let p = PiecewisePath::segment(0.0, 1.0, &[0.5, 1.0], &[1.5, -1.0]).unwrap();
        for depth in 1..=4 {
            let ls = logsig(&p, depth).unwrap();
            assert!((ls.coeffs()[0] - 1.0).abs() < 1e-15);
            assert!((ls.coeffs()[1] + 2.0).abs() < 1e-15);
            assert!(ls.coeffs()[2..].iter().all(|c| c.abs() < 1e-14));
        }
    }

    #[test]
    fn line_signature_is_segment_signature() {
        let p = PiecewisePath::segment(0.0, 2.0, &[1.0, 2.0, 3.0], &[0.0, 4.0, 1.0]).unwrap();
        let s = path_signature(&p, 3).unwrap();
        let expected = segment_signature(&[-1.0, 2.0, -2.0], 3);
        assert!(s.max_rel_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn constant_path_has_identity_signature() {
        let pts = vec![vec![0.3, -0.2]; 5];
        let p = PiecewisePath::new((0..5).map(|i| i as f64).collect(), &pts).unwrap();
        assert_eq!(path_signature(&p, 3).unwrap(), TruncatedTensor::identity(2, 3));
    }

    #[test]
    fn zero_tensor_projects_to_zero() {
        let ls = project_lyndon(&TruncatedTensor::zeros(3, 3)).unwrap();
        assert_eq!(ls.coeffs(), vec![0.0; 14].as_slice());
    }

    #[test]
    fn logsig_length_mismatch() {
        assert!(LogSignature::new(2, 2, vec![0.0; 4]).is_err());
    }

    #[test]
    fn path_validation() {
        assert!(matches!(
            PiecewisePath::new(vec![0.0], &[vec![1.0]]),
            Err(Error::TooFewSamples(1))
        ));
        assert!(PiecewisePath::new(vec![0.0, 0.0], &[vec![1.0], vec![2.0]]).is_err());
        assert!(PiecewisePath::new(vec![0.0, 1.0], &[vec![1.0], vec![f64::NAN]]).is_err());
    }
}
