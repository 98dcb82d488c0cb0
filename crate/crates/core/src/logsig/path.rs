use crate::error::{Error, Result};

/// A d-dimensional path observed on a strictly increasing time grid,
/// interpreted as piecewise linear between samples.
///
/// Values are stored row-major: sample `i` occupies `values[i*dim..(i+1)*dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewisePath {
    dim: usize,
    times: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewisePath {
    pub fn new(times: Vec<f64>, points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map(|p| p.len()).unwrap_or(0);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::InvalidPath("samples have differing dimensions".into()));
        }
        let values = points.iter().flatten().copied().collect();
        Self::from_flat(dim, times, values)
    }

    pub fn from_flat(dim: usize, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::TooFewSamples(times.len()));
        }
        if dim == 0 {
            return Err(Error::InvalidPath("dimension must be positive".into()));
        }
        if values.len() != times.len() * dim {
            return Err(Error::InvalidPath(format!(
                "expected {} values for {} samples of dimension {}, got {}",
                times.len() * dim,
                times.len(),
                dim,
                values.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPath("non-finite time or value".into()));
        }
        if let Some(k) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidPath(format!(
                "times not strictly increasing at index {}",
                k + 1
            )));
        }
        Ok(Self { dim, times, values })
    }

    /// Straight segment from `start` to `end` over `[t0, t1]`.
    pub fn segment(t0: f64, t1: f64, start: &[f64], end: &[f64]) -> Result<Self> {
        Self::new(vec![t0, t1], &[start.to_vec(), end.to_vec()])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn first(&self) -> &[f64] {
        self.point(0)
    }

    pub fn last(&self) -> &[f64] {
        self.point(self.len() - 1)
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    /// Increment of segment `k` (from sample `k` to `k+1`).
    pub fn increment(&self, k: usize) -> Vec<f64> {
        let a = self.point(k);
        let b = self.point(k + 1);
        b.iter().zip(a).map(|(b, a)| b - a).collect()
    }

    /// Sub-path over samples `start..=end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if end >= self.len() || start >= end {
            return Err(Error::InvalidPath(format!(
                "invalid slice {start}..={end} of a path with {} samples",
                self.len()
            )));
        }
        Ok(Self {
            dim: self.dim,
            times: self.times[start..=end].to_vec(),
            values: self.values[start * self.dim..(end + 1) * self.dim].to_vec(),
        })
    }

    /// Pointwise map of every sample, keeping the time grid.
    pub fn map_points<F>(&self, out_dim: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let mut values = vec![0.0; self.len() * out_dim];
        for (i, out) in values.chunks_exact_mut(out_dim).enumerate() {
            f(self.times[i], self.point(i), out);
        }
        Self::from_flat(out_dim, self.times.clone(), values)
    }

    /// The same vertices traversed backwards, on the same time grid.
    pub fn reversed(&self) -> Self {
        let values = self.values.chunks_exact(self.dim).rev().flatten().copied().collect();
        Self {
            dim: self.dim,
            times: self.times.clone(),
            values,
        }
    }
}
