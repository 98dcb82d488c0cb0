use crate::error::{Error, Result};

/// Element of the truncated tensor algebra T^N(R^d).
///
/// Level `k` holds the d^k coefficients of words of length `k` in
/// lexicographic multi-index order, so word `(i_1, ..., i_k)` sits at
/// `i_1 d^{k-1} + ... + i_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedTensor {
    dim: usize,
    depth: usize,
    levels: Vec<Vec<f64>>,
}

impl TruncatedTensor {
    pub fn zeros(dim: usize, depth: usize) -> Self {
        let levels = (0..=depth).map(|k| vec![0.0; dim.pow(k as u32)]).collect();
        Self { dim, depth, levels }
    }

    pub fn identity(dim: usize, depth: usize) -> Self {
        let mut t = Self::zeros(dim, depth);
        t.levels[0][0] = 1.0;
        t
    }

    pub fn from_levels(dim: usize, levels: Vec<Vec<f64>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidArgument("tensor needs a degree-0 level".into()));
        }
        for (k, level) in levels.iter().enumerate() {
            let expected = dim.pow(k as u32);
            if level.len() != expected {
                return Err(Error::ShapeMismatch(format!(
                    "level {k} has {} coefficients, expected {expected}",
                    level.len()
                )));
            }
        }
        Ok(Self {
            dim,
            depth: levels.len() - 1,
            levels,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn scalar(&self) -> f64 {
        self.levels[0][0]
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.levels[k]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.levels[k]
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<Vec<f64>> {
        self.levels
    }

    /// All coefficients, degree 0 first.
    pub fn flat(&self) -> Vec<f64> {
        self.levels.iter().flatten().copied().collect()
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim || self.depth != other.depth {
            return Err(Error::ShapeMismatch(format!(
                "tensor (d={}, N={}) vs (d={}, N={})",
                self.dim, self.depth, other.dim, other.depth
            )));
        }
        Ok(())
    }

    /// Truncated product: level k of the result is Σ_{p+q=k} a_p ⊗ b_q.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let mut out = Self::zeros(self.dim, self.depth);
        for k in 0..=self.depth {
            let dst = &mut out.levels[k];
            for p in 0..=k {
                let q = k - p;
                let a = &self.levels[p];
                let b = &other.levels[q];
                let nb = b.len();
                for (i, &ai) in a.iter().enumerate() {
                    if ai == 0.0 {
                        continue;
                    }
                    let row = &mut dst[i * nb..(i + 1) * nb];
                    for (r, &bj) in row.iter_mut().zip(b) {
                        *r += ai * bj;
                    }
                }
            }
        }
        Ok(out)
    }

    /// In-place right multiplication by the signature of a straight segment,
    /// `self ← self ⊗ exp(Δ)`, using a Horner scheme per level.
    pub fn mul_segment(&mut self, increment: &[f64]) {
        debug_assert_eq!(increment.len(), self.dim);
        let d = self.dim;
        // Highest level first so lower levels are still the old values.
        for k in (1..=self.depth).rev() {
            let mut acc = self.levels[0].clone();
            for i in 1..=k {
                let scale = 1.0 / (k - i + 1) as f64;
                let mut next = vec![0.0; acc.len() * d];
                for (a_idx, &a) in acc.iter().enumerate() {
                    let row = &mut next[a_idx * d..(a_idx + 1) * d];
                    for (r, &x) in row.iter_mut().zip(increment) {
                        *r = a * x * scale;
                    }
                }
                if i < k {
                    for (n, s) in next.iter_mut().zip(&self.levels[i]) {
                        *n += s;
                    }
                }
                acc = next;
            }
            for (s, a) in self.levels[k].iter_mut().zip(acc) {
                *s += a;
            }
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        out.add_assign_scaled(other, 1.0);
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        out.add_assign_scaled(other, -1.0);
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = self.clone();
        for level in &mut out.levels {
            level.iter_mut().for_each(|x| *x *= c);
        }
        out
    }

    fn add_assign_scaled(&mut self, other: &Self, c: f64) {
        for (a, b) in self.levels.iter_mut().zip(&other.levels) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
    }

    /// Truncated logarithm Σ_{n=1}^N (−1)^{n−1}/n (x − 1)^{⊗n}.
    pub fn log(&self) -> Result<Self> {
        let s = self.scalar();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::NotGroupLike(s));
        }
        let mut y = self.clone();
        y.levels[0][0] = 0.0;
        let mut out = Self::zeros(self.dim, self.depth);
        let mut power = y.clone();
        for n in 1..=self.depth {
            if n > 1 {
                power = power.mul(&y)?;
            }
            let c = if n % 2 == 1 { 1.0 } else { -1.0 } / n as f64;
            out.add_assign_scaled(&power, c);
        }
        Ok(out)
    }

    /// Truncated exponential Σ_{n=0}^N y^{⊗n}/n! of an element with zero scalar part.
    pub fn exp(&self) -> Result<Self> {
        if self.scalar() != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "exp expects zero degree-0 coefficient, got {}",
                self.scalar()
            )));
        }
        let mut out = Self::identity(self.dim, self.depth);
        let mut power = Self::identity(self.dim, self.depth);
        let mut factorial = 1.0;
        for n in 1..=self.depth {
            power = power.mul(self)?;
            factorial *= n as f64;
            out.add_assign_scaled(&power, 1.0 / factorial);
        }
        Ok(out)
    }

    /// Inverse of a group-like element, exp(−log x).
    pub fn inverse(&self) -> Result<Self> {
        self.log()?.scale(-1.0).exp()
    }

    pub fn norm(&self) -> f64 {
        self.levels.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest coefficient difference, relative to `max(1, |self|_∞, |other|_∞)`.
    pub fn max_rel_diff(&self, other: &Self) -> Result<f64> {
        self.check_compatible(other)?;
        let scale = self
            .levels
            .iter()
            .chain(&other.levels)
            .flatten()
            .fold(1.0f64, |m, x| m.max(x.abs()));
        let diff = self
            .levels
            .iter()
            .flatten()
            .zip(other.levels.iter().flatten())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        Ok(diff / scale)
    }
}

/// Signature of a single straight segment: level k is Δ^{⊗k}/k!.
pub fn segment_signature(increment: &[f64], depth: usize) -> TruncatedTensor {
    let dim = increment.len();
    let mut levels = Vec::with_capacity(depth + 1);
    levels.push(vec![1.0]);
    for k in 1..=depth {
        let prev: &Vec<f64> = &levels[k - 1];
        let mut next = Vec::with_capacity(prev.len() * dim);
        for &p in prev {
            for &x in increment {
                next.push(p * x / k as f64);
            }
        }
        levels.push(next);
    }
    TruncatedTensor { dim, depth, levels }
}

pub fn tensor_mul(a: &TruncatedTensor, b: &TruncatedTensor) -> Result<TruncatedTensor> {
    a.mul(b)
}

pub fn tensor_log(x: &TruncatedTensor) -> Result<TruncatedTensor> {
    x.log()
}
