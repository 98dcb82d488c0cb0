//! Euler–Maruyama simulation of the driving processes on a fine grid.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logsig::PiecewisePath;
use crate::rng::stream_rng;

/// Solution grid of `coarse_steps` intervals on [0, horizon], each split into
/// `refine` simulation sub-steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub horizon: f64,
    pub coarse_steps: usize,
    pub refine: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            coarse_steps: 10,
            refine: 10,
        }
    }
}

impl GridSpec {
    pub fn new(horizon: f64, coarse_steps: usize, refine: usize) -> Result<Self> {
        let g = Self {
            horizon,
            coarse_steps,
            refine,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if self.coarse_steps == 0 || self.refine == 0 {
            return Err(Error::InvalidArgument("coarse_steps and refine must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn fine_steps(&self) -> usize {
        self.coarse_steps * self.refine
    }

    pub fn dt_coarse(&self) -> f64 {
        self.horizon / self.coarse_steps as f64
    }

    pub fn dt_fine(&self) -> f64 {
        self.horizon / self.fine_steps() as f64
    }

    pub fn fine_time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.fine_steps() as f64
    }

    pub fn coarse_time(&self, j: usize) -> f64 {
        self.fine_time(j * self.refine)
    }

    pub fn fine_times(&self) -> Vec<f64> {
        (0..=self.fine_steps()).map(|k| self.fine_time(k)).collect()
    }

    pub fn coarse_times(&self) -> Vec<f64> {
        (0..=self.coarse_steps).map(|j| self.coarse_time(j)).collect()
    }

    /// Fine-grid index of time `t`, if `t` lies on the fine grid.
    pub fn fine_index_of(&self, t: f64) -> Option<usize> {
        let x = t / self.dt_fine();
        let k = x.round();
        ((x - k).abs() < 1e-9 && k >= 0.0 && k as usize <= self.fine_steps()).then_some(k as usize)
    }

    pub fn check_fine(&self, path: &PiecewisePath) -> Result<()> {
        if path.len() != self.fine_steps() + 1 {
            return Err(Error::GridMismatch(format!(
                "path has {} samples, fine grid has {}",
                path.len(),
                self.fine_steps() + 1
            )));
        }
        let tol = 1e-9 * self.horizon.max(1.0);
        if let Some(k) = (0..path.len()).find(|&k| (path.times()[k] - self.fine_time(k)).abs() > tol) {
            return Err(Error::GridMismatch(format!(
                "sample {k} at t={} is off the fine grid (expected {})",
                path.times()[k],
                self.fine_time(k)
            )));
        }
        Ok(())
    }
}

/// Driving dynamics dX = b dt + σ dW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dynamics {
    BrownianMotion {
        dim: usize,
    },
    BlackScholes {
        rate: f64,
        vols: Vec<f64>,
        /// Lower Cholesky factor of the correlation matrix, row-major d×d.
        chol: Vec<f64>,
    },
    Heston {
        mu: f64,
        kappa: f64,
        mean_var: f64,
        vol_of_vol: f64,
    },
}

fn cholesky(m: &[f64], d: usize) -> Result<Vec<f64>> {
    for i in 0..d {
        for j in 0..i {
            if (m[i * d + j] - m[j * d + i]).abs() > 1e-12 {
                return Err(Error::InvalidArgument("correlation matrix is not symmetric".into()));
            }
        }
    }
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            if i == j {
                let v = m[i * d + i] - s;
                if v <= 0.0 {
                    return Err(Error::InvalidArgument(
                        "correlation matrix is not positive definite".into(),
                    ));
                }
                l[i * d + i] = v.sqrt();
            } else {
                l[i * d + j] = (m[i * d + j] - s) / l[j * d + j];
            }
        }
    }
    Ok(l)
}

impl Dynamics {
    pub fn brownian(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be ≥ 1".into()));
        }
        Ok(Self::BrownianMotion { dim })
    }

    /// Geometric Brownian motions with volatilities `vols` and correlation `corr` (row-major).
    pub fn black_scholes(rate: f64, vols: Vec<f64>, corr: &[f64]) -> Result<Self> {
        let d = vols.len();
        if d == 0 || corr.len() != d * d {
            return Err(Error::ShapeMismatch(format!(
                "{d} volatilities need a {d}×{d} correlation matrix"
            )));
        }
        if vols.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument("volatilities must be finite and ≥ 0".into()));
        }
        let chol = cholesky(corr, d)?;
        Ok(Self::BlackScholes { rate, vols, chol })
    }

    /// Independent assets with a common volatility.
    pub fn black_scholes_uncorrelated(rate: f64, vol: f64, dim: usize) -> Result<Self> {
        let mut corr = vec![0.0; dim * dim];
        for i in 0..dim {
            corr[i * dim + i] = 1.0;
        }
        Self::black_scholes(rate, vec![vol; dim], &corr)
    }

    pub fn heston(mu: f64, kappa: f64, mean_var: f64, vol_of_vol: f64) -> Result<Self> {
        if 2.0 * kappa * mean_var < 0.0 || vol_of_vol < 0.0 {
            return Err(Error::InvalidArgument(
                "Heston parameters need 2κm ≥ 0 and η ≥ 0".into(),
            ));
        }
        Ok(Self::Heston {
            mu,
            kappa,
            mean_var,
            vol_of_vol,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::BrownianMotion { dim } => *dim,
            Self::BlackScholes { vols, .. } => vols.len(),
            Self::Heston { .. } => 2,
        }
    }

    /// One Euler–Maruyama step driven by standard normals `z`.
    pub fn step(&self, x: &mut [f64], z: &[f64], dt: f64, sqrt_dt: f64) {
        match self {
            Self::BrownianMotion { .. } => {
                for (xi, zi) in x.iter_mut().zip(z) {
                    *xi += sqrt_dt * zi;
                }
            }
            Self::BlackScholes { rate, vols, chol } => {
                let d = vols.len();
                for i in 0..d {
                    let shock: f64 = (0..=i).map(|j| chol[i * d + j] * z[j]).sum();
                    x[i] += rate * x[i] * dt + vols[i] * x[i] * shock * sqrt_dt;
                }
            }
            Self::Heston {
                mu,
                kappa,
                mean_var,
                vol_of_vol,
            } => {
                // Full truncation: the variance enters every coefficient as max(V, 0).
                let (s, v) = (x[0], x[1]);
                let v_pos = v.max(0.0);
                let root = v_pos.sqrt();
                x[0] = s + mu * s * dt + root * s * sqrt_dt * z[0];
                x[1] = v + kappa * (mean_var - v_pos) * dt + vol_of_vol * root * sqrt_dt * z[1];
            }
        }
    }

    /// Continues from `start` for `steps` fine steps; returns the new states
    /// (excluding `start`), row-major.
    pub fn simulate_from<R: Rng>(&self, start: &[f64], steps: usize, dt: f64, rng: &mut R) -> Result<Vec<f64>> {
        let d = self.dim();
        let sqrt_dt = dt.sqrt();
        let mut x = start.to_vec();
        let mut z = vec![0.0; d];
        let mut out = Vec::with_capacity(steps * d);
        for k in 0..steps {
            z.iter_mut().for_each(|zi| *zi = rng.sample(StandardNormal));
            self.step(&mut x, &z, dt, sqrt_dt);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState { step: k + 1 });
            }
            out.extend_from_slice(&x);
        }
        Ok(out)
    }
}

/// Distribution of the initial state X(0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSampler {
    Fixed {
        x0: Vec<f64>,
    },
    /// Per coordinate exp((μ − σ²/2)τ + σ√τ ξ), ξ ~ N(0, 1).
    Lognormal {
        mu: f64,
        tau: f64,
        sigma: f64,
    },
}

impl InitSampler {
    pub fn lognormal(mu: f64, tau: f64, sigma: f64) -> Result<Self> {
        if !(tau > 0.0 && sigma > 0.0) {
            return Err(Error::InvalidArgument("lognormal init needs τ > 0 and σ > 0".into()));
        }
        Ok(Self::Lognormal { mu, tau, sigma })
    }

    pub fn sample<R: Rng>(&self, dim: usize, rng: &mut R) -> Result<Vec<f64>> {
        match self {
            Self::Fixed { x0 } => {
                if x0.len() != dim {
                    return Err(Error::ShapeMismatch(format!(
                        "initial state has {} coordinates, dynamics have {dim}",
                        x0.len()
                    )));
                }
                Ok(x0.clone())
            }
            Self::Lognormal { mu, tau, sigma } => Ok((0..dim)
                .map(|_| {
                    let xi: f64 = rng.sample(StandardNormal);
                    ((mu - 0.5 * sigma * sigma) * tau + sigma * tau.sqrt() * xi).exp()
                })
                .collect()),
        }
    }
}

/// Simulates path `index` of a batch; its random stream depends only on `(seed, index)`.
pub fn simulate_path(
    dynamics: &Dynamics,
    init: &InitSampler,
    grid: &GridSpec,
    seed: u64,
    index: u64,
) -> Result<PiecewisePath> {
    let d = dynamics.dim();
    let mut rng = stream_rng(seed, index);
    let x0 = init.sample(d, &mut rng)?;
    if let Dynamics::Heston { .. } = dynamics {
        if x0[1] < 0.0 {
            return Err(Error::InvalidArgument("Heston V(0) must be ≥ 0".into()));
        }
    }
    let mut values = x0;
    values.extend(dynamics.simulate_from(&values.clone(), grid.fine_steps(), grid.dt_fine(), &mut rng)?);
    PiecewisePath::from_flat(d, grid.fine_times(), values)
}

/// Simulates `batch` independent paths on the fine grid.
pub fn simulate_batch(
    dynamics: &Dynamics,
    init: &InitSampler,
    grid: &GridSpec,
    batch: usize,
    seed: u64,
) -> Result<Vec<PiecewisePath>> {
    grid.validate()?;
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be ≥ 1".into()));
    }
    (0..batch as u64)
        .into_par_iter()
        .map(|i| simulate_path(dynamics, init, grid, seed, i))
        .collect()
}

/// Values at the coarse solution nodes of a fine path.
pub fn restrict_to_coarse(path: &PiecewisePath, grid: &GridSpec) -> Result<PiecewisePath> {
    grid.check_fine(path)?;
    let d = path.dim();
    let mut values = Vec::with_capacity((grid.coarse_steps + 1) * d);
    for j in 0..=grid.coarse_steps {
        values.extend_from_slice(path.point(j * grid.refine));
    }
    PiecewisePath::from_flat(d, grid.coarse_times(), values)
}

/// Fine sub-path covering coarse interval `[t_j, t_{j+1}]`.
pub fn coarse_interval(path: &PiecewisePath, grid: &GridSpec, j: usize) -> Result<PiecewisePath> {
    grid.check_fine(path)?;
    if j >= grid.coarse_steps {
        return Err(Error::GridMismatch(format!(
            "interval {j} out of range for {} coarse steps",
            grid.coarse_steps
        )));
    }
    path.slice(j * grid.refine, (j + 1) * grid.refine)
}

/// Writes paths as CSV with header `path_id,t,x_0,...,x_{d-1}`.
pub fn write_paths_csv<W: Write>(mut w: W, paths: &[PiecewisePath]) -> Result<()> {
    let d = paths.first().map(|p| p.dim()).unwrap_or(1);
    let header: Vec<String> = (0..d).map(|i| format!("x_{i}")).collect();
    writeln!(w, "path_id,t,{}", header.join(","))?;
    for (id, p) in paths.iter().enumerate() {
        for (k, x) in p.points().enumerate() {
            write!(w, "{id},{}", p.times()[k])?;
            for v in x {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Reads paths written by [`write_paths_csv`], or a single path with header `t,x_0,...`.
pub fn read_paths_csv<R: BufRead>(r: R) -> Result<Vec<(u64, PiecewisePath)>> {
    let mut lines = r.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(Error::TooFewSamples(0)),
    };
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let with_id = cols.first() == Some(&"path_id");
    let t_col = usize::from(with_id);
    if cols.get(t_col) != Some(&"t") || cols.len() < t_col + 2 {
        return Err(Error::InvalidPath(format!("unexpected CSV header `{}`", header.trim())));
    }
    let d = cols.len() - t_col - 1;
    let mut out: Vec<(u64, Vec<f64>, Vec<f64>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::InvalidPath(format!(
                "line {} has {} fields, expected {}",
                n + 2,
                fields.len(),
                cols.len()
            )));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::InvalidPath(format!("line {}: cannot parse `{s}`", n + 2)))
        };
        let id = if with_id {
            fields[0]
                .parse::<u64>()
                .map_err(|_| Error::InvalidPath(format!("line {}: bad path_id", n + 2)))?
        } else {
            0
        };
        if out.last().map(|e| e.0) != Some(id) {
            out.push((id, Vec::new(), Vec::new()));
        }
        let entry = out.last_mut().expect("just pushed");
        entry.1.push(parse(fields[t_col])?);
        for f in &fields[t_col + 1..] {
            entry.2.push(parse(f)?);
        }
    }
    if out.is_empty() {
        return Err(Error::TooFewSamples(0));
    }
    out.into_iter()
        .map(|(id, t, v)| Ok((id, PiecewisePath::from_flat(d, t, v)?)))
        .collect()
}
