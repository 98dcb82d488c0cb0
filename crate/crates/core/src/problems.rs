//! Problem instances: payoffs, discounted targets, the analytic heat solution
//! and the conditional Monte-Carlo oracle.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::logsig::PiecewisePath;
use crate::rng::stream_rng;
use crate::sde::{Dynamics, GridSpec, InitSampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayoffKind {
    /// (∫_0^T Σ_i X^i dt)², left Riemann sum on the fine grid.
    HeatIntegralSquared,
    /// max_t Σ_i X^i(t) − Σ_i X^i(T) over fine nodes.
    Lookback,
    /// Coupon `coupons[j]` at the first observation with S ≥ barrier, else
    /// `redemption · S(T)`. S is coordinate 0.
    Autocallable {
        barrier: f64,
        obs_times: Vec<f64>,
        coupons: Vec<f64>,
        redemption: f64,
    },
}

impl PayoffKind {
    pub fn autocallable_default() -> Self {
        Self::Autocallable {
            barrier: 1.02,
            obs_times: vec![1.0 / 6.0, 1.0 / 3.0],
            coupons: vec![1.1, 1.2],
            redemption: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub dynamics: Dynamics,
    pub init: InitSampler,
    /// Constant discount rate r.
    pub rate: f64,
    pub payoff: PayoffKind,
    pub grid: GridSpec,
}

impl ProblemSpec {
    pub fn new(dynamics: Dynamics, init: InitSampler, rate: f64, payoff: PayoffKind, grid: GridSpec) -> Result<Self> {
        let spec = Self {
            dynamics,
            init,
            rate,
            payoff,
            grid,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !self.rate.is_finite() {
            return Err(Error::InvalidArgument("rate must be finite".into()));
        }
        if let InitSampler::Fixed { x0 } = &self.init {
            if x0.len() != self.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "initial state has {} coordinates, dynamics have {}",
                    x0.len(),
                    self.dim()
                )));
            }
        }
        if let PayoffKind::Autocallable { obs_times, coupons, .. } = &self.payoff {
            if obs_times.is_empty() || obs_times.len() != coupons.len() {
                return Err(Error::InvalidArgument(
                    "autocallable needs one coupon per observation time".into(),
                ));
            }
            if obs_times.windows(2).any(|w| w[1] <= w[0])
                || obs_times[0] < 0.0
                || *obs_times.last().unwrap() >= self.grid.horizon
            {
                return Err(Error::InvalidArgument(
                    "autocallable observation times must be increasing and < T".into(),
                ));
            }
        }
        Ok(())
    }

    /// Brownian motion in R^d from the origin, T = 1.
    pub fn heat(dim: usize) -> Result<Self> {
        Self::new(
            Dynamics::brownian(dim)?,
            InitSampler::Fixed { x0: vec![0.0; dim] },
            0.0,
            PayoffKind::HeatIntegralSquared,
            GridSpec::default(),
        )
    }

    /// Independent geometric Brownian motions with lognormal X(0), T = 1.
    pub fn black_scholes_lookback(dim: usize, vol: f64) -> Result<Self> {
        Self::new(
            Dynamics::black_scholes_uncorrelated(0.05, vol, dim)?,
            InitSampler::lognormal(0.08, 0.1, 0.1)?,
            0.05,
            PayoffKind::Lookback,
            GridSpec::default(),
        )
    }

    /// Heston (S, V) with the standard autocallable parameters, T = 0.5.
    pub fn heston_autocallable() -> Result<Self> {
        Self::new(
            Dynamics::heston(0.05, 0.8, 0.3, 0.05)?,
            InitSampler::Fixed { x0: vec![1.0, 0.3] },
            0.05,
            PayoffKind::autocallable_default(),
            GridSpec::new(0.5, 6, 10)?,
        )
    }

    pub fn dim(&self) -> usize {
        self.dynamics.dim()
    }

    pub fn discount(&self, t: f64) -> f64 {
        (-self.rate * (self.grid.horizon - t)).exp()
    }

    /// Pathwise payoff of a full fine path.
    pub fn payoff(&self, path: &PiecewisePath) -> Result<f64> {
        if path.dim() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "path dimension {} vs problem dimension {}",
                path.dim(),
                self.dim()
            )));
        }
        if (path.end_time() - self.grid.horizon).abs() > 1e-9 * self.grid.horizon.max(1.0) {
            return Err(Error::GridMismatch(format!(
                "path ends at {} but horizon is {}",
                path.end_time(),
                self.grid.horizon
            )));
        }
        self.grid.check_fine(path)?;
        Ok(self.payoff_values(path.values()))
    }

    /// Payoff of fine-grid samples given row-major, without validation.
    pub fn payoff_values(&self, values: &[f64]) -> f64 {
        let d = self.dim();
        let dt = self.grid.dt_fine();
        let sums = values.chunks_exact(d).map(|x| x.iter().sum::<f64>());
        match &self.payoff {
            PayoffKind::HeatIntegralSquared => {
                let n = values.len() / d;
                let integral: f64 = sums.take(n - 1).sum::<f64>() * dt;
                integral * integral
            }
            PayoffKind::Lookback => {
                let mut max = f64::NEG_INFINITY;
                let mut last = 0.0;
                for s in sums {
                    max = max.max(s);
                    last = s;
                }
                max - last
            }
            PayoffKind::Autocallable {
                barrier,
                obs_times,
                coupons,
                redemption,
            } => {
                for (t, q) in obs_times.iter().zip(coupons) {
                    let k = (t / dt + 1e-9).floor() as usize;
                    if values[k * d] >= *barrier {
                        return *q;
                    }
                }
                redemption * values[values.len() - d]
            }
        }
    }

    /// F(t_j, X) = e^{−r(T−t_j)} g(X).
    pub fn target_f(&self, path: &PiecewisePath, j: usize) -> Result<f64> {
        if j > self.grid.coarse_steps {
            return Err(Error::GridMismatch(format!("node {j} out of range")));
        }
        Ok(self.discount(self.grid.coarse_time(j)) * self.payoff(path)?)
    }

    /// Targets at every coarse node.
    pub fn targets(&self, path: &PiecewisePath) -> Result<Vec<f64>> {
        let g = self.payoff(path)?;
        Ok((0..=self.grid.coarse_steps)
            .map(|j| self.discount(self.grid.coarse_time(j)) * g)
            .collect())
    }
}

/// Closed-form heat solution given a fine-grid prefix on [0, t] (row-major,
/// step `dt`), with t = (samples − 1)·dt.
pub fn heat_analytic(prefix: &[f64], dim: usize, dt: f64, horizon: f64) -> Result<f64> {
    if dim == 0 || prefix.is_empty() || !prefix.len().is_multiple_of(dim) {
        return Err(Error::ShapeMismatch("prefix length is not a multiple of dim".into()));
    }
    let n = prefix.len() / dim;
    let t = (n - 1) as f64 * dt;
    let sums: Vec<f64> = prefix.chunks_exact(dim).map(|x| x.iter().sum()).collect();
    let integral: f64 = sums[..n - 1].iter().sum::<f64>() * dt;
    let s = sums[n - 1];
    let tau = (horizon - t).max(0.0);
    Ok(integral * integral + 2.0 * tau * s * integral + tau * tau * s * s + dim as f64 / 3.0 * tau.powi(3))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Conditional Monte-Carlo estimate of E[F(t_j, X) | X_{[0,t_j]} = prefix].
///
/// `prefix` holds the fine samples up to a coarse node, row-major. Continuation
/// `k` uses the random stream `(seed, k)`.
pub fn mc_oracle(spec: &ProblemSpec, prefix: &[f64], n_sims: usize, seed: u64) -> Result<OracleEstimate> {
    if n_sims < 2 {
        return Err(Error::InvalidArgument(format!(
            "Monte-Carlo oracle needs n_sims ≥ 2, got {n_sims}"
        )));
    }
    let d = spec.dim();
    let grid = &spec.grid;
    if prefix.is_empty() || !prefix.len().is_multiple_of(d) {
        return Err(Error::ShapeMismatch("prefix length is not a multiple of dim".into()));
    }
    let done = prefix.len() / d - 1;
    if !done.is_multiple_of(grid.refine) || done > grid.fine_steps() {
        return Err(Error::GridMismatch(format!(
            "prefix with {} fine steps does not end on a coarse node",
            done
        )));
    }
    let j = done / grid.refine;
    let remaining = grid.fine_steps() - done;
    let discount = spec.discount(grid.coarse_time(j));
    let start = &prefix[done * d..];
    let samples: Vec<f64> = (0..n_sims as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, k);
            let tail = spec
                .dynamics
                .simulate_from(start, remaining, grid.dt_fine(), &mut rng)?;
            let mut full = Vec::with_capacity(prefix.len() + tail.len());
            full.extend_from_slice(prefix);
            full.extend_from_slice(&tail);
            Ok(discount * spec.payoff_values(&full))
        })
        .collect::<Result<_>>()?;
    let (mut mean, mut m2) = (0.0, 0.0);
    for (n, x) in samples.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (n + 1) as f64;
        m2 += delta * (x - mean);
    }
    let var = m2 / (n_sims - 1) as f64;
    Ok(OracleEstimate {
        mean,
        std_err: (var / n_sims as f64).sqrt(),
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 hex digest of a serializable value's JSON form.
pub fn json_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex(&Sha256::digest(serde_json::to_vec(value)?)))
}

/// Memoizes oracle estimates keyed by (problem, prefix, n_sims, seed).
#[derive(Debug, Default)]
pub struct OracleCache {
    entries: Mutex<BTreeMap<String, OracleEstimate>>,
}

impl OracleCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn key(spec: &ProblemSpec, prefix: &[f64], n_sims: usize, seed: u64) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(spec)?);
        for v in prefix {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update((n_sims as u64).to_le_bytes());
        h.update(seed.to_le_bytes());
        Ok(hex(&h.finalize()))
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_or_compute(
        &self,
        spec: &ProblemSpec,
        prefix: &[f64],
        n_sims: usize,
        seed: u64,
    ) -> Result<OracleEstimate> {
        let key = Self::key(spec, prefix, n_sims, seed)?;
        if let Some(e) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok(*e);
        }
        let est = mc_oracle(spec, prefix, n_sims, seed)?;
        self.entries.lock().expect("cache lock").insert(key, est);
        Ok(est)
    }

    /// Loads a cache file with header `key,mean,std_err`; a missing file gives an empty cache.
    pub fn load(path: &Path) -> Result<Self> {
        let cache = Self::new();
        if !path.exists() {
            return Ok(cache);
        }
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut map = cache.entries.lock().expect("cache lock");
        for (n, line) in reader.lines().enumerate().skip(1) {
            let line = line?;
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Config(format!("oracle cache line {}: malformed", n + 1));
            if f.len() != 3 {
                return Err(bad());
            }
            let mean = f[1].parse().map_err(|_| bad())?;
            let std_err = f[2].parse().map_err(|_| bad())?;
            map.insert(f[0].to_string(), OracleEstimate { mean, std_err });
        }
        drop(map);
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "key,mean,std_err")?;
        for (k, e) in self.entries.lock().expect("cache lock").iter() {
            writeln!(w, "{k},{},{}", e.mean, e.std_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::simulate_batch;

    fn constant_path(spec: &ProblemSpec, x: &[f64]) -> PiecewisePath {
        let n = spec.grid.fine_steps() + 1;
        let pts = vec![x.to_vec(); n];
        PiecewisePath::new(spec.grid.fine_times(), &pts).unwrap()
    }

    #[test]
    fn heat_payoff_of_zero_path() {
        let spec = ProblemSpec::heat(1).unwrap();
        assert_eq!(spec.payoff(&constant_path(&spec, &[0.0])).unwrap(), 0.0);
    }

    #[test]
    fn lookback_of_increasing_path_is_zero() {
        let spec = ProblemSpec::black_scholes_lookback(2, 0.3).unwrap();
        let times = spec.grid.fine_times();
        let pts: Vec<Vec<f64>> = times.iter().map(|t| vec![1.0 + t, 2.0 * t]).collect();
        let p = PiecewisePath::new(times, &pts).unwrap();
        assert_eq!(spec.payoff(&p).unwrap(), 0.0);
    }

    #[test]
    fn autocallable_cases() {
        let spec = ProblemSpec::heston_autocallable().unwrap();
        let times = spec.grid.fine_times();
        let early: Vec<Vec<f64>> = times
            .iter()
            .map(|&t| vec![if t >= 1.0 / 6.0 - 1e-12 { 1.05 } else { 1.0 }, 0.3])
            .collect();
        let p = PiecewisePath::new(times.clone(), &early).unwrap();
        assert_eq!(spec.payoff(&p).unwrap(), 1.1);

        let late: Vec<Vec<f64>> = times
            .iter()
            .map(|&t| vec![if t > 0.2 { 1.03 } else { 1.0 }, 0.3])
            .collect();
        let p = PiecewisePath::new(times.clone(), &late).unwrap();
        assert_eq!(spec.payoff(&p).unwrap(), 1.2);

        let below = constant_path(&spec, &[1.0, 0.3]);
        assert!((spec.payoff(&below).unwrap() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn payoff_rejects_wrong_horizon() {
        let spec = ProblemSpec::heat(1).unwrap();
        let p = PiecewisePath::new(vec![0.0, 0.5], &[vec![0.0], vec![0.0]]).unwrap();
        assert!(spec.payoff(&p).is_err());
    }

    #[test]
    fn discounted_targets() {
        let mut spec = ProblemSpec::heat(1).unwrap();
        let p = constant_path(&spec, &[1.0]);
        let g = spec.payoff(&p).unwrap();
        assert!((g - 1.0).abs() < 1e-12);
        assert!(spec.targets(&p).unwrap().iter().all(|f| *f == g));
        spec.rate = 0.05;
        assert_eq!(spec.target_f(&p, 10).unwrap(), g);
        assert!((spec.target_f(&p, 0).unwrap() - 0.951229424500714 * g).abs() < 1e-12);
    }

    #[test]
    fn heat_analytic_values() {
        assert!((heat_analytic(&[0.0], 1, 0.01, 1.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((heat_analytic(&[0.0; 3], 3, 0.01, 1.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn heat_analytic_at_maturity_is_payoff() {
        let spec = ProblemSpec::heat(2).unwrap();
        let paths = simulate_batch(&spec.dynamics, &spec.init, &spec.grid, 5, 8).unwrap();
        for p in &paths {
            let u = heat_analytic(p.values(), 2, spec.grid.dt_fine(), 1.0).unwrap();
            assert!((u - spec.payoff(p).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_matches_heat_analytic() {
        let spec = ProblemSpec::heat(1).unwrap();
        let p = &simulate_batch(&spec.dynamics, &spec.init, &spec.grid, 1, 2).unwrap()[0];
        let prefix = &p.values()[..41];
        let est = mc_oracle(&spec, prefix, 2000, 17).unwrap();
        let exact = heat_analytic(prefix, 1, spec.grid.dt_fine(), 1.0).unwrap();
        assert!((est.mean - exact).abs() < 3.0 * est.std_err, "{est:?} vs {exact}");
    }

    #[test]
    fn deterministic_oracle_has_zero_error() {
        let spec = ProblemSpec::new(
            Dynamics::black_scholes_uncorrelated(0.05, 0.0, 1).unwrap(),
            InitSampler::Fixed { x0: vec![1.0] },
            0.0,
            PayoffKind::Lookback,
            GridSpec::default(),
        )
        .unwrap();
        let p = &simulate_batch(&spec.dynamics, &spec.init, &spec.grid, 1, 0).unwrap()[0];
        let est = mc_oracle(&spec, &p.values()[..31], 10, 1).unwrap();
        assert_eq!(est.mean, spec.target_f(p, 3).unwrap());
        assert_eq!(est.std_err, 0.0);
    }

    #[test]
    fn oracle_argument_checks() {
        let spec = ProblemSpec::heat(1).unwrap();
        assert!(mc_oracle(&spec, &[0.0], 1, 0).is_err());
        assert!(matches!(
            mc_oracle(&spec, &[0.0; 5], 10, 0),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn cache_round_trip() {
        let spec = ProblemSpec::heat(1).unwrap();
        let cache = OracleCache::new();
        let a = cache.get_or_compute(&spec, &[0.0], 100, 3).unwrap();
        let b = cache.get_or_compute(&spec, &[0.0], 100, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(cache.len(), 1);
        let dir = std::env::temp_dir().join(format!("oracle-cache-{}", std::process::id()));
        cache.save(&dir).unwrap();
        let loaded = OracleCache::load(&dir).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded.get_or_compute(&spec, &[0.0], 100, 3).unwrap(), a);
        std::fs::remove_file(&dir).unwrap();
    }
}
