//! Losses, the training loop and test-set evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{adjoint_from_nodes, OutputCotangent};
use crate::error::{Error, Result};
use crate::logsig::PiecewisePath;
use crate::net::{Adagrad, ParamVector};
use crate::nrde::{EncodedPath, NrdeModel, ParamGroup, Prediction};
use crate::problems::{heat_analytic, OracleCache, PayoffKind, ProblemSpec};
use crate::rng::derive_seed;
use crate::sde::{simulate_batch, Dynamics, GridSpec};

const TAG_TRAIN: u64 = 0x74_7261_696e;
const TAG_TEST: u64 = 0x7465_7374;
const TAG_ORACLE: u64 = 0x6f72_6163_6c65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Regress û(t_j) on the discounted payoff F(t_j, X).
    M1,
    /// Martingale increments with a path-derivative head plus the terminal condition.
    M2,
}

fn default_true() -> bool {
    true
}

fn default_lr() -> f64 {
    0.1
}

fn default_eps() -> f64 {
    1e-10
}

fn default_method() -> Method {
    Method::M1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_method")]
    pub method: Method,
    /// Square each martingale increment in the second method (the unsquared sum is kept for comparison).
    #[serde(default = "default_true")]
    pub squared_martingale: bool,
    /// Parameter groups excluded from updates.
    #[serde(default)]
    pub frozen: Vec<ParamGroup>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: 64,
            seed: 0,
            lr: 0.1,
            eps: 1e-10,
            method: Method::M1,
            squared_martingale: true,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("train.lr and train.eps must be positive".into()));
        }
        Ok(())
    }
}

/// Mean over paths of Σ_j (F_j − û_j)², with cotangents 2(û_j − F_j)/N₂.
pub fn loss_method1(u_hat: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    if u_hat.len() != targets.len() || u_hat.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} targets",
            u_hat.len(),
            targets.len()
        )));
    }
    let n = u_hat.len() as f64;
    let mut loss = 0.0;
    let mut cots = Vec::with_capacity(u_hat.len());
    for (u, f) in u_hat.iter().zip(targets) {
        if u.len() != f.len() {
            return Err(Error::ShapeMismatch("prediction and target grids differ".into()));
        }
        let mut cot = Vec::with_capacity(u.len());
        for (ui, fi) in u.iter().zip(f) {
            let r = ui - fi;
            loss += r * r;
            cot.push(2.0 * r / n);
        }
        cots.push(cot);
    }
    Ok((loss / n, cots))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Method2Loss {
    pub loss: f64,
    /// Batch mean of the martingale-increment part.
    pub martingale: f64,
    /// Batch mean of (g − û(T))².
    pub terminal: f64,
    pub cot_u: Vec<Vec<f64>>,
    pub cot_dx: Vec<Vec<Vec<f64>>>,
}

/// Samples e^{−r t_j} X(t_j) at the coarse nodes.
pub fn discounted_coarse(path: &PiecewisePath, grid: &GridSpec, rate: f64) -> Result<Vec<Vec<f64>>> {
    grid.check_fine(path)?;
    Ok((0..=grid.coarse_steps)
        .map(|j| {
            let disc = (-rate * grid.coarse_time(j)).exp();
            path.point(j * grid.refine).iter().map(|x| disc * x).collect()
        })
        .collect())
}

/// Second-method loss. Residual j is
/// e^{−r t_j} û_j − e^{−r t_{j−1}} û_{j−1} − ⟨dx_{j−1}, X̄_j − X̄_{j−1}⟩.
pub fn loss_method2(
    u_hat: &[Vec<f64>],
    dx_hat: &[Vec<Vec<f64>>],
    discounted: &[Vec<Vec<f64>>],
    times: &[f64],
    payoffs: &[f64],
    rate: f64,
    squared: bool,
) -> Result<Method2Loss> {
    let b = u_hat.len();
    if b == 0 || dx_hat.len() != b || discounted.len() != b || payoffs.len() != b {
        return Err(Error::ShapeMismatch("batch sizes of method-2 inputs differ".into()));
    }
    let nodes = times.len();
    let n = b as f64;
    let disc: Vec<f64> = times.iter().map(|t| (-rate * t).exp()).collect();
    let (mut mart, mut term) = (0.0, 0.0);
    let mut cot_u = Vec::with_capacity(b);
    let mut cot_dx = Vec::with_capacity(b);
    for i in 0..b {
        let (u, dx, xb) = (&u_hat[i], &dx_hat[i], &discounted[i]);
        if u.len() != nodes || dx.len() != nodes || xb.len() != nodes {
            return Err(Error::ShapeMismatch(
                "method-2 inputs do not match the time grid".into(),
            ));
        }
        let mut cu = vec![0.0; nodes];
        let mut cdx: Vec<Vec<f64>> = dx.iter().map(|v| vec![0.0; v.len()]).collect();
        for j in 1..nodes {
            if dx[j - 1].len() != xb[j].len() {
                return Err(Error::ShapeMismatch("dx head and path dimensions differ".into()));
            }
            let inc: Vec<f64> = xb[j].iter().zip(&xb[j - 1]).map(|(a, c)| a - c).collect();
            let stoch: f64 = dx[j - 1].iter().zip(&inc).map(|(a, c)| a * c).sum();
            let r = disc[j] * u[j] - disc[j - 1] * u[j - 1] - stoch;
            let weight = if squared {
                mart += r * r;
                2.0 * r
            } else {
                mart += r;
                1.0
            };
            cu[j] += weight * disc[j] / n;
            cu[j - 1] -= weight * disc[j - 1] / n;
            for (c, x) in cdx[j - 1].iter_mut().zip(&inc) {
                *c -= weight * x / n;
            }
        }
        let e = payoffs[i] - u[nodes - 1];
        term += e * e;
        cu[nodes - 1] -= 2.0 * e / n;
        cot_u.push(cu);
        cot_dx.push(cdx);
    }
    Ok(Method2Loss {
        loss: (mart + term) / n,
        martingale: mart / n,
        terminal: term / n,
        cot_u,
        cot_dx,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Batch loss per epoch.
    pub curve: Vec<f64>,
    /// Terminal-mismatch component per epoch (second method only).
    pub terminal_curve: Vec<f64>,
}

struct Forward {
    encoded: EncodedPath,
    nodes: Vec<Vec<f64>>,
    pred: Prediction,
}

fn forward_batch(model: &NrdeModel, paths: &[PiecewisePath], grid: &GridSpec) -> Result<Vec<Forward>> {
    paths
        .par_iter()
        .map(|p| {
            let encoded = model.encode(p, grid)?;
            let nodes = model.forward_hidden(&encoded.intervals, &encoded.x0)?;
            let pred = model.predict_from_nodes(&nodes)?;
            Ok(Forward { encoded, nodes, pred })
        })
        .collect()
}

/// Trains `model` in place. A fresh batch is simulated every epoch from
/// `(seed, epoch)`, so identical configurations give identical curves.
pub fn train(
    model: &mut NrdeModel,
    problem: &ProblemSpec,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    problem.validate()?;
    if model.config().input_dim != problem.dim() {
        return Err(Error::Config(format!(
            "model.input_dim = {} but the problem is {}-dimensional",
            model.config().input_dim,
            problem.dim()
        )));
    }
    if config.method == Method::M2 && model.readout_dx_shape().is_none() {
        return Err(Error::Config("method m2 needs model.dx_head = true".into()));
    }
    let grid = problem.grid;
    let times = grid.coarse_times();
    let mut opt = Adagrad::new(model.num_params(), config.lr, config.eps);
    let mut mask = vec![true; model.num_params()];
    for g in &config.frozen {
        mask[model.layout().range(*g)].fill(false);
    }
    let mut out = TrainOutcome::default();
    for epoch in 0..config.epochs {
        let diverged = |loss: f64| Error::Divergence { epoch, loss };
        let seed = derive_seed(config.seed, &[TAG_TRAIN, epoch as u64]);
        let paths = simulate_batch(&problem.dynamics, &problem.init, &grid, config.batch_size, seed)?;
        let fwd = match forward_batch(model, &paths, &grid) {
            Err(Error::NonFiniteHidden { .. }) => return Err(diverged(f64::NAN)),
            other => other?,
        };
        let u_hat: Vec<Vec<f64>> = fwd.iter().map(|f| f.pred.u.clone()).collect();
        let (loss, terminal, cots) = match config.method {
            Method::M1 => {
                let targets: Vec<Vec<f64>> = paths.iter().map(|p| problem.targets(p)).collect::<Result<_>>()?;
                let (loss, cu) = loss_method1(&u_hat, &targets)?;
                let cots: Vec<OutputCotangent> = cu.into_iter().map(OutputCotangent::from_u).collect();
                (loss, f64::NAN, cots)
            }
            Method::M2 => {
                let dx_hat: Vec<Vec<Vec<f64>>> = fwd
                    .iter()
                    .map(|f| f.pred.dx.clone().expect("dx head checked above"))
                    .collect();
                let disc: Vec<Vec<Vec<f64>>> = paths
                    .iter()
                    .map(|p| discounted_coarse(p, &grid, problem.rate))
                    .collect::<Result<_>>()?;
                let payoffs: Vec<f64> = paths.iter().map(|p| problem.payoff(p)).collect::<Result<_>>()?;
                let l = loss_method2(
                    &u_hat,
                    &dx_hat,
                    &disc,
                    &times,
                    &payoffs,
                    problem.rate,
                    config.squared_martingale,
                )?;
                let cots = l
                    .cot_u
                    .into_iter()
                    .zip(l.cot_dx)
                    .map(|(u, dx)| OutputCotangent { u, dx: Some(dx) })
                    .collect();
                (l.loss, l.terminal, cots)
            }
        };
        if !loss.is_finite() {
            return Err(diverged(loss));
        }
        let grads: Vec<ParamVector> = fwd
            .par_iter()
            .zip(cots.par_iter())
            .map(|(f, c)| adjoint_from_nodes(model, &f.encoded, &f.nodes, c).map(|(g, _)| g))
            .collect::<Result<_>>()?;
        let mut total = ParamVector::zeros(model.num_params());
        for g in &grads {
            total.add_assign(g);
        }
        for (g, keep) in total.iter_mut().zip(&mask) {
            if !keep {
                *g = 0.0;
            }
        }
        if total.iter().any(|g| !g.is_finite()) {
            return Err(diverged(loss));
        }
        opt.step(model.params_mut(), &total)?;
        out.curve.push(loss);
        if config.method == Method::M2 {
            out.terminal_curve.push(terminal);
        }
        on_epoch(epoch, loss);
    }
    Ok(out)
}

/// Anything that produces û at the coarse nodes of a fine path.
pub trait Predictor: Sync {
    fn predict_u(&self, path: &PiecewisePath, grid: &GridSpec) -> Result<Vec<f64>>;
}

impl Predictor for NrdeModel {
    fn predict_u(&self, path: &PiecewisePath, grid: &GridSpec) -> Result<Vec<f64>> {
        Ok(self.predict_path(path, grid)?.u)
    }
}

/// True when the closed-form heat solution applies.
pub fn has_analytic(problem: &ProblemSpec) -> bool {
    matches!(problem.payoff, PayoffKind::HeatIntegralSquared)
        && matches!(problem.dynamics, Dynamics::BrownianMotion { .. })
        && problem.rate == 0.0
}

/// Reference solution and its standard error at each coarse node: the
/// closed form when available, conditional Monte Carlo otherwise.
pub fn reference_solution(
    problem: &ProblemSpec,
    path: &PiecewisePath,
    n_sims: usize,
    seed: u64,
    cache: Option<&OracleCache>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let grid = &problem.grid;
    grid.check_fine(path)?;
    let d = problem.dim();
    let mut u = Vec::with_capacity(grid.coarse_steps + 1);
    let mut se = Vec::with_capacity(grid.coarse_steps + 1);
    for j in 0..=grid.coarse_steps {
        let prefix = &path.values()[..(j * grid.refine + 1) * d];
        if has_analytic(problem) {
            u.push(heat_analytic(prefix, d, grid.dt_fine(), grid.horizon)?);
            se.push(0.0);
        } else {
            let node_seed = derive_seed(seed, &[j as u64]);
            let est = match cache {
                Some(c) => c.get_or_compute(problem, prefix, n_sims, node_seed)?,
                None => crate::problems::mc_oracle(problem, prefix, n_sims, node_seed)?,
            };
            u.push(est.mean);
            se.push(est.std_err);
        }
    }
    Ok((u, se))
}

/// Uses the reference solution itself as the prediction (independent Monte-Carlo seed).
pub struct OraclePredictor<'a> {
    pub problem: &'a ProblemSpec,
    pub n_sims: usize,
    pub seed: u64,
}

impl Predictor for OraclePredictor<'_> {
    fn predict_u(&self, path: &PiecewisePath, _grid: &GridSpec) -> Result<Vec<f64>> {
        let seed = derive_seed(
            self.seed,
            &path.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        );
        Ok(reference_solution(self.problem, path, self.n_sims, seed, None)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_test: usize,
    pub n_batches: usize,
    pub n_sims: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_test: 50,
            n_batches: 10,
            n_sims: 2000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathTrace {
    pub path_id: usize,
    pub times: Vec<f64>,
    pub u_true: Vec<f64>,
    pub u_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub abs_err: Stat,
    pub rel_err: Stat,
    /// (abs_err, rel_err) per test batch.
    pub batches: Vec<(f64, f64)>,
    /// Σ_i |u − û| / Σ_i |u| at each coarse node, over all test paths.
    pub rel_profile: Vec<f64>,
    /// Reference standard errors aggregated like Abs.err (zero for closed forms).
    pub oracle_std_err: f64,
    pub traces: Vec<PathTrace>,
}

/// Abs.err = (Δ_t/N)·Σ_i Σ_j |u − û| and Rel.err = Abs.err / ((Δ_t/N)·Σ_i Σ_j |u|).
pub fn error_metrics(u: &[Vec<f64>], u_hat: &[Vec<f64>], dt: f64) -> Result<(f64, f64)> {
    if u.len() != u_hat.len() || u.is_empty() {
        return Err(Error::ShapeMismatch(
            "reference and prediction batch sizes differ".into(),
        ));
    }
    let scale = dt / u.len() as f64;
    let (mut diff, mut norm) = (0.0, 0.0);
    for (a, b) in u.iter().zip(u_hat) {
        if a.len() != b.len() {
            return Err(Error::ShapeMismatch("reference and prediction grids differ".into()));
        }
        for (x, y) in a.iter().zip(b) {
            diff += (x - y).abs();
            norm += x.abs();
        }
    }
    if norm == 0.0 {
        return Err(Error::ZeroNormalizer);
    }
    Ok((scale * diff, diff / norm))
}

/// Errors of `predictor` on `n_batches` fresh test batches of `n_test` paths.
pub fn evaluate(
    predictor: &dyn Predictor,
    problem: &ProblemSpec,
    config: &EvalConfig,
    cache: Option<&OracleCache>,
) -> Result<EvalReport> {
    if config.n_test == 0 || config.n_batches == 0 {
        return Err(Error::Config("eval.n_test and eval.n_batches must be ≥ 1".into()));
    }
    let grid = problem.grid;
    let nodes = grid.coarse_steps + 1;
    let times = grid.coarse_times();
    let mut batches = Vec::with_capacity(config.n_batches);
    let mut traces = Vec::new();
    let (mut prof_diff, mut prof_norm) = (vec![0.0; nodes], vec![0.0; nodes]);
    let mut se_total = 0.0;
    for b in 0..config.n_batches {
        let seed = derive_seed(config.seed, &[TAG_TEST, b as u64]);
        let paths = simulate_batch(&problem.dynamics, &problem.init, &grid, config.n_test, seed)?;
        let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = paths
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let oracle_seed = derive_seed(config.seed, &[TAG_ORACLE, b as u64, i as u64]);
                let (u, se) = reference_solution(problem, p, config.n_sims, oracle_seed, cache)?;
                Ok((u, se, predictor.predict_u(p, &grid)?))
            })
            .collect::<Result<_>>()?;
        let u: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        let u_hat: Vec<Vec<f64>> = rows.iter().map(|r| r.2.clone()).collect();
        batches.push(error_metrics(&u, &u_hat, grid.dt_coarse())?);
        for (i, (u, se, uh)) in rows.into_iter().enumerate() {
            for j in 0..nodes {
                prof_diff[j] += (u[j] - uh[j]).abs();
                prof_norm[j] += u[j].abs();
            }
            se_total += se.iter().sum::<f64>();
            traces.push(PathTrace {
                path_id: b * config.n_test + i,
                times: times.clone(),
                u_true: u,
                u_hat: uh,
            });
        }
    }
    let abs: Vec<f64> = batches.iter().map(|b| b.0).collect();
    let rel: Vec<f64> = batches.iter().map(|b| b.1).collect();
    Ok(EvalReport {
        abs_err: Stat::of(&abs),
        rel_err: Stat::of(&rel),
        batches,
        rel_profile: prof_diff
            .iter()
            .zip(&prof_norm)
            .map(|(d, n)| if *n > 0.0 { d / n } else { 0.0 })
            .collect(),
        oracle_std_err: se_total * grid.dt_coarse() / (config.n_test * config.n_batches) as f64,
        traces,
    })
}
