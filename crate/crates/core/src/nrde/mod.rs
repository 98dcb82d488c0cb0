//! Neural rough differential equation model: optional linear embedding,
//! initial layer ξ, log-ODE vector field and readouts at the coarse nodes.

mod solver;

pub use solver::Solver;

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logsig::{logsig, map_tensor, path_signature, LyndonBasis, PiecewisePath, TruncatedTensor};
use crate::net::{Activation, Checkpoint, MlpShape, ParamVector};
use crate::rng::stream_rng;
use crate::sde::{coarse_interval, GridSpec};

fn default_one() -> usize {
    1
}

fn default_tanh() -> Activation {
    Activation::Tanh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NrdeConfig {
    /// Dimension d of the driving path.
    pub input_dim: usize,
    /// Reduced dimension d_1 of the embedding layer; `None` disables it.
    #[serde(default)]
    pub embed_dim: Option<usize>,
    /// Append t as an extra channel of the embedded path.
    #[serde(default)]
    pub time_channel: bool,
    /// Hidden state size h.
    pub hidden: usize,
    /// Width of the vector-field network's hidden layers.
    pub field_width: usize,
    /// Number of hidden layers in the vector-field network.
    pub field_layers: usize,
    /// Log-signature depth N.
    pub depth: usize,
    #[serde(default = "default_one")]
    pub ode_steps: usize,
    pub solver: Solver,
    /// Add the path-derivative head R^h → R^d.
    #[serde(default)]
    pub dx_head: bool,
    #[serde(default = "default_tanh")]
    pub field_output: Activation,
}

impl Default for NrdeConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            embed_dim: None,
            time_channel: false,
            hidden: 15,
            field_width: 30,
            field_layers: 2,
            depth: 2,
            ode_steps: 1,
            solver: Solver::Midpoint,
            dx_head: false,
            field_output: Activation::Tanh,
        }
    }
}

impl NrdeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("hidden", self.hidden),
            ("field_width", self.field_width),
            ("depth", self.depth),
            ("ode_steps", self.ode_steps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be ≥ 1")));
        }
        if self.embed_dim == Some(0) {
            return Err(Error::Config("model.embed_dim must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Dimension of the embedded path before the optional time channel.
    pub fn path_dim(&self) -> usize {
        self.embed_dim.unwrap_or(self.input_dim)
    }

    /// Channel count d_in of the path whose log-signature drives the ODE.
    pub fn feature_dim(&self) -> usize {
        self.path_dim() + usize::from(self.time_channel)
    }

    pub fn beta(&self) -> Result<usize> {
        Ok(crate::logsig::beta(self.feature_dim(), self.depth)? as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    Xi,
    Field,
    ReadoutU,
    ReadoutDx,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Embedding,
        ParamGroup::Xi,
        ParamGroup::Field,
        ParamGroup::ReadoutU,
        ParamGroup::ReadoutDx,
    ];
}

/// Offsets of each module in the flat parameter vector, in the order
/// embedding, ξ, field, readout_u, readout_dx.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub embedding: Range<usize>,
    pub xi: Range<usize>,
    pub field: Range<usize>,
    pub readout_u: Range<usize>,
    pub readout_dx: Range<usize>,
}

impl ParamLayout {
    pub fn range(&self, group: ParamGroup) -> Range<usize> {
        match group {
            ParamGroup::Embedding => self.embedding.clone(),
            ParamGroup::Xi => self.xi.clone(),
            ParamGroup::Field => self.field.clone(),
            ParamGroup::ReadoutU => self.readout_u.clone(),
            ParamGroup::ReadoutDx => self.readout_dx.clone(),
        }
    }

    pub fn total(&self) -> usize {
        self.readout_dx.end
    }
}

/// Log-signature of the embedded path over one coarse interval.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivenInterval {
    pub start: f64,
    pub end: f64,
    pub coeffs: Vec<f64>,
}

impl DrivenInterval {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// A fine path prepared for the model: interval features under the current
/// embedding plus the raw per-interval Lie elements needed for embedding gradients.
#[derive(Debug, Clone)]
pub struct EncodedPath {
    pub x0: Vec<f64>,
    pub intervals: Vec<DrivenInterval>,
    /// Log-signature tensors of the (time-augmented) raw path; empty without an embedding.
    pub raw: Vec<TruncatedTensor>,
    pub path: PiecewisePath,
    pub grid: GridSpec,
}

impl EncodedPath {
    pub fn t0(&self) -> f64 {
        self.path.start_time()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// û at each coarse node.
    pub u: Vec<f64>,
    /// Path-derivative head at each coarse node, if present.
    pub dx: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct NrdeModel {
    config: NrdeConfig,
    seed: u64,
    params: ParamVector,
    layout: ParamLayout,
    beta: usize,
    basis: Arc<LyndonBasis>,
    xi: MlpShape,
    field: MlpShape,
    readout_u: MlpShape,
    readout_dx: Option<MlpShape>,
}

impl NrdeModel {
    fn shapes(config: &NrdeConfig) -> Result<(usize, MlpShape, MlpShape, MlpShape, Option<MlpShape>)> {
        config.validate()?;
        let beta = config.beta()?;
        let h = config.hidden;
        let xi = MlpShape::linear(config.feature_dim(), h)?;
        let mut sizes = vec![h];
        sizes.extend(std::iter::repeat_n(config.field_width, config.field_layers));
        sizes.push(h * beta);
        let field = MlpShape::new(sizes, Activation::Tanh, config.field_output)?;
        let readout_u = MlpShape::linear(h, 1)?;
        let readout_dx = if config.dx_head {
            Some(MlpShape::linear(h, config.input_dim)?)
        } else {
            None
        };
        Ok((beta, xi, field, readout_u, readout_dx))
    }

    /// Builds a model with parameters drawn from `seed`.
    pub fn new(config: NrdeConfig, seed: u64) -> Result<Self> {
        let (_, xi, field, ru, rdx) = Self::shapes(&config)?;
        let mut rng = stream_rng(seed, 0);
        let mut params = Vec::new();
        if let Some(d1) = config.embed_dim {
            let bound = (1.0 / config.input_dim as f64).sqrt();
            use rand::Rng;
            params.extend((0..d1 * config.input_dim).map(|_| rng.random_range(-bound..=bound)));
        }
        params.extend(xi.init(&mut rng));
        params.extend(field.init(&mut rng));
        params.extend(ru.init(&mut rng));
        if let Some(s) = &rdx {
            params.extend(s.init(&mut rng));
        }
        Self::from_params(config, params, seed)
    }

    pub fn from_params(config: NrdeConfig, params: Vec<f64>, seed: u64) -> Result<Self> {
        let (beta, xi, field, readout_u, readout_dx) = Self::shapes(&config)?;
        let e = config.embed_dim.map_or(0, |d1| d1 * config.input_dim);
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let layout = ParamLayout {
            embedding: take(e),
            xi: take(xi.num_params()),
            field: take(field.num_params()),
            readout_u: take(readout_u.num_params()),
            readout_dx: take(readout_dx.as_ref().map_or(0, |s| s.num_params())),
        };
        if params.len() != layout.total() {
            return Err(Error::ShapeMismatch(format!(
                "model needs {} parameters, got {}",
                layout.total(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("parameters must be finite".into()));
        }
        let basis = LyndonBasis::shared(config.feature_dim(), config.depth)?;
        Ok(Self {
            config,
            seed,
            params: ParamVector(params),
            layout,
            beta,
            basis,
            xi,
            field,
            readout_u,
            readout_dx,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint<NrdeConfig>) -> Result<Self> {
        Self::from_params(ck.config, ck.params.into_inner(), ck.seed)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<NrdeConfig> {
        Checkpoint::new(self.config.clone(), self.seed, self.params.clone())
    }

    pub fn config(&self) -> &NrdeConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn beta(&self) -> usize {
        self.beta
    }

    pub fn basis(&self) -> &LyndonBasis {
        &self.basis
    }

    pub fn xi_shape(&self) -> &MlpShape {
        &self.xi
    }

    pub fn field_shape(&self) -> &MlpShape {
        &self.field
    }

    pub fn readout_u_shape(&self) -> &MlpShape {
        &self.readout_u
    }

    pub fn readout_dx_shape(&self) -> Option<&MlpShape> {
        self.readout_dx.as_ref()
    }

    pub fn group(&self, group: ParamGroup) -> &[f64] {
        &self.params[self.layout.range(group)]
    }

    pub fn group_mut(&mut self, group: ParamGroup) -> &mut [f64] {
        let r = self.layout.range(group);
        &mut self.params[r]
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "model needs {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Mutable access for optimizers; the length is fixed by the layout.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// The embedding matrix (d_1 × d, row-major), if configured.
    pub fn embedding(&self) -> Option<&[f64]> {
        self.config.embed_dim.map(|_| self.group(ParamGroup::Embedding))
    }

    fn raw_dim(&self) -> usize {
        self.config.input_dim + usize::from(self.config.time_channel)
    }

    /// Matrix acting on the time-augmented raw path: the embedding block plus
    /// a unit entry carrying the time channel through.
    pub(crate) fn augmented_matrix(&self) -> Option<Vec<f64>> {
        let m = self.embedding()?;
        let (d, d1) = (self.config.input_dim, self.config.path_dim());
        let cols = self.raw_dim();
        let mut a = vec![0.0; self.config.feature_dim() * cols];
        for r in 0..d1 {
            a[r * cols..r * cols + d].copy_from_slice(&m[r * d..(r + 1) * d]);
        }
        if self.config.time_channel {
            a[d1 * cols + d] = 1.0;
        }
        Some(a)
    }

    /// One embedded sample: M·x (or x), with t appended if time is a channel.
    pub fn embed_point(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut out = match self.embedding() {
            Some(m) => {
                let d = self.config.input_dim;
                m.chunks_exact(d)
                    .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
                    .collect()
            }
            None => x.to_vec(),
        };
        if self.config.time_channel {
            out.push(t);
        }
        out
    }

    fn check_input(&self, path: &PiecewisePath) -> Result<()> {
        if path.dim() != self.config.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "model expects {}-dimensional paths, got {}",
                self.config.input_dim,
                path.dim()
            )));
        }
        Ok(())
    }

    /// Applies the embedding (and time channel) to every sample.
    pub fn embed_path(&self, path: &PiecewisePath) -> Result<PiecewisePath> {
        self.check_input(path)?;
        path.map_points(self.config.feature_dim(), |t, x, out| {
            out.copy_from_slice(&self.embed_point(x, t));
        })
    }

    /// Log-signatures of an already embedded fine path over each coarse interval.
    pub fn interval_features(&self, embedded: &PiecewisePath, grid: &GridSpec) -> Result<Vec<DrivenInterval>> {
        if embedded.dim() != self.config.feature_dim() {
            return Err(Error::ShapeMismatch(format!(
                "embedded path has {} channels, model expects {}",
                embedded.dim(),
                self.config.feature_dim()
            )));
        }
        (0..grid.coarse_steps)
            .map(|j| {
                let sub = coarse_interval(embedded, grid, j)?;
                Ok(DrivenInterval {
                    start: sub.start_time(),
                    end: sub.end_time(),
                    coeffs: logsig(&sub, self.config.depth)?.into_coeffs(),
                })
            })
            .collect()
    }

    /// Prepares a fine path. With an embedding, each interval's log-signature
    /// of the raw path is computed once and pushed through the embedding's
    /// tensor-algebra action, which equals the log-signature of the embedded path.
    pub fn encode(&self, path: &PiecewisePath, grid: &GridSpec) -> Result<EncodedPath> {
        self.check_input(path)?;
        grid.check_fine(path)?;
        let aug = if self.config.time_channel {
            let d = path.dim();
            path.map_points(d + 1, |t, x, out| {
                out[..d].copy_from_slice(x);
                out[d] = t;
            })?
        } else {
            path.clone()
        };
        let a = self.augmented_matrix();
        let mut intervals = Vec::with_capacity(grid.coarse_steps);
        let mut raw = Vec::new();
        for j in 0..grid.coarse_steps {
            let sub = coarse_interval(&aug, grid, j)?;
            let lie = path_signature(&sub, self.config.depth)?.log()?;
            let coeffs = match &a {
                Some(a) => {
                    let mapped = map_tensor(&lie, a, self.config.feature_dim())?;
                    raw.push(lie);
                    self.basis.project(&mapped)?
                }
                None => self.basis.project(&lie)?,
            };
            intervals.push(DrivenInterval {
                start: sub.start_time(),
                end: sub.end_time(),
                coeffs,
            });
        }
        Ok(EncodedPath {
            x0: path.first().to_vec(),
            intervals,
            raw,
            path: path.clone(),
            grid: *grid,
        })
    }

    /// Z(r_0) = ξ(embed(x0, t0)).
    pub fn initial_state(&self, x0: &[f64], t0: f64) -> Result<Vec<f64>> {
        if x0.len() != self.config.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "initial state has {} coordinates, model expects {}",
                x0.len(),
                self.config.input_dim
            )));
        }
        self.xi.forward(self.group(ParamGroup::Xi), &self.embed_point(x0, t0))
    }

    /// G(z)·w / duration, where G(z) is the field output read as an h×β matrix.
    pub fn rhs(&self, z: &[f64], w: &[f64], duration: f64) -> Result<Vec<f64>> {
        let out = self.field.forward(self.group(ParamGroup::Field), z)?;
        Ok(self.contract(&out, w, duration))
    }

    pub(crate) fn contract(&self, g: &[f64], w: &[f64], duration: f64) -> Vec<f64> {
        g.chunks_exact(self.beta)
            .map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / duration)
            .collect()
    }

    /// Integrates one interval with the configured solver and step count.
    pub fn integrate_interval(&self, z: &[f64], interval: &DrivenInterval) -> Result<Vec<f64>> {
        let dur = interval.duration();
        let h = dur / self.config.ode_steps as f64;
        let mut z = z.to_vec();
        for _ in 0..self.config.ode_steps {
            z = self.config.solver.step(&z, h, |y| self.rhs(y, &interval.coeffs, dur))?;
        }
        Ok(z)
    }

    fn check_intervals(&self, intervals: &[DrivenInterval]) -> Result<()> {
        for (i, iv) in intervals.iter().enumerate() {
            if iv.coeffs.len() != self.beta || !(iv.duration() > 0.0) {
                return Err(Error::ShapeMismatch(format!(
                    "interval {i} has {} coefficients (expected {}) and duration {}",
                    iv.coeffs.len(),
                    self.beta,
                    iv.duration()
                )));
            }
            if i > 0 && (intervals[i - 1].end - iv.start).abs() > 1e-12 {
                return Err(Error::GridMismatch(format!("interval {i} is not contiguous")));
            }
        }
        Ok(())
    }

    /// Hidden states Z(r_0), …, Z(r_{N_1}).
    pub fn forward_hidden(&self, intervals: &[DrivenInterval], x0: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_intervals(intervals)?;
        let t0 = intervals.first().map_or(0.0, |iv| iv.start);
        let mut z = self.initial_state(x0, t0)?;
        let mut nodes = Vec::with_capacity(intervals.len() + 1);
        nodes.push(z.clone());
        for (i, iv) in intervals.iter().enumerate() {
            z = match self.integrate_interval(&z, iv) {
                Ok(z) if z.iter().all(|v| v.is_finite()) => z,
                Ok(_) | Err(Error::NonFiniteInput) => return Err(Error::NonFiniteHidden { interval: i }),
                Err(e) => return Err(e),
            };
            nodes.push(z.clone());
        }
        Ok(nodes)
    }

    pub fn readout(&self, z: &[f64]) -> Result<(f64, Option<Vec<f64>>)> {
        let u = self.readout_u.forward(self.group(ParamGroup::ReadoutU), z)?[0];
        let dx = match &self.readout_dx {
            Some(s) => Some(s.forward(self.group(ParamGroup::ReadoutDx), z)?),
            None => None,
        };
        Ok((u, dx))
    }

    pub fn predict_from_nodes(&self, nodes: &[Vec<f64>]) -> Result<Prediction> {
        let mut u = Vec::with_capacity(nodes.len());
        let mut dx = self.readout_dx.as_ref().map(|_| Vec::with_capacity(nodes.len()));
        for z in nodes {
            let (ui, dxi) = self.readout(z)?;
            u.push(ui);
            if let (Some(all), Some(v)) = (dx.as_mut(), dxi) {
                all.push(v);
            }
        }
        Ok(Prediction { u, dx })
    }

    /// Outputs at every coarse node; node j only sees the intervals before it.
    pub fn predict(&self, encoded: &EncodedPath) -> Result<Prediction> {
        self.predict_from_nodes(&self.forward_hidden(&encoded.intervals, &encoded.x0)?)
    }

    pub fn predict_path(&self, path: &PiecewisePath, grid: &GridSpec) -> Result<Prediction> {
        self.predict(&self.encode(path, grid)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logsig::tensor_mul;
    use crate::sde::{simulate_batch, Dynamics, InitSampler};

    fn small_config() -> NrdeConfig {
        NrdeConfig {
            input_dim: 3,
            embed_dim: Some(2),
            time_channel: true,
            hidden: 4,
            field_width: 6,
            field_layers: 1,
            depth: 2,
            ode_steps: 2,
            solver: Solver::Midpoint,
            dx_head: true,
            field_output: Activation::Tanh,
        }
    }

    fn bm_path(dim: usize, grid: &GridSpec, seed: u64) -> PiecewisePath {
        let dynamics = Dynamics::brownian(dim).unwrap();
        let init = InitSampler::Fixed { x0: vec![0.1; dim] };
        simulate_batch(&dynamics, &init, grid, 1, seed).unwrap().remove(0)
    }

    #[test]
    fn layout_matches_config() {
        let model = NrdeModel::new(small_config(), 1).unwrap();
        assert_eq!(model.beta(), 6);
        let l = model.layout();
        assert_eq!(l.embedding.len(), 6);
        assert_eq!(l.xi.len(), 4 * 4);
        assert_eq!(l.field.len(), 5 * 6 + 7 * 24);
        assert_eq!(l.readout_u.len(), 5);
        assert_eq!(l.readout_dx.len(), 15);
        assert_eq!(model.num_params(), l.total());
        assert_eq!(model.field_shape().n_out(), 4 * model.beta());
    }

    #[test]
    fn identity_embedding_leaves_path_unchanged() {
        let cfg = NrdeConfig {
            embed_dim: None,
            time_channel: false,
            ..small_config()
        };
        let model = NrdeModel::new(cfg, 0).unwrap();
        let grid = GridSpec::new(1.0, 3, 4).unwrap();
        let p = bm_path(3, &grid, 2);
        assert_eq!(model.embed_path(&p).unwrap(), p);
    }

    #[test]
    fn embedding_is_pointwise_linear() {
        let mut model = NrdeModel::new(small_config(), 3).unwrap();
        let grid = GridSpec::new(1.0, 3, 4).unwrap();
        let p = bm_path(3, &grid, 4);
        let e = model.embed_path(&p).unwrap();
        let m = model.embedding().unwrap().to_vec();
        for k in 0..p.len() {
            let x = p.point(k);
            for r in 0..2 {
                let expected: f64 = (0..3).map(|c| m[r * 3 + c] * x[c]).sum();
                assert!((e.point(k)[r] - expected).abs() < 1e-15);
            }
            assert_eq!(e.point(k)[2], p.times()[k]);
        }
        model.group_mut(ParamGroup::Embedding).fill(0.0);
        let z = model.embed_path(&p).unwrap();
        let feats = model.interval_features(&z, &grid).unwrap();
        for f in feats {
            // Only the time channel moves.
            assert!((f.coeffs[2] - f.duration()).abs() < 1e-12);
            for (i, c) in f.coeffs.iter().enumerate() {
                if i != 2 {
                    assert!(c.abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn equivariant_encoding_matches_direct_route() {
        let model = NrdeModel::new(small_config(), 5).unwrap();
        let grid = GridSpec::new(1.0, 4, 5).unwrap();
        let p = bm_path(3, &grid, 6);
        let direct = model.interval_features(&model.embed_path(&p).unwrap(), &grid).unwrap();
        let enc = model.encode(&p, &grid).unwrap();
        assert_eq!(enc.intervals.len(), 4);
        for (a, b) in direct.iter().zip(&enc.intervals) {
            for (x, y) in a.coeffs.iter().zip(&b.coeffs) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn straight_line_interval_has_only_level_one() {
        let cfg = NrdeConfig {
            embed_dim: None,
            time_channel: false,
            input_dim: 2,
            ..small_config()
        };
        let model = NrdeModel::new(cfg, 0).unwrap();
        let grid = GridSpec::new(1.0, 2, 5).unwrap();
        let times = grid.fine_times();
        let pts: Vec<Vec<f64>> = times.iter().map(|t| vec![2.0 * t, -t]).collect();
        let p = PiecewisePath::new(times, &pts).unwrap();
        for f in model.interval_features(&p, &grid).unwrap() {
            assert!(f.coeffs[2].abs() < 1e-15);
            assert!((f.coeffs[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interval_logsigs_concatenate_by_chen() {
        let cfg = NrdeConfig {
            embed_dim: None,
            time_channel: false,
            input_dim: 2,
            depth: 3,
            ..small_config()
        };
        let model = NrdeModel::new(cfg, 0).unwrap();
        let grid = GridSpec::new(1.0, 10, 10).unwrap();
        let p = bm_path(2, &grid, 9);
        let feats = model.interval_features(&p, &grid).unwrap();
        assert_eq!(feats.len(), 10);
        let basis = model.basis();
        let e0 = basis.expand(&feats[0].coeffs).unwrap().exp().unwrap();
        let e1 = basis.expand(&feats[1].coeffs).unwrap().exp().unwrap();
        let joined = tensor_mul(&e0, &e1).unwrap();
        let direct = path_signature(&p.slice(0, 20).unwrap(), 3).unwrap();
        assert!(joined.max_rel_diff(&direct).unwrap() < 1e-12);
    }

    #[test]
    fn zero_field_keeps_state_constant() {
        let mut model = NrdeModel::new(small_config(), 7).unwrap();
        model.group_mut(ParamGroup::Field).fill(0.0);
        let grid = GridSpec::new(1.0, 5, 4).unwrap();
        let enc = model.encode(&bm_path(3, &grid, 1), &grid).unwrap();
        let nodes = model.forward_hidden(&enc.intervals, &enc.x0).unwrap();
        let z0 = model.initial_state(&enc.x0, 0.0).unwrap();
        assert!(nodes.iter().all(|z| *z == z0));
    }

    /// h = 1, G(z) = a·z via a single identity-activation linear layer.
    fn linear_field_model(a: f64, solver: Solver, steps: usize) -> NrdeModel {
        let cfg = NrdeConfig {
            input_dim: 1,
            embed_dim: None,
            time_channel: false,
            hidden: 1,
            field_width: 1,
            field_layers: 0,
            depth: 1,
            ode_steps: steps,
            solver,
            dx_head: false,
            field_output: Activation::Identity,
        };
        // ξ: z0 = 1·x0 + 0; field: a·z + 0; readout: 1·z + 0.
        NrdeModel::from_params(cfg, vec![1.0, 0.0, a, 0.0, 1.0, 0.0], 0).unwrap()
    }

    fn linear_error(solver: Solver, steps: usize) -> f64 {
        let (a, w) = (0.5, 1.0);
        let model = linear_field_model(a, solver, steps);
        let iv = DrivenInterval {
            start: 0.0,
            end: 1.0,
            coeffs: vec![w],
        };
        let nodes = model.forward_hidden(&[iv], &[1.0]).unwrap();
        (nodes[1][0] - (a * w).exp()).abs()
    }

    #[test]
    fn linear_field_closed_form() {
        assert!(linear_error(Solver::Rk4, 16) < 1e-8);
    }

    #[test]
    fn solver_orders_on_linear_field() {
        for s in Solver::ALL {
            let ratio = linear_error(s, 8) / linear_error(s, 16);
            let expected = 2f64.powi(s.order() as i32);
            assert!((ratio / expected - 1.0).abs() < 0.25, "{s:?}: {ratio}");
        }
    }

    #[test]
    fn euler_step_refinement() {
        let model = |n| {
            NrdeModel::new(
                NrdeConfig {
                    ode_steps: n,
                    solver: Solver::Euler,
                    ..small_config()
                },
                11,
            )
            .unwrap()
        };
        let grid = GridSpec::new(1.0, 1, 10).unwrap();
        let p = bm_path(3, &grid, 2);
        let end = |n| {
            let m = model(n);
            let enc = m.encode(&p, &grid).unwrap();
            m.forward_hidden(&enc.intervals, &enc.x0).unwrap().pop().unwrap()
        };
        let reference = end(256);
        let dev = |n| {
            end(n)
                .iter()
                .zip(&reference)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let ratio = dev(8) / dev(16);
        assert!(ratio > 1.6 && ratio < 2.5, "ratio {ratio}");
    }

    #[test]
    fn zero_readout_gives_bias() {
        let mut model = NrdeModel::new(small_config(), 2).unwrap();
        let r = model.layout().readout_u.clone();
        model.params_mut()[r.clone()].fill(0.0);
        model.params_mut()[r.end - 1] = 0.25;
        let grid = GridSpec::new(1.0, 3, 4).unwrap();
        let pred = model.predict_path(&bm_path(3, &grid, 1), &grid).unwrap();
        assert!(pred.u.iter().all(|u| *u == 0.25));
        assert_eq!(pred.dx.unwrap().len(), 4);
    }

    #[test]
    fn predictions_are_causal() {
        let model = NrdeModel::new(small_config(), 4).unwrap();
        let grid = GridSpec::new(1.0, 5, 4).unwrap();
        let p = bm_path(3, &grid, 3);
        let base = model.predict_path(&p, &grid).unwrap();
        for j in 0..5 {
            let cut = j * grid.refine;
            let mut values = p.values().to_vec();
            for v in values[(cut + 1) * 3..].iter_mut() {
                *v += 0.5;
            }
            let q = PiecewisePath::from_flat(3, p.times().to_vec(), values).unwrap();
            let pred = model.predict_path(&q, &grid).unwrap();
            assert_eq!(pred.u[..=j], base.u[..=j]);
            assert_ne!(pred.u[j + 1], base.u[j + 1]);
        }
    }

    #[test]
    fn prediction_is_reproducible() {
        let grid = GridSpec::new(1.0, 3, 4).unwrap();
        let p = bm_path(3, &grid, 3);
        let a = NrdeModel::new(small_config(), 8)
            .unwrap()
            .predict_path(&p, &grid)
            .unwrap();
        let b = NrdeModel::new(small_config(), 8)
            .unwrap()
            .predict_path(&p, &grid)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_wrong_dimensions() {
        let model = NrdeModel::new(small_config(), 0).unwrap();
        let grid = GridSpec::new(1.0, 3, 4).unwrap();
        assert!(model.encode(&bm_path(2, &grid, 0), &grid).is_err());
        assert!(NrdeModel::from_params(small_config(), vec![0.0; 3], 0).is_err());
    }
}
