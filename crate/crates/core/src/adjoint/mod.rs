//! Parameter gradients of linear functionals of the NRDE outputs.
//!
//! [`adjoint_grad`] runs the costate backwards through each fixed-step solver
//! step, recomputing an interval's trajectory from its stored left node, so
//! only the coarse node states and one interval of sub-step states are alive
//! at any time. [`backprop_grad`] differentiates the fully unrolled forward
//! pass on a scalar tape and serves as an independent check.

pub mod tape;

use crate::error::{Error, Result};
use crate::logsig::{map_tensor_grad, TruncatedTensor};
use crate::net::{Activation, MlpShape, ParamVector};
use crate::nrde::{DrivenInterval, EncodedPath, NrdeModel, ParamGroup};
use tape::{Tape, Var};

/// Cotangents of the loss with respect to the model outputs at each coarse node.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputCotangent {
    pub u: Vec<f64>,
    pub dx: Option<Vec<Vec<f64>>>,
}

impl OutputCotangent {
    pub fn zeros(nodes: usize, dx_dim: Option<usize>) -> Self {
        Self {
            u: vec![0.0; nodes],
            dx: dx_dim.map(|d| vec![vec![0.0; d]; nodes]),
        }
    }

    pub fn from_u(u: Vec<f64>) -> Self {
        Self { u, dx: None }
    }
}

/// Bookkeeping of the states held during the backward sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AdjointStats {
    /// Hidden states stored at coarse nodes by the forward pass.
    pub node_states: usize,
    /// Largest number of sub-step states alive at once (one interval's worth).
    pub peak_step_states: usize,
    pub intervals: usize,
}

/// Costate and accumulated gradient while sweeping backwards.
#[derive(Debug, Clone)]
pub struct AdjointState {
    pub lambda: Vec<f64>,
    pub grad: ParamVector,
    pub interval: usize,
}

fn check_cotangent(model: &NrdeModel, nodes: usize, cot: &OutputCotangent) -> Result<()> {
    if cot.u.len() != nodes {
        return Err(Error::GridMismatch(format!(
            "{} output cotangents for {} nodes",
            cot.u.len(),
            nodes
        )));
    }
    if let Some(dx) = &cot.dx {
        let d = model
            .readout_dx_shape()
            .ok_or_else(|| Error::ShapeMismatch("dx cotangent given but model has no dx head".into()))?
            .n_out();
        if dx.len() != nodes || dx.iter().any(|v| v.len() != d) {
            return Err(Error::ShapeMismatch("dx cotangent shape".into()));
        }
    }
    Ok(())
}

impl AdjointState {
    /// λ += (∂ readout/∂z)ᵀ·cotangent at node `j`; readout gradients accumulate.
    fn readout_jump(&mut self, model: &NrdeModel, z: &[f64], cot: &OutputCotangent, j: usize) -> Result<()> {
        let layout = model.layout();
        if cot.u[j] != 0.0 {
            let r = layout.range(ParamGroup::ReadoutU);
            let shape = model.readout_u_shape();
            let acts = shape.trace(model.group(ParamGroup::ReadoutU), z)?;
            let gz = shape.vjp_trace(model.group(ParamGroup::ReadoutU), &acts, &[cot.u[j]], &mut self.grad[r])?;
            add_into(&mut self.lambda, &gz);
        }
        if let (Some(dx), Some(shape)) = (&cot.dx, model.readout_dx_shape()) {
            if dx[j].iter().any(|c| *c != 0.0) {
                let r = layout.range(ParamGroup::ReadoutDx);
                let params = model.group(ParamGroup::ReadoutDx);
                let acts = shape.trace(params, z)?;
                let gz = shape.vjp_trace(params, &acts, &dx[j], &mut self.grad[r])?;
                add_into(&mut self.lambda, &gz);
            }
        }
        Ok(())
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Reverse of one explicit RK step from `z` with output cotangent `lam_out`.
#[allow(clippy::too_many_arguments)]
fn reverse_step(
    model: &NrdeModel,
    z: &[f64],
    h: f64,
    w: &[f64],
    dur: f64,
    lam_out: &[f64],
    grad_field: &mut [f64],
    wbar: &mut [f64],
) -> Result<Vec<f64>> {
    let solver = model.config().solver;
    let field = model.field_shape();
    let fp = model.group(ParamGroup::Field);
    let beta = model.beta();
    let s = solver.stages();
    let mut traces: Vec<Vec<Vec<f64>>> = Vec::with_capacity(s);
    let mut ks: Vec<Vec<f64>> = Vec::with_capacity(s);
    for i in 0..s {
        let mut y = z.to_vec();
        for (l, k) in ks.iter().enumerate() {
            let c = h * solver.a(i, l);
            if c != 0.0 {
                for (yi, ki) in y.iter_mut().zip(k) {
                    *yi += c * ki;
                }
            }
        }
        let acts = field.trace(fp, &y)?;
        ks.push(model.contract(acts.last().unwrap(), w, dur));
        traces.push(acts);
    }
    let n = z.len();
    let mut ybar: Vec<Vec<f64>> = vec![vec![0.0; n]; s];
    let mut lam = lam_out.to_vec();
    let mut outbar = vec![0.0; n * beta];
    for i in (0..s).rev() {
        let mut kbar: Vec<f64> = lam_out.iter().map(|l| h * solver.b(i) * l).collect();
        for (l, yl) in ybar.iter().enumerate().skip(i + 1) {
            let c = h * solver.a(l, i);
            if c != 0.0 {
                for (kb, y) in kbar.iter_mut().zip(yl) {
                    *kb += c * y;
                }
            }
        }
        if kbar.iter().all(|k| *k == 0.0) {
            continue;
        }
        let out = traces[i].last().unwrap();
        for a in 0..n {
            let ka = kbar[a] / dur;
            for b in 0..beta {
                outbar[a * beta + b] = ka * w[b];
                wbar[b] += ka * out[a * beta + b];
            }
        }
        ybar[i] = field.vjp_trace(fp, &traces[i], &outbar, grad_field)?;
        add_into(&mut lam, &ybar[i]);
    }
    Ok(lam)
}

/// Backward sweep over one interval; returns the costate at its left node.
fn reverse_interval(
    model: &NrdeModel,
    z_left: &[f64],
    iv: &DrivenInterval,
    lambda: &[f64],
    grad_field: &mut [f64],
    wbar: &mut [f64],
    stats: &mut AdjointStats,
) -> Result<Vec<f64>> {
    let n = model.config().ode_steps;
    let dur = iv.duration();
    let h = dur / n as f64;
    let solver = model.config().solver;
    let mut states = Vec::with_capacity(n + 1);
    states.push(z_left.to_vec());
    for k in 0..n {
        let next = solver.step(&states[k], h, |y| model.rhs(y, &iv.coeffs, dur))?;
        states.push(next);
    }
    stats.peak_step_states = stats.peak_step_states.max(states.len());
    // The last state is the right node, which is already known; drop it early.
    states.pop();
    let mut lam = lambda.to_vec();
    while let Some(z) = states.pop() {
        lam = reverse_step(model, &z, h, &iv.coeffs, dur, &lam, grad_field, wbar)?;
    }
    Ok(lam)
}

pub fn adjoint_grad(model: &NrdeModel, encoded: &EncodedPath, cot: &OutputCotangent) -> Result<ParamVector> {
    adjoint_grad_with_stats(model, encoded, cot).map(|(g, _)| g)
}

pub fn adjoint_grad_with_stats(
    model: &NrdeModel,
    encoded: &EncodedPath,
    cot: &OutputCotangent,
) -> Result<(ParamVector, AdjointStats)> {
    let nodes = model.forward_hidden(&encoded.intervals, &encoded.x0)?;
    adjoint_from_nodes(model, encoded, &nodes, cot)
}

/// Adjoint sweep given the node states of a forward pass on the same grid.
pub fn adjoint_from_nodes(
    model: &NrdeModel,
    encoded: &EncodedPath,
    nodes: &[Vec<f64>],
    cot: &OutputCotangent,
) -> Result<(ParamVector, AdjointStats)> {
    let n_int = encoded.intervals.len();
    if nodes.len() != n_int + 1 {
        return Err(Error::GridMismatch(format!(
            "{} node states for {} intervals",
            nodes.len(),
            n_int
        )));
    }
    check_cotangent(model, nodes.len(), cot)?;
    let layout = model.layout().clone();
    let h = model.config().hidden;
    let mut st = AdjointState {
        lambda: vec![0.0; h],
        grad: ParamVector::zeros(model.num_params()),
        interval: n_int,
    };
    let mut stats = AdjointStats {
        node_states: nodes.len(),
        peak_step_states: 0,
        intervals: n_int,
    };
    let mut wbars = vec![vec![0.0; model.beta()]; n_int];
    st.readout_jump(model, &nodes[n_int], cot, n_int)?;
    while st.interval > 0 {
        let i = st.interval - 1;
        let (field_grad, wbar) = (&mut st.grad[layout.field.clone()], &mut wbars[i]);
        st.lambda = reverse_interval(
            model,
            &nodes[i],
            &encoded.intervals[i],
            &st.lambda,
            field_grad,
            wbar,
            &mut stats,
        )?;
        st.readout_jump(model, &nodes[i], cot, i)?;
        st.interval = i;
    }

    let e0 = model.embed_point(&encoded.x0, encoded.t0());
    let xi = model.xi_shape();
    let acts = xi.trace(model.group(ParamGroup::Xi), &e0)?;
    let e0bar = xi.vjp_trace(
        model.group(ParamGroup::Xi),
        &acts,
        &st.lambda,
        &mut st.grad[layout.xi.clone()],
    )?;

    if let Some(a) = model.augmented_matrix() {
        if encoded.raw.len() != n_int {
            return Err(Error::GridMismatch("encoded path lacks raw interval tensors".into()));
        }
        let cfg = model.config();
        let (d, d1) = (cfg.input_dim, cfg.path_dim());
        let rows = cfg.feature_dim();
        let cols = d + usize::from(cfg.time_channel);
        let mut abar = vec![0.0; rows * cols];
        for (raw, wbar) in encoded.raw.iter().zip(&wbars) {
            let tbar: TruncatedTensor = model.basis().project_transpose(wbar)?;
            add_into(&mut abar, &map_tensor_grad(raw, &a, rows, &tbar)?);
        }
        let mbar = &mut st.grad[layout.embedding.clone()];
        for r in 0..d1 {
            for c in 0..d {
                mbar[r * d + c] += abar[r * cols + c] + e0bar[r] * encoded.x0[c];
            }
        }
    }
    Ok((st.grad, stats))
}

fn mlp_on_tape(tape: &mut Tape, shape: &MlpShape, params: &[Var], x: &[Var]) -> Vec<Var> {
    let mut input = x.to_vec();
    let mut off = 0;
    let layers = shape.n_layers();
    for (l, w) in shape.sizes.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let act = if l + 1 == layers { shape.output } else { shape.hidden };
        let mut out = Vec::with_capacity(n_out);
        for r in 0..n_out {
            let row = &params[off + r * n_in..off + (r + 1) * n_in];
            let s = tape.dot(row, &input);
            let z = tape.add(s, params[off + n_in * n_out + r]);
            out.push(match act {
                Activation::Tanh => tape.tanh(z),
                Activation::Identity => z,
            });
        }
        off += (n_in + 1) * n_out;
        input = out;
    }
    input
}

/// Truncated tensor on the tape, levels 0..=depth.
type TapeTensor = Vec<Vec<Var>>;

fn tape_tensor_mul(tape: &mut Tape, a: &TapeTensor, b: &TapeTensor, dim: usize) -> TapeTensor {
    let depth = a.len() - 1;
    (0..=depth)
        .map(|k| {
            let size = dim.pow(k as u32);
            (0..size)
                .map(|idx| {
                    let mut terms = Vec::with_capacity(k + 1);
                    for l in 0..=k {
                        let right = dim.pow((k - l) as u32);
                        terms.push(tape.mul(a[l][idx / right], b[k - l][idx % right]));
                    }
                    tape.sum(&terms)
                })
                .collect()
        })
        .collect()
}

fn tape_segment(tape: &mut Tape, inc: &[Var], depth: usize) -> TapeTensor {
    let mut levels = vec![vec![tape.leaf(1.0)]];
    for k in 1..=depth {
        let prev = levels[k - 1].clone();
        let mut level = Vec::with_capacity(prev.len() * inc.len());
        for p in &prev {
            for &x in inc {
                let m = tape.mul(*p, x);
                level.push(tape.scale(m, 1.0 / k as f64));
            }
        }
        levels.push(level);
    }
    levels
}

fn tape_log(tape: &mut Tape, sig: &TapeTensor, dim: usize) -> TapeTensor {
    let depth = sig.len() - 1;
    let zero = tape.leaf(0.0);
    let mut x = sig.clone();
    x[0] = vec![zero];
    let mut result: TapeTensor = x.clone();
    let mut power = x.clone();
    for n in 2..=depth {
        power = tape_tensor_mul(tape, &power, &x, dim);
        let c = if n % 2 == 0 { -1.0 } else { 1.0 } / n as f64;
        for k in 0..=depth {
            for (r, p) in result[k].iter_mut().zip(&power[k]) {
                *r = tape.axpy(*r, c, *p);
            }
        }
    }
    result
}

/// Log-signature coefficients of a sampled path on the tape.
fn tape_logsig(tape: &mut Tape, model: &NrdeModel, points: &[Vec<Var>]) -> Result<Vec<Var>> {
    let dim = model.config().feature_dim();
    let depth = model.config().depth;
    let mut sig: Option<TapeTensor> = None;
    for pair in points.windows(2) {
        let inc: Vec<Var> = pair[1].iter().zip(&pair[0]).map(|(&b, &a)| tape.sub(b, a)).collect();
        let seg = tape_segment(tape, &inc, depth);
        sig = Some(match sig {
            None => seg,
            Some(s) => tape_tensor_mul(tape, &s, &seg, dim),
        });
    }
    let log = tape_log(tape, &sig.expect("interval has ≥ 2 samples"), dim);
    let basis = model.basis();
    let mut coeffs = Vec::with_capacity(basis.len());
    for b in 0..basis.len() {
        let mut unit = vec![0.0; basis.len()];
        unit[b] = 1.0;
        let row = basis.project_transpose(&unit)?;
        let mut terms = Vec::new();
        for (k, log_k) in log.iter().enumerate().take(depth + 1).skip(1) {
            for (idx, &c) in row.level(k).iter().enumerate() {
                if c != 0.0 {
                    terms.push(tape.scale(log_k[idx], c));
                }
            }
        }
        coeffs.push(tape.sum(&terms));
    }
    Ok(coeffs)
}

/// Gradient by reverse-mode differentiation of the unrolled forward pass,
/// including the log-signatures of the embedded path when an embedding is present.
pub fn backprop_grad(model: &NrdeModel, encoded: &EncodedPath, cot: &OutputCotangent) -> Result<ParamVector> {
    let n_int = encoded.intervals.len();
    check_cotangent(model, n_int + 1, cot)?;
    let cfg = model.config().clone();
    let layout = model.layout().clone();
    let mut tape = Tape::new();
    let p = tape.leaves(model.params());
    let d = cfg.input_dim;

    let embed = |tape: &mut Tape, x: &[f64], t: f64| -> Vec<Var> {
        let mut out: Vec<Var> = match cfg.embed_dim {
            Some(d1) => (0..d1)
                .map(|r| {
                    let terms: Vec<Var> = (0..d)
                        .map(|c| tape.scale(p[layout.embedding.start + r * d + c], x[c]))
                        .collect();
                    tape.sum(&terms)
                })
                .collect(),
            None => tape.leaves(x),
        };
        if cfg.time_channel {
            out.push(tape.leaf(t));
        }
        out
    };

    let ws: Vec<Vec<Var>> = if cfg.embed_dim.is_some() {
        let grid = &encoded.grid;
        let path = &encoded.path;
        let mut ws = Vec::with_capacity(n_int);
        for j in 0..n_int {
            let pts: Vec<Vec<Var>> = (j * grid.refine..=(j + 1) * grid.refine)
                .map(|k| embed(&mut tape, path.point(k), path.times()[k]))
                .collect();
            ws.push(tape_logsig(&mut tape, model, &pts)?);
        }
        ws
    } else {
        encoded.intervals.iter().map(|iv| tape.leaves(&iv.coeffs)).collect()
    };

    let e0 = embed(&mut tape, &encoded.x0, encoded.t0());
    let mut z = mlp_on_tape(&mut tape, model.xi_shape(), &p[layout.xi.clone()], &e0);
    let beta = model.beta();
    let solver = cfg.solver;
    let mut outputs: Vec<Var> = Vec::new();

    let mut emit = |tape: &mut Tape, z: &[Var], j: usize| {
        let u = mlp_on_tape(tape, model.readout_u_shape(), &p[layout.readout_u.clone()], z)[0];
        outputs.push(tape.scale(u, cot.u[j]));
        if let (Some(dx), Some(shape)) = (&cot.dx, model.readout_dx_shape()) {
            let v = mlp_on_tape(tape, shape, &p[layout.readout_dx.clone()], z);
            for (vi, ci) in v.iter().zip(&dx[j]) {
                outputs.push(tape.scale(*vi, *ci));
            }
        }
    };

    emit(&mut tape, &z, 0);
    for (i, iv) in encoded.intervals.iter().enumerate() {
        let dur = iv.duration();
        let h = dur / cfg.ode_steps as f64;
        for _ in 0..cfg.ode_steps {
            let mut ks: Vec<Vec<Var>> = Vec::with_capacity(solver.stages());
            for s in 0..solver.stages() {
                let mut y = z.clone();
                for (l, k) in ks.iter().enumerate() {
                    let c = h * solver.a(s, l);
                    if c != 0.0 {
                        for (yi, ki) in y.iter_mut().zip(k) {
                            *yi = tape.axpy(*yi, c, *ki);
                        }
                    }
                }
                let g = mlp_on_tape(&mut tape, model.field_shape(), &p[layout.field.clone()], &y);
                let k: Vec<Var> = g
                    .chunks_exact(beta)
                    .map(|row| {
                        let s = tape.dot(row, &ws[i]);
                        tape.scale(s, 1.0 / dur)
                    })
                    .collect();
                ks.push(k);
            }
            for (s, k) in ks.iter().enumerate() {
                let c = h * solver.b(s);
                if c != 0.0 {
                    for (zi, ki) in z.iter_mut().zip(k) {
                        *zi = tape.axpy(*zi, c, *ki);
                    }
                }
            }
        }
        if tape.vals(&z).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteHidden { interval: i });
        }
        emit(&mut tape, &z, i + 1);
    }
    let loss = tape.sum(&outputs);
    let adj = tape.gradient(loss);
    Ok(ParamVector(adj[..model.num_params()].to_vec()))
}

/// ⟨cot, outputs⟩ for a fine path, re-encoding under the model's current embedding.
pub fn output_functional(model: &NrdeModel, encoded: &EncodedPath, cot: &OutputCotangent) -> Result<f64> {
    let enc = model.encode(&encoded.path, &encoded.grid)?;
    let pred = model.predict(&enc)?;
    let mut total: f64 = pred.u.iter().zip(&cot.u).map(|(a, b)| a * b).sum();
    if let (Some(dx), Some(c)) = (&pred.dx, &cot.dx) {
        for (v, w) in dx.iter().zip(c) {
            total += v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(total)
}

/// Central finite differences of [`output_functional`] in every parameter.
pub fn finite_difference_grad(
    model: &NrdeModel,
    encoded: &EncodedPath,
    cot: &OutputCotangent,
    step: f64,
) -> Result<Vec<f64>> {
    let mut m = model.clone();
    let base = model.params().to_vec();
    let mut grad = Vec::with_capacity(base.len());
    for (i, &b) in base.iter().enumerate() {
        m.params_mut()[i] = b + step;
        let fp = output_functional(&m, encoded, cot)?;
        m.params_mut()[i] = b - step;
        let fm = output_functional(&m, encoded, cot)?;
        m.params_mut()[i] = b;
        grad.push((fp - fm) / (2.0 * step));
    }
    Ok(grad)
}
