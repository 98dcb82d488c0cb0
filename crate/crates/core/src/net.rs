//! Feed-forward networks over flat parameter slices, their vector-Jacobian
//! products, and the Adagrad optimizer.

use std::ops::{Deref, DerefMut};
use std::path::Path;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Tanh => x.tanh(),
            Self::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Self::Tanh => 1.0 - y * y,
            Self::Identity => 1.0,
        }
    }
}

/// Layer sizes and activations. Parameters live in a separate flat slice laid
/// out per layer as the row-major weight matrix (out × in) followed by the bias.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub sizes: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpShape {
    pub fn new(sizes: Vec<usize>, hidden: Activation, output: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "network needs ≥ 2 positive layer sizes, got {sizes:?}"
            )));
        }
        Ok(Self { sizes, hidden, output })
    }

    /// Single affine layer with no nonlinearity.
    pub fn linear(n_in: usize, n_out: usize) -> Result<Self> {
        Self::new(vec![n_in, n_out], Activation::Identity, Activation::Identity)
    }

    pub fn n_in(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_out(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.n_layers() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Weights uniform in ±√(1/n_in) per layer, zero biases.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for w in self.sizes.windows(2) {
            let bound = (1.0 / w[0] as f64).sqrt();
            p.extend((0..w[0] * w[1]).map(|_| rng.random_range(-bound..=bound)));
            p.extend(std::iter::repeat_n(0.0, w[1]));
        }
        p
    }

    fn check(&self, params: &[f64], x: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "network has {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        if x.len() != self.n_in() {
            return Err(Error::ShapeMismatch(format!(
                "network input has {} entries, got {}",
                self.n_in(),
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }

    /// Outputs of every layer, starting with the input itself.
    pub fn trace(&self, params: &[f64], x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check(params, x)?;
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(x.to_vec());
        let mut off = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &params[off..off + n_in * n_out];
            let bias = &params[off + n_in * n_out..off + (n_in + 1) * n_out];
            off += (n_in + 1) * n_out;
            let act = self.activation(l);
            let input = acts.last().unwrap();
            let out: Vec<f64> = (0..n_out)
                .map(|r| {
                    let row = &weights[r * n_in..(r + 1) * n_in];
                    let z: f64 = row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + bias[r];
                    act.apply(z)
                })
                .collect();
            acts.push(out);
        }
        Ok(acts)
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(params, x)?.pop().unwrap())
    }

    /// Reverse pass through a recorded trace. Parameter gradients are added
    /// into `grad_params`; the input gradient is returned.
    pub fn vjp_trace(
        &self,
        params: &[f64],
        acts: &[Vec<f64>],
        cot: &[f64],
        grad_params: &mut [f64],
    ) -> Result<Vec<f64>> {
        if cot.len() != self.n_out() || grad_params.len() != self.num_params() {
            return Err(Error::ShapeMismatch("cotangent or gradient buffer size".into()));
        }
        let mut offsets = Vec::with_capacity(self.n_layers());
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += (w[0] + 1) * w[1];
        }
        let mut g = cot.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let act = self.activation(l);
            let out = &acts[l + 1];
            let input = &acts[l];
            for (gi, y) in g.iter_mut().zip(out) {
                *gi *= act.grad_from_output(*y);
            }
            let off = offsets[l];
            let weights = &params[off..off + n_in * n_out];
            let (gw, gb) = grad_params[off..off + (n_in + 1) * n_out].split_at_mut(n_in * n_out);
            let mut gx = vec![0.0; n_in];
            for r in 0..n_out {
                let gr = g[r];
                if gr == 0.0 {
                    continue;
                }
                gb[r] += gr;
                let row = &weights[r * n_in..(r + 1) * n_in];
                let grow = &mut gw[r * n_in..(r + 1) * n_in];
                for c in 0..n_in {
                    grow[c] += gr * input[c];
                    gx[c] += gr * row[c];
                }
            }
            g = gx;
        }
        Ok(g)
    }

    /// Gradients of ⟨cot, forward(x)⟩ with respect to the input and the parameters.
    pub fn vjp(&self, params: &[f64], x: &[f64], cot: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let acts = self.trace(params, x)?;
        let mut gp = vec![0.0; self.num_params()];
        let gx = self.vjp_trace(params, &acts, cot, &mut gp)?;
        Ok((gx, gp))
    }
}

/// A network shape together with its own parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub shape: MlpShape,
    pub params: ParamVector,
}

impl Mlp {
    pub fn new<R: Rng>(shape: MlpShape, rng: &mut R) -> Self {
        let params = ParamVector(shape.init(rng));
        Self { shape, params }
    }

    pub fn from_params(shape: MlpShape, params: Vec<f64>) -> Result<Self> {
        if params.len() != shape.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "network has {} parameters, got {}",
                shape.num_params(),
                params.len()
            )));
        }
        Ok(Self {
            shape,
            params: ParamVector(params),
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.shape.forward(&self.params, x)
    }

    pub fn vjp(&self, x: &[f64], cot: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.shape.vjp(&self.params, x, cot)
    }
}

/// Flat vector of all trainable parameters of a model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn add_assign(&mut self, other: &[f64]) {
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

impl Deref for ParamVector {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adagrad {
    pub lr: f64,
    pub eps: f64,
    pub acc: Vec<f64>,
}

impl Adagrad {
    pub fn new(n: usize, lr: f64, eps: f64) -> Self {
        Self {
            lr,
            eps,
            acc: vec![0.0; n],
        }
    }

    pub fn with_defaults(n: usize) -> Self {
        Self::new(n, 0.1, 1e-10)
    }

    /// acc += g²; p −= lr·g/(√acc + ε).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.acc.len() || grads.len() != self.acc.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.acc.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), a) in params.iter_mut().zip(grads).zip(self.acc.iter_mut()) {
            *a += g * g;
            *p -= self.lr * g / (a.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON checkpoint: model configuration, flat parameters and the
/// seed used for initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<C> {
    pub version: u32,
    pub config: C,
    pub seed: u64,
    pub params: ParamVector,
}

impl<C: Serialize + DeserializeOwned> Checkpoint<C> {
    pub fn new(config: C, seed: u64, params: ParamVector) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config,
            seed,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", ck.version)));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn tanh_net(sizes: Vec<usize>, seed: u64) -> (MlpShape, Vec<f64>) {
        let shape = MlpShape::new(sizes, Activation::Tanh, Activation::Identity).unwrap();
        let mut p = shape.init(&mut stream_rng(seed, 0));
        let mut rng = stream_rng(seed, 1);
        for v in p.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        (shape, p)
    }

    #[test]
    fn zero_params_give_zero_output() {
        let shape = MlpShape::new(vec![3, 5, 2], Activation::Tanh, Activation::Identity).unwrap();
        let out = shape
            .forward(&vec![0.0; shape.num_params()], &[1.0, -2.0, 0.5])
            .unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn linear_layer_is_affine() {
        let shape = MlpShape::linear(2, 2).unwrap();
        let p = [1.0, 2.0, 3.0, 4.0, 0.5, -0.5];
        assert_eq!(shape.forward(&p, &[1.0, 1.0]).unwrap(), vec![3.5, 6.5]);
        let (gx, _) = shape.vjp(&p, &[1.0, 1.0], &[1.0, -1.0]).unwrap();
        assert_eq!(gx, vec![-2.0, -2.0]);
    }

    #[test]
    fn matches_independent_forward() {
        let (shape, p) = tanh_net(vec![3, 4, 2], 5);
        let x = [0.2, -0.7, 1.1];
        let w1 = &p[0..12];
        let b1 = &p[12..16];
        let w2 = &p[16..24];
        let b2 = &p[24..26];
        let mut h = [0.0; 4];
        for i in 0..4 {
            let mut s = b1[i];
            for j in 0..3 {
                s += w1[i * 3 + j] * x[j];
            }
            h[i] = s.tanh();
        }
        let out = shape.forward(&p, &x).unwrap();
        for i in 0..2 {
            let mut s = b2[i];
            for j in 0..4 {
                s += w2[i * 4 + j] * h[j];
            }
            assert!((out[i] - s).abs() < 1e-15);
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        for (k, sizes) in [vec![2, 3], vec![3, 8, 4], vec![4, 45, 45, 3]].into_iter().enumerate() {
            let (mut shape, p) = tanh_net(sizes, k as u64);
            shape.output = Activation::Tanh;
            let x: Vec<f64> = (0..shape.n_in()).map(|i| (i as f64 * 0.7).sin()).collect();
            let cot: Vec<f64> = (0..shape.n_out()).map(|i| (i as f64 * 1.3).cos()).collect();
            let f = |p: &[f64], x: &[f64]| -> f64 {
                shape.forward(p, x).unwrap().iter().zip(&cot).map(|(a, b)| a * b).sum()
            };
            let (gx, gp) = shape.vjp(&p, &x, &cot).unwrap();
            let h = 1e-5;
            for i in 0..p.len() {
                let (mut pp, mut pm) = (p.clone(), p.clone());
                pp[i] += h;
                pm[i] -= h;
                let fd = (f(&pp, &x) - f(&pm, &x)) / (2.0 * h);
                assert!(
                    (fd - gp[i]).abs() <= 1e-6 * fd.abs().max(1e-3),
                    "param {i}: {fd} vs {}",
                    gp[i]
                );
            }
            for i in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                let fd = (f(&p, &xp) - f(&p, &xm)) / (2.0 * h);
                assert!((fd - gx[i]).abs() <= 1e-6 * fd.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let (shape, p) = tanh_net(vec![3, 6, 2], 2);
        let (gx, gp) = shape.vjp(&p, &[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(gx.iter().chain(&gp).all(|g| *g == 0.0));
    }

    #[test]
    fn forward_errors() {
        let shape = MlpShape::linear(2, 1).unwrap();
        let p = vec![0.0; 3];
        assert!(matches!(
            shape.forward(&p, &[f64::NAN, 0.0]),
            Err(Error::NonFiniteInput)
        ));
        assert!(matches!(shape.forward(&p, &[0.0]), Err(Error::ShapeMismatch(_))));
        assert!(shape.vjp(&p, &[0.0, 0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let shape = MlpShape::new(vec![4, 9, 3], Activation::Tanh, Activation::Identity).unwrap();
        let a = shape.init(&mut stream_rng(3, 0));
        let b = shape.init(&mut stream_rng(3, 0));
        assert_eq!(a, b);
        assert_eq!(a.len(), 5 * 9 + 10 * 3);
        assert!(a[..36].iter().all(|w| w.abs() <= 0.5));
        assert!(a[36..45].iter().all(|w| *w == 0.0));
        assert!(a[72..].iter().all(|w| *w == 0.0));
    }

    #[test]
    fn adagrad_steps() {
        let mut opt = Adagrad::with_defaults(2);
        let mut p = vec![1.0, 1.0];
        opt.step(&mut p, &[1.0, 0.0]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-9);
        assert_eq!(p[1], 1.0);
        let before = p[0];
        opt.step(&mut p, &[1.0, 0.0]).unwrap();
        assert!((before - p[0]) < 0.1 && before > p[0]);
        assert!(opt.step(&mut p, &[1.0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let ck = Checkpoint::new(vec![1usize, 2], 7, ParamVector(vec![0.25, -1.5]));
        let path = std::env::temp_dir().join(format!("ck-{}.json", std::process::id()));
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::<Vec<usize>>::load(&path).unwrap(), ck);
        std::fs::remove_file(path).unwrap();
    }
}
