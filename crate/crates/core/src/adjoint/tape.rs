//! Scalar reverse-mode tape used to differentiate the unrolled forward pass.

const NO_PARENT: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Every node records at most two parents with their local partial derivatives.
#[derive(Debug, Default)]
pub struct Tape {
    vals: Vec<f64>,
    parents: Vec<[(u32, f64); 2]>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    fn push(&mut self, v: f64, parents: [(u32, f64); 2]) -> Var {
        let idx = u32::try_from(self.vals.len()).expect("tape exceeds u32 nodes");
        self.vals.push(v);
        self.parents.push(parents);
        Var(idx)
    }

    /// Input or constant node.
    pub fn leaf(&mut self, v: f64) -> Var {
        self.push(v, [(NO_PARENT, 0.0), (NO_PARENT, 0.0)])
    }

    pub fn leaves(&mut self, vs: &[f64]) -> Vec<Var> {
        vs.iter().map(|&v| self.leaf(v)).collect()
    }

    pub fn val(&self, v: Var) -> f64 {
        self.vals[v.index()]
    }

    pub fn vals(&self, vs: &[Var]) -> Vec<f64> {
        vs.iter().map(|&v| self.val(v)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(self.val(a) + self.val(b), [(a.0, 1.0), (b.0, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(self.val(a) - self.val(b), [(a.0, 1.0), (b.0, -1.0)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.val(a), self.val(b));
        self.push(x * y, [(a.0, y), (b.0, x)])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(self.val(a) * c, [(a.0, c), (NO_PARENT, 0.0)])
    }

    /// a + c·b
    pub fn axpy(&mut self, a: Var, c: f64, b: Var) -> Var {
        self.push(self.val(a) + c * self.val(b), [(a.0, 1.0), (b.0, c)])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.val(a).tanh();
        self.push(y, [(a.0, 1.0 - y * y), (NO_PARENT, 0.0)])
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        match xs.split_first() {
            None => self.leaf(0.0),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &x| self.add(acc, x)),
        }
    }

    pub fn dot(&mut self, xs: &[Var], ys: &[Var]) -> Var {
        let prods: Vec<Var> = xs.iter().zip(ys).map(|(&x, &y)| self.mul(x, y)).collect();
        self.sum(&prods)
    }

    /// Adjoints of every node with respect to `out`.
    pub fn gradient(&self, out: Var) -> Vec<f64> {
        let mut adj = vec![0.0; self.vals.len()];
        adj[out.index()] = 1.0;
        for i in (0..=out.index()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            for &(p, d) in &self.parents[i] {
                if p != NO_PARENT {
                    adj[p as usize] += a * d;
                }
            }
        }
        adj
    }
}
