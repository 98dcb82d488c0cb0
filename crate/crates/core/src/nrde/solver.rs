use serde::{Deserialize, Serialize};

/// Fixed-step explicit Runge–Kutta schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Euler,
    Midpoint,
    Rk4,
}

impl Solver {
    pub const ALL: [Solver; 3] = [Solver::Euler, Solver::Midpoint, Solver::Rk4];

    pub fn stages(self) -> usize {
        match self {
            Self::Euler => 1,
            Self::Midpoint => 2,
            Self::Rk4 => 4,
        }
    }

    /// Strictly lower-triangular stage coefficient a[i][l], l < i.
    pub fn a(self, i: usize, l: usize) -> f64 {
        match (self, i, l) {
            (Self::Midpoint, 1, 0) => 0.5,
            (Self::Rk4, 1, 0) | (Self::Rk4, 2, 1) => 0.5,
            (Self::Rk4, 3, 2) => 1.0,
            _ => 0.0,
        }
    }

    pub fn b(self, i: usize) -> f64 {
        match (self, i) {
            (Self::Euler, 0) => 1.0,
            (Self::Midpoint, 1) => 1.0,
            (Self::Rk4, 0) | (Self::Rk4, 3) => 1.0 / 6.0,
            (Self::Rk4, 1) | (Self::Rk4, 2) => 1.0 / 3.0,
            _ => 0.0,
        }
    }

    pub fn order(self) -> u32 {
        match self {
            Self::Euler => 1,
            Self::Midpoint => 2,
            Self::Rk4 => 4,
        }
    }

    /// One step z ← z + h Σ b_i k_i of the autonomous system z' = f(z).
    pub fn step<E>(self, z: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<Vec<f64>, E>) -> Result<Vec<f64>, E> {
        let s = self.stages();
        let mut ks: Vec<Vec<f64>> = Vec::with_capacity(s);
        for i in 0..s {
            let mut y = z.to_vec();
            for (l, k) in ks.iter().enumerate() {
                let c = h * self.a(i, l);
                if c != 0.0 {
                    for (yi, ki) in y.iter_mut().zip(k) {
                        *yi += c * ki;
                    }
                }
            }
            ks.push(f(&y)?);
        }
        let mut out = z.to_vec();
        for (i, k) in ks.iter().enumerate() {
            let c = h * self.b(i);
            if c != 0.0 {
                for (o, ki) in out.iter_mut().zip(k) {
                    *o += c * ki;
                }
            }
        }
        Ok(out)
    }
}

impl std::str::FromStr for Solver {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Self::Euler),
            "midpoint" => Ok(Self::Midpoint),
            "rk4" => Ok(Self::Rk4),
            other => Err(format!("unknown solver `{other}` (euler, midpoint, rk4)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn integrate(solver: Solver, n: usize) -> f64 {
        let mut z = vec![1.0];
        for _ in 0..n {
            z = solver.step(&z, 1.0 / n as f64, |y| Ok::<_, ()>(vec![-y[0]])).unwrap();
        }
        z[0]
    }

    #[test]
    fn tableaus_are_consistent() {
        for s in Solver::ALL {
            let total: f64 = (0..s.stages()).map(|i| s.b(i)).sum();
            assert!((total - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn convergence_orders() {
        let exact = (-1.0f64).exp();
        for s in Solver::ALL {
            let e1 = (integrate(s, 8) - exact).abs();
            let e2 = (integrate(s, 16) - exact).abs();
            let observed = (e1 / e2).log2();
            assert!((observed - s.order() as f64).abs() < 0.3, "{s:?}: {observed}");
        }
    }
}
