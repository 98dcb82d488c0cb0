use ppde_core::logsig::{beta, logsig, path_signature, tensor_log, PiecewisePath, TruncatedTensor};
use proptest::prelude::*;

fn path_strategy() -> impl Strategy<Value = (PiecewisePath, usize)> {
    (1usize..=4, 2usize..=7, 1usize..=4).prop_flat_map(|(dim, len, depth)| {
        prop::collection::vec(-2.0f64..2.0, dim * len).prop_map(move |values| {
            let times = (0..len).map(|i| i as f64).collect();
            (PiecewisePath::from_flat(dim, times, values).unwrap(), depth)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chen_identity((path, depth) in path_strategy(), split in 0.0f64..1.0) {
        prop_assume!(path.len() >= 3);
        let b = 1 + ((path.len() - 2) as f64 * split) as usize;
        let whole = path_signature(&path, depth).unwrap();
        let left = path_signature(&path.slice(0, b).unwrap(), depth).unwrap();
        let right = path_signature(&path.slice(b, path.len() - 1).unwrap(), depth).unwrap();
        prop_assert!(left.mul(&right).unwrap().max_rel_diff(&whole).unwrap() < 1e-12);
    }

    #[test]
    fn exp_inverts_log((path, depth) in path_strategy()) {
        let sig = path_signature(&path, depth).unwrap();
        let back = tensor_log(&sig).unwrap().exp().unwrap();
        prop_assert!(back.max_rel_diff(&sig).unwrap() < 1e-12);
    }

    #[test]
    fn reversal_is_inverse((path, depth) in path_strategy()) {
        let sig = path_signature(&path, depth).unwrap();
        let rev = path_signature(&path.reversed(), depth).unwrap();
        let id = TruncatedTensor::identity(path.dim(), depth);
        prop_assert!(sig.mul(&rev).unwrap().max_rel_diff(&id).unwrap() < 1e-12);
        prop_assert!(sig.inverse().unwrap().max_rel_diff(&rev).unwrap() < 1e-12);
    }

    #[test]
    fn scaling_multiplies_levels((path, depth) in path_strategy(), lambda in -3.0f64..3.0) {
        let sig = path_signature(&path, depth).unwrap();
        let scaled = path
            .map_points(path.dim(), |_, x, out| {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = lambda * v;
                }
            })
            .unwrap();
        let got = path_signature(&scaled, depth).unwrap();
        for k in 1..=depth {
            let factor = lambda.powi(k as i32);
            for (a, b) in got.level(k).iter().zip(sig.level(k)) {
                prop_assert!((a - factor * b).abs() <= 1e-12 * (1.0 + (factor * b).abs()));
            }
        }
    }

    #[test]
    fn collinear_vertex_is_invisible((path, depth) in path_strategy(), seg in 0usize..6, frac in 0.05f64..0.95) {
        let k = seg % (path.len() - 1);
        let dim = path.dim();
        let mut times = Vec::new();
        let mut values = Vec::new();
        for i in 0..path.len() {
            times.push(path.times()[i]);
            values.extend_from_slice(path.point(i));
            if i == k {
                let (a, b) = (path.point(k), path.point(k + 1));
                times.push(path.times()[k] + frac * (path.times()[k + 1] - path.times()[k]));
                values.extend(a.iter().zip(b).map(|(x, y)| x + frac * (y - x)));
            }
        }
        let refined = PiecewisePath::from_flat(dim, times, values).unwrap();
        let a = path_signature(&path, depth).unwrap();
        let b = path_signature(&refined, depth).unwrap();
        prop_assert!(a.max_rel_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn logsig_length_is_beta((path, depth) in path_strategy()) {
        let ls = logsig(&path, depth).unwrap();
        prop_assert_eq!(ls.len() as u64, beta(path.dim(), depth).unwrap());
    }
}

/// Iterated integrals of a smooth curve by nested trapezoid sums on a fine grid.
fn quadrature_signature(f: impl Fn(f64) -> [f64; 2], n: usize) -> Vec<Vec<f64>> {
    let h = 1.0 / n as f64;
    let dx: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let (a, b) = (f(i as f64 * h), f((i + 1) as f64 * h));
            [b[0] - a[0], b[1] - a[1]]
        })
        .collect();
    // s1[i], s2[i][j] hold running integrals up to node i; level 3 accumulates with midpoint weights.
    let mut s1 = [0.0; 2];
    let mut s2 = [[0.0; 2]; 2];
    let mut s3 = [[[0.0; 2]; 2]; 2];
    for d in &dx {
        let mut n1 = s1;
        let mut n2 = s2;
        for i in 0..2 {
            n1[i] += d[i];
        }
        for i in 0..2 {
            for j in 0..2 {
                n2[i][j] += 0.5 * (s1[i] + n1[i]) * d[j];
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    s3[i][j][k] += 0.5 * (s2[i][j] + n2[i][j]) * d[k];
                }
            }
        }
        s1 = n1;
        s2 = n2;
    }
    vec![
        s1.to_vec(),
        s2.iter().flatten().copied().collect(),
        s3.iter().flatten().flatten().copied().collect(),
    ]
}

#[test]
fn quadrature_oracle_smooth_curve() {
    let f = |t: f64| [(2.0 * t).sin(), t * t - 0.5 * t];
    let n = 4000;
    let times: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    let points: Vec<Vec<f64>> = times.iter().map(|t| f(*t).to_vec()).collect();
    let sig = path_signature(&PiecewisePath::new(times, &points).unwrap(), 3).unwrap();
    let oracle = quadrature_signature(f, 20_000);
    for k in 1..=3 {
        for (a, b) in sig.level(k).iter().zip(&oracle[k - 1]) {
            assert!((a - b).abs() < 1e-4, "level {k}: {a} vs {b}");
        }
    }
}
