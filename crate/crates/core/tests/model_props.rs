use ppde_core::adjoint::{adjoint_grad, OutputCotangent};
use ppde_core::logsig::beta;
use ppde_core::net::{Activation, MlpShape};
use ppde_core::nrde::{NrdeConfig, NrdeModel, ParamGroup, Solver};
use ppde_core::problems::ProblemSpec;
use ppde_core::rng::stream_rng;
use ppde_core::sde::{simulate_path, GridSpec};
use ppde_core::train::{error_metrics, evaluate, loss_method1, EvalConfig, OraclePredictor};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn mlp_vjp_matches_finite_differences(
        sizes in prop::collection::vec(1usize..=45, 2..=4),
        seed in 0u64..1000,
    ) {
        let shape = MlpShape::new(sizes.clone(), Activation::Tanh, Activation::Identity).unwrap();
        let mut rng = stream_rng(seed, 0);
        let params = shape.init(&mut rng);
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cot: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (gx, gp) = shape.vjp(&params, &x, &cot).unwrap();
        let f = |p: &[f64], x: &[f64]| -> f64 {
            shape.forward(p, x).unwrap().iter().zip(&cot).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-4);
        for i in (0..params.len()).step_by(1 + params.len() / 40) {
            let (mut up, mut dn) = (params.clone(), params.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (f(&up, &x) - f(&dn, &x)) / (2.0 * h);
            prop_assert!(rel(fd, gp[i]) < 1e-6, "param {}: {} vs {}", i, fd, gp[i]);
        }
        for i in 0..x.len() {
            let (mut up, mut dn) = (x.clone(), x.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (f(&params, &up) - f(&params, &dn)) / (2.0 * h);
            prop_assert!(rel(fd, gx[i]) < 1e-6);
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded(sizes in prop::collection::vec(1usize..=30, 2..=4), seed in 0u64..1000) {
        let shape = MlpShape::new(sizes.clone(), Activation::Tanh, Activation::Tanh).unwrap();
        let a = shape.init(&mut stream_rng(seed, 0));
        prop_assert_eq!(&a, &shape.init(&mut stream_rng(seed, 0)));
        let mut offset = 0;
        for w in sizes.windows(2) {
            let bound = (1.0 / w[0] as f64).sqrt();
            let n_w = w[0] * w[1];
            prop_assert!(a[offset..offset + n_w].iter().all(|v| v.abs() <= bound));
            prop_assert!(a[offset + n_w..offset + n_w + w[1]].iter().all(|v| *v == 0.0));
            offset += n_w + w[1];
        }
    }

    #[test]
    fn feature_dimensions_follow_beta(
        d in 1usize..=4,
        embed in prop::option::of(1usize..=3),
        time in any::<bool>(),
        depth in 1usize..=3,
        h in 1usize..=8,
    ) {
        let cfg = NrdeConfig { input_dim: d, embed_dim: embed, time_channel: time, hidden: h, depth, ..NrdeConfig::default() };
        let model = NrdeModel::new(cfg, 0).unwrap();
        let d_in = embed.unwrap_or(d) + usize::from(time);
        let b = beta(d_in, depth).unwrap() as usize;
        prop_assert_eq!(model.beta(), b);
        prop_assert_eq!(model.field_shape().n_in(), h);
        prop_assert_eq!(model.field_shape().n_out(), h * b);
        prop_assert_eq!(model.xi_shape().n_in(), d_in);
    }

    #[test]
    fn rel_err_is_scale_invariant(seed in 0u64..1000, c in 0.01f64..100.0) {
        let mut rng = stream_rng(seed, 0);
        let u: Vec<Vec<f64>> = (0..5).map(|_| (0..11).map(|_| rng.random_range(0.1..2.0)).collect()).collect();
        let uh: Vec<Vec<f64>> = (0..5).map(|_| (0..11).map(|_| rng.random_range(0.1..2.0)).collect()).collect();
        let scale = |m: &[Vec<f64>]| m.iter().map(|r| r.iter().map(|x| c * x).collect()).collect::<Vec<Vec<f64>>>();
        let (_, r1) = error_metrics(&u, &uh, 0.1).unwrap();
        let (_, r2) = error_metrics(&scale(&u), &scale(&uh), 0.1).unwrap();
        prop_assert!((r1 - r2).abs() <= 1e-12 * r1.max(1.0));
        prop_assert!(r1 >= 0.0);
    }
}

#[test]
fn predictions_are_causal() {
    let problem = ProblemSpec::heat(2).unwrap();
    let grid = problem.grid;
    let cfg = NrdeConfig {
        input_dim: 2,
        embed_dim: Some(2),
        time_channel: true,
        hidden: 5,
        ..NrdeConfig::default()
    };
    // Random parameters: at initialization z = 0 is a fixed point when X(0) = 0.
    let n = NrdeModel::new(cfg.clone(), 4).unwrap().num_params();
    let mut rng = stream_rng(4, 1);
    let params = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let model = NrdeModel::from_params(cfg, params, 4).unwrap();
    let path = simulate_path(&problem.dynamics, &problem.init, &grid, 2, 0).unwrap();
    let base = model.predict_path(&path, &grid).unwrap().u;
    for j in 0..grid.coarse_steps {
        let cut = j * grid.refine;
        let values: Vec<f64> = path
            .values()
            .iter()
            .enumerate()
            .map(|(k, v)| if k / 2 > cut { v + 0.7 } else { *v })
            .collect();
        let moved = ppde_core::logsig::PiecewisePath::from_flat(2, path.times().to_vec(), values).unwrap();
        let u = model.predict_path(&moved, &grid).unwrap().u;
        assert_eq!(&u[..=j], &base[..=j], "node {j}");
        assert_ne!(u[j + 1], base[j + 1]);
    }
}

#[test]
fn method1_gradient_through_pipeline_matches_finite_differences() {
    let grid = GridSpec::new(0.3, 3, 5).unwrap();
    let problem = {
        let mut p = ProblemSpec::heat(2).unwrap();
        p.grid = grid;
        p
    };
    let cfg = NrdeConfig {
        input_dim: 2,
        time_channel: true,
        hidden: 4,
        field_width: 6,
        field_layers: 1,
        solver: Solver::Midpoint,
        ..NrdeConfig::default()
    };
    let n = NrdeModel::new(cfg.clone(), 11).unwrap().num_params();
    let mut rng = stream_rng(11, 1);
    let model = NrdeModel::from_params(cfg.clone(), (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), 11).unwrap();
    let paths: Vec<_> = (0..3)
        .map(|i| simulate_path(&problem.dynamics, &problem.init, &grid, 5, i).unwrap())
        .collect();
    let targets: Vec<Vec<f64>> = paths.iter().map(|p| problem.targets(p).unwrap()).collect();
    let loss_of = |m: &NrdeModel| {
        let u: Vec<Vec<f64>> = paths.iter().map(|p| m.predict_path(p, &grid).unwrap().u).collect();
        loss_method1(&u, &targets).unwrap()
    };
    let (_, cots) = loss_of(&model);
    let mut grad = vec![0.0; model.num_params()];
    for (p, c) in paths.iter().zip(cots) {
        let enc = model.encode(p, &grid).unwrap();
        let g = adjoint_grad(&model, &enc, &OutputCotangent::from_u(c)).unwrap();
        for (a, b) in grad.iter_mut().zip(g.iter()) {
            *a += b;
        }
    }
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..model.num_params() {
        let mut up = model.params().to_vec();
        up[i] += h;
        let mut dn = model.params().to_vec();
        dn[i] -= h;
        let lp = loss_of(&NrdeModel::from_params(cfg.clone(), up, 11).unwrap()).0;
        let lm = loss_of(&NrdeModel::from_params(cfg.clone(), dn, 11).unwrap()).0;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6));
    }
    assert!(grad.iter().filter(|g| g.abs() > 1e-8).count() > n / 2);
    assert!(worst < 1e-4, "worst relative error {worst}");
    assert!(model.layout().range(ParamGroup::ReadoutU).len() == 5);
}

#[test]
fn oracle_predictor_error_is_within_monte_carlo_noise() {
    let problem = ProblemSpec::black_scholes_lookback(2, 0.3).unwrap();
    let oracle = OraclePredictor {
        problem: &problem,
        n_sims: 400,
        seed: 99,
    };
    let cfg = EvalConfig {
        n_test: 4,
        n_batches: 2,
        n_sims: 400,
        seed: 5,
    };
    let report = evaluate(&oracle, &problem, &cfg, None).unwrap();
    assert!(report.oracle_std_err > 0.0);
    assert!(
        report.abs_err.mean <= 3.0 * report.oracle_std_err,
        "{} vs {}",
        report.abs_err.mean,
        report.oracle_std_err
    );
}
