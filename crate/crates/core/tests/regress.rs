mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use urbanvit::regress::gbt::mean_huber;
use urbanvit::regress::linear::{elasticnet_kkt_violation, elasticnet_objective};
use urbanvit::regress::{
    fit_elasticnet, fit_gbt, fit_ols, fit_svr, GammaMode, GbtParams, Preprocessor,
};

#[test]
fn orthogonal_columns_get_univariate_slopes() {
    // Centered, mutually orthogonal columns.
    let a = [1.0, -1.0, 1.0, -1.0, 2.0, -2.0];
    let b = [1.0, 1.0, -1.0, -1.0, 0.0, 0.0];
    let x: Vec<Vec<f64>> = a.iter().zip(&b).map(|(p, q)| vec![*p, *q]).collect();
    let y = [3.0, 0.5, 1.0, -2.0, 4.0, 0.1];
    let m = fit_ols(&x, &y).unwrap();
    let ybar = y.iter().sum::<f64>() / 6.0;
    for (j, col) in [a, b].iter().enumerate() {
        let cov: f64 = col.iter().zip(&y).map(|(c, t)| c * (t - ybar)).sum();
        let var: f64 = col.iter().map(|c| c * c).sum();
        assert!((m.weights[j] - cov / var).abs() < 1e-12);
    }
}

#[test]
fn ols_residuals_are_orthogonal() {
    let (x, y) = regression_problem(1, 60, 5);
    let m = fit_ols(&x, &y).unwrap();
    let res: Vec<f64> = x
        .iter()
        .zip(&y)
        .map(|(r, t)| t - m.predict_row(r))
        .collect();
    let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    for j in 0..5 {
        let xnorm = x.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt();
        let dot: f64 = x.iter().zip(&res).map(|(r, e)| r[j] * e).sum();
        assert!(dot.abs() < 1e-8 * ynorm * xnorm);
    }
    assert!(res.iter().sum::<f64>().abs() < 1e-8 * ynorm);
}

#[test]
fn square_system_is_rejected() {
    let (x, y) = regression_problem(2, 4, 3);
    assert!(fit_ols(&x[..3], &y[..3]).is_err());
}

#[test]
fn elasticnet_solution_beats_random_perturbations() {
    let (x, y) = regression_problem(3, 5, 3);
    let fit = fit_elasticnet(&x, &y, 0.01, 0.1).unwrap();
    let best = elasticnet_objective(&x, &y, &fit.model, 0.01, 0.1);
    let mut r = rng(33);
    for _ in 0..1_000_000 {
        let mut m = fit.model.clone();
        let mut d: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = r.random_range(0.0..0.1) / norm;
        d.iter_mut().for_each(|v| *v *= scale);
        m.intercept += d[0];
        m.weights.iter_mut().zip(&d[1..]).for_each(|(w, v)| *w += v);
        assert!(best <= elasticnet_objective(&x, &y, &m, 0.01, 0.1) + 1e-12);
    }
}

#[test]
fn elasticnet_without_penalty_is_ols() {
    let (x, y) = regression_problem(4, 80, 6);
    let en = fit_elasticnet(&x, &y, 0.0, 0.1).unwrap().model;
    let ols = fit_ols(&x, &y).unwrap();
    assert!((en.intercept - ols.intercept).abs() < 1e-6);
    assert!(en
        .weights
        .iter()
        .zip(&ols.weights)
        .all(|(a, b)| (a - b).abs() < 1e-6));
}

#[test]
fn elasticnet_kkt_on_random_problems() {
    for seed in 0..20 {
        let (x, y) = regression_problem(100 + seed, 40, 8);
        let fit = fit_elasticnet(&x, &y, 0.05, 0.5).unwrap();
        assert!(fit.converged);
        assert!(elasticnet_kkt_violation(&x, &y, &fit.model, 0.05, 0.5) < 1e-6);
    }
}

#[test]
fn svr_interpolates_sine_within_tube() {
    let (x, y) = sin_fixture();
    let fit = fit_svr(&x, &y, SIN_FIXTURE_C, 1e-4, GammaMode::Scale).unwrap();
    assert!(fit.converged);
    for (r, t) in x.iter().zip(&y) {
        assert!((fit.model.predict_row(r) - t).abs() <= 1e-4 + 1e-3);
    }
    let n = x.len();
    assert!(fit
        .alpha
        .iter()
        .all(|&a| (0.0..=SIN_FIXTURE_C).contains(&a)));
    let balance: f64 = (0..n).map(|i| fit.alpha[i] - fit.alpha[n + i]).sum();
    assert!(balance.abs() < 1e-8);
}

#[test]
fn svr_duplicated_rows_give_same_predictions() {
    let (x, y) = sin_fixture();
    let once = fit_svr(&x, &y, SIN_FIXTURE_C, 1e-4, GammaMode::Scale)
        .unwrap()
        .model;
    let x2: Vec<Vec<f64>> = x.iter().chain(&x).cloned().collect();
    let y2: Vec<f64> = y.iter().chain(&y).copied().collect();
    let twice = fit_svr(&x2, &y2, SIN_FIXTURE_C, 1e-4, GammaMode::Scale)
        .unwrap()
        .model;
    for i in 0..200 {
        let q = [2.0 * std::f64::consts::PI * i as f64 / 199.0];
        assert!((once.predict_row(&q) - twice.predict_row(&q)).abs() < 1e-6);
    }
}

#[test]
fn svr_at_default_cost_respects_the_box() {
    let (x, y) = sin_fixture();
    let fit = fit_svr(&x, &y, 1.0, 1e-4, GammaMode::Scale).unwrap();
    let n = x.len();
    assert!(fit.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
    assert!(
        (0..n)
            .map(|i| fit.alpha[i] - fit.alpha[n + i])
            .sum::<f64>()
            .abs()
            < 1e-8
    );
    // Rows whose duals are strictly inside the box sit on the tube edge.
    for i in 0..n {
        let (a, b) = (fit.alpha[i], fit.alpha[n + i]);
        let free = (a > 1e-9 && a < 1.0 - 1e-9) || (b > 1e-9 && b < 1.0 - 1e-9);
        if free {
            assert!((fit.model.predict_row(&x[i]) - y[i]).abs() <= 1e-4 + 1e-3);
        }
    }
}

fn step_data() -> (Vec<Vec<f64>>, Vec<f64>) {
    let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
    let y = (0..40).map(|i| if i < 20 { 0.0 } else { 1.0 }).collect();
    (x, y)
}

#[test]
fn step_function_residual_decays_geometrically() {
    let (x, y) = step_data();
    let fit = fit_gbt(&x, &y, &GbtParams::default()).unwrap();
    // Median start 0.5; every round removes a fraction lr of each residual.
    for (t, round) in fit.rounds.iter().enumerate() {
        let r = 0.5 * 0.99f64.powi(t as i32 + 1);
        assert!((round.after - 0.5 * r * r).abs() < 1e-12, "round {t}");
    }
    let res: Vec<f64> = x
        .iter()
        .zip(&y)
        .map(|(r, t)| t - fit.model.predict_row(r))
        .collect();
    let delta = res.iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(mean_huber(&res, delta) < 1e-3);
}

#[test]
fn depth_three_fits_xor_better_than_stumps() {
    let mut r = rng(7);
    let x: Vec<Vec<f64>> = (0..200)
        .map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
        .collect();
    let y: Vec<f64> = x
        .iter()
        .map(|p| {
            if (p[0] > 0.0) == (p[1] > 0.0) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let loss = |depth| {
        let fit = fit_gbt(
            &x,
            &y,
            &GbtParams {
                max_depth: depth,
                fixed_delta: true,
                ..Default::default()
            },
        )
        .unwrap();
        fit.rounds.last().unwrap().after
    };
    assert!(loss(3) < loss(1));
}

#[test]
fn gbt_prediction_is_the_stage_sum() {
    let (x, y) = regression_problem(8, 50, 3);
    let fit = fit_gbt(&x, &y, &GbtParams::default()).unwrap();
    let m = &fit.model;
    assert_eq!(m.trees.len(), 350);
    for row in &x {
        let manual = m.init
            + m.trees
                .iter()
                .map(|t| m.learning_rate * t.predict_row(row))
                .sum::<f64>();
        assert!((manual - m.predict_row(row)).abs() < 1e-12);
    }
}

#[test]
fn gbt_loss_never_increases() {
    let (x, y) = regression_problem(9, 80, 4);
    let fit = fit_gbt(&x, &y, &GbtParams::default()).unwrap();
    assert!(fit.rounds.iter().all(|r| r.after <= r.before + 1e-15));
    let fixed = fit_gbt(
        &x,
        &y,
        &GbtParams {
            fixed_delta: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(fixed
        .rounds
        .windows(2)
        .all(|w| w[1].after <= w[0].after + 1e-15));
}

#[test]
fn fits_are_deterministic() {
    let (x, y) = regression_problem(10, 40, 4);
    assert_eq!(fit_ols(&x, &y).unwrap(), fit_ols(&x, &y).unwrap());
    assert_eq!(
        fit_elasticnet(&x, &y, 0.01, 0.1).unwrap().model,
        fit_elasticnet(&x, &y, 0.01, 0.1).unwrap().model
    );
    assert_eq!(
        fit_gbt(&x, &y, &GbtParams::default()).unwrap().model,
        fit_gbt(&x, &y, &GbtParams::default()).unwrap().model
    );
    assert_eq!(
        fit_svr(&x, &y, 1.0, 1e-4, GammaMode::Scale).unwrap().model,
        fit_svr(&x, &y, 1.0, 1e-4, GammaMode::Scale).unwrap().model
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn preprocessing_round_trips(seed in any::<u64>(), n in 3usize..40, log in any::<bool>()) {
        let mut r = rng(seed);
        let y: Vec<f64> = (0..n).map(|_| r.random_range(0.01..1e4)).collect();
        prop_assume!(y.iter().any(|v| (v - y[0]).abs() > 1e-6));
        let x: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        let p = Preprocessor::fit(&x, &y, &["i".to_string()], &[false], "y", log).unwrap();
        let back = p.inverse_y(&p.transform_y(&y).unwrap());
        for (a, b) in y.iter().zip(&back) {
            prop_assert!(rel_diff(*a, *b) < 1e-10);
        }
        let t = p.transform_y(&y).unwrap();
        prop_assert!(t.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn elasticnet_is_kkt_optimal(seed in any::<u64>(), alpha in 0.001f64..1.0, rho in 0.0f64..1.0) {
        let (x, y) = regression_problem(seed, 30, 5);
        let fit = fit_elasticnet(&x, &y, alpha, rho).unwrap();
        prop_assert!(elasticnet_kkt_violation(&x, &y, &fit.model, alpha, rho) < 1e-6);
    }

    #[test]
    fn svr_duals_are_feasible(seed in any::<u64>(), c in 0.1f64..10.0) {
        let (x, y) = regression_problem(seed, 25, 3);
        let fit = fit_svr(&x, &y, c, 0.01, GammaMode::Scale).unwrap();
        let n = x.len();
        prop_assert!(fit.alpha.iter().all(|&a| a >= 0.0 && a <= c));
        prop_assert!((0..n).map(|i| fit.alpha[i] - fit.alpha[n + i]).sum::<f64>().abs() < 1e-8);
    }

    #[test]
    fn ols_orthogonality_holds(seed in any::<u64>(), n in 10usize..60, m in 1usize..6) {
        prop_assume!(n > m + 2);
        let (x, y) = regression_problem(seed, n, m);
        let fit = fit_ols(&x, &y).unwrap();
        let res: Vec<f64> = x.iter().zip(&y).map(|(r, t)| t - fit.predict_row(r)).collect();
        let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..m {
            let xnorm = x.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt();
            let dot: f64 = x.iter().zip(&res).map(|(r, e)| r[j] * e).sum();
            prop_assert!(dot.abs() < 1e-8 * ynorm * xnorm);
        }
    }
}
