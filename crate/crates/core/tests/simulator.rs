mod common;

use common::*;
use gvacl::simulate::CovariateLaw;
use gvacl::{simulate, Family, SimSpec};

#[test]
fn poisson_marginal_mean_matches_lognormal_mixing() {
    let (m, n) = (1000, 1000);
    let (beta0, beta1, x, su, sv) = (-1.0, 0.5, 0.8, 0.4, 0.3);
    let spec = SimSpec {
        family: Family::Poisson,
        m,
        n,
        beta: vec![beta0, beta1],
        sigma_u: su,
        sigma_v: sv,
        covariate_law: CovariateLaw::Fixed {
            p: 1,
            values: vec![x; m * n],
        },
        seed: 31,
    };
    let sim = simulate(&spec).unwrap();
    let expected = (beta0 + beta1 * x + su * su / 2.0 + sv * sv / 2.0).exp();
    // Crossed effects make cells dependent; the standard error of the grand
    // mean comes from the row and column effect draws.
    let row_means: Vec<f64> = (0..m).map(|i| (0..n).map(|j| sim.data.response(i, j)).sum::<f64>() / n as f64).collect();
    let col_means: Vec<f64> = (0..n).map(|j| (0..m).map(|i| sim.data.response(i, j)).sum::<f64>() / m as f64).collect();
    let (grand, row_sd) = mean_sd(&row_means);
    let (_, col_sd) = mean_sd(&col_means);
    let se = (row_sd.powi(2) / m as f64 + col_sd.powi(2) / n as f64).sqrt();
    assert!((grand - expected).abs() <= 3.0 * se, "{grand} vs {expected} (se {se})");
}
