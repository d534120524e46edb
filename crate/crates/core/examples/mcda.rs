//! Regularised linear assimilation: pick α on the L-curve and update a
//! two-parameter prior from three measurements.

use nalgebra::DMatrix;

use iuq::mcda::{mcda_deterministic, select_alpha_lcurve, LinearProblem};
use iuq::stats::CovMatrix;

fn main() -> Result<(), iuq::IuqError> {
    let s = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, 0.5, 1.0, 0.3, -0.6]);
    let residual = vec![0.35, -0.1, 0.4];
    let problem = LinearProblem::new(vec![0.0, 0.0], CovMatrix::from_diag(&[0.25, 0.25]), s, residual, CovMatrix::from_diag(&[0.01; 3]))?;

    let alphas: Vec<f64> = (0..31).map(|k| 10f64.powf(-4.0 + 0.2 * k as f64)).collect();
    let pick = select_alpha_lcurve(&problem, &alphas)?;
    let post = mcda_deterministic(&problem, pick.alpha, None)?;
    println!("alpha = {:.4}", pick.alpha);
    println!("posterior mean {:?}", post.theta_post);
    println!("posterior sd   {:?}", post.cov_post.iter().enumerate().map(|(i, r)| r[i].sqrt()).collect::<Vec<_>>());
    Ok(())
}
