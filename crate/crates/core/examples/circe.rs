//! Estimate a Gaussian input distribution from linear-response data, with and
//! without a mean shift, and compare against the block-wise MLE/MAP route.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use iuq::circe::{blocks_from_circe_inputs, circe_no_bias, circe_with_bias, mle_map_estimate, CirceInputs, CirceOptions};
use iuq::stats::RngStream;

fn main() -> Result<(), iuq::IuqError> {
    let (j, b, var, eps) = (200, 0.3, 0.04, 0.05);
    let mut rng = RngStream::new(42).rng();
    let theta = Normal::new(b, f64::sqrt(var)).unwrap();
    let noise = Normal::new(0.0, eps).unwrap();
    let s: Vec<f64> = (0..j).map(|_| rng.random_range(0.5..2.0)).collect();
    let d: Vec<f64> = s.iter().map(|sj| sj * theta.sample(&mut rng) + noise.sample(&mut rng)).collect();
    let sens = DMatrix::from_column_slice(j, 1, &s);

    let plain = CirceInputs::new(d.clone(), sens.clone(), vec![eps * eps; j], CirceOptions::default())?;
    let est = circe_no_bias(&plain)?;
    println!("no bias:   var = {:.4} ({} iterations)", est.var()[0], est.iterations);

    let biased = CirceInputs::new(d, sens, vec![eps * eps; j], CirceOptions { estimate_bias: true, ..Default::default() })?;
    let est = circe_with_bias(&biased)?;
    println!("with bias: b = {:.4}, var = {:.4} (truth {b}, {var})", est.mean()[0], est.var()[0]);

    let mle = mle_map_estimate(&blocks_from_circe_inputs(&biased), None, &biased.options)?;
    println!("MLE/MAP:   b = {:.4}, var = {:.4}", mle.mean()[0], mle.var()[0]);
    Ok(())
}
