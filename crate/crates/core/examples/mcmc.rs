//! Sample a correlated two-dimensional Gaussian with adaptive Metropolis and
//! print the chain diagnostics.

use iuq::mcmc::{diagnostics, mh_sample, McmcConfig};

fn main() -> Result<(), iuq::IuqError> {
    // Unit variances, correlation 0.9.
    let rho: f64 = 0.9;
    let log_target = |x: &[f64]| -(x[0] * x[0] - 2.0 * rho * x[0] * x[1] + x[1] * x[1]) / (2.0 * (1.0 - rho * rho));
    let chain = mh_sample(log_target, &[0.0, 0.0], &McmcConfig { length: 50_000, seed: 9, ..Default::default() })?;
    let diag = diagnostics(&chain)?;
    println!("mean {:?}", chain.mean());
    println!("covariance {:.3}", chain.cov());
    println!("acceptance {:.2}, ESS {:?}, split-half z {:?}", diag.acceptance_rate, diag.ess, diag.split_half_z);
    Ok(())
}
