//! Fit a Gaussian-process surrogate to a handful of sine evaluations and
//! compare predictions with the true function.

use iuq::gp::{GpConfig, GpModel};

fn main() -> Result<(), iuq::IuqError> {
    let tau = 2.0 * std::f64::consts::PI;
    let xs: Vec<Vec<f64>> = (0..15).map(|k| vec![tau * k as f64 / 14.0]).collect();
    let ys: Vec<f64> = xs.iter().map(|x| x[0].sin()).collect();
    let gp = GpModel::fit(&xs, &ys, &GpConfig::default())?;
    println!("hyperparameters: {:?}", gp.hyper);
    for k in 0..=8 {
        let x = tau * k as f64 / 8.0 + 0.1;
        let (m, v) = gp.predict(&[x])?;
        println!("x = {x:.3}: mean {m:+.4} ± {:.4}, truth {:+.4}", 1.96 * v.sqrt(), x.sin());
    }
    Ok(())
}
