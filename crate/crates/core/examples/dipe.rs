//! Build the pseudo-CDF of a shift parameter from scattered measurements and
//! read off its 95% range.

use iuq::dipe::{dipe_bounds, dipe_pseudo_cdf, DEFAULT_LEVELS};
use iuq::model::{DesignPoint, ExperimentRecord, FnModel, QoiVector};
use iuq::stats::RngStream;
use rand_distr::{Distribution, Normal};

fn main() -> Result<(), iuq::IuqError> {
    // Measurements y = 2 + θ with θ ~ N(0.3, 0.2²).
    let model = FnModel::scalar("shift", 1, vec![0.0], |x: &[f64], t: &[f64]| vec![x[0] + t[0]]);
    let mut rng = RngStream::new(3).rng();
    let scatter = Normal::new(0.3, 0.2).unwrap();
    let records = (0..500)
        .map(|k| ExperimentRecord::new(format!("m{k}"), DesignPoint::unlabeled(vec![2.0]), QoiVector::scalars(vec![2.0 + scatter.sample(&mut rng)]), vec![0.0]))
        .collect::<Result<Vec<_>, _>>()?;

    let grid: Vec<f64> = (0..=150).map(|k| -0.5 + 0.01 * k as f64).collect();
    let curve = dipe_pseudo_cdf(&model, &records, 0, &grid)?;
    let (lo, hi) = dipe_bounds(&curve, DEFAULT_LEVELS)?;
    println!("95% range [{lo:.3}, {hi:.3}], expected about [{:.3}, {:.3}]", 0.3 - 1.96 * 0.2, 0.3 + 1.96 * 0.2);
    Ok(())
}
