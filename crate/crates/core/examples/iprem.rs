//! Scan the heat-transfer and quench-front multipliers of the reflood model
//! against synthetic transients and report the accepted ranges.

use iuq::iprem::{iprem_quantify_model, IpremConfig, ParameterGrid};
use iuq::model::{generate_synthetic_experiments, DesignPoint, RefloodModel};
use iuq::stats::{GaussianParamSpec, RngStream, Transform};

fn main() -> Result<(), iuq::IuqError> {
    let model = RefloodModel::default();
    let truth = GaussianParamSpec::new(vec![0.0, 0.0], vec![0.04, 0.04], vec![Transform::Exponential; 2])?;
    let designs: Vec<DesignPoint> = [(900.0, 1.5e4), (1000.0, 2.5e4)].iter().map(|(t0, q)| DesignPoint::unlabeled(vec![*t0, *q])).collect();
    let records = generate_synthetic_experiments(&model, &truth, &designs, &[0.0], RngStream::new(7))?;

    let values: Vec<f64> = (0..13).map(|k| 0.5 + 0.125 * k as f64).collect();
    let grids = [ParameterGrid { index: 0, values: values.clone() }, ParameterGrid { index: 1, values }];
    for r in iprem_quantify_model(&model, &records, &grids, &IpremConfig::default())? {
        println!("input {}: nominal {:.3}, range {:?} .. {:?} ({:?})", r.index, r.nominal, r.bounds.lower, r.bounds.upper, r.bounds.status);
    }
    Ok(())
}
