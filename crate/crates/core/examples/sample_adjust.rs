//! Widen a parameter range until forward propagation envelopes the data.

use iuq::harness::adjust::{sample_adjust_iuq, SampleAdjustConfig};
use iuq::model::{DesignPoint, ExperimentRecord, FnModel, QoiVector};
use iuq::stats::RngStream;

fn main() -> Result<(), iuq::IuqError> {
    let model = FnModel::scalar("ray", 1, vec![1.0], |x: &[f64], t: &[f64]| vec![t[0] * (1.0 + x[0])]);
    let records = (0..10)
        .map(|k| {
            let x = k as f64 / 9.0;
            let theta = 0.8 + 0.6 * x;
            ExperimentRecord::new(format!("d{k}"), DesignPoint::unlabeled(vec![x]), QoiVector::scalars(vec![theta * (1.0 + x)]), vec![0.0])
        })
        .collect::<Result<Vec<_>, _>>()?;

    let res = sample_adjust_iuq(&model, &records, &[(0.95, 1.05)], &SampleAdjustConfig { max_rounds: 20, ..Default::default() }, RngStream::new(1))?;
    for r in &res.rounds {
        println!("round {}: range {:?}, coverage {:.3}", r.round, r.ranges[0], r.coverage);
    }
    println!("converged: {}, final range {:?}", res.converged, res.ranges[0]);
    Ok(())
}
