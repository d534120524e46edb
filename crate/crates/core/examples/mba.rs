//! Bayesian calibration of a two-parameter affine model with adaptive
//! Metropolis sampling.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};

use iuq::bayes::{mba_iuq, MbaOptions, ParamPrior, PriorSpec};
use iuq::model::{AffineModel, DesignPoint, ExperimentRecord, QoiVector};
use iuq::stats::RngStream;

fn main() -> Result<(), iuq::IuqError> {
    let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, -0.3, 1.2]);
    let b = DMatrix::from_row_slice(2, 1, &[0.5, -0.5]);
    let model = AffineModel::new(s.clone(), b.clone(), DVector::zeros(2))?;
    let theta = DVector::from_vec(vec![0.3, -0.2]);
    let mut rng = RngStream::new(5).rng();
    let noise = Normal::new(0.0, 0.1).unwrap();
    let records = (0..10)
        .map(|k| {
            let x = k as f64 / 10.0;
            let y = &s * &theta + &b * DVector::from_element(1, x);
            let obs = y.iter().map(|v| v + noise.sample(&mut rng)).collect();
            ExperimentRecord::new(format!("d{k}"), DesignPoint::unlabeled(vec![x]), QoiVector::scalars(obs), vec![0.01; 2])
        })
        .collect::<Result<Vec<_>, _>>()?;

    let prior = PriorSpec::new(vec![ParamPrior::Normal { mean: 0.0, sd: 1.0 }, ParamPrior::Uniform { lo: -1.0, hi: 1.0 }])?;
    let res = mba_iuq(&model, &records, &prior, &MbaOptions { seed: 5, ..Default::default() })?;
    for m in &res.marginals {
        println!("{}: mean {:.4}, sd {:.4}, 95% [{:.4}, {:.4}]", m.label, m.mean, m.sd, m.lo95, m.hi95);
    }
    println!("acceptance rate {:.2}, ESS {:?}", res.chain.acceptance_rate, res.chain.ess);
    Ok(())
}
