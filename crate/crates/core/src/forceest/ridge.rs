//! Learned linear force estimator: ridge regression from pooled flow
//! features to the four wrench components.

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{EstimateError, ForceEstimate};
use crate::gelsim::Wrench;

pub const N_FEATURES: usize = 6;
pub const N_OUTPUTS: usize = 4;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "mean_dx",
    "mean_dy",
    "mean_radial",
    "mean_tangential",
    "mean_mag",
    "std_mag",
];

pub const LABEL_NAMES: [&str; N_OUTPUTS] = ["fx", "fy", "fn", "tau"];

/// Relative eigenvalue floor below which an unregularized design is singular.
const SINGULAR_RCOND: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    /// 4 x 6, row-major: one row per wrench component.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub lambda: f64,
    pub feature_names: Vec<String>,
}

pub type Sample = ([f64; N_FEATURES], Wrench);

impl RidgeModel {
    pub fn weight(&self, output: usize, feature: usize) -> f64 {
        self.weights[output * N_FEATURES + feature]
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> Result<Self, EstimateError> {
        let model: RidgeModel =
            serde_json::from_str(text).map_err(|e| EstimateError::DegenerateDesign(format!("model JSON: {e}")))?;
        if model.weights.len() != N_OUTPUTS * N_FEATURES {
            return Err(EstimateError::ShapeMismatch {
                expected: N_OUTPUTS * N_FEATURES,
                got: model.weights.len(),
            });
        }
        if model.bias.len() != N_OUTPUTS {
            return Err(EstimateError::ShapeMismatch {
                expected: N_OUTPUTS,
                got: model.bias.len(),
            });
        }
        Ok(model)
    }
}

/// Closed-form ridge fit on centered data; the intercept is not penalized.
pub fn train_ridge(dataset: &[Sample], lambda: f64) -> Result<RidgeModel, EstimateError> {
    let n = dataset.len();
    if n < N_FEATURES + 1 {
        return Err(EstimateError::DegenerateDesign(format!(
            "{n} samples for {N_FEATURES} features"
        )));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(EstimateError::DegenerateDesign(format!("lambda {lambda}")));
    }
    if dataset
        .iter()
        .any(|(x, w)| x.iter().any(|v| !v.is_finite()) || !w.is_finite())
    {
        return Err(EstimateError::DegenerateDesign("non-finite sample".into()));
    }

    let x = DMatrix::from_fn(n, N_FEATURES, |i, j| dataset[i].0[j]);
    let y = DMatrix::from_fn(n, N_OUTPUTS, |i, j| dataset[i].1.components()[j]);
    let x_mean = x.row_mean();
    let y_mean = y.row_mean();
    let xc = DMatrix::from_fn(n, N_FEATURES, |i, j| x[(i, j)] - x_mean[j]);
    let yc = DMatrix::from_fn(n, N_OUTPUTS, |i, j| y[(i, j)] - y_mean[j]);

    let gram = xc.transpose() * &xc;
    if lambda == 0.0 {
        let eig = SymmetricEigen::new(gram.clone());
        let max = eig.eigenvalues.max().abs();
        let min = eig.eigenvalues.min();
        if max == 0.0 || min <= SINGULAR_RCOND * max {
            return Err(EstimateError::DegenerateDesign("feature covariance is singular".into()));
        }
    }
    let system = gram + DMatrix::identity(N_FEATURES, N_FEATURES) * lambda;
    let chol = system
        .cholesky()
        .ok_or_else(|| EstimateError::DegenerateDesign("normal equations not positive definite".into()))?;
    let coef = chol.solve(&(xc.transpose() * &yc)); // 6 x 4

    let mut weights = Vec::with_capacity(N_OUTPUTS * N_FEATURES);
    let mut bias = Vec::with_capacity(N_OUTPUTS);
    for o in 0..N_OUTPUTS {
        let mut b = y_mean[o];
        for f in 0..N_FEATURES {
            weights.push(coef[(f, o)]);
            b -= coef[(f, o)] * x_mean[f];
        }
        bias.push(b);
    }
    Ok(RidgeModel {
        weights,
        bias,
        lambda,
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
    })
}

/// `quality` is the valid fraction of the flow the features were pooled from.
pub fn predict_ridge(model: &RidgeModel, features: &[f64], quality: f64) -> Result<ForceEstimate, EstimateError> {
    if features.len() != N_FEATURES {
        return Err(EstimateError::ShapeMismatch {
            expected: N_FEATURES,
            got: features.len(),
        });
    }
    let mut out = [0.0; N_OUTPUTS];
    for (o, value) in out.iter_mut().enumerate() {
        *value = model.bias[o]
            + features
                .iter()
                .enumerate()
                .map(|(f, x)| model.weight(o, f) * x)
                .sum::<f64>();
    }
    Ok(ForceEstimate::new(Wrench::new(out[0], out[1], out[2], out[3]), quality))
}

/// Coefficient of determination of `model` on `data`, per output. NaN for an
/// output that is constant over `data`.
pub fn r_squared(model: &RidgeModel, data: &[Sample]) -> [f64; N_OUTPUTS] {
    let mut out = [f64::NAN; N_OUTPUTS];
    if data.is_empty() {
        return out;
    }
    let n = data.len() as f64;
    for (o, r2) in out.iter_mut().enumerate() {
        let mean = data.iter().map(|(_, w)| w.components()[o]).sum::<f64>() / n;
        let (mut res, mut tot) = (0.0, 0.0);
        for (x, w) in data {
            let truth = w.components()[o];
            let pred = model.bias[o] + (0..N_FEATURES).map(|f| model.weight(o, f) * x[f]).sum::<f64>();
            res += (truth - pred).powi(2);
            tot += (truth - mean).powi(2);
        }
        if tot > 0.0 {
            *r2 = 1.0 - res / tot;
        }
    }
    out
}

/// Training data as CSV: the six feature columns then `fx,fy,fn,tau`.
pub fn write_dataset<W: Write>(dataset: &[Sample], out: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(FEATURE_NAMES.iter().chain(LABEL_NAMES.iter()))?;
    for (x, w) in dataset {
        wr.write_record(x.iter().chain(w.components().iter()).map(|v| v.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<Vec<Sample>, csv::Error> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let mut out = Vec::new();
    for record in rd.records() {
        let record = record?;
        let values: Vec<f64> = record
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| csv::Error::from(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
        if values.len() != N_FEATURES + N_OUTPUTS {
            return Err(csv::Error::from(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("expected {} columns, got {}", N_FEATURES + N_OUTPUTS, values.len()),
            )));
        }
        let mut x = [0.0; N_FEATURES];
        x.copy_from_slice(&values[..N_FEATURES]);
        let w = Wrench::new(values[6], values[7], values[8], values[9]);
        out.push((x, w));
    }
    Ok(out)
}
