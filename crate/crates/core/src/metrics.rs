//! Forecast error metrics and cross-seed aggregation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean squared error over all elements.
pub fn mse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_same_shape("mse", pred, truth)?;
    let n = pred.numel() as f64;
    let s: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(s / n)
}

/// Mean absolute error over all elements.
pub fn mae(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_same_shape("mae", pred, truth)?;
    let n = pred.numel() as f64;
    let s: f64 = pred.data().iter().zip(truth.data()).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / n)
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    if a.numel() == 0 {
        return Err(Error::ShapeMismatch { op, detail: "empty tensors".into() });
    }
    Ok(())
}

/// Mean and standard error of a sample (stderr 0 for a single value).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
