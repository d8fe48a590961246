//! Softmax cross-entropy and the scalar objectives used for input gradients.

use crate::error::{ensure, Result};
use crate::tensor::Tensor2;

use super::mlp::Mlp;

/// Row-wise log-softmax, max-shifted for stability.
pub fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    log_softmax_row(logits).into_iter().map(f64::exp).collect()
}

pub fn softmax(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        let p = softmax_row(logits.row(r));
        out.row_mut(r).copy_from_slice(&p);
    }
    out
}

fn check_labels(logits: &Tensor2, labels: &[usize]) -> Result<()> {
    ensure!(
        labels.len() == logits.rows(),
        Dimension,
        "{} labels for {} rows",
        labels.len(),
        logits.rows()
    );
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(crate::Error::Domain(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

/// `-log softmax(logits_r)[y_r]` for every row.
pub fn cross_entropy_per_sample(logits: &Tensor2, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    Ok(logits
        .iter_rows()
        .zip(labels)
        .map(|(row, &y)| -log_softmax_row(row)[y])
        .collect())
}

/// Mean cross-entropy in nats.
pub fn cross_entropy(logits: &Tensor2, labels: &[usize]) -> Result<f64> {
    let per = cross_entropy_per_sample(logits, labels)?;
    ensure!(!per.is_empty(), Dimension, "cross-entropy of an empty batch");
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Gradient of `scale * sum_r CE_r` with respect to the logits.
pub fn cross_entropy_grad(logits: &Tensor2, labels: &[usize], scale: f64) -> Result<Tensor2> {
    check_labels(logits, labels)?;
    let mut g = softmax(logits);
    for (r, &y) in labels.iter().enumerate() {
        let row = g.row_mut(r);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(g)
}

/// Scalar objectives whose gradient with respect to the network input can be taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputLoss {
    /// Mean cross-entropy over the batch.
    CrossEntropyMean,
    /// Summed cross-entropy; each row's input gradient is that sample's own gradient.
    CrossEntropySum,
    /// Sum of squared outputs, `||f(x)||^2`.
    SquaredOutput,
}

impl InputLoss {
    pub fn value(self, out: &Tensor2, labels: &[usize]) -> Result<f64> {
        match self {
            InputLoss::CrossEntropyMean => cross_entropy(out, labels),
            InputLoss::CrossEntropySum => Ok(cross_entropy_per_sample(out, labels)?.iter().sum()),
            InputLoss::SquaredOutput => Ok(out.data().iter().map(|v| v * v).sum()),
        }
    }

    pub fn output_grad(self, out: &Tensor2, labels: &[usize]) -> Result<Tensor2> {
        match self {
            InputLoss::CrossEntropyMean => {
                ensure!(out.rows() > 0, Dimension, "empty batch");
                cross_entropy_grad(out, labels, 1.0 / out.rows() as f64)
            }
            InputLoss::CrossEntropySum => cross_entropy_grad(out, labels, 1.0),
            InputLoss::SquaredOutput => Ok(out.scale(2.0)),
        }
    }
}

/// Loss value and `d loss / d x`.
pub fn input_gradient(
    params: &Mlp,
    x: &Tensor2,
    labels: &[usize],
    loss: InputLoss,
) -> Result<(f64, Tensor2)> {
    let cache = params.forward_cached(x)?;
    let value = loss.value(&cache.output, labels)?;
    let g_out = loss.output_grad(&cache.output, labels)?;
    let gx = params.backward(&cache, &g_out, None)?;
    Ok((value, gx))
}

/// Loss value and gradient with respect to the flat parameter vector.
pub fn param_gradient(
    params: &Mlp,
    x: &Tensor2,
    labels: &[usize],
    loss: InputLoss,
) -> Result<(f64, Vec<f64>)> {
    let cache = params.forward_cached(x)?;
    let value = loss.value(&cache.output, labels)?;
    let g_out = loss.output_grad(&cache.output, labels)?;
    let mut g = vec![0.0; params.num_params()];
    params.backward(&cache, &g_out, Some(&mut g))?;
    Ok((value, g))
}
