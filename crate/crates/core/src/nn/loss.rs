use crate::error::{Error, Result};
use crate::nn::mlp::{backward_from_logits, forward_trace, MlpSpec, OutputActivation};
use crate::nn::{ParamSet, Tensor};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Data(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::Data(format!(
            "label {y} at row {i} is outside [0, {classes})"
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of the true classes.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let k = probs.cols();
    check_labels(labels, probs.rows(), k)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.values()[i * k + y].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean cross-entropy of a softmax classifier and its gradient.
pub fn backward(
    spec: &MlpSpec,
    params: &ParamSet,
    batch: &Tensor,
    labels: &[usize],
) -> Result<(f64, ParamSet)> {
    if spec.output_activation != OutputActivation::Softmax {
        return Err(Error::Config("cross-entropy training needs a softmax output".into()));
    }
    let trace = forward_trace(spec, params, batch)?;
    let probs = trace.output();
    let loss = cross_entropy(probs, labels)?;
    let k = spec.output_dim();
    let n = labels.len().max(1) as f64;
    let mut d_logits: Vec<f64> = probs.values().iter().map(|p| p / n).collect();
    for (i, &y) in labels.iter().enumerate() {
        d_logits[i * k + y] -= 1.0 / n;
    }
    let grads = backward_from_logits(spec, params, &trace, &d_logits)?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confident_correct_prediction_costs_nothing() {
        let p = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&p, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn uniform_prediction_costs_ln_k() {
        let p = Tensor::new(vec![1, 10], vec![0.1; 10]).unwrap();
        assert!((cross_entropy(&p, &[4]).unwrap() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_mean_by_hand() {
        let p = Tensor::new(vec![2, 2], vec![0.8, 0.2, 0.5, 0.5]).unwrap();
        let expected = -(0.8f64.ln() + 0.5f64.ln()) / 2.0;
        assert!((cross_entropy(&p, &[0, 1]).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn wrong_confident_prediction_is_clamped() {
        let p = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let loss = cross_entropy(&p, &[1]).unwrap();
        assert!((loss - (-PROB_FLOOR.ln())).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let p = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!(matches!(cross_entropy(&p, &[2]), Err(Error::Data(_))));
    }
}
