//! Mini-batch loop shared by local updates, fine-tuning and baselines.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{backward, cross_entropy, forward, AdamConfig, AdamState, MlpSpec, ParamSet, Tensor};

/// Shuffled mini-batches of row indices covering `0..n` once.
pub fn minibatches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Runs one epoch of Adam and returns the mean mini-batch loss.
pub fn train_epoch<R: Rng + ?Sized>(
    spec: &MlpSpec,
    params: &mut ParamSet,
    adam: &mut AdamState,
    data: &LabeledDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<f64> {
    let batches = minibatches(data.len(), batch_size, rng);
    let mut total = 0.0;
    for rows in &batches {
        let x = data.features().select_rows(rows);
        let y: Vec<usize> = rows.iter().map(|&i| data.labels()[i]).collect();
        let (loss, grads) = backward(spec, params, &x, &y)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training loss became {loss}")));
        }
        adam.step(params, &grads)?;
        total += loss;
    }
    if !params.is_finite() {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and accuracy (in percent) of predicted probabilities.
pub fn score(probs: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    let loss = cross_entropy(probs, labels)?;
    let correct = (0..labels.len()).filter(|&i| argmax(probs.row(i)) == labels[i]).count();
    Ok((loss, 100.0 * correct as f64 / labels.len().max(1) as f64))
}

pub fn evaluate(spec: &MlpSpec, params: &ParamSet, data: &LabeledDataset) -> Result<(f64, f64)> {
    let probs = forward(spec, params, data.features())?;
    score(&probs, data.labels())
}

/// Tracks the best validation loss seen so far.
#[derive(Debug, Clone)]
pub struct EarlyStopping<T> {
    pub best: T,
    pub best_loss: f64,
    pub best_step: usize,
    pub since_best: usize,
    pub patience: usize,
}

impl<T: Clone> EarlyStopping<T> {
    pub fn new(initial: T, loss: f64, patience: usize) -> Self {
        Self { best: initial, best_loss: loss, best_step: 0, since_best: 0, patience }
    }

    /// Records a checkpoint; returns true when training should stop.
    pub fn observe(&mut self, step: usize, loss: f64, candidate: &T) -> bool {
        if loss < self.best_loss {
            self.best = candidate.clone();
            self.best_loss = loss;
            self.best_step = step;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }
}

/// One row of a per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: String,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub mean_gate_value: Option<f64>,
}

/// Supervised training with early stopping on the validation loss.
#[derive(Debug, Clone)]
pub struct SupervisedOutcome {
    pub params: ParamSet,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Trains from `init` for at most `max_epochs`, evaluating the validation
/// loss before the first epoch and after each one. Returns the parameters
/// with the lowest validation loss.
#[allow(clippy::too_many_arguments)]
pub fn fit_early_stopping<R: Rng + ?Sized>(
    spec: &MlpSpec,
    init: &ParamSet,
    train: &LabeledDataset,
    validation: &LabeledDataset,
    max_epochs: usize,
    batch_size: usize,
    patience: usize,
    adam: AdamConfig,
    stage: &str,
    rng: &mut R,
) -> Result<SupervisedOutcome> {
    let mut params = init.clone();
    let mut state = AdamState::new(&params, adam);
    let (val0, _) = evaluate(spec, &params, validation)?;
    let mut log = vec![EpochLog {
        epoch: 0,
        stage: stage.to_string(),
        train_loss: None,
        val_loss: val0,
        mean_gate_value: None,
    }];
    let mut stopper = EarlyStopping::new(params.clone(), val0, patience.max(1));
    for epoch in 1..=max_epochs {
        let train_loss = train_epoch(spec, &mut params, &mut state, train, batch_size, rng)?;
        let (val, _) = evaluate(spec, &params, validation)?;
        log.push(EpochLog {
            epoch,
            stage: stage.to_string(),
            train_loss: Some(train_loss),
            val_loss: val,
            mean_gate_value: None,
        });
        if stopper.observe(epoch, val, &params) {
            break;
        }
    }
    Ok(SupervisedOutcome {
        params: stopper.best,
        best_val_loss: stopper.best_loss,
        best_epoch: stopper.best_step,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1; 10]), 0);
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
    }

    #[test]
    fn minibatches_cover_every_row_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = minibatches(23, 10, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![10, 10, 3]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn early_stopping_keeps_minimum() {
        let mut s = EarlyStopping::new(0, 5.0, 2);
        assert!(!s.observe(1, 4.0, &1));
        assert!(!s.observe(2, 4.5, &2));
        assert!(!s.observe(3, 3.0, &3));
        assert!(!s.observe(4, 3.0, &4));
        assert!(s.observe(5, 3.5, &5));
        assert_eq!((s.best, s.best_loss, s.best_step), (3, 3.0, 3));
    }
}
