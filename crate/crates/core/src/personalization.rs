//! Specialist fine-tuning and the gated two-expert mixture.
//!
//! The mixture prediction for one input is
//!
//! ```text
//! y = h(x) * f_s(x) + (1 - h(x)) * f_g(x)
//! ```
//!
//! with a scalar gate `h(x)` in (0, 1). Only the specialist `f_s` and the
//! gate `h` are trained; the global model `f_g` is a fixed input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataBundle, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{
    backward_from_outputs, forward, forward_trace, AdamConfig, AdamState, MlpSpec, OutputActivation,
    ParamSet, Tensor, PROB_FLOOR,
};
use crate::training::{fit_early_stopping, minibatches, score, EarlyStopping, EpochLog};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationSchedule {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub finetune: AdamConfig,
    pub mixture: AdamConfig,
}

impl Default for PersonalizationSchedule {
    fn default() -> Self {
        Self {
            max_epochs: 500,
            batch_size: 10,
            patience: 25,
            finetune: AdamConfig::with_eta(3e-4),
            mixture: AdamConfig::with_eta(3e-4),
        }
    }
}

impl PersonalizationSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("personalization batch_size and patience must be positive".into()));
        }
        if !(self.finetune.eta > 0.0 && self.mixture.eta > 0.0) {
            return Err(Error::Config("personalization learning rates must be positive".into()));
        }
        if self.mixture.eta > self.finetune.eta {
            return Err(Error::Config(format!(
                "mixture learning rate {} exceeds fine-tuning rate {}",
                self.mixture.eta, self.finetune.eta
            )));
        }
        Ok(())
    }
}

/// A client's two experts and its gate.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    pub expert_spec: MlpSpec,
    pub gate_spec: MlpSpec,
    pub w_g: ParamSet,
    pub w_s: ParamSet,
    pub w_h: ParamSet,
}

impl MixtureModel {
    pub fn new(expert_spec: &MlpSpec, w_g: ParamSet, w_s: ParamSet, w_h: ParamSet) -> Result<Self> {
        if expert_spec.output_activation != OutputActivation::Softmax {
            return Err(Error::Config("mixture experts must have softmax outputs".into()));
        }
        let gate_spec = MlpSpec::gate_for(expert_spec);
        expert_spec.check_params(&w_g)?;
        expert_spec.check_params(&w_s)?;
        gate_spec.check_params(&w_h)?;
        Ok(Self { expert_spec: expert_spec.clone(), gate_spec, w_g, w_s, w_h })
    }
}

/// Gate parameters with a small output layer, so `h(x)` starts near 0.5.
pub fn init_gate<R: Rng + ?Sized>(expert_spec: &MlpSpec, rng: &mut R) -> ParamSet {
    MlpSpec::gate_for(expert_spec).init_params_scaled(rng, 0.01)
}

/// Specialist fine-tuned from `w_g` on the client's training split.
pub fn fine_tune<R: Rng + ?Sized>(
    spec: &MlpSpec,
    w_g: &ParamSet,
    bundle: &ClientDataBundle,
    schedule: &PersonalizationSchedule,
    rng: &mut R,
) -> Result<crate::training::SupervisedOutcome> {
    fit_early_stopping(
        spec,
        w_g,
        &bundle.train,
        &bundle.validation,
        schedule.max_epochs,
        schedule.batch_size,
        schedule.patience,
        schedule.finetune,
        "finetune",
        rng,
    )
}

/// Blends precomputed expert outputs with per-row gate values.
pub fn blend(specialist: &Tensor, global: &Tensor, gate: &[f64]) -> Tensor {
    let k = specialist.cols();
    let mut out = Vec::with_capacity(specialist.len());
    for (i, &h) in gate.iter().enumerate() {
        for (s, g) in specialist.row(i).iter().zip(global.row(i)) {
            out.push(h * s + (1.0 - h) * g);
        }
    }
    Tensor::new(vec![gate.len(), k], out).expect("rows x classes")
}

/// Mixture prediction and the gate value of every row.
pub fn mixture_forward(mix: &MixtureModel, batch: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let specialist = forward(&mix.expert_spec, &mix.w_s, batch)?;
    let global = forward(&mix.expert_spec, &mix.w_g, batch)?;
    let gate = forward(&mix.gate_spec, &mix.w_h, batch)?.into_values();
    Ok((blend(&specialist, &global, &gate), gate))
}

/// Mixture prediction with the gate replaced by the constant `h`.
pub fn mixture_forward_constant(mix: &MixtureModel, batch: &Tensor, h: f64) -> Result<Tensor> {
    let specialist = forward(&mix.expert_spec, &mix.w_s, batch)?;
    let global = forward(&mix.expert_spec, &mix.w_g, batch)?;
    Ok(blend(&specialist, &global, &vec![h; batch.rows()]))
}

/// Mean mixture cross-entropy on a batch with gradients for the
/// specialist and the gate. The global expert only contributes its
/// outputs.
pub fn mixture_backward(
    mix: &MixtureModel,
    batch: &Tensor,
    labels: &[usize],
) -> Result<(f64, ParamSet, ParamSet, f64)> {
    let s_trace = forward_trace(&mix.expert_spec, &mix.w_s, batch)?;
    let h_trace = forward_trace(&mix.gate_spec, &mix.w_h, batch)?;
    let global = forward(&mix.expert_spec, &mix.w_g, batch)?;
    let ps = s_trace.output();
    let gate = h_trace.output().values();
    let k = mix.expert_spec.output_dim();
    let n = labels.len();
    if n != batch.rows() {
        return Err(Error::Data(format!("{n} labels for {} rows", batch.rows())));
    }
    let mut loss = 0.0;
    let mut d_ps = vec![0.0; ps.len()];
    let mut d_h = vec![0.0; n];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Data(format!("label {y} at row {i} is outside [0, {k})")));
        }
        let (s, g, h) = (ps.values()[i * k + y], global.values()[i * k + y], gate[i]);
        let p = h * s + (1.0 - h) * g;
        loss -= p.max(PROB_FLOOR).ln();
        if p > PROB_FLOOR {
            let dp = -1.0 / (n as f64 * p);
            d_ps[i * k + y] = dp * h;
            d_h[i] = dp * (s - g);
        }
    }
    loss /= n.max(1) as f64;
    let g_s = backward_from_outputs(&mix.expert_spec, &mix.w_s, &s_trace, &d_ps)?;
    let g_h = backward_from_outputs(&mix.gate_spec, &mix.w_h, &h_trace, &d_h)?;
    let mean_gate = gate.iter().sum::<f64>() / n.max(1) as f64;
    Ok((loss, g_s, g_h, mean_gate))
}

fn mixture_score(mix: &MixtureModel, data: &LabeledDataset) -> Result<(f64, f64)> {
    let (probs, gate) = mixture_forward(mix, data.features())?;
    let (loss, _) = score(&probs, data.labels())?;
    Ok((loss, gate.iter().sum::<f64>() / gate.len().max(1) as f64))
}

#[derive(Debug, Clone)]
pub struct MixtureOutcome {
    pub w_s: ParamSet,
    pub w_h: ParamSet,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Jointly trains specialist and gate on the mixture loss with early
/// stopping on the client's validation loss. `mix.w_g` is read only.
pub fn train_mixture<R: Rng + ?Sized>(
    mix: &MixtureModel,
    bundle: &ClientDataBundle,
    schedule: &PersonalizationSchedule,
    rng: &mut R,
) -> Result<MixtureOutcome> {
    let mut work = mix.clone();
    let mut adam_s = AdamState::new(&work.w_s, schedule.mixture);
    let mut adam_h = AdamState::new(&work.w_h, schedule.mixture);
    let (val0, gate0) = mixture_score(&work, &bundle.validation)?;
    let mut log = vec![EpochLog {
        epoch: 0,
        stage: "mixture".into(),
        train_loss: None,
        val_loss: val0,
        mean_gate_value: Some(gate0),
    }];
    let mut stopper = EarlyStopping::new((work.w_s.clone(), work.w_h.clone()), val0, schedule.patience.max(1));
    let train = &bundle.train;
    for epoch in 1..=schedule.max_epochs {
        let batches = minibatches(train.len(), schedule.batch_size, rng);
        let mut total = 0.0;
        for rows in &batches {
            let x = train.features().select_rows(rows);
            let y: Vec<usize> = rows.iter().map(|&i| train.labels()[i]).collect();
            let (loss, g_s, g_h, _) = mixture_backward(&work, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("mixture loss became {loss}")));
            }
            adam_s.step(&mut work.w_s, &g_s)?;
            adam_h.step(&mut work.w_h, &g_h)?;
            total += loss;
        }
        if !(work.w_s.is_finite() && work.w_h.is_finite()) {
            return Err(Error::Numeric("mixture parameters became non-finite".into()));
        }
        let (val, gate) = mixture_score(&work, &bundle.validation)?;
        log.push(EpochLog {
            epoch,
            stage: "mixture".into(),
            train_loss: Some(total / batches.len().max(1) as f64),
            val_loss: val,
            mean_gate_value: Some(gate),
        });
        if stopper.observe(epoch, val, &(work.w_s.clone(), work.w_h.clone())) {
            break;
        }
    }
    let (w_s, w_h) = stopper.best;
    Ok(MixtureOutcome {
        w_s,
        w_h,
        best_val_loss: stopper.best_loss,
        best_epoch: stopper.best_step,
        log,
    })
}

/// Writes `epoch,stage,train_loss,val_loss,mean_gate_value` rows.
pub fn write_personalization_log<W: std::io::Write>(log: &[EpochLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "stage", "train_loss", "val_loss", "mean_gate_value"])?;
    for r in log {
        w.write_record([
            r.epoch.to_string(),
            r.stage.clone(),
            r.train_loss.map(|v| v.to_string()).unwrap_or_default(),
            r.val_loss.to_string(),
            r.mean_gate_value.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
