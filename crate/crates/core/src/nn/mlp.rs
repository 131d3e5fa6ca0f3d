use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    /// Probability vector over classes.
    Softmax,
    /// A single value in (0, 1).
    SigmoidScalar,
}

/// Dense feed-forward network description.
///
/// `layer_widths` lists the input dimension, every hidden width and the
/// output dimension, so a network with one hidden layer has three widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn classifier(input: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layer_widths = vec![input];
        layer_widths.extend_from_slice(hidden);
        layer_widths.push(classes);
        Self {
            layer_widths,
            hidden_activation: HiddenActivation::Relu,
            output_activation: OutputActivation::Softmax,
        }
    }

    /// Same hidden stack, single sigmoid output unit.
    pub fn gate_for(expert: &MlpSpec) -> Self {
        let mut layer_widths = expert.layer_widths.clone();
        *layer_widths.last_mut().expect("validated spec") = 1;
        Self {
            layer_widths,
            hidden_activation: expert.hidden_activation,
            output_activation: OutputActivation::SigmoidScalar,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(Error::Config(format!(
                "an MLP needs at least one hidden layer, got widths {:?}",
                self.layer_widths
            )));
        }
        if let Some(i) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("layer width {i} is zero")));
        }
        if self.output_activation == OutputActivation::SigmoidScalar && self.output_dim() != 1 {
            return Err(Error::Config(format!(
                "sigmoid-scalar output requires output dim 1, got {}",
                self.output_dim()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn weight_name(layer: usize) -> String {
        format!("layer{layer}.weight")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("layer{layer}.bias")
    }

    /// He-normal weights and zero biases. The output layer's weights are
    /// multiplied by `output_scale`.
    pub fn init_params_scaled<R: Rng + ?Sized>(&self, rng: &mut R, output_scale: f64) -> ParamSet {
        let mut entries = Vec::with_capacity(2 * self.num_layers());
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.layer_widths[l], self.layer_widths[l + 1]);
            let mut std = (2.0 / fan_in as f64).sqrt();
            if l + 1 == self.num_layers() {
                std *= output_scale;
            }
            let normal = Normal::new(0.0, std).expect("finite std");
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
            entries.push((
                Self::weight_name(l),
                Tensor::new(vec![fan_out, fan_in], w).expect("sized"),
            ));
            entries.push((Self::bias_name(l), Tensor::zeros(vec![fan_out])));
        }
        ParamSet::new(entries)
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        self.init_params_scaled(rng, 1.0)
    }

    /// Checks that `params` has the weight/bias layout this spec expects.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        if params.len() != 2 * self.num_layers() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors for {} layers, got {}",
                2 * self.num_layers(),
                self.num_layers(),
                params.len()
            )));
        }
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.layer_widths[l], self.layer_widths[l + 1]);
            let (wn, w) = &params.entries()[2 * l];
            let (bn, b) = &params.entries()[2 * l + 1];
            if *wn != Self::weight_name(l) || w.shape() != [fan_out, fan_in] {
                return Err(Error::Config(format!(
                    "layer {l}: weight `{wn}` has shape {:?}, expected [{fan_out}, {fan_in}]",
                    w.shape()
                )));
            }
            if *bn != Self::bias_name(l) || b.shape() != [fan_out] {
                return Err(Error::Config(format!(
                    "layer {l}: bias `{bn}` has shape {:?}, expected [{fan_out}]",
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 2 || batch.cols() != self.input_dim() {
            return Err(Error::Config(format!(
                "layer 0: input batch has shape {:?}, expected [n, {}]",
                batch.shape(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

/// Intermediate values kept by [`forward_trace`] for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    rows: usize,
    /// Input to each layer; `inputs[0]` is the batch.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    output: Tensor,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        &self.output
    }

    pub fn into_output(self) -> Tensor {
        self.output
    }
}

pub fn forward(spec: &MlpSpec, params: &ParamSet, batch: &Tensor) -> Result<Tensor> {
    Ok(forward_trace(spec, params, batch)?.output)
}

pub fn forward_trace(spec: &MlpSpec, params: &ParamSet, batch: &Tensor) -> Result<Trace> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    let n = batch.rows();
    let mut inputs = Vec::with_capacity(spec.num_layers());
    let mut pre = Vec::with_capacity(spec.num_layers());
    let mut current = batch.values().to_vec();
    for l in 0..spec.num_layers() {
        let (fan_in, fan_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let w = params.tensor(2 * l).values();
        let b = params.tensor(2 * l + 1).values();
        let mut z = vec![0.0; n * fan_out];
        for i in 0..n {
            let x = &current[i * fan_in..(i + 1) * fan_in];
            let zi = &mut z[i * fan_out..(i + 1) * fan_out];
            for (o, zo) in zi.iter_mut().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                *zo = b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let last = l + 1 == spec.num_layers();
        let next = if last {
            match spec.output_activation {
                OutputActivation::Softmax => softmax_rows(&z, fan_out),
                OutputActivation::SigmoidScalar => z.iter().map(|&v| sigmoid(v)).collect(),
            }
        } else {
            z.iter().map(|&v| v.max(0.0)).collect()
        };
        inputs.push(std::mem::replace(&mut current, next));
        pre.push(z);
    }
    let output = Tensor::new(vec![n, spec.output_dim()], current)?;
    Ok(Trace { rows: n, inputs, pre, output })
}

/// Backpropagates a gradient with respect to the final pre-activations.
pub fn backward_from_logits(
    spec: &MlpSpec,
    params: &ParamSet,
    trace: &Trace,
    d_logits: &[f64],
) -> Result<ParamSet> {
    let n = trace.rows;
    if d_logits.len() != n * spec.output_dim() {
        return Err(Error::Internal(format!(
            "output gradient has {} values, expected {}",
            d_logits.len(),
            n * spec.output_dim()
        )));
    }
    let mut grads = params.zeros_like();
    let mut delta = d_logits.to_vec();
    for l in (0..spec.num_layers()).rev() {
        let (fan_in, fan_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let input = &trace.inputs[l];
        {
            let gw = grads.tensor_mut(2 * l).values_mut();
            for i in 0..n {
                let d = &delta[i * fan_out..(i + 1) * fan_out];
                let x = &input[i * fan_in..(i + 1) * fan_in];
                for (o, &dv) in d.iter().enumerate() {
                    if dv != 0.0 {
                        for (g, &xv) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(x) {
                            *g += dv * xv;
                        }
                    }
                }
            }
        }
        {
            let gb = grads.tensor_mut(2 * l + 1).values_mut();
            for i in 0..n {
                for (g, &dv) in gb.iter_mut().zip(&delta[i * fan_out..(i + 1) * fan_out]) {
                    *g += dv;
                }
            }
        }
        if l > 0 {
            let w = params.tensor(2 * l).values();
            let z_prev = &trace.pre[l - 1];
            let mut next = vec![0.0; n * fan_in];
            for i in 0..n {
                let d = &delta[i * fan_out..(i + 1) * fan_out];
                let out = &mut next[i * fan_in..(i + 1) * fan_in];
                for (o, &dv) in d.iter().enumerate() {
                    for (a, &wv) in out.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *a += dv * wv;
                    }
                }
                for (a, &z) in out.iter_mut().zip(&z_prev[i * fan_in..(i + 1) * fan_in]) {
                    if z <= 0.0 {
                        *a = 0.0;
                    }
                }
            }
            delta = next;
        }
    }
    Ok(grads)
}

/// Backpropagates a gradient with respect to the network outputs, applying
/// the output activation's Jacobian first.
pub fn backward_from_outputs(
    spec: &MlpSpec,
    params: &ParamSet,
    trace: &Trace,
    d_out: &[f64],
) -> Result<ParamSet> {
    let k = spec.output_dim();
    let out = trace.output.values();
    if d_out.len() != out.len() {
        return Err(Error::Internal(format!(
            "output gradient has {} values, expected {}",
            d_out.len(),
            out.len()
        )));
    }
    let d_logits: Vec<f64> = match spec.output_activation {
        OutputActivation::Softmax => {
            let mut d = vec![0.0; out.len()];
            for i in 0..trace.rows {
                let p = &out[i * k..(i + 1) * k];
                let g = &d_out[i * k..(i + 1) * k];
                let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                for j in 0..k {
                    d[i * k + j] = p[j] * (g[j] - dot);
                }
            }
            d
        }
        OutputActivation::SigmoidScalar => {
            out.iter().zip(d_out).map(|(&s, &g)| g * s * (1.0 - s)).collect()
        }
    };
    backward_from_logits(spec, params, trace, &d_logits)
}

fn softmax_rows(z: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= sum;
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
