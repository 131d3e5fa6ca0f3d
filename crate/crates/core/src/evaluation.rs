//! Four-way comparison of FedAvg, local-only, fine-tuned and mixture models.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataBundle, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{forward, AdamConfig, MlpSpec, ParamSet, Tensor};
use crate::personalization::{mixture_forward, MixtureModel, PersonalizationSchedule};
use crate::seeds;
use crate::training::{argmax, fit_early_stopping, SupervisedOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    FedAvg,
    Local,
    FineTuned,
    Mixture,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::FedAvg, Baseline::Local, Baseline::FineTuned, Baseline::Mixture];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::FedAvg => "fedavg",
            Baseline::Local => "local",
            Baseline::FineTuned => "finetuned",
            Baseline::Mixture => "mixture",
        }
    }
}

/// Percentage of rows whose argmax prediction matches the label.
pub fn accuracy<F>(predict: F, data: &LabeledDataset) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if data.is_empty() {
        return Err(Error::Data("accuracy of an empty dataset".into()));
    }
    let probs = predict(data.features())?;
    let correct = data.labels().iter().enumerate().filter(|&(i, &y)| argmax(probs.row(i)) == y).count();
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Local-only model: trained from fresh parameters with the personalization
/// schedule but at the FedAvg learning rate.
pub fn train_local_baseline<R: Rng + ?Sized>(
    spec: &MlpSpec,
    init: &ParamSet,
    bundle: &ClientDataBundle,
    schedule: &PersonalizationSchedule,
    fedavg_adam: AdamConfig,
    rng: &mut R,
) -> Result<SupervisedOutcome> {
    fit_early_stopping(
        spec,
        init,
        &bundle.train,
        &bundle.validation,
        schedule.max_epochs,
        schedule.batch_size,
        schedule.patience,
        fedavg_adam,
        "local",
        rng,
    )
}

/// `min(count, num_clients)` distinct client ids, sorted.
pub fn sample_eval_clients(num_clients: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeds::rng(seed, "eval-clients", 0);
    let mut ids = index::sample(&mut rng, num_clients, count.min(num_clients)).into_vec();
    ids.sort_unstable();
    ids
}

/// Trained models of one evaluated client.
#[derive(Debug, Clone)]
pub struct ClientModels {
    pub client_id: usize,
    pub local: ParamSet,
    pub fine_tuned: ParamSet,
    pub mixture: MixtureModel,
}

/// Identifies the grid point and run that produced a set of records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunContext {
    pub run_seed: u64,
    pub run: usize,
    pub scheme: String,
    pub skew: f64,
    pub q: f64,
    pub dataset: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub run_seed: u64,
    pub run: usize,
    pub client_id: usize,
    pub baseline: Baseline,
    pub local_accuracy: f64,
    pub global_accuracy: f64,
    pub scheme: String,
    pub skew: f64,
    pub q: f64,
    pub dataset: String,
}

/// Scores every baseline of every evaluated client on its local test set
/// and on the shared global test set.
pub fn evaluate_experiment(
    spec: &MlpSpec,
    w_g: &ParamSet,
    clients: &[ClientModels],
    bundles: &[ClientDataBundle],
    global_test: &LabeledDataset,
    ctx: &RunContext,
) -> Result<Vec<ResultRecord>> {
    let fedavg_global = accuracy(|x| forward(spec, w_g, x), global_test)?;
    let mut records = Vec::with_capacity(clients.len() * Baseline::ALL.len());
    for models in clients {
        let id = models.client_id;
        let bundle = bundles
            .get(id)
            .ok_or_else(|| Error::Internal(format!("no data bundle for evaluated client {id}")))?;
        if models.mixture.w_g.to_bytes() != w_g.to_bytes() {
            return Err(Error::Internal(format!("client {id} mixture holds a different global model")));
        }
        for baseline in Baseline::ALL {
            let (local, global) = match baseline {
                Baseline::FedAvg => (accuracy(|x| forward(spec, w_g, x), &bundle.local_test)?, fedavg_global),
                Baseline::Local => both(|x| forward(spec, &models.local, x), &bundle.local_test, global_test)?,
                Baseline::FineTuned => {
                    both(|x| forward(spec, &models.fine_tuned, x), &bundle.local_test, global_test)?
                }
                Baseline::Mixture => both(
                    |x| mixture_forward(&models.mixture, x).map(|(y, _)| y),
                    &bundle.local_test,
                    global_test,
                )?,
            };
            records.push(ResultRecord {
                run_seed: ctx.run_seed,
                run: ctx.run,
                client_id: id,
                baseline,
                local_accuracy: local,
                global_accuracy: global,
                scheme: ctx.scheme.clone(),
                skew: ctx.skew,
                q: ctx.q,
                dataset: ctx.dataset.clone(),
            });
        }
    }
    Ok(records)
}

fn both<F>(predict: F, local: &LabeledDataset, global: &LabeledDataset) -> Result<(f64, f64)>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    Ok((accuracy(&predict, local)?, accuracy(&predict, global)?))
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub baseline: Baseline,
    pub scheme: String,
    pub skew: f64,
    pub q: f64,
    pub dataset: String,
    pub mean_local_accuracy: f64,
    pub local_ci95: f64,
    pub mean_global_accuracy: f64,
    pub global_ci95: f64,
    /// Mean global accuracy divided by FedAvg's for the same grid point.
    pub global_fraction_of_fedavg: Option<f64>,
    pub runs: usize,
}

type GroupKey = (String, String, u64, u64, Baseline);

fn group_key(r: &ResultRecord) -> GroupKey {
    (r.dataset.clone(), r.scheme.clone(), r.skew.to_bits(), r.q.to_bits(), r.baseline)
}

/// Mean and normal-approximation 95% half-width `1.96 s / sqrt(n)`.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Client means per run, then mean and CI over runs, per grid point and
/// baseline.
pub fn summarize(records: &[ResultRecord]) -> Vec<SummaryRow> {
    // group -> run -> (local sum, global sum, count)
    let mut groups: BTreeMap<GroupKey, BTreeMap<usize, (f64, f64, usize)>> = BTreeMap::new();
    for r in records {
        let run = groups.entry(group_key(r)).or_default().entry(r.run).or_default();
        run.0 += r.local_accuracy;
        run.1 += r.global_accuracy;
        run.2 += 1;
    }
    let mut rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((dataset, scheme, skew, q, baseline), runs)| {
            let local: Vec<f64> = runs.values().map(|(l, _, n)| l / *n as f64).collect();
            let global: Vec<f64> = runs.values().map(|(_, g, n)| g / *n as f64).collect();
            let (mean_local_accuracy, local_ci95) = mean_ci(&local);
            let (mean_global_accuracy, global_ci95) = mean_ci(&global);
            SummaryRow {
                baseline,
                scheme,
                skew: f64::from_bits(skew),
                q: f64::from_bits(q),
                dataset,
                mean_local_accuracy,
                local_ci95,
                mean_global_accuracy,
                global_ci95,
                global_fraction_of_fedavg: None,
                runs: runs.len(),
            }
        })
        .collect();
    let fedavg: Vec<(String, String, u64, u64, f64)> = rows
        .iter()
        .filter(|r| r.baseline == Baseline::FedAvg)
        .map(|r| (r.dataset.clone(), r.scheme.clone(), r.skew.to_bits(), r.q.to_bits(), r.mean_global_accuracy))
        .collect();
    for row in &mut rows {
        row.global_fraction_of_fedavg = fedavg
            .iter()
            .find(|f| f.0 == row.dataset && f.1 == row.scheme && f.2 == row.skew.to_bits() && f.3 == row.q.to_bits())
            .filter(|f| f.4 > 0.0)
            .map(|f| row.mean_global_accuracy / f.4);
    }
    rows
}

pub fn write_records<W: std::io::Write>(records: &[ResultRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary<W: std::io::Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
