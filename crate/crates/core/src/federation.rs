//! Round-based federated averaging.
//!
//! Each round samples participants among the opted-in clients, trains a
//! copy of the global model on each of them for a few local epochs and
//! replaces the global model with the size-weighted mean of the copies.
//! Every `validation_interval` rounds the new global model is scored on the
//! participants' validation sets and the best one so far is kept.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClientDataBundle;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, MlpSpec, ParamSet};
use crate::seeds;
use crate::training::{evaluate, train_epoch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedSchedule {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub client_fraction: f64,
    pub validation_interval: usize,
    /// Validation checkpoints without improvement before stopping.
    pub patience: usize,
    pub adam: AdamConfig,
}

impl Default for FedSchedule {
    fn default() -> Self {
        Self {
            rounds: 300,
            local_epochs: 3,
            batch_size: 10,
            client_fraction: 0.05,
            validation_interval: 50,
            patience: 8,
            adam: AdamConfig::with_eta(1e-3),
        }
    }
}

impl FedSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.batch_size == 0 || self.validation_interval == 0 || self.patience == 0 {
            return Err(Error::Config(
                "rounds, batch_size, validation_interval and patience must be positive".into(),
            ));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "client_fraction {} must lie in (0, 1]",
                self.client_fraction
            )));
        }
        if self.adam.eta.is_nan() || self.adam.eta <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Participants per round: `round(C * K)`, at least one.
    pub fn participants_per_round(&self, num_clients: usize) -> usize {
        ((self.client_fraction * num_clients as f64).round() as usize).max(1)
    }
}

#[derive(Debug, Clone)]
pub struct GlobalModelState {
    pub w_g: ParamSet,
    pub round: usize,
    pub best_w_g: ParamSet,
    pub best_val_loss: f64,
    /// Checkpoints since `best_val_loss` last improved.
    pub checkpoints_since_best: usize,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub bundle: ClientDataBundle,
    /// Shuffling stream used by this client's local training.
    pub rng: ChaCha8Rng,
}

impl ClientState {
    pub fn opt_in(&self) -> bool {
        self.bundle.opt_in
    }
}

/// One communication round. Validation fields are set on checkpoint rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub mean_train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub participants: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Federation {
    pub spec: MlpSpec,
    pub schedule: FedSchedule,
    pub global: GlobalModelState,
    pub clients: Vec<ClientState>,
    /// Ids of every client whose update entered an aggregation.
    pub contributors: BTreeSet<usize>,
    rng: ChaCha8Rng,
    initial_w_g: ParamSet,
}

/// Result of [`run_fedavg`].
#[derive(Debug, Clone)]
pub struct FedAvgOutcome {
    pub best_w_g: ParamSet,
    pub best_val_loss: f64,
    pub rounds_run: usize,
    pub log: Vec<RoundLog>,
}

/// Builds the global model from `seed` and marks `round(q * K)` clients,
/// chosen by a seeded shuffle, as opted out.
pub fn init_federation(
    spec: &MlpSpec,
    bundles: Vec<ClientDataBundle>,
    schedule: FedSchedule,
    opt_out_fraction: f64,
    seed: u64,
) -> Result<Federation> {
    spec.validate()?;
    schedule.validate()?;
    if !(0.0..=1.0).contains(&opt_out_fraction) {
        return Err(Error::Config(format!("opt-out fraction {opt_out_fraction} outside [0, 1]")));
    }
    let k = bundles.len();
    if k == 0 {
        return Err(Error::Config("federation needs at least one client".into()));
    }
    let w_g = spec.init_params(&mut seeds::rng(seed, "global-init", 0));

    let n_out = (opt_out_fraction * k as f64).round() as usize;
    let mut ids: Vec<usize> = (0..k).collect();
    ids.shuffle(&mut seeds::rng(seed, "opt-out", 0));
    let opted_out: BTreeSet<usize> = ids[..n_out].iter().copied().collect();

    let clients: Vec<ClientState> = bundles
        .into_iter()
        .enumerate()
        .map(|(id, mut bundle)| {
            bundle.opt_in = !opted_out.contains(&id);
            ClientState { id, bundle, rng: seeds::rng(seed, "client-stream", id as u64) }
        })
        .collect();

    let target = schedule.participants_per_round(k);
    let opt_in = k - n_out;
    if opt_in < target {
        return Err(Error::Config(format!(
            "{opt_in} opted-in clients cannot fill {target} participant slots per round \
             (opt-out fraction {opt_out_fraction})"
        )));
    }

    Ok(Federation {
        spec: spec.clone(),
        schedule,
        global: GlobalModelState {
            w_g: w_g.clone(),
            round: 0,
            best_w_g: w_g.clone(),
            best_val_loss: f64::INFINITY,
            checkpoints_since_best: 0,
        },
        clients,
        contributors: BTreeSet::new(),
        rng: seeds::rng(seed, "participants", 0),
        initial_w_g: w_g,
    })
}

impl Federation {
    pub fn opt_in_ids(&self) -> Vec<usize> {
        self.clients.iter().filter(|c| c.opt_in()).map(|c| c.id).collect()
    }

    /// The global model before any training.
    pub fn initial_w_g(&self) -> &ParamSet {
        &self.initial_w_g
    }

    /// Participant count per round. Opting out does not shrink it: the
    /// effective sampling fraction over opted-in clients rises instead.
    pub fn target_participants(&self) -> usize {
        self.schedule.participants_per_round(self.clients.len())
    }

    /// [`fedavg_aggregate`] that also records the contributing ids.
    pub fn aggregate(&mut self, updates: &[(usize, ParamSet, usize)]) -> Result<ParamSet> {
        for (id, _, _) in updates {
            if !self.clients[*id].opt_in() {
                return Err(Error::Internal(format!("opted-out client {id} reached aggregation")));
            }
            self.contributors.insert(*id);
        }
        fedavg_aggregate(updates)
    }
}

/// Uniform sample of `target` ids without replacement, returned sorted.
pub fn select_participants(opt_in: &[usize], target: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if opt_in.len() < target {
        return Err(Error::Config(format!(
            "only {} opted-in clients for {target} participant slots",
            opt_in.len()
        )));
    }
    let mut picked: Vec<usize> =
        index::sample(rng, opt_in.len(), target).into_iter().map(|i| opt_in[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// `local_epochs` of mini-batch Adam from a copy of `w_g` with a fresh
/// optimizer. Returns the new parameters, the train-set size and the mean
/// mini-batch loss (or the starting train loss if no step was taken).
pub fn local_update(
    spec: &MlpSpec,
    client: &mut ClientState,
    w_g: &ParamSet,
    schedule: &FedSchedule,
) -> Result<(ParamSet, usize, f64)> {
    if !client.opt_in() {
        return Err(Error::Internal(format!("client {} opted out of training", client.id)));
    }
    let data = &client.bundle.train;
    let mut params = w_g.clone();
    let mut adam = AdamState::new(&params, schedule.adam);
    let mut losses = Vec::with_capacity(schedule.local_epochs);
    for _ in 0..schedule.local_epochs {
        let loss = train_epoch(spec, &mut params, &mut adam, data, schedule.batch_size, &mut client.rng)
            .map_err(|e| e.for_client(client.id))?;
        losses.push(loss);
    }
    let loss = if losses.is_empty() {
        evaluate(spec, &params, data).map_err(|e| e.for_client(client.id))?.0
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    Ok((params, data.len(), loss))
}

/// Weighted mean `sum_k n_k w_k / sum_k n_k`, accumulated in ascending id
/// order as `w_first + sum_k (n_k / n) (w_k - w_first)` so that identical
/// inputs come back bit-for-bit.
pub fn fedavg_aggregate(updates: &[(usize, ParamSet, usize)]) -> Result<ParamSet> {
    let mut order: Vec<&(usize, ParamSet, usize)> = updates.iter().collect();
    order.sort_by_key(|(id, _, _)| *id);
    let (_, first, _) = *order.first().ok_or_else(|| Error::Internal("nothing to aggregate".into()))?;
    let total: usize = order.iter().map(|(_, _, n)| n).sum();
    if total == 0 {
        return Err(Error::Internal("aggregation weights sum to zero".into()));
    }
    let base = first.flatten();
    let mut acc = base.clone();
    for (id, w, n) in &order {
        if !w.same_layout(first) {
            return Err(Error::Internal(format!("client {id} update has a different parameter layout")));
        }
        let weight = *n as f64 / total as f64;
        for ((a, x), b) in acc.iter_mut().zip(w.flatten()).zip(&base) {
            *a += weight * (x - b);
        }
    }
    ParamSet::unflatten(&acc, first)
}

/// Runs the full protocol and returns the best checkpointed global model.
pub fn run_fedavg(fed: &mut Federation) -> Result<FedAvgOutcome> {
    let schedule = fed.schedule;
    let target = fed.target_participants();
    let opt_in = fed.opt_in_ids();
    let mut log = Vec::with_capacity(schedule.rounds);
    let mut rounds_run = 0;

    for round in 1..=schedule.rounds {
        let selected = select_participants(&opt_in, target, &mut fed.rng).map_err(|e| e.in_round(round))?;
        let snapshot = fed.global.w_g.clone();
        let spec = fed.spec.clone();
        let results: Vec<Result<(usize, ParamSet, usize, f64)>> = fed
            .clients
            .par_iter_mut()
            .filter(|c| selected.binary_search(&c.id).is_ok())
            .map(|c| local_update(&spec, c, &snapshot, &schedule).map(|(w, n, l)| (c.id, w, n, l)))
            .collect();
        let mut updates = Vec::with_capacity(results.len());
        let mut train_loss = 0.0;
        for r in results {
            let (id, w, n, l) = r.map_err(|e| e.in_round(round))?;
            train_loss += l;
            updates.push((id, w, n));
        }
        let w_g = fed.aggregate(&updates).map_err(|e| e.in_round(round))?;
        if !w_g.is_finite() {
            return Err(Error::Numeric("aggregated model is non-finite".into()).in_round(round));
        }
        fed.global.w_g = w_g;
        fed.global.round = round;
        rounds_run = round;

        let mut entry = RoundLog {
            round,
            mean_train_loss: train_loss / selected.len() as f64,
            val_loss: None,
            val_acc: None,
            participants: selected.clone(),
        };
        if round % schedule.validation_interval == 0 || round == schedule.rounds {
            let mut loss_sum = 0.0;
            let mut acc_sum = 0.0;
            for &id in &selected {
                let (l, a) = evaluate(&fed.spec, &fed.global.w_g, &fed.clients[id].bundle.validation)
                    .map_err(|e| e.for_client(id).in_round(round))?;
                loss_sum += l;
                acc_sum += a;
            }
            let val_loss = loss_sum / selected.len() as f64;
            entry.val_loss = Some(val_loss);
            entry.val_acc = Some(acc_sum / selected.len() as f64);
            let g = &mut fed.global;
            if val_loss < g.best_val_loss {
                g.best_val_loss = val_loss;
                g.best_w_g = g.w_g.clone();
                g.checkpoints_since_best = 0;
            } else {
                g.checkpoints_since_best += 1;
            }
            log.push(entry);
            if fed.global.checkpoints_since_best >= schedule.patience {
                log::info!("early stop at round {round}");
                break;
            }
        } else {
            log.push(entry);
        }
    }

    Ok(FedAvgOutcome {
        best_w_g: fed.global.best_w_g.clone(),
        best_val_loss: fed.global.best_val_loss,
        rounds_run,
        log,
    })
}

/// Writes round logs as CSV: `round,mean_train_loss,val_loss,val_acc,participants`.
pub fn write_round_log<W: std::io::Write>(log: &[RoundLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "mean_train_loss", "val_loss", "val_acc", "participants"])?;
    for r in log {
        let ids: Vec<String> = r.participants.iter().map(usize::to_string).collect();
        w.write_record([
            r.round.to_string(),
            r.mean_train_loss.to_string(),
            r.val_loss.map(|v| v.to_string()).unwrap_or_default(),
            r.val_acc.map(|v| v.to_string()).unwrap_or_default(),
            ids.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}
