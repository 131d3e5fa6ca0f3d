//! End-to-end pipeline: data, FedAvg, personalization, evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use fedmix::data::{
    gen_synthetic, load_idx, make_balanced_holdout, make_bundles, make_global_test, partition, ClassPool,
    ClientDataBundle, HeldOut, LabeledDataset, PartitionSpec, SyntheticSpec,
};
use fedmix::evaluation::{
    evaluate_experiment, sample_eval_clients, summarize, train_local_baseline, write_records, write_summary,
    ClientModels, ResultRecord, RunContext,
};
use fedmix::federation::{init_federation, run_fedavg, write_round_log, FedAvgOutcome};
use fedmix::nn::{forward, MlpSpec, ParamSet};
use fedmix::personalization::{
    fine_tune, init_gate, train_mixture, write_personalization_log, MixtureModel, PersonalizationSchedule,
};
use fedmix::training::EpochLog;
use fedmix::{seeds, Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DatasetSource, ExperimentConfig, GridPoint};

/// Seeds of one pipeline execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RunSeeds {
    pub run_seed: u64,
    /// Shared by every grid point of the same run index.
    pub data: u64,
    pub partition: u64,
    pub bundles: u64,
    pub federation: u64,
    pub evaluation: u64,
}

impl RunSeeds {
    pub fn derive(master: u64, point: &GridPoint, run: usize) -> Self {
        let run_seed = seeds::derive(master, &format!("run/{}", point.label()), run as u64);
        Self {
            run_seed,
            data: seeds::derive(master, "data", run as u64),
            partition: seeds::derive(run_seed, "partition", 0),
            bundles: seeds::derive(run_seed, "bundles", 0),
            federation: seeds::derive(run_seed, "federation", 0),
            evaluation: seeds::derive(run_seed, "evaluation", 0),
        }
    }
}

/// Derives the seeds of every (grid point, run) and rejects collisions.
pub fn derive_all_seeds(cfg: &ExperimentConfig) -> Result<Vec<(GridPoint, usize, RunSeeds)>> {
    let mut all = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for point in cfg.grid() {
        for run in 0..cfg.evaluation.runs {
            let s = RunSeeds::derive(cfg.seed, &point, run);
            if !seen.insert(s.run_seed) {
                return Err(Error::Internal(format!("seed collision at {} run {run}", point.label())));
            }
            all.push((point, run, s));
        }
    }
    Ok(all)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub grid_point: String,
    pub scheme: String,
    pub skew: f64,
    pub q: f64,
    pub run: usize,
    pub seeds: RunSeeds,
    pub rounds_run: usize,
    pub best_val_loss: f64,
    pub opt_in_clients: usize,
    pub evaluated_clients: Vec<usize>,
    pub personalized_clients: usize,
    /// `train_mixture` calls after which the global model was verified unchanged.
    pub freeze_checks: usize,
    pub local_test_shortfall: usize,
    pub directory: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub status: String,
    pub error: Option<String>,
    pub config: ExperimentConfig,
    pub runs: Vec<RunManifest>,
}

/// Client population of one grid point and run.
pub struct Population {
    pub dataset: LabeledDataset,
    pub global_test: HeldOut,
    pub partitions: Vec<Vec<usize>>,
    pub bundles: Vec<ClientDataBundle>,
    pub spec: MlpSpec,
}

impl Population {
    /// Rows used by the global test set or any client partition.
    pub fn used_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> =
            self.global_test.indices.iter().chain(self.partitions.iter().flatten()).copied().collect();
        rows.sort_unstable();
        rows.dedup();
        rows
    }
}

/// Loads IDX data once; synthetic data is regenerated per run seed.
pub fn load_base(cfg: &ExperimentConfig) -> Result<Option<LabeledDataset>> {
    match &cfg.dataset {
        DatasetSource::Idx { images, labels } => Ok(Some(load_idx(images, labels)?)),
        DatasetSource::Synthetic { .. } => Ok(None),
    }
}

pub fn build_population(
    cfg: &ExperimentConfig,
    base: Option<&LabeledDataset>,
    point: &GridPoint,
    s: &RunSeeds,
) -> Result<Population> {
    let dataset = match (&cfg.dataset, base) {
        (DatasetSource::Synthetic { num_classes, dim, n_total, class_separation }, _) => gen_synthetic(
            &SyntheticSpec {
                num_classes: *num_classes,
                dim: *dim,
                n_total: *n_total,
                class_separation: *class_separation,
            },
            s.data,
        )?,
        (DatasetSource::Idx { .. }, Some(d)) => d.clone(),
        (DatasetSource::Idx { .. }, None) => return Err(Error::Internal("IDX dataset not loaded".into())),
    };
    let global_test = make_global_test(&dataset, cfg.data.global_test_size, seeds::derive(s.data, "global-test", 0))?;
    let pool = ClassPool::new(&dataset, &global_test.indices);
    let partitions = partition(
        &pool,
        &PartitionSpec {
            scheme: point.scheme,
            num_clients: cfg.partition.num_clients,
            samples_per_client: cfg.partition.samples_per_client,
            seed: s.partition,
        },
    )?;
    let mut pop = Population {
        spec: cfg.mlp_spec(dataset.dim(), dataset.num_classes()),
        dataset,
        global_test,
        partitions,
        bundles: Vec::new(),
    };
    let test_pool = ClassPool::new(&pop.dataset, &pop.used_rows());
    pop.bundles =
        make_bundles(&pop.dataset, &test_pool, &pop.partitions, cfg.split(), cfg.data.local_test_size, s.bundles)?;
    Ok(pop)
}

/// Every trained model of one client plus its personalization log.
pub struct Personalized {
    pub models: ClientModels,
    pub log: Vec<EpochLog>,
}

/// Fine-tunes, trains the mixture and the local-only baseline of one
/// client. Fails if the global model changes during mixture training.
pub fn personalize_client(
    spec: &MlpSpec,
    w_g: &ParamSet,
    bundle: &ClientDataBundle,
    client: usize,
    schedule: &PersonalizationSchedule,
    fed_adam: fedmix::nn::AdamConfig,
    run_seed: u64,
) -> Result<Personalized> {
    let id = client as u64;
    let ft = fine_tune(spec, w_g, bundle, schedule, &mut seeds::rng(run_seed, "finetune", id))?;
    let gate = init_gate(spec, &mut seeds::rng(run_seed, "gate-init", id));
    let mix = MixtureModel::new(spec, w_g.clone(), ft.params.clone(), gate)?;
    let before = mix.w_g.to_bytes();
    let trained = train_mixture(&mix, bundle, schedule, &mut seeds::rng(run_seed, "mixture", id))?;
    if mix.w_g.to_bytes() != before || mix.w_g.to_bytes() != w_g.to_bytes() {
        return Err(Error::Internal("global expert changed during mixture training".into()));
    }
    let init = spec.init_params(&mut seeds::rng(run_seed, "local-init", id));
    let local = train_local_baseline(spec, &init, bundle, schedule, fed_adam, &mut seeds::rng(run_seed, "local", id))?;
    let mut log = ft.log;
    log.extend(trained.log);
    Ok(Personalized {
        models: ClientModels {
            client_id: client,
            local: local.params,
            fine_tuned: ft.params,
            mixture: MixtureModel { w_s: trained.w_s, w_h: trained.w_h, ..mix },
        },
        log,
    })
}

/// Outcome of a single pipeline execution.
pub struct RunOutput {
    pub records: Vec<ResultRecord>,
    pub manifest: RunManifest,
    pub fedavg: FedAvgOutcome,
}

fn create_file(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(fs::File::create(path)?)
}

/// Runs data generation, FedAvg, personalization and evaluation for one
/// grid point and run, writing logs and the global checkpoint under `dir`.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    base: Option<&LabeledDataset>,
    point: &GridPoint,
    run: usize,
    s: &RunSeeds,
    dir: &Path,
) -> Result<RunOutput> {
    let pop = build_population(cfg, base, point, s)?;
    let shortfall = pop.bundles.iter().map(|b| b.local_test_shortfall(cfg.data.local_test_size)).sum();
    let k = pop.bundles.len();
    let mut fed = init_federation(&pop.spec, pop.bundles.clone(), cfg.fed_schedule(), point.q, s.federation)?;
    let outcome = run_fedavg(&mut fed)?;
    write_round_log(&outcome.log, create_file(&dir.join("round_log.csv"))?)?;
    outcome.best_w_g.save(dir.join("global.params"))?;
    let opt_in_clients = fed.opt_in_ids().len();
    let bundles: Vec<ClientDataBundle> = fed.clients.into_iter().map(|c| c.bundle).collect();

    let evaluated = sample_eval_clients(k, cfg.evaluation.clients, s.evaluation);
    let targets: Vec<usize> = if cfg.personalization.all_clients { (0..k).collect() } else { evaluated.clone() };
    let schedule = cfg.personalization_schedule();
    let fed_adam = cfg.fed_schedule().adam;
    let w_g = &outcome.best_w_g;
    let personalized: Vec<Personalized> = targets
        .par_iter()
        .map(|&id| {
            personalize_client(&pop.spec, w_g, &bundles[id], id, &schedule, fed_adam, s.run_seed)
                .map_err(|e| e.for_client(id))
        })
        .collect::<Result<_>>()?;
    for p in &personalized {
        let path = dir.join("personalization").join(format!("client_{}.csv", p.models.client_id));
        write_personalization_log(&p.log, create_file(&path)?)?;
    }
    let models: Vec<ClientModels> = personalized
        .into_iter()
        .filter(|p| evaluated.binary_search(&p.models.client_id).is_ok())
        .map(|p| p.models)
        .collect();

    let ctx = RunContext {
        run_seed: s.run_seed,
        run,
        scheme: point.scheme_name().into(),
        skew: point.skew,
        q: point.q,
        dataset: cfg.dataset_name(),
    };
    let records = evaluate_experiment(&pop.spec, w_g, &models, &bundles, &pop.global_test.data, &ctx)?;
    Ok(RunOutput {
        records,
        manifest: RunManifest {
            grid_point: point.label(),
            scheme: point.scheme_name().into(),
            skew: point.skew,
            q: point.q,
            run,
            seeds: *s,
            rounds_run: outcome.rounds_run,
            best_val_loss: outcome.best_val_loss,
            opt_in_clients,
            evaluated_clients: evaluated,
            personalized_clients: targets.len(),
            freeze_checks: targets.len(),
            local_test_shortfall: shortfall,
            directory: dir.to_path_buf(),
        },
        fedavg: outcome,
    })
}

/// Everything an experiment produced.
pub struct ExperimentOutput {
    pub records: Vec<ResultRecord>,
    pub manifest: Manifest,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn new_manifest(cfg: &ExperimentConfig) -> Manifest {
    Manifest {
        tool: "fedmix".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        status: "running".into(),
        error: None,
        config: cfg.clone(),
        runs: Vec::new(),
    }
}

/// Runs every grid point and run in order. Writes `results.csv`,
/// `summary.csv` and `manifest.json` into `out`; on failure the manifest
/// records the error next to the artifacts completed so far.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutput> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let plan = derive_all_seeds(cfg)?;
    let mut manifest = new_manifest(cfg);
    let mut records = Vec::new();
    let result = (|| -> Result<()> {
        let base = load_base(cfg)?;
        for (point, run, s) in &plan {
            let dir = out.join("runs").join(point.label()).join(format!("run_{run}"));
            log::info!("{} run {run}", point.label());
            let r = run_pipeline(cfg, base.as_ref(), point, *run, s, &dir)?;
            records.extend(r.records);
            manifest.runs.push(r.manifest);
        }
        Ok(())
    })();
    write_records(&records, create_file(&out.join("results.csv"))?)?;
    write_summary(&summarize(&records), create_file(&out.join("summary.csv"))?)?;
    match result {
        Ok(()) => {
            manifest.status = "complete".into();
            write_json(&out.join("manifest.json"), &manifest)?;
            Ok(ExperimentOutput { records, manifest })
        }
        Err(e) => {
            manifest.status = "failed".into();
            manifest.error = Some(e.to_string());
            write_json(&out.join("manifest.json"), &manifest)?;
            Err(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub learning_rate: f64,
    pub status: String,
    pub best_val_loss: Option<f64>,
    pub validation_accuracy: Option<f64>,
    pub rounds_run: usize,
    pub best: bool,
}

/// FedAvg once per learning rate on the first grid point, scoring each
/// best checkpoint on a class-balanced validation set. Diverged runs are
/// marked failed and cannot be selected.
pub fn run_sweep(cfg: &ExperimentConfig, learning_rates: &[f64], out: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if learning_rates.is_empty() {
        return Err(Error::Config("sweep needs at least one learning rate".into()));
    }
    fs::create_dir_all(out)?;
    let point = cfg.grid()[0];
    let s = RunSeeds::derive(cfg.seed, &point, 0);
    let base = load_base(cfg)?;
    let pop = build_population(cfg, base.as_ref(), &point, &s)?;
    let holdout =
        make_balanced_holdout(&pop.dataset, cfg.sweep.validation_size, &pop.used_rows(), seeds::derive(s.data, "sweep", 0))?;
    let mut rows = Vec::with_capacity(learning_rates.len());
    for &lr in learning_rates {
        let mut schedule = cfg.fed_schedule();
        schedule.adam.eta = lr;
        let mut fed = init_federation(&pop.spec, pop.bundles.clone(), schedule, point.q, s.federation)?;
        let row = match run_fedavg(&mut fed) {
            Ok(o) if o.best_val_loss.is_finite() => {
                let probs = forward(&pop.spec, &o.best_w_g, holdout.data.features())?;
                let (_, acc) = fedmix::training::score(&probs, holdout.data.labels())?;
                SweepRow {
                    learning_rate: lr,
                    status: "ok".into(),
                    best_val_loss: Some(o.best_val_loss),
                    validation_accuracy: Some(acc),
                    rounds_run: o.rounds_run,
                    best: false,
                }
            }
            Ok(o) => failed(lr, o.rounds_run),
            Err(e) if e.is_numeric() => {
                log::warn!("learning rate {lr} diverged: {e}");
                failed(lr, 0)
            }
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if let Some(acc) = r.validation_accuracy {
            if best.is_none_or(|b| acc > rows[b].validation_accuracy.unwrap_or(f64::NEG_INFINITY)) {
                best = Some(i);
            }
        }
    }
    if let Some(b) = best {
        rows[b].best = true;
    }
    let mut w = csv::Writer::from_writer(create_file(&out.join("sweep_summary.csv"))?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut manifest = new_manifest(cfg);
    manifest.status = "complete".into();
    write_json(&out.join("sweep_manifest.json"), &manifest)?;
    Ok(rows)
}

fn failed(lr: f64, rounds_run: usize) -> SweepRow {
    SweepRow {
        learning_rate: lr,
        status: "failed".into(),
        best_val_loss: None,
        validation_accuracy: None,
        rounds_run,
        best: false,
    }
}
