//! Experiment configuration: TOML schema, presets and validation.

use std::path::{Path, PathBuf};

use fedmix::data::{DirichletAxis, PartitionScheme, SplitFractions, SyntheticSpec};
use fedmix::federation::FedSchedule;
use fedmix::nn::{AdamConfig, MlpSpec};
use fedmix::personalization::PersonalizationSchedule;
use fedmix::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSource,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub partition: PartitionConfig,
    pub fedavg: FedAvgConfig,
    pub personalization: PersonalizationConfig,
    pub evaluation: EvaluationConfig,
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        num_classes: usize,
        dim: usize,
        n_total: usize,
        class_separation: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub global_test_size: usize,
    pub local_test_size: usize,
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Majority,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub scheme: SchemeKind,
    /// Majority fractions `p` or Dirichlet concentrations `alpha`.
    pub values: Vec<f64>,
    #[serde(default)]
    pub axis: DirichletAxis,
    pub num_clients: usize,
    pub samples_per_client: usize,
    /// Opt-out fractions `q`.
    pub opt_out: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedAvgConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub client_fraction: f64,
    pub validation_interval: usize,
    pub patience: usize,
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonalizationConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub eta_finetune: f64,
    pub eta_mixture: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Personalize every client instead of only the evaluated ones.
    pub all_clients: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub runs: usize,
    pub clients: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub learning_rates: Vec<f64>,
    /// Size of the class-balanced validation set scored per learning rate.
    pub validation_size: usize,
}

/// One (skew, q) combination of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridPoint {
    pub scheme: PartitionScheme,
    pub skew: f64,
    pub q: f64,
}

impl GridPoint {
    pub fn scheme_name(&self) -> &'static str {
        match self.scheme {
            PartitionScheme::MajorityFraction { .. } => "majority",
            PartitionScheme::Dirichlet { .. } => "dirichlet",
        }
    }

    /// Directory-safe label such as `majority-0.7_q-0`.
    pub fn label(&self) -> String {
        format!("{}-{}_q-{}", self.scheme_name(), self.skew, self.q)
    }
}

pub const PRESETS: [&str; 2] = ["desk", "smoke"];

/// Named configurations. `desk` is the default experiment scale.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let desk = ExperimentConfig {
        seed: 1,
        dataset: DatasetSource::Synthetic { num_classes: 10, dim: 20, n_total: 100_000, class_separation: 3.0 },
        data: DataConfig { global_test_size: 1000, local_test_size: 500, train_fraction: 0.8 },
        model: ModelConfig { hidden: vec![64, 64] },
        partition: PartitionConfig {
            scheme: SchemeKind::Majority,
            values: vec![0.2, 0.7, 1.0],
            axis: DirichletAxis::default(),
            num_clients: 100,
            samples_per_client: 100,
            opt_out: vec![0.0],
        },
        fedavg: FedAvgConfig {
            rounds: 300,
            local_epochs: 3,
            batch_size: 10,
            client_fraction: 0.05,
            validation_interval: 50,
            patience: 8,
            eta: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        },
        personalization: PersonalizationConfig {
            max_epochs: 500,
            batch_size: 10,
            patience: 25,
            eta_finetune: 1e-3,
            eta_mixture: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            all_clients: false,
        },
        evaluation: EvaluationConfig { runs: 4, clients: 20 },
        sweep: SweepConfig {
            learning_rates: vec![1e-7, 5e-7, 1e-6, 5e-6, 1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3],
            validation_size: 1000,
        },
    };
    match name {
        "desk" => Ok(desk),
        "smoke" => Ok(ExperimentConfig {
            dataset: DatasetSource::Synthetic { num_classes: 10, dim: 20, n_total: 20_000, class_separation: 3.0 },
            data: DataConfig { local_test_size: 100, ..desk.data },
            model: ModelConfig { hidden: vec![16, 16] },
            partition: PartitionConfig { values: vec![0.2, 1.0], num_clients: 10, ..desk.partition },
            fedavg: FedAvgConfig { rounds: 20, client_fraction: 0.3, validation_interval: 5, ..desk.fedavg },
            personalization: PersonalizationConfig { max_epochs: 30, patience: 5, ..desk.personalization },
            evaluation: EvaluationConfig { runs: 2, clients: 3 },
            sweep: SweepConfig { learning_rates: vec![1e-4, 1e-3, 1e-2], validation_size: 500 },
            ..desk
        }),
        other => Err(Error::Config(format!("unknown preset {other:?}; known presets: {}", PRESETS.join(", ")))),
    }
}

/// Recursively overlays `top` onto `base`. A table whose `kind` differs
/// from the base table's replaces it wholesale.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) if b.get("kind") == t.get("kind") || t.get("kind").is_none() => {
                merge(b, t)
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

fn config_error(source: &str, message: impl std::fmt::Display) -> Error {
    Error::Config(format!("{source}: {message}"))
}

/// Parses TOML text laid over `base`. Errors name the offending key path.
pub fn parse_config(text: &str, base: &ExperimentConfig, source: &str) -> Result<ExperimentConfig> {
    let top: toml::Table = text.parse().map_err(|e: toml::de::Error| config_error(source, e.message()))?;
    let mut merged = toml::Table::try_from(base).map_err(|e| Error::Internal(e.to_string()))?;
    merge(&mut merged, top);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(merged))
        .map_err(|e| config_error(source, format!("at `{}`: {}", e.path(), e.inner())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file on top of a preset (the `desk` preset by default).
pub fn load_config(path: Option<&Path>, preset_name: Option<&str>) -> Result<ExperimentConfig> {
    let base = preset(preset_name.unwrap_or("desk"))?;
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| config_error(&p.display().to_string(), format!("cannot read: {e}")))?;
            parse_config(&text, &base, &p.display().to_string())
        }
        None => {
            base.validate()?;
            Ok(base)
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if let DatasetSource::Synthetic { num_classes, dim, n_total, class_separation } = &self.dataset {
            SyntheticSpec {
                num_classes: *num_classes,
                dim: *dim,
                n_total: *n_total,
                class_separation: *class_separation,
            }
            .validate()?;
        }
        self.mlp_spec(2, 2).validate()?;
        self.split().validate()?;
        let p = &self.partition;
        if p.values.is_empty() || p.opt_out.is_empty() {
            return bad("partition.values and partition.opt_out must be non-empty".into());
        }
        for &v in &p.values {
            match p.scheme {
                SchemeKind::Majority if !(0.0..=1.0).contains(&v) => {
                    return bad(format!("partition.values: majority fraction {v} outside [0, 1]"))
                }
                SchemeKind::Dirichlet if !(v > 0.0 && v.is_finite()) => {
                    return bad(format!("partition.values: Dirichlet alpha {v} must be positive"))
                }
                _ => {}
            }
        }
        if p.num_clients == 0 || p.samples_per_client < 2 {
            return bad("partition.num_clients must be positive and samples_per_client at least 2".into());
        }
        let schedule = self.fed_schedule();
        schedule.validate()?;
        let target = schedule.participants_per_round(p.num_clients);
        for &q in &p.opt_out {
            if !(0.0..=1.0).contains(&q) {
                return bad(format!("partition.opt_out: fraction {q} outside [0, 1]"));
            }
            let opt_in = p.num_clients - (q * p.num_clients as f64).round() as usize;
            if opt_in < target {
                return bad(format!(
                    "partition.opt_out: q = {q} leaves {opt_in} opted-in clients for {target} participants per round"
                ));
            }
        }
        self.personalization_schedule().validate()?;
        if self.evaluation.runs == 0 || self.evaluation.clients == 0 {
            return bad("evaluation.runs and evaluation.clients must be positive".into());
        }
        if self.data.global_test_size == 0 || self.data.local_test_size == 0 {
            return bad("data test-set sizes must be positive".into());
        }
        let lrs = &self.sweep.learning_rates;
        if lrs.is_empty() || lrs.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("sweep.learning_rates must be non-empty and positive".into());
        }
        if lrs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sweep.learning_rates must be strictly increasing".into());
        }
        Ok(())
    }

    pub fn mlp_spec(&self, input: usize, classes: usize) -> MlpSpec {
        MlpSpec::classifier(input, &self.model.hidden, classes)
    }

    pub fn split(&self) -> SplitFractions {
        SplitFractions { train: self.data.train_fraction, validation: 1.0 - self.data.train_fraction }
    }

    pub fn fed_schedule(&self) -> FedSchedule {
        let f = &self.fedavg;
        FedSchedule {
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            batch_size: f.batch_size,
            client_fraction: f.client_fraction,
            validation_interval: f.validation_interval,
            patience: f.patience,
            adam: AdamConfig { eta: f.eta, beta1: f.beta1, beta2: f.beta2, epsilon: f.epsilon },
        }
    }

    pub fn personalization_schedule(&self) -> PersonalizationSchedule {
        let p = &self.personalization;
        let adam = |eta| AdamConfig { eta, beta1: p.beta1, beta2: p.beta2, epsilon: p.epsilon };
        PersonalizationSchedule {
            max_epochs: p.max_epochs,
            batch_size: p.batch_size,
            patience: p.patience,
            finetune: adam(p.eta_finetune),
            mixture: adam(p.eta_mixture),
        }
    }

    /// Every (skew, q) pair, skew-major.
    pub fn grid(&self) -> Vec<GridPoint> {
        let p = &self.partition;
        p.values
            .iter()
            .flat_map(|&skew| {
                p.opt_out.iter().map(move |&q| GridPoint {
                    scheme: match p.scheme {
                        SchemeKind::Majority => PartitionScheme::MajorityFraction { p: skew },
                        SchemeKind::Dirichlet => PartitionScheme::Dirichlet { alpha: skew, axis: p.axis },
                    },
                    skew,
                    q,
                })
            })
            .collect()
    }

    pub fn dataset_name(&self) -> String {
        match &self.dataset {
            DatasetSource::Synthetic { .. } => "synthetic".into(),
            DatasetSource::Idx { images, .. } => images
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "idx".into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for name in PRESETS {
            preset(name).unwrap().validate().unwrap();
        }
        assert!(matches!(preset("huge"), Err(Error::Config(_))));
    }

    #[test]
    fn file_overrides_preset() {
        let text = "seed = 9\n[fedavg]\nrounds = 12\n[partition]\nvalues = [0.5]\n";
        let cfg = parse_config(text, &preset("desk").unwrap(), "t.toml").unwrap();
        assert_eq!((cfg.seed, cfg.fedavg.rounds, cfg.partition.values.clone()), (9, 12, vec![0.5]));
        assert_eq!(cfg.fedavg.local_epochs, 3);
    }

    #[test]
    fn switching_dataset_kind_replaces_section() {
        let text = "[dataset]\nkind = \"idx\"\nimages = \"a.idx\"\nlabels = \"b.idx\"\n";
        let cfg = parse_config(text, &preset("desk").unwrap(), "t.toml").unwrap();
        assert!(matches!(cfg.dataset, DatasetSource::Idx { .. }));
        assert_eq!(cfg.dataset_name(), "a");
    }

    #[test]
    fn errors_name_the_key_path() {
        let err = parse_config("[fedavg]\nrounds = \"many\"\n", &preset("desk").unwrap(), "t.toml").unwrap_err();
        assert!(err.to_string().contains("fedavg.rounds"), "{err}");
        let err = parse_config("[fedavg]\nround = 3\n", &preset("desk").unwrap(), "t.toml").unwrap_err();
        assert!(err.to_string().contains("round"), "{err}");
    }

    #[test]
    fn everyone_opting_out_is_rejected() {
        let err = parse_config("[partition]\nopt_out = [1.0]\n", &preset("desk").unwrap(), "t.toml").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(parse_config("[partition]\nopt_out = [0.95]\n", &preset("desk").unwrap(), "t").is_ok());
    }

    #[test]
    fn grid_is_skew_major() {
        let mut cfg = preset("desk").unwrap();
        cfg.partition.values = vec![0.2, 1.0];
        cfg.partition.opt_out = vec![0.0, 0.5];
        let labels: Vec<String> = cfg.grid().iter().map(GridPoint::label).collect();
        assert_eq!(labels, ["majority-0.2_q-0", "majority-0.2_q-0.5", "majority-1_q-0", "majority-1_q-0.5"]);
    }
}
