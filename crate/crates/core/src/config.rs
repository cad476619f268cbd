//! Experiment configuration in a flat `key = value` text format.
//!
//! Lines starting with `#` are comments; anything after a `#` on a value line
//! is ignored too. Absent keys take the defaults listed in [`KEYS`]: two
//! clients, sigma 0.8, clip 1.5, delta 1e-5, batch 32, learning rate 0.002
//! and 30 rounds. Command-line overrides are applied after the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::correction::{CorrectionConfig, CorrectionMode};
use crate::data::{self, ClientShard, Dataset};
use crate::dp::{DpConfig, SamplingMode};
use crate::error::{Error, Result};
use crate::federation::{Algorithm, ClientSampling, FederationConfig, Setup, Weighting};
use crate::model::MlpSpec;
use crate::rng::{self, Purpose};

/// Every recognised key with its default value.
pub const KEYS: &[(&str, &str)] = &[
    ("dataset", "mnist"),
    ("mnist_dir", "data/mnist"),
    ("train_images", ""),
    ("train_labels", ""),
    ("test_images", ""),
    ("test_labels", ""),
    ("synthetic_classes", "10"),
    ("synthetic_per_class", "100"),
    ("synthetic_test_per_class", "20"),
    ("synthetic_dim", "20"),
    ("synthetic_spread", "0.5"),
    ("synthetic_seed", "0"),
    ("train_subsample", "0"),
    ("test_subsample", "0"),
    ("partition", "iid"),
    ("label_sets", "0-4;5-9"),
    ("hidden", "128"),
    ("n_clients", "2"),
    ("clients_per_round", "0"),
    ("local_steps", "1"),
    ("rounds", "30"),
    ("eta", "0.002"),
    ("algorithm", "gcfl"),
    ("weighting", "uniform"),
    ("prox_mu", "0.01"),
    ("sigma", "0.8"),
    ("clip", "1.5"),
    ("delta", "1e-5"),
    ("batch_size", "32"),
    ("sampling_rate", "0"),
    ("sampling_mode", "fixed_size"),
    ("correction_mode", "reference"),
    ("num_references", "0"),
    ("order_seed", "0"),
    ("seeds", "0,1,2"),
    ("target_epsilon", "0"),
    ("eval_batch_size", "1024"),
    ("parallel", "true"),
    ("record_wall_time", "false"),
    ("out_dir", "out"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    LabelSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticParams {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub idx: IdxPaths,
    pub synthetic: SyntheticParams,
    /// 0 keeps the full split.
    pub train_subsample: usize,
    pub test_subsample: usize,
    pub partition: PartitionKind,
    pub label_sets: String,
    pub hidden: Vec<usize>,
    pub federation: FederationConfig,
    pub dp: DpConfig,
    pub correction: CorrectionConfig,
    pub batch_size: usize,
    /// Explicit per-step sampling rate; when absent it is `batch_size / |D_i|`.
    pub sampling_rate: Option<f64>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Default,
    Line(usize),
    Override,
}

fn valid_keys() -> String {
    KEYS.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ")
}

fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

fn split_pair(text: &str) -> Option<(String, String)> {
    let (k, v) = text.split_once('=')?;
    let k = k.trim();
    if k.is_empty() {
        return None;
    }
    Some((k.to_string(), v.trim().to_string()))
}

/// Raw key/value pairs with their origin, used to attach line numbers to
/// value errors.
struct RawConfig {
    values: BTreeMap<String, (String, Origin)>,
}

impl RawConfig {
    fn defaults() -> Self {
        RawConfig {
            values: KEYS
                .iter()
                .map(|(k, v)| (k.to_string(), (v.to_string(), Origin::Default)))
                .collect(),
        }
    }

    fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = split_pair(content).ok_or_else(|| Error::Parse {
                line,
                message: format!("expected `key = value`, found `{content}`"),
            })?;
            if !is_known(&k) {
                return Err(Error::UnknownKey {
                    key: k,
                    valid: valid_keys(),
                });
            }
            self.values.insert(k, (v, Origin::Line(line)));
        }
        Ok(())
    }

    fn apply_override(&mut self, text: &str) -> Result<()> {
        let (k, v) = split_pair(text).ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("override `{text}` is not of the form key=value"),
        })?;
        if !is_known(&k) {
            return Err(Error::UnknownKey {
                key: k,
                valid: valid_keys(),
            });
        }
        self.values.insert(k, (v, Origin::Override));
        Ok(())
    }

    fn str(&self, key: &str) -> &str {
        &self.values[key].0
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let (value, origin) = &self.values[key];
        value.parse().map_err(|_| {
            let message = format!("cannot parse `{value}` for key `{key}`");
            match origin {
                Origin::Line(line) => Error::Parse {
                    line: *line,
                    message,
                },
                Origin::Override => Error::Parse {
                    line: 0,
                    message: format!("{message} (command-line override)"),
                },
                Origin::Default => Error::Parse { line: 0, message },
            }
        })
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let (value, origin) = &self.values[key];
        value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|_| Error::Parse {
                    line: match origin {
                        Origin::Line(l) => *l,
                        _ => 0,
                    },
                    message: format!("cannot parse `{s}` in list for key `{key}`"),
                })
            })
            .collect()
    }

    fn choice<T: Copy>(&self, key: &'static str, options: &[(&str, T)]) -> Result<T> {
        let v = self.str(key);
        options
            .iter()
            .find(|(name, _)| *name == v)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                Error::validation(
                    key,
                    format!(
                        "one of {} (got `{v}`)",
                        options
                            .iter()
                            .map(|(n, _)| *n)
                            .collect::<Vec<_>>()
                            .join(", ")
                    ),
                )
            })
    }
}

fn positive_or_none(v: f64) -> Option<f64> {
    (v > 0.0).then_some(v)
}

impl ExperimentConfig {
    /// Parses config text, applies overrides and validates the result.
    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self> {
        let mut raw = RawConfig::defaults();
        raw.apply_text(text)?;
        for o in overrides {
            raw.apply_override(o)?;
        }
        Self::from_raw(&raw)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_text(&text, overrides)
    }

    fn from_raw(raw: &RawConfig) -> Result<Self> {
        let mnist_dir = PathBuf::from(raw.str("mnist_dir"));
        let path_or = |key: &str, file: &str| {
            let v = raw.str(key);
            if v.is_empty() {
                mnist_dir.join(file)
            } else {
                PathBuf::from(v)
            }
        };
        let n_clients: usize = raw.get("n_clients")?;
        let cpr: usize = raw.get("clients_per_round")?;
        let num_refs: usize = raw.get("num_references")?;
        let sampling_rate: f64 = raw.get("sampling_rate")?;

        let cfg = ExperimentConfig {
            dataset: raw.choice(
                "dataset",
                &[
                    ("mnist", DatasetKind::Mnist),
                    ("synthetic", DatasetKind::Synthetic),
                ],
            )?,
            idx: IdxPaths {
                train_images: path_or("train_images", "train-images-idx3-ubyte"),
                train_labels: path_or("train_labels", "train-labels-idx1-ubyte"),
                test_images: path_or("test_images", "t10k-images-idx3-ubyte"),
                test_labels: path_or("test_labels", "t10k-labels-idx1-ubyte"),
            },
            synthetic: SyntheticParams {
                classes: raw.get("synthetic_classes")?,
                per_class: raw.get("synthetic_per_class")?,
                test_per_class: raw.get("synthetic_test_per_class")?,
                dim: raw.get("synthetic_dim")?,
                spread: raw.get("synthetic_spread")?,
                seed: raw.get("synthetic_seed")?,
            },
            train_subsample: raw.get("train_subsample")?,
            test_subsample: raw.get("test_subsample")?,
            partition: raw.choice(
                "partition",
                &[
                    ("iid", PartitionKind::Iid),
                    ("label_split", PartitionKind::LabelSplit),
                ],
            )?,
            label_sets: raw.str("label_sets").to_string(),
            hidden: raw.list("hidden")?,
            federation: FederationConfig {
                n_clients,
                clients_per_round: if cpr == 0 { n_clients } else { cpr },
                local_steps: raw.get("local_steps")?,
                rounds: raw.get("rounds")?,
                learning_rate: raw.get("eta")?,
                algorithm: raw.str("algorithm").parse()?,
                weighting: raw.choice(
                    "weighting",
                    &[
                        ("uniform", Weighting::Uniform),
                        ("by_samples", Weighting::BySamples),
                    ],
                )?,
                prox_mu: raw.get("prox_mu")?,
                global_seed: 0,
                target_epsilon: positive_or_none(raw.get("target_epsilon")?),
                eval_batch_size: raw.get("eval_batch_size")?,
                parallel: raw.get("parallel")?,
                record_wall_time: raw.get("record_wall_time")?,
            },
            dp: DpConfig {
                clip_threshold: raw.get("clip")?,
                noise_multiplier: raw.get("sigma")?,
                sampling_rate: if sampling_rate > 0.0 {
                    sampling_rate
                } else {
                    1.0
                },
                delta: raw.get("delta")?,
                sampling_mode: raw.choice(
                    "sampling_mode",
                    &[
                        ("poisson", SamplingMode::Poisson),
                        ("fixed_size", SamplingMode::FixedSize),
                    ],
                )?,
            },
            correction: CorrectionConfig {
                mode: raw.choice(
                    "correction_mode",
                    &[
                        ("reference", CorrectionMode::Reference),
                        ("pairwise", CorrectionMode::Pairwise),
                    ],
                )?,
                num_references: (num_refs > 0).then_some(num_refs),
                order_seed: raw.get("order_seed")?,
            },
            batch_size: raw.get("batch_size")?,
            sampling_rate: if sampling_rate != 0.0 {
                Some(sampling_rate)
            } else {
                None
            },
            seeds: raw.list("seeds")?,
            out_dir: PathBuf::from(raw.str("out_dir")),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dp.validate()?;
        self.federation.validate()?;
        if let Some(s) = self.sampling_rate {
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::validation("sampling_rate", "in (0, 1]"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "≥ 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::validation("seeds", "a nonempty list"));
        }
        let n = self.federation.clients_per_round;
        if self.correction.mode == CorrectionMode::Reference && n >= 2 {
            let m = self.correction.references_for(n);
            if m >= n {
                return Err(Error::validation(
                    "num_references",
                    format!("< clients_per_round ({n})"),
                ));
            }
        }
        if self.partition == PartitionKind::LabelSplit {
            let sets = data::parse_label_sets(&self.label_sets)?;
            if sets.len() != self.federation.n_clients {
                return Err(Error::validation(
                    "label_sets",
                    format!(
                        "one set per client ({} sets for {} clients)",
                        sets.len(),
                        self.federation.n_clients
                    ),
                ));
            }
        }
        if self.dataset == DatasetKind::Synthetic {
            let s = &self.synthetic;
            if s.classes < 2
                || s.per_class == 0
                || s.test_per_class == 0
                || s.dim == 0
                || s.spread < 0.0
            {
                return Err(Error::validation(
                    "synthetic_*",
                    "classes ≥ 2, per-class counts ≥ 1, dim ≥ 1 and spread ≥ 0",
                ));
            }
        }
        Ok(())
    }

    pub fn client_sampling(&self) -> ClientSampling {
        match self.sampling_rate {
            Some(s) => ClientSampling::Rate(s),
            None => ClientSampling::BatchSize(self.batch_size),
        }
    }

    /// Federation settings for one seed and algorithm.
    pub fn federation_for(&self, seed: u64, algorithm: Algorithm) -> FederationConfig {
        FederationConfig {
            global_seed: seed,
            algorithm,
            ..self.federation.clone()
        }
    }

    /// Loads (or generates) the full train and test splits.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset {
            DatasetKind::Mnist => Ok((
                data::load_idx(&self.idx.train_images, &self.idx.train_labels)?,
                data::load_idx(&self.idx.test_images, &self.idx.test_labels)?,
            )),
            DatasetKind::Synthetic => {
                let s = &self.synthetic;
                let all = data::synthetic_blobs(
                    s.classes,
                    s.per_class + s.test_per_class,
                    s.dim,
                    s.spread,
                    s.seed,
                )?;
                let per = s.per_class + s.test_per_class;
                let (mut train, mut test) = (Vec::new(), Vec::new());
                for (i, ex) in all.examples.into_iter().enumerate() {
                    if i % per < s.per_class {
                        train.push(ex);
                    } else {
                        test.push(ex);
                    }
                }
                Ok((
                    Dataset::new(train, s.classes)?,
                    Dataset::new(test, s.classes)?,
                ))
            }
        }
    }

    /// Subsamples and partitions the data for one seed. The result depends
    /// only on the data and the seed, never on the algorithm.
    pub fn build_setup(&self, train: &Dataset, test: &Dataset, seed: u64) -> Result<Setup> {
        let train = match self.train_subsample {
            0 => train.clone(),
            n => data::subsample(train, n, rng::mix(seed, &[Purpose::Subsample as u64, 0]))?,
        };
        let test = match self.test_subsample {
            0 => test.clone(),
            n => data::subsample(test, n, rng::mix(seed, &[Purpose::Subsample as u64, 1]))?,
        };
        let shards: Vec<ClientShard> = match self.partition {
            PartitionKind::Iid => data::partition_iid(&train, self.federation.n_clients, seed)?,
            PartitionKind::LabelSplit => {
                data::partition_label_split(&train, &data::parse_label_sets(&self.label_sets)?)?
            }
        };
        let mut layers = vec![train.feature_dim()];
        layers.extend(&self.hidden);
        layers.push(train.num_classes.max(test.num_classes));
        Ok(Setup {
            spec: MlpSpec::new(layers)?,
            shards,
            test,
            sampling: self.client_sampling(),
        })
    }
}
