//! Experiment grid runner: {client counts} × {query budgets} × {branches} ×
//! {seeds}, with CSV/JSON reports.
//!
//! # Configuration format
//!
//! A flat `key = value` text file. `#` starts a comment; blank lines are
//! ignored; lists are comma-separated. Unknown keys are rejected.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `dataset` | `blobs` | `blobs` or `idx` |
//! | `dataset.name` | `blobs` / `mnist` | label written to report rows |
//! | `blobs.classes` | 3 | number of Gaussian clusters |
//! | `blobs.dim` | 8 | feature dimension |
//! | `blobs.separation` | 4 | distance between cluster centres |
//! | `blobs.pool` | 1000 | attacker query-pool size (victim half has the same size) |
//! | `blobs.test` | 3000 | test-set size (rounded up to a multiple of the class count) |
//! | `blobs.aux` | 3000 | auxiliary pretraining-set size |
//! | `idx.train_images`, `idx.train_labels` | — | IDX training files |
//! | `idx.test_images`, `idx.test_labels` | — | IDX test files |
//! | `idx.train_limit`, `idx.test_limit` | all | keep only the first rows |
//! | `idx.aux` | 5000 | rows carved out of the training file for pretraining |
//! | `arch` | `mlp` | `mlp`, `basic_cnn` or `mini_resnet` |
//! | `arch.hidden` | 16 | MLP hidden widths (empty for none) |
//! | `arch.filters` | 8,16 | basic_cnn conv widths |
//! | `arch.dense` | 64 | basic_cnn dense width |
//! | `arch.channels`, `arch.blocks` | 8, 2 | mini_resnet width and depth |
//! | `clients` | 0,5,10 | client counts; 0 trains centrally |
//! | `budgets` | 50,100,200,400 | query budgets |
//! | `branches` | scratch,pretrained | attack branches |
//! | `seeds` | 0,1,2,3,4 | attack repeat seeds |
//! | `master_seed` | 0 | seeds data generation, victims and every cell |
//! | `fl.rounds`, `fl.local_epochs` | 5, 2 | federation schedule; centralised victims train for their product |
//! | `victim.lr`, `victim.batch`, `victim.momentum` | 0.05, 32, 0.9 | victim optimiser |
//! | `attack.lr`, `attack.epochs`, `attack.batch`, `attack.momentum` | 0.02, 30, 16, 0.9 | scratch surrogate |
//! | `pretrain.lr`, `pretrain.epochs`, `pretrain.batch`, `pretrain.momentum` | 0.005, 30, 32, 0.9 | auxiliary pretraining |
//! | `finetune.lr`, `finetune.epochs`, `finetune.batch`, `finetune.momentum` | 0.002, 20, 16, 0.9 | fine-tuning |
//! | `oracle.mode` | `probability_vector` | or `hard_label` |
//! | `record_wall_time` | true | false writes 0 so reports are byte-reproducible |
//! | `out` | `$FEDEX_OUT_DIR` or `fedex-out` | output directory |
//!
//! # Seeding
//!
//! Every random stream is `seed::derive(master_seed, coordinates)`:
//!
//! * data: `[1]` (training rows), `[2]` (test), `[3]` (auxiliary), `[4]` (split);
//! * victim of arm `c`: `[5, c]` for initialisation and client order, `[6, c]` for sharding;
//! * pretrained surrogate for seed `s`: `[7, s]`;
//! * cell `(c, b, branch, s)`: query order `[8, c, s]`, scratch initialisation and
//!   shuffling `[9, c, s]`, fine-tune shuffling `[10, c, s]`.
//!
//! The budget does not enter the cell streams: a budget-`b` cell queries the
//! first `b` entries of one fixed permutation of the pool, so adding a
//! budget to the grid leaves existing cells untouched and larger budgets
//! strictly extend smaller ones.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{carve, load_idx, shard, split, synth_blobs, DatasetBundle, LabeledDataset};
use crate::error::{Error, Result};
use crate::extraction::{
    pretrain_surrogate, run_attack, AttackConfig, Branch, ExtractedDataset, PretrainSource,
};
use crate::federated::{run_centralized, run_federation, FederationConfig, RoundRecord};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{ArchKind, ArchitectureSpec, ModelInstance, TrainConfig};
use crate::oracle::{PredictionApi, PredictionOracle, ResponseMode};
use crate::seed::derive;

/// Environment variable consulted for the default output directory.
pub const OUT_DIR_ENV: &str = "FEDEX_OUT_DIR";

pub const CSV_HEADER: &str =
    "dataset,arch,clients,budget,branch,seed,acc_victim,acc_extracted,fidelity,kl,wall_time_s";

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Blobs {
        classes: usize,
        dim: usize,
        separation: f64,
        pool: usize,
        test: usize,
        aux: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
        aux: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub name: String,
    pub hidden: Vec<usize>,
    pub filters: [usize; 2],
    pub dense: usize,
    pub channels: usize,
    pub blocks: usize,
}

impl ArchConfig {
    pub fn spec(&self, input_shape: &[usize], class_count: usize) -> Result<ArchitectureSpec> {
        let kind = match self.name.as_str() {
            "mlp" => ArchKind::Mlp {
                hidden: self.hidden.clone(),
            },
            "basic_cnn" => ArchKind::BasicCnn {
                filters: self.filters,
                dense: self.dense,
            },
            "mini_resnet" => ArchKind::MiniResnet {
                channels: self.channels,
                blocks: self.blocks,
            },
            other => return Err(Error::config(format!("unknown architecture `{other}`"))),
        };
        let spec = ArchitectureSpec {
            kind,
            input_shape: input_shape.to_vec(),
            class_count,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Optimiser settings; seeds are supplied per use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Schedule {
    /// Concrete config for a dataset of `n` rows; the batch is capped at `n`.
    pub fn train_config(&self, seed: u64, n: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size.min(n.max(1)),
            seed,
            momentum: self.momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub dataset_name: String,
    pub arch: ArchConfig,
    pub client_counts: Vec<usize>,
    pub budgets: Vec<usize>,
    pub branches: Vec<Branch>,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    pub rounds: usize,
    pub local_epochs: usize,
    /// `epochs` is ignored; victims follow `rounds × local_epochs`.
    pub victim: Schedule,
    pub attack: Schedule,
    pub pretrain: Schedule,
    pub finetune: Schedule,
    pub oracle_mode: ResponseMode,
    pub record_wall_time: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Blobs {
                classes: 3,
                dim: 8,
                separation: 4.0,
                pool: 1000,
                test: 3000,
                aux: 3000,
            },
            dataset_name: "blobs".into(),
            arch: ArchConfig {
                name: "mlp".into(),
                hidden: vec![16],
                filters: [8, 16],
                dense: 64,
                channels: 8,
                blocks: 2,
            },
            client_counts: vec![0, 5, 10],
            budgets: vec![50, 100, 200, 400],
            branches: vec![Branch::Scratch, Branch::Pretrained],
            seeds: vec![0, 1, 2, 3, 4],
            master_seed: 0,
            rounds: 5,
            local_epochs: 2,
            victim: Schedule {
                learning_rate: 0.05,
                epochs: 0,
                batch_size: 32,
                momentum: 0.9,
            },
            attack: Schedule {
                learning_rate: 0.02,
                epochs: 30,
                batch_size: 16,
                momentum: 0.9,
            },
            pretrain: Schedule {
                learning_rate: 0.005,
                epochs: 30,
                batch_size: 32,
                momentum: 0.9,
            },
            finetune: Schedule {
                learning_rate: 0.002,
                epochs: 20,
                batch_size: 16,
                momentum: 0.9,
            },
            oracle_mode: ResponseMode::ProbabilityVector,
            record_wall_time: true,
            out_dir: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!(
            "`{key}`: expected true or false, got `{value}`"
        ))),
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut kind: Option<String> = None;
        let mut blobs: Vec<(String, String)> = Vec::new();
        let mut idx: Vec<(String, String)> = Vec::new();
        let mut name: Option<String> = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| {
                    Error::config(format!("line {}: expected `key = value`", lineno + 1))
                })?;
            match key {
                "dataset" => kind = Some(value.to_string()),
                "dataset.name" => name = Some(value.to_string()),
                k if k.starts_with("blobs.") => blobs.push((k.to_string(), value.to_string())),
                k if k.starts_with("idx.") => idx.push((k.to_string(), value.to_string())),
                "arch" => cfg.arch.name = value.to_string(),
                "arch.hidden" => cfg.arch.hidden = parse_list(key, value)?,
                "arch.filters" => {
                    let f: Vec<usize> = parse_list(key, value)?;
                    cfg.arch.filters = f
                        .try_into()
                        .map_err(|_| Error::config("`arch.filters` needs exactly two widths"))?;
                }
                "arch.dense" => cfg.arch.dense = parse_num(key, value)?,
                "arch.channels" => cfg.arch.channels = parse_num(key, value)?,
                "arch.blocks" => cfg.arch.blocks = parse_num(key, value)?,
                "clients" => cfg.client_counts = parse_list(key, value)?,
                "budgets" => cfg.budgets = parse_list(key, value)?,
                "branches" => cfg.branches = parse_list(key, value)?,
                "seeds" => cfg.seeds = parse_list(key, value)?,
                "master_seed" => cfg.master_seed = parse_num(key, value)?,
                "fl.rounds" => cfg.rounds = parse_num(key, value)?,
                "fl.local_epochs" => cfg.local_epochs = parse_num(key, value)?,
                "oracle.mode" => cfg.oracle_mode = value.parse()?,
                "record_wall_time" => cfg.record_wall_time = parse_bool(key, value)?,
                "out" => cfg.out_dir = Some(PathBuf::from(value)),
                k => {
                    let (group, field) = k
                        .split_once('.')
                        .filter(|(g, _)| {
                            matches!(*g, "victim" | "attack" | "pretrain" | "finetune")
                        })
                        .ok_or_else(|| Error::config(format!("unknown key `{k}`")))?;
                    let s = match group {
                        "victim" => &mut cfg.victim,
                        "attack" => &mut cfg.attack,
                        "pretrain" => &mut cfg.pretrain,
                        _ => &mut cfg.finetune,
                    };
                    match field {
                        "lr" => s.learning_rate = parse_num(key, value)?,
                        "epochs" if group != "victim" => s.epochs = parse_num(key, value)?,
                        "batch" => s.batch_size = parse_num(key, value)?,
                        "momentum" => s.momentum = parse_num(key, value)?,
                        _ => return Err(Error::config(format!("unknown key `{k}`"))),
                    }
                }
            }
        }

        match kind.as_deref().unwrap_or("blobs") {
            "blobs" => {
                if !idx.is_empty() {
                    return Err(Error::config("idx.* keys given for a blobs dataset"));
                }
                let DatasetSource::Blobs {
                    mut classes,
                    mut dim,
                    mut separation,
                    mut pool,
                    mut test,
                    mut aux,
                } = cfg.dataset.clone()
                else {
                    unreachable!()
                };
                for (k, v) in &blobs {
                    match k.as_str() {
                        "blobs.classes" => classes = parse_num(k, v)?,
                        "blobs.dim" => dim = parse_num(k, v)?,
                        "blobs.separation" => separation = parse_num(k, v)?,
                        "blobs.pool" => pool = parse_num(k, v)?,
                        "blobs.test" => test = parse_num(k, v)?,
                        "blobs.aux" => aux = parse_num(k, v)?,
                        _ => return Err(Error::config(format!("unknown key `{k}`"))),
                    }
                }
                cfg.dataset = DatasetSource::Blobs {
                    classes,
                    dim,
                    separation,
                    pool,
                    test,
                    aux,
                };
                cfg.dataset_name = name.unwrap_or_else(|| "blobs".into());
            }
            "idx" => {
                if !blobs.is_empty() {
                    return Err(Error::config("blobs.* keys given for an idx dataset"));
                }
                let mut paths: [Option<PathBuf>; 4] = Default::default();
                let mut train_limit = None;
                let mut test_limit = None;
                let mut aux = 5000;
                for (k, v) in &idx {
                    match k.as_str() {
                        "idx.train_images" => paths[0] = Some(v.into()),
                        "idx.train_labels" => paths[1] = Some(v.into()),
                        "idx.test_images" => paths[2] = Some(v.into()),
                        "idx.test_labels" => paths[3] = Some(v.into()),
                        "idx.train_limit" => train_limit = Some(parse_num(k, v)?),
                        "idx.test_limit" => test_limit = Some(parse_num(k, v)?),
                        "idx.aux" => aux = parse_num(k, v)?,
                        _ => return Err(Error::config(format!("unknown key `{k}`"))),
                    }
                }
                let [a, b, c, d] = paths;
                let need = |p: Option<PathBuf>, k: &str| {
                    p.ok_or_else(|| Error::config(format!("missing `{k}`")))
                };
                cfg.dataset = DatasetSource::Idx {
                    train_images: need(a, "idx.train_images")?,
                    train_labels: need(b, "idx.train_labels")?,
                    test_images: need(c, "idx.test_images")?,
                    test_labels: need(d, "idx.test_labels")?,
                    train_limit,
                    test_limit,
                    aux,
                };
                cfg.dataset_name = name.unwrap_or_else(|| "mnist".into());
            }
            other => return Err(Error::config(format!("unknown dataset `{other}`"))),
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("`seeds` must not be empty"));
        }
        if self.budgets.contains(&0) {
            return Err(Error::config("budgets must be positive"));
        }
        if self.rounds == 0 || self.local_epochs == 0 {
            return Err(Error::config(
                "fl.rounds and fl.local_epochs must be positive",
            ));
        }
        for (name, s) in [
            ("victim", &self.victim),
            ("attack", &self.attack),
            ("pretrain", &self.pretrain),
            ("finetune", &self.finetune),
        ] {
            if s.batch_size == 0
                || s.learning_rate.is_nan()
                || s.learning_rate < 0.0
                || !(0.0..1.0).contains(&s.momentum)
            {
                return Err(Error::config(format!("invalid `{name}` schedule")));
            }
        }
        if let DatasetSource::Blobs {
            pool, test, aux, ..
        } = self.dataset
        {
            if pool == 0 || test == 0 || aux == 0 {
                return Err(Error::config("blob set sizes must be positive"));
            }
        }
        Ok(())
    }

    /// Output directory: the config's `out`, else `$FEDEX_OUT_DIR`, else
    /// `fedex-out`.
    pub fn resolved_out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("fedex-out"))
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match &self.dataset {
            DatasetSource::Blobs {
                classes,
                dim,
                separation,
                pool,
                test,
                aux,
            } => {
                let _ = writeln!(s, "dataset = blobs");
                let _ = writeln!(
                    s,
                    "blobs.classes = {classes}\nblobs.dim = {dim}\nblobs.separation = {separation}"
                );
                let _ = writeln!(
                    s,
                    "blobs.pool = {pool}\nblobs.test = {test}\nblobs.aux = {aux}"
                );
            }
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
                aux,
            } => {
                let _ = writeln!(s, "dataset = idx");
                let _ = writeln!(s, "idx.train_images = {}", train_images.display());
                let _ = writeln!(s, "idx.train_labels = {}", train_labels.display());
                let _ = writeln!(s, "idx.test_images = {}", test_images.display());
                let _ = writeln!(s, "idx.test_labels = {}", test_labels.display());
                if let Some(n) = train_limit {
                    let _ = writeln!(s, "idx.train_limit = {n}");
                }
                if let Some(n) = test_limit {
                    let _ = writeln!(s, "idx.test_limit = {n}");
                }
                let _ = writeln!(s, "idx.aux = {aux}");
            }
        }
        let _ = writeln!(s, "dataset.name = {}", self.dataset_name);
        let a = &self.arch;
        let _ = writeln!(s, "arch = {}\narch.hidden = {}", a.name, join(&a.hidden));
        let _ = writeln!(
            s,
            "arch.filters = {}\narch.dense = {}",
            join(&a.filters),
            a.dense
        );
        let _ = writeln!(
            s,
            "arch.channels = {}\narch.blocks = {}",
            a.channels, a.blocks
        );
        let _ = writeln!(
            s,
            "clients = {}\nbudgets = {}",
            join(&self.client_counts),
            join(&self.budgets)
        );
        let branches: Vec<&str> = self.branches.iter().map(|b| b.as_str()).collect();
        let _ = writeln!(
            s,
            "branches = {}\nseeds = {}",
            branches.join(","),
            join(&self.seeds)
        );
        let _ = writeln!(s, "master_seed = {}", self.master_seed);
        let _ = writeln!(
            s,
            "fl.rounds = {}\nfl.local_epochs = {}",
            self.rounds, self.local_epochs
        );
        for (name, sch) in [
            ("victim", &self.victim),
            ("attack", &self.attack),
            ("pretrain", &self.pretrain),
            ("finetune", &self.finetune),
        ] {
            let _ = writeln!(s, "{name}.lr = {}", sch.learning_rate);
            if name != "victim" {
                let _ = writeln!(s, "{name}.epochs = {}", sch.epochs);
            }
            let _ = writeln!(
                s,
                "{name}.batch = {}\n{name}.momentum = {}",
                sch.batch_size, sch.momentum
            );
        }
        let _ = writeln!(s, "oracle.mode = {}", self.oracle_mode);
        let _ = writeln!(s, "record_wall_time = {}", self.record_wall_time);
        if let Some(out) = &self.out_dir {
            let _ = writeln!(s, "out = {}", out.display());
        }
        s
    }
}

/// Materialised datasets and the architecture shared by victim and surrogate.
#[derive(Debug, Clone)]
pub struct Workload {
    pub bundle: DatasetBundle,
    pub auxiliary: LabeledDataset,
    pub spec: ArchitectureSpec,
}

impl Workload {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        let m = cfg.master_seed;
        let (bundle, auxiliary) = match &cfg.dataset {
            DatasetSource::Blobs {
                classes,
                dim,
                separation,
                pool,
                test,
                aux,
            } => {
                let per = |n: usize| n.div_ceil(*classes);
                let train =
                    synth_blobs(*classes, per(2 * pool), *dim, *separation, derive(m, &[1]))?;
                let test = synth_blobs(*classes, per(*test), *dim, *separation, derive(m, &[2]))?;
                let auxiliary =
                    synth_blobs(*classes, per(*aux), *dim, *separation, derive(m, &[3]))?;
                let mut bundle = split(&train, test, derive(m, &[4]))?;
                bundle.query_pool = bundle.query_pool.truncated(*pool)?;
                (bundle, auxiliary)
            }
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
                aux,
            } => {
                let mut train = load_idx(train_images, train_labels)?;
                let mut test = load_idx(test_images, test_labels)?;
                let classes = train.class_count().max(test.class_count());
                train = train.with_class_count(classes)?;
                test = test.with_class_count(classes)?;
                if let Some(n) = train_limit {
                    train = train.truncated(*n)?;
                }
                if let Some(n) = test_limit {
                    test = test.truncated(*n)?;
                }
                let (rest, auxiliary) = carve(&train, *aux, derive(m, &[3]))?;
                (split(&rest, test, derive(m, &[4]))?, auxiliary)
            }
        };
        let spec = cfg.arch.spec(
            bundle.victim_train.item_shape(),
            bundle.victim_train.class_count(),
        )?;
        Ok(Self {
            bundle,
            auxiliary,
            spec,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainedVictim {
    pub client_count: usize,
    pub model: ModelInstance,
    /// Empty for centralised victims.
    pub rounds: Vec<RoundRecord>,
}

/// Trains the victim of one arm: centralised for `client_count == 0`,
/// FedAvg over IID shards otherwise.
pub fn train_victim(
    cfg: &ExperimentConfig,
    work: &Workload,
    client_count: usize,
) -> Result<TrainedVictim> {
    let m = cfg.master_seed;
    let c = client_count as u64;
    let seed = derive(m, &[5, c]);
    let data = &work.bundle.victim_train;
    if client_count == 0 {
        let mut train = cfg.victim.train_config(seed, data.len());
        train.epochs = cfg.rounds * cfg.local_epochs;
        let model = run_centralized(data, &work.spec, &train)?;
        return Ok(TrainedVictim {
            client_count,
            model,
            rounds: Vec::new(),
        });
    }
    let shards = shard(data, client_count, derive(m, &[6, c]))?;
    let smallest = shards.sample_counts().into_iter().min().unwrap_or(1);
    let fed = FederationConfig {
        client_count,
        rounds: cfg.rounds,
        local_epochs_per_round: cfg.local_epochs,
        local_train: cfg.victim.train_config(seed, smallest),
        seed,
    };
    let (model, rounds) = run_federation(&shards, &work.spec, &fed)?;
    Ok(TrainedVictim {
        client_count,
        model,
        rounds,
    })
}

/// The auxiliary-split pretrained surrogate used by seed `seed`.
pub fn pretrained_surrogate(
    cfg: &ExperimentConfig,
    work: &Workload,
    seed: u64,
) -> Result<ModelInstance> {
    let train = cfg
        .pretrain
        .train_config(derive(cfg.master_seed, &[7, seed]), work.auxiliary.len());
    let b = &work.bundle;
    pretrain_surrogate(
        &work.spec,
        &work.auxiliary,
        &train,
        &[&b.victim_train, &b.query_pool, &b.test],
    )
}

/// Coordinates of one attack run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub clients: usize,
    pub budget: usize,
    pub branch: Branch,
    pub seed: u64,
}

/// Attack settings of one cell; `pretrained` is required for the
/// pretrained branch.
pub fn cell_attack_config(
    cfg: &ExperimentConfig,
    work: &Workload,
    cell: Cell,
    pretrained: Option<&ModelInstance>,
) -> Result<AttackConfig> {
    let m = cfg.master_seed;
    let (c, s) = (cell.clients as u64, cell.seed);
    let pre_train = cell.branch == Branch::Pretrained;
    let pretrain_source = if pre_train {
        Some(PretrainSource::Loaded(
            pretrained
                .ok_or_else(|| Error::State("pretrained branch without a pretrained model".into()))?
                .clone(),
        ))
    } else {
        None
    };
    Ok(AttackConfig {
        n_query: cell.budget,
        pre_train,
        pretrain_source,
        surrogate_spec: work.spec.clone(),
        surrogate_train: cfg.attack.train_config(derive(m, &[9, c, s]), cell.budget),
        fine_tune: cfg
            .finetune
            .train_config(derive(m, &[10, c, s]), cell.budget),
        query_seed: derive(m, &[8, c, s]),
    })
}

/// Runs one cell's attack against any oracle and evaluates the surrogate.
pub fn run_cell(
    cfg: &ExperimentConfig,
    work: &Workload,
    victim: &ModelInstance,
    oracle: &dyn PredictionApi,
    cell: Cell,
    pretrained: Option<&ModelInstance>,
) -> Result<(ModelInstance, ExtractedDataset, MetricsReport)> {
    let attack = cell_attack_config(cfg, work, cell, pretrained)?;
    let (surrogate, extracted) = run_attack(oracle, &work.bundle.query_pool.unlabeled(), &attack)?;
    let report = evaluate(victim, &surrogate, &work.bundle.test)?;
    Ok((surrogate, extracted, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub dataset: String,
    pub arch: String,
    pub clients: usize,
    pub budget: usize,
    pub branch: Branch,
    pub seed: u64,
    pub victim_hash: Option<String>,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ExperimentRow>,
}

/// Runs the whole grid. Failures inside a cell (or an arm's victim) become
/// error rows; only dataset preparation failures abort the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let work = Workload::prepare(cfg)?;
    let pretrained: Vec<Option<std::result::Result<ModelInstance, String>>> =
        if cfg.branches.contains(&Branch::Pretrained) {
            cfg.seeds
                .par_iter()
                .map(|&s| Some(pretrained_surrogate(cfg, &work, s).map_err(|e| e.to_string())))
                .collect()
        } else {
            vec![None; cfg.seeds.len()]
        };

    let mut rows = Vec::new();
    for &clients in &cfg.client_counts {
        let cells: Vec<(Cell, usize)> = cfg
            .budgets
            .iter()
            .flat_map(|&budget| {
                cfg.branches.iter().flat_map(move |&branch| {
                    cfg.seeds.iter().enumerate().map(move |(i, &seed)| {
                        (
                            Cell {
                                clients,
                                budget,
                                branch,
                                seed,
                            },
                            i,
                        )
                    })
                })
            })
            .collect();
        let row =
            |cell: Cell, victim_hash: Option<String>, outcome: Result<MetricsReport>, secs: f64| {
                let (metrics, error) = match outcome {
                    Ok(m) => (Some(m), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                ExperimentRow {
                    dataset: cfg.dataset_name.clone(),
                    arch: work.spec.name().to_string(),
                    clients: cell.clients,
                    budget: cell.budget,
                    branch: cell.branch,
                    seed: cell.seed,
                    victim_hash,
                    metrics,
                    error,
                    wall_time_s: if cfg.record_wall_time { secs } else { 0.0 },
                }
            };

        let victim = match train_victim(cfg, &work, clients) {
            Ok(v) => v.model,
            Err(e) => {
                let msg = format!("victim training failed: {e}");
                rows.extend(
                    cells
                        .iter()
                        .map(|&(c, _)| row(c, None, Err(Error::State(msg.clone())), 0.0)),
                );
                continue;
            }
        };
        let hash = victim.fingerprint();
        let arm: Vec<ExperimentRow> = cells
            .par_iter()
            .map(|&(cell, seed_pos)| {
                let start = Instant::now();
                let outcome = (|| {
                    let pre = match (&pretrained[seed_pos], cell.branch) {
                        (Some(Ok(m)), Branch::Pretrained) => Some(m),
                        (Some(Err(e)), Branch::Pretrained) => {
                            return Err(Error::State(format!("pretraining failed: {e}")))
                        }
                        _ => None,
                    };
                    let oracle =
                        PredictionOracle::new(victim.clone(), cell.budget, cfg.oracle_mode);
                    run_cell(cfg, &work, &victim, &oracle, cell, pre).map(|(_, _, r)| r)
                })();
                row(
                    cell,
                    Some(hash.clone()),
                    outcome,
                    start.elapsed().as_secs_f64(),
                )
            })
            .collect();
        rows.extend(arm);
    }
    Ok(ExperimentReport { rows })
}

/// `%g`-style formatting with six significant digits.
pub fn format_g6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..6).contains(&exp) {
        trim(&format!("{v:.*}", (5 - exp) as usize))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    }
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn csv_string(report: &ExperimentReport) -> String {
    let header: Vec<&str> = CSV_HEADER.split(',').collect();
    csv_text(
        &header,
        report.rows.iter().map(|r| {
            let metrics: [String; 4] = match &r.metrics {
                Some(m) => [
                    m.accuracy_victim,
                    m.accuracy_extracted,
                    m.fidelity,
                    m.kl_divergence,
                ]
                .map(format_g6),
                None => Default::default(),
            };
            let mut rec = vec![
                r.dataset.clone(),
                r.arch.clone(),
                r.clients.to_string(),
                r.budget.to_string(),
                r.branch.as_str().to_string(),
                r.seed.to_string(),
            ];
            rec.extend(metrics);
            rec.push(format_g6(r.wall_time_s));
            rec
        }),
    )
}

pub fn emit_csv(report: &ExperimentReport, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, csv_string(report))?;
    Ok(())
}

pub fn emit_json(report: &ExperimentReport, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(std::io::Error::from)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_json(path: impl AsRef<Path>) -> Result<ExperimentReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("bad report JSON: {e}")))
}

/// Mean over seeds of one (clients, budget, branch) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub clients: usize,
    pub budget: usize,
    pub branch: Branch,
    /// Successful rows contributing to the means.
    pub runs: usize,
    pub errors: usize,
    pub acc_victim: f64,
    pub acc_extracted: f64,
    pub fidelity: f64,
    pub kl: f64,
}

/// Per-cell means in first-appearance order; sums run in row order, so the
/// result is a pure function of the report.
pub fn summarize(report: &ExperimentReport) -> Vec<CellSummary> {
    let mut out: Vec<CellSummary> = Vec::new();
    let mut sums: Vec<[f64; 4]> = Vec::new();
    for r in &report.rows {
        let at = match out
            .iter()
            .position(|c| (c.clients, c.budget, c.branch) == (r.clients, r.budget, r.branch))
        {
            Some(i) => i,
            None => {
                out.push(CellSummary {
                    clients: r.clients,
                    budget: r.budget,
                    branch: r.branch,
                    runs: 0,
                    errors: 0,
                    acc_victim: f64::NAN,
                    acc_extracted: f64::NAN,
                    fidelity: f64::NAN,
                    kl: f64::NAN,
                });
                sums.push([0.0; 4]);
                out.len() - 1
            }
        };
        match &r.metrics {
            Some(m) => {
                out[at].runs += 1;
                let s = &mut sums[at];
                s[0] += m.accuracy_victim;
                s[1] += m.accuracy_extracted;
                s[2] += m.fidelity;
                s[3] += m.kl_divergence;
            }
            None => out[at].errors += 1,
        }
    }
    for (c, s) in out.iter_mut().zip(&sums) {
        if c.runs > 0 {
            let n = c.runs as f64;
            c.acc_victim = s[0] / n;
            c.acc_extracted = s[1] / n;
            c.fidelity = s[2] / n;
            c.kl = s[3] / n;
        }
    }
    out
}

pub fn summary_csv(summary: &[CellSummary]) -> String {
    let f = |v: f64| {
        if v.is_nan() {
            String::new()
        } else {
            format_g6(v)
        }
    };
    csv_text(
        &[
            "clients",
            "budget",
            "branch",
            "runs",
            "errors",
            "acc_victim",
            "acc_extracted",
            "fidelity",
            "kl",
        ],
        summary.iter().map(|c| {
            vec![
                c.clients.to_string(),
                c.budget.to_string(),
                c.branch.as_str().to_string(),
                c.runs.to_string(),
                c.errors.to_string(),
                f(c.acc_victim),
                f(c.acc_extracted),
                f(c.fidelity),
                f(c.kl),
            ]
        }),
    )
}

/// Writes `results.csv`, `results.json`, `summary.csv` and `config.cfg`
/// into `dir`, returning the paths written.
pub fn write_outputs(
    cfg: &ExperimentConfig,
    report: &ExperimentReport,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let paths = ["results.csv", "results.json", "summary.csv", "config.cfg"].map(|n| dir.join(n));
    emit_csv(report, &paths[0])?;
    emit_json(report, &paths[1])?;
    std::fs::write(&paths[2], summary_csv(&summarize(report)))?;
    std::fs::write(&paths[3], cfg.to_text())?;
    Ok(paths.to_vec())
}

/// Which report metric a trend check reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    AccuracyExtracted,
    Fidelity,
}

impl Metric {
    fn of(self, m: &MetricsReport) -> f64 {
        match self {
            Metric::AccuracyExtracted => m.accuracy_extracted,
            Metric::Fidelity => m.fidelity,
        }
    }
}

/// Seed-mean of `metric` per budget (ascending) for one arm and branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetTrend {
    pub budgets: Vec<usize>,
    pub means: Vec<f64>,
    /// Number of adjacent pairs where the mean decreases.
    pub inversions: usize,
    /// Largest such decrease.
    pub max_drop: f64,
}

impl BudgetTrend {
    /// Non-decreasing, up to `allowed` inversions of at most `tolerance`.
    pub fn holds(&self, allowed: usize, tolerance: f64) -> bool {
        self.inversions <= allowed && self.max_drop <= tolerance
    }
}

pub fn budget_trend(
    report: &ExperimentReport,
    clients: usize,
    branch: Branch,
    metric: Metric,
) -> BudgetTrend {
    let mut budgets: Vec<usize> = report
        .rows
        .iter()
        .filter(|r| r.clients == clients && r.branch == branch)
        .map(|r| r.budget)
        .collect();
    budgets.sort_unstable();
    budgets.dedup();
    let means: Vec<f64> = budgets
        .iter()
        .map(|&b| {
            let vals: Vec<f64> = report
                .rows
                .iter()
                .filter(|r| r.clients == clients && r.branch == branch && r.budget == b)
                .filter_map(|r| r.metrics.as_ref().map(|m| metric.of(m)))
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    let drops: Vec<f64> = means
        .windows(2)
        .map(|w| w[0] - w[1])
        .filter(|&d| d > 0.0)
        .collect();
    BudgetTrend {
        inversions: drops.len(),
        max_drop: drops.iter().copied().fold(0.0, f64::max),
        budgets,
        means,
    }
}

/// Extracted accuracy of one seed at one budget and branch, averaged over
/// every client count in the report. `None` if any such row failed.
pub fn seed_accuracy(
    report: &ExperimentReport,
    seed: u64,
    budget: usize,
    branch: Branch,
) -> Option<f64> {
    let rows: Vec<&ExperimentRow> = report
        .rows
        .iter()
        .filter(|r| r.seed == seed && r.budget == budget && r.branch == branch)
        .collect();
    if rows.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for r in &rows {
        sum += r.metrics.as_ref()?.accuracy_extracted;
    }
    Some(sum / rows.len() as f64)
}

/// Per-seed comparison of the pretrained branch against the scratch branch.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferComparison {
    pub seeds: Vec<u64>,
    pub small_budget: usize,
    pub mid_budget: usize,
    /// Per seed: pretrained and scratch accuracy at `small_budget`.
    pub small: Vec<(f64, f64)>,
    /// Per seed: pretrained accuracy at `mid_budget`.
    pub mid_pretrained: Vec<f64>,
    /// Best seed-mean scratch accuracy over all budgets.
    pub scratch_best_mean: f64,
}

impl TransferComparison {
    /// Seeds on which pretrained ≥ scratch at the small budget.
    pub fn small_budget_wins(&self) -> usize {
        self.small.iter().filter(|(p, s)| p >= s).count()
    }

    /// Seeds on which pretrained at the mid budget reaches the scratch best.
    pub fn mid_budget_wins(&self) -> usize {
        self.mid_pretrained
            .iter()
            .filter(|&&p| p >= self.scratch_best_mean)
            .count()
    }
}

pub fn transfer_comparison(
    report: &ExperimentReport,
    small_budget: usize,
    mid_budget: usize,
) -> Option<TransferComparison> {
    let mut seeds: Vec<u64> = report.rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut budgets: Vec<usize> = report.rows.iter().map(|r| r.budget).collect();
    budgets.sort_unstable();
    budgets.dedup();
    let mut small = Vec::new();
    let mut mid_pretrained = Vec::new();
    for &s in &seeds {
        small.push((
            seed_accuracy(report, s, small_budget, Branch::Pretrained)?,
            seed_accuracy(report, s, small_budget, Branch::Scratch)?,
        ));
        mid_pretrained.push(seed_accuracy(report, s, mid_budget, Branch::Pretrained)?);
    }
    let mut scratch_best_mean = f64::NEG_INFINITY;
    for &b in &budgets {
        let per_seed: Option<Vec<f64>> = seeds
            .iter()
            .map(|&s| seed_accuracy(report, s, b, Branch::Scratch))
            .collect();
        let per_seed = per_seed?;
        scratch_best_mean =
            scratch_best_mean.max(per_seed.iter().sum::<f64>() / per_seed.len() as f64);
    }
    Some(TransferComparison {
        seeds,
        small_budget,
        mid_budget,
        small,
        mid_pretrained,
        scratch_best_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::parse(
            "blobs.pool = 120\nblobs.test = 60\nblobs.aux = 60\n\
             clients = 2\nbudgets = 20,40\nseeds = 1,2\n\
             fl.rounds = 2\nfl.local_epochs = 1\nattack.epochs = 5\n\
             pretrain.epochs = 3\nfinetune.epochs = 3\nrecord_wall_time = false\n",
        )
        .unwrap()
    }

    #[test]
    fn format_g6_matches_printf() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.95, "0.95"),
            (0.123456789, "0.123457"),
            (123456.7, "123457"),
            (1234567.0, "1.23457e+06"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (999999.5, "1e+06"),
            (-2.5, "-2.5"),
            (0.000486, "0.000486"),
        ];
        for (v, s) in cases {
            assert_eq!(format_g6(v), s, "{v}");
        }
    }

    #[test]
    fn config_round_trips_through_text() {
        let cfg = tiny();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(
            ExperimentConfig::parse(&ExperimentConfig::default().to_text()).unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn config_errors() {
        for bad in [
            "nonsense = 1",
            "seeds =",
            "budgets = 0",
            "clients = x",
            "just a line",
            "dataset = idx",
            "dataset = csv",
            "victim.epochs = 3",
            "oracle.mode = fuzzy",
            "branches = sideways",
        ] {
            assert!(
                matches!(ExperimentConfig::parse(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn grid_has_one_row_per_cell_and_is_deterministic() {
        let cfg = tiny();
        let a = run_experiment(&cfg).unwrap();
        assert_eq!(a.rows.len(), 2 * 2 * 2);
        assert!(a.rows.iter().all(|r| r.error.is_none()));
        let hashes: std::collections::HashSet<_> =
            a.rows.iter().map(|r| r.victim_hash.clone()).collect();
        assert_eq!(hashes.len(), 1);
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(csv_string(&a), csv_string(&b));
        assert_eq!(csv_string(&a).lines().count(), a.rows.len() + 1);
    }

    #[test]
    fn adding_a_budget_leaves_existing_cells_untouched() {
        let cfg = tiny();
        let mut wider = cfg.clone();
        wider.budgets.push(30);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&wider).unwrap();
        for r in &a.rows {
            let same = b
                .rows
                .iter()
                .find(|x| {
                    (x.clients, x.budget, x.branch, x.seed)
                        == (r.clients, r.budget, r.branch, r.seed)
                })
                .unwrap();
            assert_eq!(same, r);
        }
    }

    #[test]
    fn failed_cell_is_isolated() {
        let mut cfg = tiny();
        cfg.budgets = vec![20, 10_000];
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.rows.len(), 8);
        let failed: Vec<_> = report.rows.iter().filter(|r| r.error.is_some()).collect();
        assert_eq!(failed.len(), 4);
        assert!(failed
            .iter()
            .all(|r| r.budget == 10_000 && r.metrics.is_none()));
        let csv = csv_string(&report);
        assert!(csv.lines().any(|l| l.ends_with(",,,,,0")));
    }

    #[test]
    fn json_round_trip_is_lossless_and_summary_reproducible() {
        let cfg = tiny();
        let report = run_experiment(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&cfg, &report, dir.path()).unwrap();
        let back = load_json(dir.path().join("results.json")).unwrap();
        assert_eq!(back, report);
        assert_eq!(
            summary_csv(&summarize(&back)),
            summary_csv(&summarize(&report))
        );
        assert_eq!(summarize(&report).len(), 4);
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(
            csv_string(&ExperimentReport::default()),
            format!("{CSV_HEADER}\n")
        );
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_csv(
                &ExperimentReport::default(),
                dir.path().join("missing/dir/x.csv")
            ),
            Err(Error::Io(_))
        ));
    }
}
