//! The extraction attack: sample queries from the attacker's unlabeled pool,
//! harvest the victim's answers, then train a surrogate on them, either from
//! scratch or by fine-tuning a pretrained model.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, UnlabeledPool};
use crate::error::{Error, Result};
use crate::model::{self, one_hot, ArchitectureSpec, ModelInstance, Provenance, TrainConfig};
use crate::oracle::PredictionApi;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub inputs: Tensor,
    /// Positions in the query pool, in query order.
    pub positions: Vec<usize>,
    pub seed: u64,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Uniform sample without replacement: the first `n_query` positions of a
/// seeded permutation of the pool. Under one seed, smaller samples are
/// prefixes of larger ones. The pool's labels never enter the query set.
pub fn sample_queries(pool: &UnlabeledPool<'_>, n_query: usize, seed: u64) -> Result<QuerySet> {
    if n_query == 0 || n_query > pool.len() {
        return Err(Error::config(format!(
            "cannot sample {n_query} queries from a pool of {}",
            pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut seed::rng(seed, &[0x9e7]));
    order.truncate(n_query);
    let positions = order;
    Ok(QuerySet {
        inputs: pool.inputs().select_rows(&positions)?,
        positions,
        seed,
    })
}

/// Query/response pairs collected from the victim.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedDataset {
    inputs: Tensor,
    targets: Tensor,
}

impl ExtractedDataset {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.rank() < 2 || targets.rank() != 2 || inputs.rows() != targets.rows() {
            return Err(Error::dim(format!(
                "inputs {:?} and targets {:?} do not pair up",
                inputs.shape(),
                targets.shape()
            )));
        }
        for i in 0..targets.rows() {
            if (targets.row(i).iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::Domain(format!("target row {i} does not sum to 1")));
            }
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    /// Victim probability rows (one-hot for hard-label oracles).
    pub fn targets(&self) -> &Tensor {
        &self.targets
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        (0..self.len()).map(|i| (self.inputs.row(i), self.targets.row(i)))
    }

    /// Serialises to the `FXD1` container:
    ///
    /// ```text
    /// "FXD1" | u64 pair_count | u32 input_rank | rank × u64 dim
    ///        | u64 class_count | per pair: input f64s, then probability f64s
    /// ```
    ///
    /// Little-endian throughout; `dim`s describe one input item.
    pub fn to_fxd(&self) -> Vec<u8> {
        let item = &self.inputs.shape()[1..];
        let mut out = Vec::with_capacity(32 + 8 * (self.inputs.len() + self.targets.len()));
        out.extend_from_slice(b"FXD1");
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(item.len() as u32).to_le_bytes());
        for &d in item {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.targets.shape()[1] as u64).to_le_bytes());
        for (x, p) in self.pairs() {
            for v in x.iter().chain(p) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_fxd(bytes: &[u8]) -> Result<Self> {
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = at
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::format(format!("truncated FXD1 stream at byte {at}")))?;
            let s = &bytes[at..end];
            at = end;
            Ok(s)
        };
        let magic = take(4)?;
        if magic != b"FXD1" {
            return Err(Error::format(format!(
                "bad magic {magic:?}, expected \"FXD1\""
            )));
        }
        let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().unwrap()) as usize;
        let n = u64_at(take(8)?);
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut item = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            item.push(u64_at(take(8)?));
        }
        let k = u64_at(take(8)?);
        let w: usize = item.iter().product();
        let total = n
            .checked_mul(w + k)
            .and_then(|v| v.checked_mul(8))
            .ok_or_else(|| Error::format("FXD1 size overflow"))?;
        let body = take(total)?;
        if at != bytes.len() {
            return Err(Error::format("trailing bytes after FXD1 payload"));
        }
        let mut xs = Vec::with_capacity(n * w);
        let mut ps = Vec::with_capacity(n * k);
        for (j, c) in body.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(c.try_into().unwrap());
            if j % (w + k) < w {
                xs.push(v);
            } else {
                ps.push(v);
            }
        }
        let mut shape = vec![n];
        shape.extend(item);
        let inputs = Tensor::new(shape, xs).map_err(|e| Error::format(e.to_string()))?;
        let targets = Tensor::new(vec![n, k], ps).map_err(|e| Error::format(e.to_string()))?;
        Self::new(inputs, targets).map_err(|e| Error::format(e.to_string()))
    }
}

/// Sends every query to the oracle and records its answers. Fails before
/// querying when the oracle reports too little remaining budget.
pub fn harvest(oracle: &dyn PredictionApi, queries: &QuerySet) -> Result<ExtractedDataset> {
    let n = queries.len();
    if let Some(remaining) = oracle.remaining() {
        if remaining < n {
            return Err(Error::BudgetExceeded {
                requested: n,
                remaining,
            });
        }
    }
    let responses = oracle.query_batch(&queries.inputs)?;
    let k = oracle.class_count();
    let mut targets = Vec::with_capacity(n * k);
    for r in &responses {
        targets.extend(r.to_distribution(k));
    }
    ExtractedDataset::new(queries.inputs.clone(), Tensor::new(vec![n, k], targets)?)
}

fn overlaps_pool(aux: &LabeledDataset, pool: &UnlabeledPool<'_>) -> bool {
    if aux.origin() != pool.origin() {
        return false;
    }
    let mine: std::collections::HashSet<usize> = aux.provenance().iter().copied().collect();
    pool.provenance().iter().any(|i| mine.contains(i))
}

/// Supervised pretraining on an auxiliary labelled set that must not share
/// rows with any of `exclude`.
pub fn pretrain_surrogate(
    spec: &ArchitectureSpec,
    auxiliary: &LabeledDataset,
    config: &TrainConfig,
    exclude: &[&LabeledDataset],
) -> Result<ModelInstance> {
    if let Some(hit) = exclude.iter().find(|d| !auxiliary.disjoint_from(d)) {
        return Err(Error::config(format!(
            "auxiliary set `{}` overlaps `{}`",
            auxiliary.name, hit.name
        )));
    }
    if auxiliary.class_count() != spec.class_count {
        return Err(Error::dim(format!(
            "auxiliary set has {} classes, surrogate {}",
            auxiliary.class_count(),
            spec.class_count
        )));
    }
    let init = ModelInstance::initialize(spec, config.seed)?;
    let targets = one_hot(auxiliary.labels(), auxiliary.class_count())?;
    model::train(&init, auxiliary.inputs(), &targets, config)?
        .with_provenance(Provenance::Pretrained)
}

/// Where the fine-tuning branch gets its starting point.
#[derive(Debug, Clone)]
pub enum PretrainSource {
    /// Pretrain on a disjoint auxiliary split with the given schedule.
    Auxiliary {
        dataset: LabeledDataset,
        train: TrainConfig,
    },
    /// An already pretrained model, e.g. loaded from an `FXL1` file.
    Loaded(ModelInstance),
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub n_query: usize,
    pub pre_train: bool,
    pub pretrain_source: Option<PretrainSource>,
    pub surrogate_spec: ArchitectureSpec,
    /// Schedule (and initialisation seed) of the scratch branch.
    pub surrogate_train: TrainConfig,
    pub fine_tune: TrainConfig,
    pub query_seed: u64,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pre_train && self.pretrain_source.is_none() {
            return Err(Error::config("pre_train requires a pretrain source"));
        }
        self.surrogate_spec.validate()
    }
}

/// Harvests `n_query` answers, then trains the surrogate on them with
/// soft-label cross-entropy. Fine-tuning updates every layer.
pub fn run_attack(
    oracle: &dyn PredictionApi,
    pool: &UnlabeledPool<'_>,
    config: &AttackConfig,
) -> Result<(ModelInstance, ExtractedDataset)> {
    config.validate()?;
    let spec = &config.surrogate_spec;
    if spec.input_shape != oracle.input_shape() || spec.class_count != oracle.class_count() {
        return Err(Error::dim(format!(
            "surrogate `{spec}` does not fit an oracle with input {:?} and {} classes",
            oracle.input_shape(),
            oracle.class_count()
        )));
    }
    if pool.item_shape() != oracle.input_shape() {
        return Err(Error::dim(format!(
            "pool items {:?} do not fit oracle input {:?}",
            pool.item_shape(),
            oracle.input_shape()
        )));
    }

    let base = if config.pre_train {
        Some(match config.pretrain_source.as_ref().expect("validated") {
            PretrainSource::Auxiliary { dataset, train } => {
                if overlaps_pool(dataset, pool) {
                    return Err(Error::config("auxiliary set overlaps the query pool"));
                }
                pretrain_surrogate(spec, dataset, train, &[])?
            }
            PretrainSource::Loaded(m) => {
                if m.spec() != spec {
                    return Err(Error::Spec(format!(
                        "pretrained model is `{}`, surrogate spec is `{spec}`",
                        m.spec()
                    )));
                }
                m.clone()
            }
        })
    } else {
        None
    };

    let queries = sample_queries(pool, config.n_query, config.query_seed)?;
    let extracted = harvest(oracle, &queries)?;

    let surrogate = match base {
        Some(pretrained) => {
            if pretrained.provenance() != Provenance::Pretrained {
                return Err(Error::State(format!(
                    "fine-tuning needs a pretrained model, got {:?}",
                    pretrained.provenance()
                )));
            }
            model::train(
                &pretrained,
                extracted.inputs(),
                extracted.targets(),
                &config.fine_tune,
            )?
            .with_provenance(Provenance::FineTuned)?
        }
        None => {
            let init = ModelInstance::initialize(spec, config.surrogate_train.seed)?;
            model::train(
                &init,
                extracted.inputs(),
                extracted.targets(),
                &config.surrogate_train,
            )?
            .with_provenance(Provenance::CentralizedTrained)?
        }
    };
    Ok((surrogate, extracted))
}

/// Serializable summary of the branch an attack took.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Scratch,
    Pretrained,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Scratch => "scratch",
            Branch::Pretrained => "pretrained",
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Branch::Scratch),
            "pretrained" | "pretrain" => Ok(Branch::Pretrained),
            other => Err(Error::config(format!("unknown branch `{other}`"))),
        }
    }
}
