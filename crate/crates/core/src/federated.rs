//! Simulated federated training with FedAvg, and the centralised baseline.
//!
//! Each client owns a persistent [`Trainer`], so its momentum buffers and
//! epoch counter survive from one round to the next while its parameters are
//! overwritten by every broadcast. Client `k` shuffles with seed
//! `local_train.seed + k`. With one client and matched seeds this makes a
//! federation bitwise identical to centralised training.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShards, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{one_hot, ArchitectureSpec, ModelInstance, Provenance, TrainConfig, Trainer};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub client_count: usize,
    pub rounds: usize,
    pub local_epochs_per_round: usize,
    pub local_train: TrainConfig,
    /// Seeds the initial global model.
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.client_count == 0 {
            return Err(Error::config("federation needs at least one client"));
        }
        if self.rounds == 0 {
            return Err(Error::config("federation needs at least one round"));
        }
        if self.local_epochs_per_round == 0 {
            return Err(Error::config("local_epochs_per_round must be positive"));
        }
        Ok(())
    }
}

/// Audit record for one aggregation round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: usize,
    pub sample_counts: Vec<usize>,
    /// Mean loss of each client's last local epoch.
    pub local_losses: Vec<f64>,
    pub global_hash: String,
}

/// Writes one JSON object per line.
pub fn write_round_records(records: &[RoundRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn client_train_config(local_train: &TrainConfig, client: usize) -> TrainConfig {
    TrainConfig {
        seed: local_train.seed.wrapping_add(client as u64),
        ..local_train.clone()
    }
}

fn labeled_targets(shard: &LabeledDataset) -> Result<Tensor> {
    one_hot(shard.labels(), shard.class_count())
}

/// Trains a copy of the global model on one shard with fresh optimiser state.
pub fn local_update(
    global: &ModelInstance,
    shard: &LabeledDataset,
    local_train: &TrainConfig,
    local_epochs: usize,
) -> Result<ModelInstance> {
    if shard.is_empty() {
        return Err(Error::config("local update on an empty shard"));
    }
    let targets = labeled_targets(shard)?;
    let mut trainer = Trainer::new(global, local_train);
    trainer.run_epochs(shard.inputs(), &targets, local_epochs)?;
    Ok(trainer.into_model())
}

/// Sample-weighted parameter average, accumulated in ascending client order.
pub fn fedavg(updates: &[(ModelInstance, usize)]) -> Result<ModelInstance> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| Error::Aggregation("no client updates".into()))?;
    if let Some((m, _)) = updates.iter().find(|(m, _)| m.spec() != first.spec()) {
        return Err(Error::Aggregation(format!(
            "spec mismatch: `{}` vs `{}`",
            first.spec(),
            m.spec()
        )));
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Aggregation("total sample count is zero".into()));
    }
    let weights: Vec<f64> = updates
        .iter()
        .map(|(_, n)| *n as f64 / total as f64)
        .collect();

    let mut global = first.clone();
    for (slot, t) in global.parameters_mut().into_iter().enumerate() {
        let w0 = weights[0];
        for v in t.data_mut() {
            *v *= w0;
        }
        for ((model, _), &w) in updates.iter().zip(&weights).skip(1) {
            let src = model.parameter_tensors()[slot];
            for (acc, &x) in t.data_mut().iter_mut().zip(src.data()) {
                *acc += w * x;
            }
        }
    }
    Ok(global)
}

/// Initialise, then `rounds` × {broadcast, local training, FedAvg}.
pub fn run_federation(
    shards: &ClientShards,
    spec: &ArchitectureSpec,
    config: &FederationConfig,
) -> Result<(ModelInstance, Vec<RoundRecord>)> {
    config.validate()?;
    if shards.client_count() != config.client_count {
        return Err(Error::config(format!(
            "config expects {} clients, got {} shards",
            config.client_count,
            shards.client_count()
        )));
    }
    if let Some(k) = shards.shards.iter().position(LabeledDataset::is_empty) {
        return Err(Error::config(format!("client {k} has an empty shard")));
    }
    let mut global = ModelInstance::initialize(spec, config.seed)?;
    let targets: Vec<Tensor> = shards
        .shards
        .iter()
        .map(labeled_targets)
        .collect::<Result<_>>()?;
    let counts = shards.sample_counts();
    let mut trainers: Vec<Trainer> = (0..config.client_count)
        .map(|k| Trainer::new(&global, &client_train_config(&config.local_train, k)))
        .collect();

    let mut records = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let results: Vec<Result<(ModelInstance, f64)>> = trainers
            .par_iter_mut()
            .zip(shards.shards.par_iter().zip(targets.par_iter()))
            .map(|(trainer, (shard, t))| {
                trainer.load_parameters_from(&global)?;
                let losses =
                    trainer.run_epochs(shard.inputs(), t, config.local_epochs_per_round)?;
                Ok((trainer.model().clone(), *losses.last().unwrap_or(&f64::NAN)))
            })
            .collect();
        let mut updates = Vec::with_capacity(results.len());
        let mut losses = Vec::with_capacity(results.len());
        for (r, &n) in results.into_iter().zip(&counts) {
            let (model, loss) = r?;
            updates.push((model, n));
            losses.push(loss);
        }
        global = fedavg(&updates)?;
        records.push(RoundRecord {
            round_index: round,
            sample_counts: counts.clone(),
            local_losses: losses,
            global_hash: global.fingerprint(),
        });
    }
    global.set_provenance(Provenance::FederatedTrained);
    Ok((global, records))
}

/// Plain training on the whole victim half.
pub fn run_centralized(
    victim_train: &LabeledDataset,
    spec: &ArchitectureSpec,
    config: &TrainConfig,
) -> Result<ModelInstance> {
    let init = ModelInstance::initialize(spec, config.seed)?;
    let targets = labeled_targets(victim_train)?;
    let trained = crate::model::train(&init, victim_train.inputs(), &targets, config)?;
    trained.with_provenance(Provenance::CentralizedTrained)
}
