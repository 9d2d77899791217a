//! Scratch extraction versus fine-tuning a surrogate pretrained on a
//! disjoint auxiliary split, across query budgets.
//!
//! ```text
//! cargo run --release --example transfer_attack
//! ```

use fedex::data::{split, synth_blobs};
use fedex::extraction::{pretrain_surrogate, run_attack, AttackConfig, PretrainSource};
use fedex::federated::run_centralized;
use fedex::metrics::{accuracy, evaluate};
use fedex::model::{ArchitectureSpec, TrainConfig};
use fedex::oracle::{PredictionOracle, ResponseMode};

fn schedule(lr: f64, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        epochs,
        batch_size: 16,
        seed,
        momentum: 0.9,
    }
}

fn main() -> fedex::Result<()> {
    let bundle = split(
        &synth_blobs(3, 670, 8, 4.0, 1)?,
        synth_blobs(3, 1000, 8, 4.0, 2)?,
        3,
    )?;
    // An independent draw: same task, disjoint rows, attacker-owned labels.
    let auxiliary = synth_blobs(3, 1000, 8, 4.0, 99)?;
    let spec = ArchitectureSpec::mlp(&[8], &[16], 3);
    let victim = run_centralized(
        &bundle.victim_train,
        &spec,
        &TrainConfig {
            epochs: 10,
            seed: 4,
            ..TrainConfig::default()
        },
    )?;

    let pretrain_cfg = TrainConfig {
        learning_rate: 0.005,
        epochs: 30,
        batch_size: 32,
        seed: 8,
        momentum: 0.9,
    };
    let pretrained = pretrain_surrogate(
        &spec,
        &auxiliary,
        &pretrain_cfg,
        &[&bundle.victim_train, &bundle.query_pool, &bundle.test],
    )?;
    println!(
        "victim accuracy {:.4}; pretrained surrogate before any query {:.4}",
        accuracy(&victim, &bundle.test)?,
        accuracy(&pretrained, &bundle.test)?
    );

    println!("budget  scratch_acc  scratch_fid  pretrained_acc  pretrained_fid");
    for budget in [25, 50, 100, 200, 400] {
        let mut cfg = AttackConfig {
            n_query: budget,
            pre_train: false,
            pretrain_source: None,
            surrogate_spec: spec.clone(),
            surrogate_train: schedule(0.02, 30, 5),
            fine_tune: schedule(0.002, 20, 6),
            query_seed: 7,
        };
        let pool = bundle.query_pool.unlabeled();
        let scratch = {
            let oracle =
                PredictionOracle::new(victim.clone(), budget, ResponseMode::ProbabilityVector);
            evaluate(&victim, &run_attack(&oracle, &pool, &cfg)?.0, &bundle.test)?
        };
        cfg.pre_train = true;
        cfg.pretrain_source = Some(PretrainSource::Loaded(pretrained.clone()));
        let tuned = {
            let oracle =
                PredictionOracle::new(victim.clone(), budget, ResponseMode::ProbabilityVector);
            evaluate(&victim, &run_attack(&oracle, &pool, &cfg)?.0, &bundle.test)?
        };
        println!(
            "{budget:>6}  {:>11.4}  {:>11.4}  {:>14.4}  {:>14.4}",
            scratch.accuracy_extracted, scratch.fidelity, tuned.accuracy_extracted, tuned.fidelity
        );
    }
    Ok(())
}
