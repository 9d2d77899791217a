//! End to end in one file: data, a centrally trained victim, a budgeted
//! oracle, a from-scratch extraction attack and the three metrics.
//!
//! ```text
//! cargo run --release --example quickstart
//! ```

use fedex::data::{split, synth_blobs};
use fedex::extraction::{run_attack, AttackConfig};
use fedex::federated::run_centralized;
use fedex::metrics::evaluate;
use fedex::model::{ArchitectureSpec, TrainConfig};
use fedex::oracle::{PredictionOracle, ResponseMode};

fn main() -> fedex::Result<()> {
    // 3 Gaussian classes in 8 dimensions; the test set is an independent draw.
    let data = synth_blobs(3, 670, 8, 4.0, 1)?;
    let test = synth_blobs(3, 1000, 8, 4.0, 2)?;
    let bundle = split(&data, test, 3)?;
    println!(
        "victim_train={} query_pool={} test={}",
        bundle.victim_train.len(),
        bundle.query_pool.len(),
        bundle.test.len()
    );

    let spec = ArchitectureSpec::mlp(&[8], &[16], 3);
    let victim_cfg = TrainConfig {
        epochs: 10,
        seed: 4,
        ..TrainConfig::default()
    };
    let victim = run_centralized(&bundle.victim_train, &spec, &victim_cfg)?;
    println!("victim {} ({})", victim.spec(), victim.fingerprint());

    // The attacker only sees the oracle and an unlabeled view of its pool.
    let oracle = PredictionOracle::new(victim.clone(), 200, ResponseMode::ProbabilityVector);
    let attack = AttackConfig {
        n_query: 200,
        pre_train: false,
        pretrain_source: None,
        surrogate_spec: spec.clone(),
        surrogate_train: TrainConfig {
            learning_rate: 0.02,
            epochs: 30,
            batch_size: 16,
            seed: 5,
            momentum: 0.9,
        },
        fine_tune: TrainConfig::default(),
        query_seed: 6,
    };
    let (surrogate, extracted) = run_attack(&oracle, &bundle.query_pool.unlabeled(), &attack)?;
    println!(
        "harvested {} pairs, oracle used {}/200",
        extracted.len(),
        oracle.used()
    );

    let report = evaluate(&victim, &surrogate, &bundle.test)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("serializable")
    );
    Ok(())
}
