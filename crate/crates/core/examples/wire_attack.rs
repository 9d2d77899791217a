//! Runs the oracle as an NDJSON/TCP service on loopback and attacks it
//! remotely, then repeats the attack in-process with the same seeds.
//!
//! ```text
//! cargo run --release --example wire_attack
//! ```
//!
//! Protocol: one JSON object per line. Request `{"id":1,"input":[...]}`;
//! response `{"id":1,"probs":[...]}` or `{"id":1,"error":"budget_exceeded"}`.

use std::sync::Arc;

use fedex::data::{split, synth_blobs};
use fedex::extraction::{run_attack, AttackConfig};
use fedex::federated::run_centralized;
use fedex::metrics::evaluate;
use fedex::model::{ArchitectureSpec, TrainConfig};
use fedex::oracle::wire::{OracleServer, RemoteOracle};
use fedex::oracle::{PredictionOracle, ResponseMode};

fn main() -> fedex::Result<()> {
    let bundle = split(
        &synth_blobs(3, 670, 8, 4.0, 1)?,
        synth_blobs(3, 1000, 8, 4.0, 2)?,
        3,
    )?;
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
    let attack = AttackConfig {
        n_query: 150,
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
    let pool = bundle.query_pool.unlabeled();

    let served = Arc::new(PredictionOracle::new(
        victim.clone(),
        150,
        ResponseMode::ProbabilityVector,
    ));
    let server = OracleServer::bind("127.0.0.1:0", Arc::clone(&served))?.spawn()?;
    println!("oracle listening on {}", server.addr());
    let remote = RemoteOracle::connect(server.addr(), &[8], 3, ResponseMode::ProbabilityVector)?;
    let (remote_model, _) = run_attack(&remote, &pool, &attack)?;
    println!(
        "server ledger after the remote attack: {} used",
        served.used()
    );
    let raw = remote.exchange_raw(&[r#"{"id":99,"input":[0,0,0,0,0,0,0,0]}"#.to_string()])?;
    println!("one more query on the wire: {}", raw[0]);
    server.shutdown();

    let local = PredictionOracle::new(victim.clone(), 150, ResponseMode::ProbabilityVector);
    let (local_model, _) = run_attack(&local, &pool, &attack)?;

    let a = evaluate(&victim, &remote_model, &bundle.test)?;
    let b = evaluate(&victim, &local_model, &bundle.test)?;
    println!("remote    {a:?}\nin-process {b:?}");
    println!(
        "identical surrogates: {}",
        remote_model.save_parameters() == local_model.save_parameters()
    );
    Ok(())
}
