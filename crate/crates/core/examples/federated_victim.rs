//! Trains the victim with FedAvg over IID client shards and prints the
//! per-round audit records as JSON lines.
//!
//! ```text
//! cargo run --release --example federated_victim -- [clients] [rounds]
//! ```
//!
//! Also shows that one client reproduces centralised training bitwise.

use fedex::data::{shard, split, synth_blobs};
use fedex::federated::{run_centralized, run_federation, write_round_records, FederationConfig};
use fedex::metrics::accuracy;
use fedex::model::{ArchitectureSpec, Provenance, TrainConfig};

fn main() -> fedex::Result<()> {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<usize>().expect("integer argument"));
    let clients = args.next().unwrap_or(5);
    let rounds = args.next().unwrap_or(5);

    let data = synth_blobs(3, 670, 8, 4.0, 1)?;
    let bundle = split(&data, synth_blobs(3, 1000, 8, 4.0, 2)?, 3)?;
    let spec = ArchitectureSpec::mlp(&[8], &[16], 3);
    let local = TrainConfig {
        seed: 11,
        ..TrainConfig::default()
    };

    let shards = shard(&bundle.victim_train, clients, 7)?;
    println!("shard sizes {:?}", shards.sample_counts());
    let cfg = FederationConfig {
        client_count: clients,
        rounds,
        local_epochs_per_round: 2,
        local_train: local.clone(),
        seed: 11,
    };
    let (global, records) = run_federation(&shards, &spec, &cfg)?;
    write_round_records(&records, std::io::stdout().lock())?;
    println!(
        "{clients}-client victim: test accuracy {:.4}, provenance {:?}",
        accuracy(&global, &bundle.test)?,
        global.provenance()
    );

    // N = 1 with matched seeds and epochs is plain centralised training.
    let one = shard(&bundle.victim_train, 1, 7)?;
    let (fed1, _) = run_federation(
        &one,
        &spec,
        &FederationConfig {
            client_count: 1,
            ..cfg
        },
    )?;
    let central = run_centralized(
        &bundle.victim_train,
        &spec,
        &TrainConfig {
            epochs: rounds * 2,
            ..local
        },
    )?;
    assert_eq!(fed1.provenance(), Provenance::FederatedTrained);
    let same = fed1
        .parameter_tensors()
        .iter()
        .zip(central.parameter_tensors())
        .all(|(a, b)| {
            a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });
    println!("single-client federation == centralised (bitwise): {same}");
    Ok(())
}
