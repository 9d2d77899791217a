//! MNIST-family run from raw IDX files: a basic_cnn victim trained by
//! FedAvg over 5 clients for 5 rounds, then a 10k-query extraction.
//!
//! ```text
//! cargo run --release --example mnist -- <dir-with-idx-files>
//! ```
//!
//! The directory must hold the four uncompressed files
//! `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
//! `t10k-images-idx3-ubyte` and `t10k-labels-idx1-ubyte`.

use std::path::PathBuf;
use std::time::Instant;

use fedex::extraction::Branch;
use fedex::harness::{run_cell, train_victim, Cell, DatasetSource, ExperimentConfig, Workload};
use fedex::metrics::accuracy;
use fedex::oracle::PredictionOracle;

fn main() -> fedex::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).expect("usage: mnist <idx-dir>"));
    let mut cfg =
        ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/mnist.cfg"))?;
    if let DatasetSource::Idx {
        train_images,
        train_labels,
        test_images,
        test_labels,
        ..
    } = &mut cfg.dataset
    {
        *train_images = dir.join("train-images-idx3-ubyte");
        *train_labels = dir.join("train-labels-idx1-ubyte");
        *test_images = dir.join("t10k-images-idx3-ubyte");
        *test_labels = dir.join("t10k-labels-idx1-ubyte");
    }
    let start = Instant::now();
    let work = Workload::prepare(&cfg)?;
    println!(
        "victim_train={} pool={} aux={} test={}",
        work.bundle.victim_train.len(),
        work.bundle.query_pool.len(),
        work.auxiliary.len(),
        work.bundle.test.len()
    );
    let victim = train_victim(&cfg, &work, 5)?;
    println!(
        "victim test accuracy {:.4} after {:.0}s",
        accuracy(&victim.model, &work.bundle.test)?,
        start.elapsed().as_secs_f64()
    );
    let budget = 10_000.min(work.bundle.query_pool.len());
    let cell = Cell {
        clients: 5,
        budget,
        branch: Branch::Scratch,
        seed: 0,
    };
    let oracle = PredictionOracle::new(victim.model.clone(), budget, cfg.oracle_mode);
    let (_, _, report) = run_cell(&cfg, &work, &victim.model, &oracle, cell, None)?;
    println!(
        "{budget}-query extraction: {report:?} after {:.0}s",
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
