//! Runs the experiment grid and prints per-cell means.
//!
//! ```text
//! cargo run --release --example sweep -- [config.cfg] [out-dir]
//! ```
//!
//! Without arguments the built-in default grid is used (3-class blobs,
//! clients {0,5,10}, budgets {50,100,200,400}, both branches, 5 seeds).

use fedex::harness::{run_experiment, summarize, summary_csv, write_outputs, ExperimentConfig};

fn main() -> fedex::Result<()> {
    let mut args = std::env::args().skip(1);
    let cfg = match args.next() {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let start = std::time::Instant::now();
    let report = run_experiment(&cfg)?;
    println!(
        "{} rows in {:.1}s",
        report.rows.len(),
        start.elapsed().as_secs_f64()
    );
    print!("{}", summary_csv(&summarize(&report)));
    if let Some(dir) = args.next() {
        for p in write_outputs(&cfg, &report, dir.as_ref())? {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}
