//! Checks the budget and transfer-learning trends on the default grid.
//!
//! ```text
//! cargo run --release --example trends -- [config.cfg]
//! ```
//!
//! Prints, per client count, the seed-mean extracted accuracy and fidelity
//! of the scratch branch over increasing budgets, then the per-seed
//! comparison of the pretrained branch against the scratch branch.

use fedex::extraction::Branch;
use fedex::harness::{budget_trend, run_experiment, transfer_comparison, ExperimentConfig, Metric};

fn main() -> fedex::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let report = run_experiment(&cfg)?;
    for &c in &cfg.client_counts {
        for metric in [Metric::AccuracyExtracted, Metric::Fidelity] {
            let t = budget_trend(&report, c, Branch::Scratch, metric);
            println!(
                "clients={c:<3} {metric:?}: {:?} means={:?} inversions={} max_drop={:.4} holds={}",
                t.budgets,
                t.means
                    .iter()
                    .map(|v| format!("{v:.4}"))
                    .collect::<Vec<_>>(),
                t.inversions,
                t.max_drop,
                t.holds(1, 0.01)
            );
        }
    }
    let (small, mid) = (
        cfg.budgets[0],
        cfg.budgets.get(1).copied().unwrap_or(cfg.budgets[0]),
    );
    if let Some(t) = transfer_comparison(&report, small, mid) {
        println!(
            "scratch best seed-mean accuracy: {:.4}",
            t.scratch_best_mean
        );
        for (i, s) in t.seeds.iter().enumerate() {
            println!(
                "seed {s}: budget {small} pretrained {:.4} vs scratch {:.4}; budget {mid} pretrained {:.4}",
                t.small[i].0, t.small[i].1, t.mid_pretrained[i]
            );
        }
        println!(
            "pretrained >= scratch at {small}: {}/{}; pretrained at {mid} >= scratch best: {}/{}",
            t.small_budget_wins(),
            t.seeds.len(),
            t.mid_budget_wins(),
            t.seeds.len()
        );
    }
    Ok(())
}
