//! The metered prediction API: budget exhaustion, all-or-nothing batches,
//! hard-label mode, concurrent callers and the optional query log.
//!
//! ```text
//! cargo run --release --example budgeted_oracle
//! ```

use std::sync::Arc;

use fedex::model::{ArchitectureSpec, ModelInstance};
use fedex::oracle::{PredictionApi, PredictionOracle, ResponseMode};
use fedex::tensor::Tensor;
use fedex::Error;

fn main() -> fedex::Result<()> {
    let spec = ArchitectureSpec::mlp(&[4], &[8], 3);
    let victim = ModelInstance::initialize(&spec, 1)?;
    let x = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0])?;

    let oracle =
        PredictionOracle::new(victim.clone(), 5, ResponseMode::ProbabilityVector).with_query_log();
    for i in 0..5 {
        println!("query {i}: {:?}", oracle.query(&x)?);
    }
    match oracle.query(&x) {
        Err(Error::BudgetExceeded {
            requested,
            remaining,
        }) => {
            println!("6th query refused: requested {requested}, remaining {remaining}")
        }
        other => panic!("expected a budget error, got {other:?}"),
    }
    let ledger = oracle.ledger();
    println!(
        "ledger: used {} of {}, {} log entries",
        ledger.used(),
        ledger.budget(),
        ledger.log().map_or(0, |l| l.len())
    );

    // A batch larger than the remaining budget is refused without charge.
    let batch = Tensor::new(vec![3, 4], [x.data(), x.data(), x.data()].concat())?;
    let small = PredictionOracle::new(victim.clone(), 2, ResponseMode::ProbabilityVector);
    println!(
        "batch of 3 on budget 2: {:?}",
        small.query_batch(&batch).map(|r| r.len())
    );
    println!("used after refused batch: {}", small.used());

    // Wrong shapes are rejected before any budget is spent.
    let bad = Tensor::new(vec![3], vec![1.0, 2.0, 3.0])?;
    println!(
        "bad shape: {:?}, used {}",
        small.query(&bad).err(),
        small.used()
    );

    let hard = PredictionOracle::new(victim.clone(), 1, ResponseMode::HardLabel);
    println!("hard-label answer: {:?}", hard.query(&x)?);

    // Four threads race for a budget of 100: exactly 100 succeed.
    let shared = Arc::new(PredictionOracle::new(
        victim,
        100,
        ResponseMode::ProbabilityVector,
    ));
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let o = Arc::clone(&shared);
            let x = x.clone();
            std::thread::spawn(move || (0..50).filter(|_| o.query(&x).is_ok()).count())
        })
        .collect();
    let ok: usize = handles.into_iter().map(|h| h.join().expect("thread")).sum();
    println!("concurrent successes {ok}, ledger used {}", shared.used());
    Ok(())
}
