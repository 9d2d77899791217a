//! The prediction API an attacker talks to.
//!
//! [`PredictionApi`] is the whole attacker-facing surface: input shape, class
//! count, response mode, remaining budget and the two query calls. The
//! in-process [`PredictionOracle`] keeps its victim private; [`wire`] serves
//! the same contract as newline-delimited JSON over TCP.

pub mod wire;

use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{check_batch, Classifier, ModelInstance};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseMode {
    #[default]
    ProbabilityVector,
    HardLabel,
}

impl std::str::FromStr for ResponseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probability_vector" | "probability" | "probs" => Ok(Self::ProbabilityVector),
            "hard_label" | "label" => Ok(Self::HardLabel),
            other => Err(Error::config(format!("unknown response mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for ResponseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ProbabilityVector => "probability_vector",
            Self::HardLabel => "hard_label",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OracleResponse {
    Probabilities(Vec<f64>),
    Label(usize),
}

impl OracleResponse {
    pub fn mode(&self) -> ResponseMode {
        match self {
            OracleResponse::Probabilities(_) => ResponseMode::ProbabilityVector,
            OracleResponse::Label(_) => ResponseMode::HardLabel,
        }
    }

    /// Probability row; labels become one-hot rows.
    pub fn to_distribution(&self, class_count: usize) -> Vec<f64> {
        match self {
            OracleResponse::Probabilities(p) => p.clone(),
            OracleResponse::Label(k) => {
                let mut row = vec![0.0; class_count];
                row[*k] = 1.0;
                row
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub query_hash: String,
    pub timestamp_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLedger {
    budget: usize,
    used: usize,
    log: Option<Vec<LogEntry>>,
}

impl QueryLedger {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            used: 0,
            log: None,
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.used
    }

    pub fn log(&self) -> Option<&[LogEntry]> {
        self.log.as_deref()
    }

    /// Reserves `count` queries or fails without touching the ledger.
    fn reserve(&mut self, count: usize) -> Result<()> {
        if count > self.remaining() {
            return Err(Error::BudgetExceeded {
                requested: count,
                remaining: self.remaining(),
            });
        }
        self.used += count;
        Ok(())
    }

    fn refund(&mut self, count: usize) {
        self.used -= count;
    }
}

/// What an attacker can see and do.
pub trait PredictionApi: Send + Sync {
    fn input_shape(&self) -> &[usize];

    fn class_count(&self) -> usize;

    fn mode(&self) -> ResponseMode;

    /// `None` when the budget is not observable (remote APIs).
    fn remaining(&self) -> Option<usize>;

    /// One input of exactly `input_shape()`.
    fn query(&self, input: &Tensor) -> Result<OracleResponse>;

    /// A `[m, input_shape…]` batch; all-or-nothing on the budget.
    fn query_batch(&self, inputs: &Tensor) -> Result<Vec<OracleResponse>>;
}

/// In-process MLaaS endpoint wrapping a private victim model.
#[derive(Debug)]
pub struct PredictionOracle {
    victim: ModelInstance,
    ledger: Mutex<QueryLedger>,
    mode: ResponseMode,
}

impl PredictionOracle {
    pub fn new(victim: ModelInstance, budget: usize, mode: ResponseMode) -> Self {
        Self {
            victim,
            ledger: Mutex::new(QueryLedger::new(budget)),
            mode,
        }
    }

    /// Records a hash and timestamp for every answered query.
    pub fn with_query_log(self) -> Self {
        self.ledger.lock().unwrap().log = Some(Vec::new());
        self
    }

    pub fn ledger(&self) -> QueryLedger {
        self.ledger.lock().unwrap().clone()
    }

    pub fn used(&self) -> usize {
        self.ledger.lock().unwrap().used
    }

    fn respond(&self, probs: &[f64]) -> OracleResponse {
        match self.mode {
            ResponseMode::ProbabilityVector => OracleResponse::Probabilities(probs.to_vec()),
            ResponseMode::HardLabel => OracleResponse::Label(argmax(probs)),
        }
    }

    fn answer(&self, batch: &Tensor) -> Result<Vec<OracleResponse>> {
        let m = batch.rows();
        {
            let mut ledger = self.ledger.lock().unwrap();
            ledger.reserve(m)?;
            if let Some(log) = ledger.log.as_mut() {
                let now = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_millis())
                    .unwrap_or(0);
                for i in 0..m {
                    let mut h = Sha256::new();
                    for v in batch.row(i) {
                        h.update(v.to_le_bytes());
                    }
                    log.push(LogEntry {
                        query_hash: hex::encode(&h.finalize()[..8]),
                        timestamp_ms: now,
                    });
                }
            }
        }
        match self.victim.predict(batch) {
            Ok(probs) => Ok((0..m).map(|i| self.respond(probs.row(i))).collect()),
            Err(e) => {
                let mut ledger = self.ledger.lock().unwrap();
                ledger.refund(m);
                if let Some(log) = ledger.log.as_mut() {
                    log.truncate(log.len().saturating_sub(m));
                }
                Err(e)
            }
        }
    }
}

impl PredictionApi for PredictionOracle {
    fn input_shape(&self) -> &[usize] {
        self.victim.input_shape()
    }

    fn class_count(&self) -> usize {
        self.victim.class_count()
    }

    fn mode(&self) -> ResponseMode {
        self.mode
    }

    fn remaining(&self) -> Option<usize> {
        Some(self.ledger.lock().unwrap().remaining())
    }

    fn query(&self, input: &Tensor) -> Result<OracleResponse> {
        if input.shape() != self.input_shape() {
            return Err(Error::dim(format!(
                "query shape {:?} does not match input shape {:?}",
                input.shape(),
                self.input_shape()
            )));
        }
        let mut shape = vec![1];
        shape.extend(input.shape());
        let batch = input.clone().reshape(shape)?;
        Ok(self.answer(&batch)?.remove(0))
    }

    fn query_batch(&self, inputs: &Tensor) -> Result<Vec<OracleResponse>> {
        check_batch(inputs, self.input_shape())?;
        self.answer(inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchitectureSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn victim() -> ModelInstance {
        ModelInstance::initialize(&ArchitectureSpec::mlp(&[4], &[6], 3), 1).unwrap()
    }

    fn inputs(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![n, 4],
            (0..4 * n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    fn item(batch: &Tensor, i: usize) -> Tensor {
        Tensor::new(vec![4], batch.row(i).to_vec()).unwrap()
    }

    #[test]
    fn budget_is_enforced_per_query() {
        let oracle = PredictionOracle::new(victim(), 5, ResponseMode::ProbabilityVector);
        let x = inputs(6, 1);
        for i in 0..5 {
            oracle.query(&item(&x, i)).unwrap();
        }
        assert!(matches!(
            oracle.query(&item(&x, 5)),
            Err(Error::BudgetExceeded { .. })
        ));
        assert_eq!(oracle.used(), 5);
    }

    #[test]
    fn repeated_queries_are_metered_and_identical() {
        let oracle = PredictionOracle::new(victim(), 10, ResponseMode::ProbabilityVector);
        let q = item(&inputs(1, 2), 0);
        let a = oracle.query(&q).unwrap();
        let b = oracle.query(&q).unwrap();
        assert_eq!(a, b);
        assert_eq!(oracle.used(), 2);
        if let OracleResponse::Probabilities(p) = a {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        } else {
            panic!("expected probabilities");
        }
    }

    #[test]
    fn hard_label_is_argmax_of_probabilities() {
        let soft = PredictionOracle::new(victim(), 20, ResponseMode::ProbabilityVector);
        let hard = PredictionOracle::new(victim(), 20, ResponseMode::HardLabel);
        let x = inputs(20, 3);
        for (s, h) in soft
            .query_batch(&x)
            .unwrap()
            .iter()
            .zip(hard.query_batch(&x).unwrap())
        {
            let probs = s.to_distribution(3);
            assert_eq!(h, OracleResponse::Label(argmax(&probs)));
        }
    }

    #[test]
    fn shape_mismatch_does_not_consume_budget() {
        let oracle = PredictionOracle::new(victim(), 3, ResponseMode::ProbabilityVector);
        assert!(matches!(
            oracle.query(&Tensor::zeros(&[5])),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            oracle.query_batch(&Tensor::zeros(&[2, 3])),
            Err(Error::Dimension(_))
        ));
        assert_eq!(oracle.used(), 0);
    }

    #[test]
    fn batch_accounting_is_atomic() {
        let oracle = PredictionOracle::new(victim(), 10, ResponseMode::ProbabilityVector);
        oracle.query_batch(&inputs(4, 1)).unwrap();
        assert!(matches!(
            oracle.query_batch(&inputs(7, 2)),
            Err(Error::BudgetExceeded {
                requested: 7,
                remaining: 6
            })
        ));
        assert_eq!(oracle.used(), 4);
        oracle.query_batch(&inputs(6, 3)).unwrap();
        assert_eq!(oracle.remaining(), Some(0));
    }

    #[test]
    fn batch_equals_sequential() {
        let x = inputs(8, 4);
        let batched = PredictionOracle::new(victim(), 8, ResponseMode::ProbabilityVector)
            .query_batch(&x)
            .unwrap();
        let seq_oracle = PredictionOracle::new(victim(), 8, ResponseMode::ProbabilityVector);
        for (i, r) in batched.iter().enumerate() {
            assert_eq!(&seq_oracle.query(&item(&x, i)).unwrap(), r);
        }
    }

    #[test]
    fn concurrent_callers_never_overdraw() {
        let oracle = Arc::new(PredictionOracle::new(
            victim(),
            100,
            ResponseMode::ProbabilityVector,
        ));
        let handles: Vec<_> = (0..4)
            .map(|t| {
                let oracle = Arc::clone(&oracle);
                std::thread::spawn(move || {
                    let x = inputs(60, t);
                    let mut ok = 0;
                    for i in 0..60 {
                        if i % 3 == 0 {
                            if oracle
                                .query_batch(&x.select_rows(&[i, (i + 1) % 60]).unwrap())
                                .is_ok()
                            {
                                ok += 2;
                            }
                        } else if oracle.query(&item(&x, i)).is_ok() {
                            ok += 1;
                        }
                    }
                    ok
                })
            })
            .collect();
        let answered: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
        assert_eq!(answered, 100);
        assert_eq!(oracle.used(), 100);
    }

    #[test]
    fn query_log_records_answered_queries() {
        let oracle =
            PredictionOracle::new(victim(), 3, ResponseMode::ProbabilityVector).with_query_log();
        oracle.query_batch(&inputs(2, 5)).unwrap();
        let _ = oracle.query_batch(&inputs(2, 6));
        let ledger = oracle.ledger();
        assert_eq!(ledger.log().unwrap().len(), 2);
        assert_eq!(ledger.used(), 2);
    }
}
