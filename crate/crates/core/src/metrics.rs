//! Accuracy, fidelity and KL divergence over a fixed labelled test set.
//!
//! All three are computed from prediction matrices with fixed-order
//! reductions, so results are independent of thread scheduling.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::{argmax, Tensor};

/// Lower clamp applied to the extracted model's probabilities in KL.
pub const KL_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy_victim: f64,
    pub accuracy_extracted: f64,
    pub fidelity: f64,
    pub kl_divergence: f64,
    pub test_size: usize,
}

fn check_test(test: &LabeledDataset) -> Result<()> {
    if test.is_empty() {
        return Err(Error::Domain("test set is empty".into()));
    }
    Ok(())
}

fn check_pair(victim: &dyn Classifier, extracted: &dyn Classifier) -> Result<()> {
    if victim.class_count() != extracted.class_count() {
        return Err(Error::dim(format!(
            "victim has {} classes, extracted {}",
            victim.class_count(),
            extracted.class_count()
        )));
    }
    if victim.input_shape() != extracted.input_shape() {
        return Err(Error::dim(format!(
            "victim input {:?} differs from extracted input {:?}",
            victim.input_shape(),
            extracted.input_shape()
        )));
    }
    Ok(())
}

fn check_matrices(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != 2 || a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "prediction matrices {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    if a.rows() == 0 {
        return Err(Error::Domain("no test points".into()));
    }
    Ok(())
}

/// Top-1 class of each row, lowest index on ties.
pub fn predicted_labels(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows()).map(|i| argmax(probs.row(i))).collect()
}

/// Fraction of rows whose top-1 class equals the label.
pub fn accuracy_from_probs(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::dim(format!(
            "{} prediction rows for {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Domain("no test points".into()));
    }
    let hits = predicted_labels(probs)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of rows on which both matrices agree on the top-1 class.
pub fn fidelity_from_probs(victim: &Tensor, extracted: &Tensor) -> Result<f64> {
    check_matrices(victim, extracted)?;
    let same = predicted_labels(victim)
        .iter()
        .zip(predicted_labels(extracted))
        .filter(|(a, b)| **a == *b)
        .count();
    Ok(same as f64 / victim.rows() as f64)
}

/// Mean over rows of KL(victim ‖ extracted), natural log, with the
/// extracted probabilities clamped to `[KL_EPSILON, 1]`.
///
/// Clamping can push an individual term slightly below zero when both
/// probabilities are under the clamp; the mean is floored at zero so the
/// result stays a divergence.
pub fn kl_from_probs(victim: &Tensor, extracted: &Tensor) -> Result<f64> {
    check_matrices(victim, extracted)?;
    let mut total = 0.0;
    for i in 0..victim.rows() {
        total += victim
            .row(i)
            .iter()
            .zip(extracted.row(i))
            .filter(|(&p, _)| p > 0.0)
            .map(|(&p, &q)| p * (p / q.clamp(KL_EPSILON, 1.0)).ln())
            .sum::<f64>();
    }
    Ok((total / victim.rows() as f64).max(0.0))
}

pub fn accuracy(model: &dyn Classifier, test: &LabeledDataset) -> Result<f64> {
    check_test(test)?;
    accuracy_from_probs(&model.predict(test.inputs())?, test.labels())
}

pub fn fidelity(
    victim: &dyn Classifier,
    extracted: &dyn Classifier,
    test: &LabeledDataset,
) -> Result<f64> {
    check_test(test)?;
    check_pair(victim, extracted)?;
    fidelity_from_probs(
        &victim.predict(test.inputs())?,
        &extracted.predict(test.inputs())?,
    )
}

pub fn kl_divergence(
    victim: &dyn Classifier,
    extracted: &dyn Classifier,
    test: &LabeledDataset,
) -> Result<f64> {
    check_test(test)?;
    check_pair(victim, extracted)?;
    kl_from_probs(
        &victim.predict(test.inputs())?,
        &extracted.predict(test.inputs())?,
    )
}

/// All three metrics from one prediction pass per model.
pub fn evaluate(
    victim: &dyn Classifier,
    extracted: &dyn Classifier,
    test: &LabeledDataset,
) -> Result<MetricsReport> {
    check_test(test)?;
    check_pair(victim, extracted)?;
    let pv = victim.predict(test.inputs())?;
    let pe = extracted.predict(test.inputs())?;
    Ok(MetricsReport {
        accuracy_victim: accuracy_from_probs(&pv, test.labels())?,
        accuracy_extracted: accuracy_from_probs(&pe, test.labels())?,
        fidelity: fidelity_from_probs(&pv, &pe)?,
        kl_divergence: kl_from_probs(&pv, &pe)?,
        test_size: test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchitectureSpec, ModelInstance};
    use crate::tensor::softmax_slice;
    use proptest::prelude::*;
    use rand::Rng;

    /// Returns fixed probability rows keyed by the first input feature.
    struct Table {
        rows: Vec<Vec<f64>>,
        k: usize,
    }

    impl Classifier for Table {
        fn input_shape(&self) -> &[usize] {
            &[1]
        }
        fn class_count(&self) -> usize {
            self.k
        }
        fn predict(&self, batch: &Tensor) -> Result<Tensor> {
            let mut out = Vec::new();
            for i in 0..batch.rows() {
                out.extend(&self.rows[batch.row(i)[0] as usize]);
            }
            Tensor::new(vec![batch.rows(), self.k], out)
        }
    }

    fn indexed_test(labels: Vec<usize>, k: usize) -> LabeledDataset {
        let n = labels.len();
        let inputs = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        LabeledDataset::new("t", inputs, labels, k, crate::data::Normalization::IDENTITY).unwrap()
    }

    fn onehot_rows(labels: &[usize], k: usize) -> Vec<Vec<f64>> {
        labels
            .iter()
            .map(|&y| (0..k).map(|c| if c == y { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    #[test]
    fn counting_examples() {
        let test = indexed_test(vec![0, 1, 2, 1], 3);
        let perfect = Table {
            rows: onehot_rows(&[0, 1, 2, 1], 3),
            k: 3,
        };
        assert_eq!(accuracy(&perfect, &test).unwrap(), 1.0);
        let three = Table {
            rows: onehot_rows(&[0, 1, 2, 2], 3),
            k: 3,
        };
        assert_eq!(accuracy(&three, &test).unwrap(), 0.75);

        let v = Table {
            rows: onehot_rows(&[0, 1, 1, 2], 3),
            k: 3,
        };
        let e = Table {
            rows: onehot_rows(&[0, 1, 2, 2], 3),
            k: 3,
        };
        assert_eq!(fidelity(&v, &e, &test).unwrap(), 0.75);
    }

    #[test]
    fn uniform_model_scores_class_zero_frequency() {
        let labels = vec![0, 1, 2, 0, 1, 2, 0, 0];
        let test = indexed_test(labels, 3);
        let uniform = Table {
            rows: vec![vec![1.0 / 3.0; 3]; 8],
            k: 3,
        };
        assert_eq!(accuracy(&uniform, &test).unwrap(), 4.0 / 8.0);
    }

    #[test]
    fn kl_of_one_hot_against_uniform_is_ln2() {
        let test = indexed_test(vec![0], 2);
        let v = Table {
            rows: vec![vec![1.0, 0.0]],
            k: 2,
        };
        let e = Table {
            rows: vec![vec![0.5, 0.5]],
            k: 2,
        };
        assert!((kl_divergence(&v, &e, &test).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let test = indexed_test(vec![0], 2);
        let empty = test.subset(&[], "e");
        let two = Table {
            rows: vec![vec![0.5, 0.5]],
            k: 2,
        };
        let three = Table {
            rows: vec![vec![0.2, 0.3, 0.5]],
            k: 3,
        };
        assert!(matches!(
            fidelity(&two, &three, &test),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            kl_divergence(&two, &three, &test),
            Err(Error::Dimension(_))
        ));
        if let Ok(empty) = empty {
            assert!(matches!(accuracy(&two, &empty), Err(Error::Domain(_))));
        }
    }

    fn random_probs(rng: &mut impl Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..k).map(|_| rng.random_range(-6.0..6.0)).collect();
                softmax_slice(&z).unwrap()
            })
            .collect()
    }

    fn brute(v: &[Vec<f64>], e: &[Vec<f64>], y: &[usize]) -> (f64, f64, f64, f64) {
        let top = |r: &Vec<f64>| {
            let mut best = 0;
            for c in 1..r.len() {
                if r[c] > r[best] {
                    best = c;
                }
            }
            best
        };
        let n = y.len() as f64;
        let mut av = 0.0;
        let mut ae = 0.0;
        let mut fid = 0.0;
        let mut kl = 0.0;
        for i in 0..y.len() {
            if top(&v[i]) == y[i] {
                av += 1.0;
            }
            if top(&e[i]) == y[i] {
                ae += 1.0;
            }
            if top(&v[i]) == top(&e[i]) {
                fid += 1.0;
            }
            for c in 0..v[i].len() {
                if v[i][c] > 0.0 {
                    kl += v[i][c] * (v[i][c] / e[i][c].max(KL_EPSILON)).ln();
                }
            }
        }
        (av / n, ae / n, fid / n, (kl / n).max(0.0))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn agrees_with_brute_force(n in 1usize..=100, k in 2usize..6, seed in any::<u64>()) {
            let mut rng = crate::seed::rng(seed, &[]);
            let v = random_probs(&mut rng, n, k);
            let e = random_probs(&mut rng, n, k);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let test = indexed_test(labels.clone(), k);
            let vm = Table { rows: v.clone(), k };
            let em = Table { rows: e.clone(), k };
            let r = evaluate(&vm, &em, &test).unwrap();
            let (av, ae, fid, kl) = brute(&v, &e, &labels);
            prop_assert_eq!(r.accuracy_victim, av);
            prop_assert_eq!(r.accuracy_extracted, ae);
            prop_assert_eq!(r.fidelity, fid);
            prop_assert!((r.kl_divergence - kl).abs() <= 1e-12);
            prop_assert!(r.kl_divergence >= 0.0);
            prop_assert!(r.fidelity >= r.accuracy_victim + r.accuracy_extracted - 1.0);
            prop_assert_eq!(r.accuracy_victim, accuracy(&vm, &test).unwrap());
            prop_assert_eq!(r.fidelity, fidelity(&vm, &em, &test).unwrap());
            prop_assert_eq!(r.kl_divergence, kl_divergence(&vm, &em, &test).unwrap());
        }

        #[test]
        fn self_pair_is_degenerate(seed in any::<u64>(), hidden in 1usize..12) {
            let spec = ArchitectureSpec::mlp(&[4], &[hidden], 3);
            let m = ModelInstance::initialize(&spec, seed).unwrap();
            let mut rng = crate::seed::rng(seed, &[1]);
            let xs = Tensor::new(vec![30, 4], (0..120).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
            let test = LabeledDataset::new("t", xs, labels, 3, crate::data::Normalization::IDENTITY).unwrap();
            let copy = m.clone();
            let r = evaluate(&m, &copy, &test).unwrap();
            prop_assert_eq!(r.fidelity, 1.0);
            prop_assert!(r.kl_divergence <= 1e-12);
            prop_assert_eq!(r.accuracy_victim, r.accuracy_extracted);
        }

        #[test]
        fn invariant_under_reordering(n in 2usize..40, seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut rng = crate::seed::rng(seed, &[]);
            let v = random_probs(&mut rng, n, 3);
            let e = random_probs(&mut rng, n, 3);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let pv = |rows: &[Vec<f64>], idx: &[usize]| Tensor::new(vec![idx.len(), 3], idx.iter().flat_map(|&i| rows[i].clone()).collect()).unwrap();
            let ident: Vec<usize> = (0..n).collect();
            let a = fidelity_from_probs(&pv(&v, &ident), &pv(&e, &ident)).unwrap();
            let b = fidelity_from_probs(&pv(&v, &perm), &pv(&e, &perm)).unwrap();
            prop_assert_eq!(a, b);
            let ka = kl_from_probs(&pv(&v, &ident), &pv(&e, &ident)).unwrap();
            let kb = kl_from_probs(&pv(&v, &perm), &pv(&e, &perm)).unwrap();
            prop_assert!((ka - kb).abs() <= 1e-12);
            let ly: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            prop_assert_eq!(
                accuracy_from_probs(&pv(&v, &ident), &labels).unwrap(),
                accuracy_from_probs(&pv(&v, &perm), &ly).unwrap()
            );
        }
    }
}
