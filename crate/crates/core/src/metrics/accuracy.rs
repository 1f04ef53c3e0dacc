use serde::{Deserialize, Serialize};

use crate::capsule::argmax_rows;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dataset_tag: String,
    pub n_examples: usize,
    pub accuracy: f64,
    /// Accuracy restricted to each true class; empty for two-label data.
    pub per_class_accuracy: Vec<f64>,
    pub seed: u64,
}

/// Fraction of rows whose argmax equals the label (ties go to the lowest
/// class index).
pub fn accuracy<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> f64 {
    let pred = argmax_rows(probs);
    assert_eq!(pred.len(), labels.len(), "one label per row");
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

pub fn per_class_accuracy<T: Scalar>(probs: &Tensor<T>, labels: &[usize], num_classes: usize) -> Vec<f64> {
    let pred = argmax_rows(probs);
    let mut hit = vec![0usize; num_classes];
    let mut seen = vec![0usize; num_classes];
    for (p, &l) in pred.iter().zip(labels) {
        seen[l] += 1;
        hit[l] += (*p == l) as usize;
    }
    hit.iter().zip(&seen).map(|(&h, &s)| if s == 0 { f64::NAN } else { h as f64 / s as f64 }).collect()
}

/// The two highest-scoring classes of a row, ties resolved towards lower
/// indices.
pub fn top2(row: &[impl PartialOrd + Copy]) -> [usize; 2] {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    [idx[0], idx[1]]
}

/// Fraction of rows whose top-2 class set equals the label pair.
pub fn top2_multitarget_accuracy<T: Scalar>(probs: &Tensor<T>, label_pairs: &[[usize; 2]]) -> f64 {
    let n = *probs.shape().last().expect("rank 2");
    let hits = probs
        .data()
        .chunks(n)
        .zip(label_pairs)
        .filter(|(row, pair)| {
            let [a, b] = top2(row);
            (a == pair[0] && b == pair[1]) || (a == pair[1] && b == pair[0])
        })
        .count();
    hits as f64 / label_pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn perfect_and_tied_predictions() {
        let p = Tensor::<f64>::from_f64([2, 3], &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(accuracy(&p, &[1, 2]), 1.0);
        let u = Tensor::<f64>::full([4, 10], 0.1);
        assert_eq!(accuracy(&u, &[0, 0, 3, 0]), 0.75);
    }

    #[test]
    fn random_accuracy_is_near_chance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let data: Vec<f64> = (0..n * 10).map(|_| rng.gen()).collect();
        let p = Tensor::<f64>::from_f64([n, 10], &data).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        assert!((accuracy(&p, &labels) - 0.1).abs() < 0.02);
    }

    #[test]
    fn top2_set_semantics() {
        let mut row = [0.0; 10];
        row[3] = 0.9;
        row[7] = 0.8;
        let p = Tensor::<f64>::from_f64([1, 10], &row).unwrap();
        assert_eq!(top2_multitarget_accuracy(&p, &[[7, 3]]), 1.0);
        assert_eq!(top2_multitarget_accuracy(&p, &[[3, 4]]), 0.0);
        assert_eq!(top2(&[0.5, 0.5, 0.5]), [0, 1]);
    }

    #[test]
    fn per_class_counts() {
        let p = Tensor::<f64>::from_f64([3, 2], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(per_class_accuracy(&p, &[0, 1, 1], 2), vec![1.0, 0.5]);
    }
}
