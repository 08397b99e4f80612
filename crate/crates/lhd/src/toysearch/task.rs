//! Synthetic classification task with a planted band-structured transform,
//! standing in for image datasets at desk scale.
//!
//! Features pass through a hidden banded linear map followed by a tanh and a
//! class projection; the label is the argmax. Operations whose band pattern
//! matches the planted one can express the mapping, so distinct op kinds
//! carry distinct utility. Generation is deterministic per seed and the
//! train/val split is disjoint by construction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::toysearch::tape::Matrix;

/// Deterministic synthetic dataset with disjoint train and validation rows.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub d: usize,
    pub n_classes: usize,
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub val_x: Matrix,
    pub val_y: Vec<usize>,
}

impl ToyTask {
    pub fn generate(d: usize, n_classes: usize, n_train: usize, n_val: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planted = Matrix::from_fn(d, d, |i, j| {
            let diff = j as i64 - i as i64;
            if (-1..=1).contains(&diff) {
                1.4 * randn(&mut rng)
            } else {
                0.0
            }
        });
        let class_proj = Matrix::from_fn(d, n_classes, |_, _| randn(&mut rng));
        let total = n_train + n_val;
        let xs = Matrix::from_fn(total, d, |_, _| randn(&mut rng));
        let labels: Vec<usize> = (0..total).map(|r| label_of(&xs, r, &planted, &class_proj)).collect();
        let take = |lo: usize, hi: usize| {
            let x = Matrix::from_fn(hi - lo, d, |r, c| xs.get(lo + r, c));
            let y = labels[lo..hi].to_vec();
            (x, y)
        };
        let (train_x, train_y) = take(0, n_train);
        let (val_x, val_y) = take(n_train, total);
        ToyTask {
            d,
            n_classes,
            train_x,
            train_y,
            val_x,
            val_y,
        }
    }

    /// Rows of the train split selected by index, with their labels.
    pub fn train_batch(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        gather(&self.train_x, &self.train_y, idx)
    }

    pub fn val_batch(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        gather(&self.val_x, &self.val_y, idx)
    }
}

fn gather(x: &Matrix, y: &[usize], idx: &[usize]) -> (Matrix, Vec<usize>) {
    let bx = Matrix::from_fn(idx.len(), x.cols, |r, c| x.get(idx[r], c));
    let by = idx.iter().map(|&i| y[i]).collect();
    (bx, by)
}

fn label_of(xs: &Matrix, row: usize, planted: &Matrix, proj: &Matrix) -> usize {
    let d = planted.rows;
    let mut hidden = vec![0.0; d];
    for j in 0..d {
        let mut acc = 0.0;
        for i in 0..d {
            acc += xs.get(row, i) * planted.get(i, j);
        }
        hidden[j] = acc.tanh();
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for c in 0..proj.cols {
        let mut acc = 0.0;
        for (j, h) in hidden.iter().enumerate() {
            acc += h * proj.get(j, c);
        }
        if acc > best_score {
            best_score = acc;
            best = c;
        }
    }
    best
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    rng.sample(rand_distr::StandardNormal)
}

/// Fraction of rows whose argmax logit matches the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    assert_eq!(logits.rows, labels.len());
    let mut correct = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let mut best = 0;
        for c in 1..logits.cols {
            if logits.get(r, c) > logits.get(r, best) {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_split_disjoint() {
        let a = ToyTask::generate(8, 3, 40, 24, 7);
        let b = ToyTask::generate(8, 3, 40, 24, 7);
        assert_eq!(a.train_x, b.train_x);
        assert_eq!(a.val_y, b.val_y);
        assert_eq!(a.train_x.rows, 40);
        assert_eq!(a.val_x.rows, 24);
        let c = ToyTask::generate(8, 3, 40, 24, 8);
        assert_ne!(a.train_x, c.train_x);
    }

    #[test]
    fn labels_cover_multiple_classes() {
        let t = ToyTask::generate(8, 3, 120, 60, 11);
        let mut counts = [0usize; 3];
        for &y in t.train_y.iter().chain(&t.val_y) {
            counts[y] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "counts {counts:?}");
    }

    #[test]
    fn accuracy_counts_argmax_matches() {
        let logits = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, -1.0]);
        assert!((accuracy(&logits, &[0, 1, 0]) - 1.0).abs() < 1e-12);
        assert!((accuracy(&logits, &[1, 1, 0]) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn batches_gather_requested_rows() {
        let t = ToyTask::generate(6, 3, 10, 10, 3);
        let (x, y) = t.train_batch(&[2, 5]);
        assert_eq!(x.rows, 2);
        assert_eq!(x.get(0, 0), t.train_x.get(2, 0));
        assert_eq!(y[0], t.train_y[2]);
    }
}
