//! Confusion counts, accuracy and Dice similarity for single-label K-class data.

use crate::error::{Error, Result};

/// K×K confusion matrix (rows = true class, columns = prediction) with
/// one-vs-rest counts per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    k: usize,
    matrix: Vec<u64>,
    pub tp: Vec<u64>,
    pub tn: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Averaging {
    Macro,
    Micro,
}

pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionCounts> {
    if preds.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if k == 0 {
        return Err(Error::validation("class count must be ≥ 1"));
    }
    let mut matrix = vec![0u64; k * k];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= k || l >= k {
            return Err(Error::validation(format!("class index {} outside 0..{k}", p.max(l))));
        }
        matrix[l * k + p] += 1;
    }
    Ok(ConfusionCounts::from_matrix(k, matrix))
}

impl ConfusionCounts {
    fn from_matrix(k: usize, matrix: Vec<u64>) -> Self {
        let total: u64 = matrix.iter().sum();
        let mut tp = vec![0; k];
        let mut fp = vec![0; k];
        let mut fn_ = vec![0; k];
        let mut tn = vec![0; k];
        for c in 0..k {
            tp[c] = matrix[c * k + c];
            let row: u64 = matrix[c * k..(c + 1) * k].iter().sum();
            let col: u64 = (0..k).map(|r| matrix[r * k + c]).sum();
            fn_[c] = row - tp[c];
            fp[c] = col - tp[c];
            tn[c] = total - tp[c] - fn_[c] - fp[c];
        }
        Self {
            k,
            matrix,
            tp,
            tn,
            fp,
            fn_,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn total(&self) -> u64 {
        self.matrix.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|c| self.matrix[c * self.k + c]).sum()
    }

    /// Entry `(true, predicted)`.
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.matrix[truth * self.k + pred]
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.matrix.chunks(self.k).map(|r| r.iter().sum()).collect()
    }

    /// Per-class Dice `2TP / (2TP + FP + FN)`; `None` when the denominator is 0.
    pub fn class_dsc(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let denom = 2 * self.tp[c] + self.fp[c] + self.fn_[c];
                (denom > 0).then(|| 2.0 * self.tp[c] as f64 / denom as f64)
            })
            .collect()
    }

    /// Classes absent from both predictions and labels.
    pub fn empty_classes(&self) -> Vec<usize> {
        self.class_dsc()
            .iter()
            .enumerate()
            .filter_map(|(c, d)| d.is_none().then_some(c))
            .collect()
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.k != self.k {
            return Err(Error::validation("cannot merge confusion counts of different sizes"));
        }
        for (a, b) in self.matrix.iter_mut().zip(&other.matrix) {
            *a += b;
        }
        *self = ConfusionCounts::from_matrix(self.k, std::mem::take(&mut self.matrix));
        Ok(())
    }
}

/// Overall accuracy, `trace / total`; 0 for an empty matrix.
pub fn accuracy(c: &ConfusionCounts) -> f64 {
    let total = c.total();
    if total == 0 {
        return 0.0;
    }
    c.trace() as f64 / total as f64
}

/// Macro: unweighted mean of per-class Dice, empty classes counting 0.
/// Micro: Dice of the pooled one-vs-rest counts.
pub fn dsc(c: &ConfusionCounts, averaging: Averaging) -> f64 {
    match averaging {
        Averaging::Macro => c.class_dsc().iter().map(|d| d.unwrap_or(0.0)).sum::<f64>() / c.k as f64,
        Averaging::Micro => {
            let tp: u64 = c.tp.iter().sum();
            let fp: u64 = c.fp.iter().sum();
            let fn_: u64 = c.fn_.iter().sum();
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binary(tp: usize, tn: usize, fp: usize, fn_: usize) -> ConfusionCounts {
        // class 1 is "positive"
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for (n, p, l) in [(tp, 1, 1), (tn, 0, 0), (fp, 1, 0), (fn_, 0, 1)] {
            preds.extend(std::iter::repeat_n(p, n));
            labels.extend(std::iter::repeat_n(l, n));
        }
        confusion(&preds, &labels, 2).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(c.get(t, p), u64::from(t == p));
            }
        }
        let c = confusion(&[0, 1], &[1, 0], 2).unwrap();
        assert_eq!((c.tp.clone(), c.fp.clone(), c.fn_.clone(), c.tn.clone()), (vec![0, 0], vec![1, 1], vec![1, 1], vec![0, 0]));

        let counts = [134usize, 20, 136, 74, 49];
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(g, &n)| std::iter::repeat_n(g, n)).collect();
        let c = confusion(&vec![2; labels.len()], &labels, 5).unwrap();
        assert_eq!(c.tp[2], 136);
        assert_eq!(c.row_sums(), counts.map(|v| v as u64));
        assert!(confusion(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn accuracy_and_dsc_examples() {
        let c = binary(3, 4, 2, 1);
        assert!((accuracy(&c) - 0.7).abs() < 1e-15);
        assert!((c.class_dsc()[1].unwrap() - 6.0 / 9.0).abs() < 1e-15);
        assert_eq!(accuracy(&binary(0, 0, 3, 2)), 0.0);
        let perfect = confusion(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(accuracy(&perfect), 1.0);
        assert_eq!(dsc(&perfect, Averaging::Macro), 1.0);
        assert_eq!(dsc(&perfect, Averaging::Micro), 1.0);

        // per class: 2·1/(2+1+0), 2·1/(2+0+1), 2·1/(2+1+1)
        let c = confusion(&[0, 0, 1, 2, 2], &[0, 1, 1, 2, 0], 3).unwrap();
        let by_hand = (2.0 / 4.0 + 2.0 / 3.0 + 2.0 / 3.0) / 3.0;
        assert!((dsc(&c, Averaging::Macro) - by_hand).abs() < 1e-15);
    }

    #[test]
    fn empty_classes_are_flagged_and_count_zero() {
        let c = confusion(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(c.empty_classes(), vec![2]);
        assert!((dsc(&c, Averaging::Macro) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn merge_adds_counts() {
        let mut a = confusion(&[0, 1], &[0, 0], 2).unwrap();
        let b = confusion(&[1], &[1], 2).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, confusion(&[0, 1, 1], &[0, 0, 1], 2).unwrap());
    }

    fn fixture() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (2usize..7).prop_flat_map(|k| (Just(k), prop::collection::vec((0..k, 0..k), 1..60)))
    }

    proptest! {
        #[test]
        fn invariants((k, pairs) in fixture(), perm_seed in any::<u64>()) {
            let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let c = confusion(&preds, &labels, k).unwrap();
            let n = pairs.len() as u64;
            for cls in 0..k {
                prop_assert_eq!(c.tp[cls] + c.tn[cls] + c.fp[cls] + c.fn_[cls], n);
            }
            let acc = accuracy(&c);
            prop_assert!((0.0..=1.0).contains(&acc));
            for avg in [Averaging::Macro, Averaging::Micro] {
                prop_assert!((0.0..=1.0).contains(&dsc(&c, avg)));
            }
            prop_assert!((dsc(&c, Averaging::Micro) - acc).abs() < 1e-12);

            let mut perm: Vec<usize> = (0..k).collect();
            use rand::{seq::SliceRandom, SeedableRng};
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            let pp: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
            let pl: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
            prop_assert_eq!(accuracy(&confusion(&pp, &pl, k).unwrap()), acc);
        }
    }
}
