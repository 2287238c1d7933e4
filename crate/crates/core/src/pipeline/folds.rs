use serde::{Deserialize, Serialize};

use crate::datamodel::{class_counts, Label};
use crate::error::{invalid, Result};
use crate::numerics::RngStream;

/// Assignment of every subject to one of `k` test folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub stratified: bool,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffled round-robin assignment. With stratification each class is
/// dealt separately, the second class continuing where the first stopped,
/// so per-class and overall fold sizes both differ by at most one.
pub fn make_folds(labels: &[Label], k: usize, stratified: bool, rng: &mut RngStream) -> Result<FoldPlan> {
    let n = labels.len();
    if k < 2 {
        return Err(invalid!("need at least 2 folds, got {k}"));
    }
    if k > n {
        return Err(invalid!("{k} folds for {n} subjects"));
    }
    let mut assignments = vec![0; n];
    if stratified {
        let (hc, sz) = class_counts(labels);
        if k > hc.min(sz) {
            return Err(invalid!("{k} stratified folds but the minority class has {} subjects", hc.min(sz)));
        }
        let mut next = 0;
        for class in [Label::Hc, Label::Sz] {
            let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
            rng.shuffle(&mut idx);
            for i in idx {
                assignments[i] = next % k;
                next += 1;
            }
        }
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        for (pos, i) in idx.into_iter().enumerate() {
            assignments[i] = pos % k;
        }
    }
    Ok(FoldPlan {
        k,
        assignments,
        stratified,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(hc: usize, sz: usize) -> Vec<Label> {
        let mut v = vec![Label::Hc; hc];
        v.extend(vec![Label::Sz; sz]);
        v
    }

    #[test]
    fn one_subject_per_fold() {
        let plan = make_folds(&labels(4, 4), 8, false, &mut RngStream::new(0)).unwrap();
        assert_eq!(plan.fold_sizes(), vec![1; 8]);
    }

    #[test]
    fn eighth_held_out() {
        let plan = make_folds(&labels(135, 169), 8, true, &mut RngStream::new(1)).unwrap();
        for f in 0..8 {
            assert_eq!(plan.test_indices(f).len(), 38);
            assert_eq!(plan.test_indices(f).len() as f64 / 304.0, 0.125);
        }
    }

    #[test]
    fn stratified_counts() {
        let y = labels(20, 12);
        let plan = make_folds(&y, 4, true, &mut RngStream::new(2)).unwrap();
        for f in 0..4 {
            let test = plan.test_indices(f);
            let sz = test.iter().filter(|&&i| y[i] == Label::Sz).count();
            assert_eq!((test.len() - sz, sz), (5, 3));
        }
    }

    #[test]
    fn too_many_folds() {
        assert!(make_folds(&labels(3, 10), 4, true, &mut RngStream::new(0)).is_err());
        assert!(make_folds(&labels(3, 3), 7, false, &mut RngStream::new(0)).is_err());
    }
}
