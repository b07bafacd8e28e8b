//! Performance metrics: balanced accuracy, the FT-vs-FE relative difference,
//! the re-selection drop, and few-shot curve aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean per-class recall in percent. Classes absent from `y_true` are
/// excluded from the mean, which matters for tiny few-shot test splits.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<f64> {
    if y_true.is_empty() {
        return Err(Error::Metric("empty label vectors".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::Metric(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut present = vec![0usize; n_classes];
    let mut correct = vec![0usize; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred.iter()) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::Metric(format!(
                "label out of range: true {t}, pred {p}, n_classes {n_classes}"
            )));
        }
        present[t] += 1;
        if t == p {
            correct[t] += 1;
        }
    }
    let mut recall_sum = 0.0;
    let mut classes_seen = 0usize;
    for c in 0..n_classes {
        if present[c] > 0 {
            recall_sum += correct[c] as f64 / present[c] as f64;
            classes_seen += 1;
        }
    }
    Ok(100.0 * recall_sum / classes_seen as f64)
}

/// 100 * (ft - fe) / fe, in percent.
pub fn relative_difference(ft_acc: f64, fe_acc: f64) -> Result<f64> {
    if fe_acc == 0.0 {
        return Err(Error::Metric("relative difference undefined at fe = 0".into()));
    }
    Ok(100.0 * (ft_acc - fe_acc) / fe_acc)
}

/// Re-selection drop: best-on-subset accuracy minus the original
/// configuration's accuracy on the same subset.
pub fn compute_drop(best_for_subset_vacc: f64, original_config_vacc: f64) -> f64 {
    best_for_subset_vacc - original_config_vacc
}

/// One few-shot curve point: relative FT-vs-FE differences over the subsets
/// at one instances-per-class value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub ic: usize,
    pub rel_diff_mean: f64,
    pub rel_diff_min: f64,
    pub rel_diff_max: f64,
    pub per_subset: Vec<f64>,
}

/// Input to [`fewshot_curve`]: one (approach, ic, subset) accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FewShotResult {
    pub is_ft: bool,
    pub ic: usize,
    pub subset_idx: usize,
    pub t_acc: f64,
}

/// Pairs FE and FT test accuracies by (ic, subset) and aggregates the
/// relative differences per ic. Points come out ordered by ic ascending,
/// independent of input order.
pub fn fewshot_curve(results: &[FewShotResult]) -> Result<Vec<CurvePoint>> {
    let mut fe: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut ft: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for r in results {
        let map = if r.is_ft { &mut ft } else { &mut fe };
        if map.insert((r.ic, r.subset_idx), r.t_acc).is_some() {
            return Err(Error::Metric(format!(
                "duplicate result for ic {} subset {}",
                r.ic, r.subset_idx
            )));
        }
    }
    if fe.keys().ne(ft.keys()) {
        return Err(Error::Metric(
            "FE and FT results do not pair up by (ic, subset)".into(),
        ));
    }
    let mut by_ic: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for ((ic, subset), fe_acc) in &fe {
        let ft_acc = ft[&(*ic, *subset)];
        let diff = relative_difference(ft_acc, *fe_acc)?;
        by_ic.entry(*ic).or_default().push(diff);
    }
    let mut points = Vec::with_capacity(by_ic.len());
    for (ic, diffs) in by_ic {
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let min = diffs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = diffs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        points.push(CurvePoint {
            ic,
            rel_diff_mean: mean,
            rel_diff_min: min,
            rel_diff_max: max,
            per_subset: diffs,
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn balanced_accuracy_examples() {
        // class 0 recall 100, class 1 recall 50 -> 75
        let acc = balanced_accuracy(&[0, 0, 1, 1], &[0, 0, 1, 0], 2).unwrap();
        assert_eq!(acc, 75.0);
        let acc = balanced_accuracy(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(acc, 100.0);
        assert!(matches!(
            balanced_accuracy(&[], &[], 2),
            Err(Error::Metric(_))
        ));
        assert!(matches!(
            balanced_accuracy(&[0, 5], &[0, 1], 2),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn absent_classes_are_excluded() {
        // n_classes = 4 but only classes 0 and 2 appear in y_true
        let acc = balanced_accuracy(&[0, 0, 2, 2], &[0, 2, 2, 2], 4).unwrap();
        assert_eq!(acc, 75.0);
    }

    #[test]
    fn relative_difference_examples() {
        assert_eq!(relative_difference(50.0, 40.0).unwrap(), 25.0);
        assert_eq!(relative_difference(40.0, 40.0).unwrap(), 0.0);
        assert_eq!(relative_difference(40.0, 50.0).unwrap(), -20.0);
        assert!(relative_difference(40.0, 0.0).is_err());
    }

    #[test]
    fn drop_is_plain_subtraction() {
        assert!((compute_drop(81.12, 81.05) - 0.07).abs() < 1e-12);
        assert_eq!(compute_drop(90.0, 90.0), 0.0);
        assert!((compute_drop(76.24, 58.32) - 17.92).abs() < 1e-12);
    }

    fn result(is_ft: bool, ic: usize, subset: usize, acc: f64) -> FewShotResult {
        FewShotResult {
            is_ft,
            ic,
            subset_idx: subset,
            t_acc: acc,
        }
    }

    #[test]
    fn curve_zero_and_constant_cases() {
        let mut rows = Vec::new();
        for s in 0..5 {
            rows.push(result(false, 1, s, 40.0));
            rows.push(result(true, 1, s, 40.0));
            rows.push(result(false, 2, s, 40.0));
            rows.push(result(true, 2, s, 44.0));
        }
        let points = fewshot_curve(&rows).unwrap();
        assert_eq!(points.len(), 2);
        assert_eq!(points[0].ic, 1);
        assert_eq!(points[0].rel_diff_mean, 0.0);
        assert_eq!(points[0].rel_diff_min, 0.0);
        assert_eq!(points[0].rel_diff_max, 0.0);
        assert_eq!(points[1].rel_diff_mean, 10.0);
        assert_eq!(points[1].rel_diff_min, 10.0);
        assert_eq!(points[1].rel_diff_max, 10.0);
        assert_eq!(points[1].per_subset.len(), 5);
    }

    #[test]
    fn curve_rejects_unpaired_subsets() {
        let rows = vec![result(false, 1, 0, 40.0), result(true, 1, 1, 42.0)];
        assert!(matches!(fewshot_curve(&rows), Err(Error::Metric(_))));
    }

    #[test]
    fn curve_matches_direct_recomputation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let ics = [1usize, 5, 20];
        let mut rows = Vec::new();
        let mut expected: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for &ic in &ics {
            for s in 0..5 {
                let fe: f64 = rng.gen_range(10.0..90.0);
                let ft: f64 = rng.gen_range(10.0..90.0);
                rows.push(result(false, ic, s, fe));
                rows.push(result(true, ic, s, ft));
                expected
                    .entry(ic)
                    .or_default()
                    .push(100.0 * (ft - fe) / fe);
            }
        }
        let points = fewshot_curve(&rows).unwrap();
        for p in &points {
            let diffs = &expected[&p.ic];
            let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
            assert!((p.rel_diff_mean - mean).abs() < 1e-12);
            assert!(p.rel_diff_min <= p.rel_diff_mean && p.rel_diff_mean <= p.rel_diff_max);
        }
    }

    proptest! {
        #[test]
        fn balanced_accuracy_matches_confusion_oracle(
            seed in 0u64..500,
            n in 1usize..200,
            k in 2usize..6,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let y_true: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let y_pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            // independent oracle: full confusion matrix, then recall means
            let mut confusion = vec![vec![0usize; k]; k];
            for (&t, &p) in y_true.iter().zip(y_pred.iter()) {
                confusion[t][p] += 1;
            }
            let mut recalls = Vec::new();
            for (c, row) in confusion.iter().enumerate() {
                let total: usize = row.iter().sum();
                if total > 0 {
                    recalls.push(row[c] as f64 / total as f64);
                }
            }
            let oracle = 100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64;
            let ours = balanced_accuracy(&y_true, &y_pred, k).unwrap();
            prop_assert!((ours - oracle).abs() < 1e-12);
        }

        #[test]
        fn relabeling_invariance(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let k = 4usize;
            let y_true: Vec<usize> = (0..60).map(|_| rng.gen_range(0..k)).collect();
            let y_pred: Vec<usize> = (0..60).map(|_| rng.gen_range(0..k)).collect();
            let perm = [2usize, 0, 3, 1];
            let pt: Vec<usize> = y_true.iter().map(|&c| perm[c]).collect();
            let pp: Vec<usize> = y_pred.iter().map(|&c| perm[c]).collect();
            let a = balanced_accuracy(&y_true, &y_pred, k).unwrap();
            let b = balanced_accuracy(&pt, &pp, k).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn curve_order_invariance(seed in 0u64..100) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut rows = Vec::new();
            for ic in [1usize, 3] {
                for s in 0..5 {
                    rows.push(result(false, ic, s, rng.gen_range(20.0..80.0)));
                    rows.push(result(true, ic, s, rng.gen_range(20.0..80.0)));
                }
            }
            let a = fewshot_curve(&rows).unwrap();
            rows.shuffle(&mut rng);
            let b = fewshot_curve(&rows).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
