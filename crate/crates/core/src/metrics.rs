//! Threshold-free detection metrics and rank correlation.
//!
//! Scores follow the "higher = more in-distribution" convention throughout.

use crate::error::{Error, Result};

fn check_scores(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::invalid("ID and OOD score arrays must both be non-empty"));
    }
    if id.iter().chain(ood).any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    Ok(())
}

/// 1-based mid-ranks (ties get the average of the ranks they span).
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Area under the ROC curve, via the Mann–Whitney U statistic:
/// `P(id > ood) + ½ P(id = ood)`.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_scores(id, ood)?;
    let all: Vec<f64> = id.iter().chain(ood).copied().collect();
    let ranks = mid_ranks(&all);
    let n_id = id.len() as f64;
    let rank_sum: f64 = ranks[..id.len()].iter().sum();
    let u = rank_sum - n_id * (n_id + 1.0) / 2.0;
    Ok(u / (n_id * ood.len() as f64))
}

/// False-positive rate at the threshold that keeps `level` of ID samples.
///
/// The threshold is the `⌈level·N_id⌉`-th largest ID score and a sample is
/// accepted as ID when `score ≥ threshold`; no interpolation.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], level: f64) -> Result<f64> {
    check_scores(id, ood)?;
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("TPR level must lie in (0, 1), got {level}")));
    }
    let mut sorted = id.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // Guard against level·N landing a hair above an integer through rounding.
    let k = ((level * sorted.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let threshold = sorted[k.min(sorted.len()) - 1];
    let accepted = ood.iter().filter(|&&s| s >= threshold).count();
    Ok(accepted as f64 / ood.len() as f64)
}

/// Spearman rank correlation: Pearson correlation of mid-ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::invalid("spearman needs at least 3 observations"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("values must be finite"));
    }
    pearson(&mid_ranks(x), &mid_ranks(y))
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("an input is constant".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;
    use proptest::prelude::*;

    fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
        let mut credit = 0.0;
        for a in id {
            for b in ood {
                if a > b {
                    credit += 1.0;
                } else if a == b {
                    credit += 0.5;
                }
            }
        }
        credit / (id.len() * ood.len()) as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[3.0, 2.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0], &[1.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[3.0, 1.0], &[2.0]).unwrap(), 0.5);
        assert!(auroc(&[], &[1.0]).is_err());
        assert!(auroc(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn fpr_examples() {
        let id: Vec<f64> = (1..=20).map(f64::from).collect();
        let fpr = fpr_at_tpr(&id, &[0.5, 2.5, 18.5], 0.95).unwrap();
        assert!((fpr - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(fpr_at_tpr(&id, &[0.0, -3.0], 0.95).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr(&id, &[20.0, 25.0], 0.95).unwrap(), 1.0);
        assert!(fpr_at_tpr(&id, &[1.0], 1.0).is_err());
        assert!(fpr_at_tpr(&[], &[1.0], 0.5).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        let x = [0.3, -1.0, 7.0, 2.0];
        assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        // 1 − 6Σd²/(n(n²−1)) with d = (0, −1, 1, 0): 1 − 12/60
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mid_ranks_average_ties() {
        assert_eq!(mid_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn sorting_matches_brute_force_with_ties() {
        let mut rng = Rng::new(77);
        for _ in 0..200 {
            let n_id = 1 + rng.below(40);
            let n_ood = 1 + rng.below(40);
            // Coarse grid forces ties.
            let mut draw = || (rng.below(12) as f64) * 0.5;
            let id: Vec<f64> = (0..n_id).map(|_| draw()).collect();
            let ood: Vec<f64> = (0..n_ood).map(|_| draw()).collect();
            assert!((auroc(&id, &ood).unwrap() - brute_auroc(&id, &ood)).abs() < 1e-12);
        }
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![-5.0f64..5.0, (-3i32..3).prop_map(f64::from)], 1..40)
    }

    proptest! {
        #[test]
        fn auroc_complement(id in scores(), ood in scores()) {
            let a = auroc(&id, &ood).unwrap();
            let b = auroc(&ood, &id).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn auroc_monotone_invariant(id in scores(), ood in scores()) {
            let f = |v: &Vec<f64>| v.iter().map(|x| (x * 0.7).exp() + 3.0 * x).collect::<Vec<_>>();
            prop_assert!((auroc(&id, &ood).unwrap() - auroc(&f(&id), &f(&ood)).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn fpr_nondecreasing_in_level(id in scores(), ood in scores(), a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(fpr_at_tpr(&id, &ood, lo).unwrap() <= fpr_at_tpr(&id, &ood, hi).unwrap());
        }
    }
}
