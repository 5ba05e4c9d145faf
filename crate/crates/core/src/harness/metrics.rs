use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Label;

/// Video decision from its per-sequence MCI probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoDecision {
    pub label: Label,
    /// Fraction of sequences predicted MCI.
    pub score: f64,
    pub mean_probability: f64,
}

/// Majority vote over per-sequence argmax labels; a tied vote goes to MCI
/// when the mean MCI probability is at least 0.5.
pub fn classify_video(probabilities: &[f64]) -> Result<VideoDecision> {
    if probabilities.is_empty() {
        return Err(Error::Data("video has no sequences".into()));
    }
    let n = probabilities.len();
    // Argmax over (1 − p, p) picks NC for an exact tie.
    let mci = probabilities.iter().filter(|&&p| p > 1.0 - p).count();
    let mean_probability = probabilities.iter().sum::<f64>() / n as f64;
    let label = match (2 * mci).cmp(&n) {
        std::cmp::Ordering::Greater => Label::Mci,
        std::cmp::Ordering::Less => Label::Nc,
        std::cmp::Ordering::Equal if mean_probability >= 0.5 => Label::Mci,
        std::cmp::Ordering::Equal => Label::Nc,
    };
    Ok(VideoDecision { label, score: mci as f64 / n as f64, mean_probability })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    /// F1 of the MCI class; 0 when it has neither predictions nor members.
    pub f1: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
}

/// Accuracy, F1 and AUC over video predictions.
pub fn metrics(predicted: &[Label], scores: &[f64], labels: &[Label]) -> Result<Metrics> {
    let n = labels.len();
    if n == 0 || predicted.len() != n || scores.len() != n {
        return Err(Error::Data(format!("metrics need matching non-empty inputs ({}, {}, {n})", predicted.len(), scores.len())));
    }
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    let tp = predicted.iter().zip(labels).filter(|(p, l)| p.is_positive() && l.is_positive()).count();
    let fp = predicted.iter().zip(labels).filter(|(p, l)| p.is_positive() && !l.is_positive()).count();
    let fne = predicted.iter().zip(labels).filter(|(p, l)| !p.is_positive() && l.is_positive()).count();
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fne) as f64 };
    Ok(Metrics { n, accuracy: correct as f64 / n as f64, f1, auc: auc(scores, labels) })
}

/// Mann–Whitney AUC from average ranks.
pub fn auc(scores: &[f64], labels: &[Label]) -> Option<f64> {
    let n_pos = labels.iter().filter(|l| l.is_positive()).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tied average ranks integral.
    let mut twice_rank_sum = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u64;
        twice_rank_sum += twice_avg * order[i..=j].iter().filter(|&&k| labels[k].is_positive()).count() as u64;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - (n_pos * (n_pos + 1)) as u64;
    Some(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Label::{Mci, Nc};

    /// Mean over all (MCI, NC) pairs with half credit for ties.
    fn pairwise_auc(scores: &[f64], labels: &[Label]) -> Option<f64> {
        let (mut twice_wins, mut pairs) = (0u64, 0u64);
        for (i, li) in labels.iter().enumerate() {
            for (j, lj) in labels.iter().enumerate() {
                if li.is_positive() && !lj.is_positive() {
                    pairs += 1;
                    twice_wins += if scores[i] > scores[j] {
                        2
                    } else if scores[i] == scores[j] {
                        1
                    } else {
                        0
                    };
                }
            }
        }
        (pairs > 0).then(|| twice_wins as f64 / (2 * pairs) as f64)
    }

    #[test]
    fn majority_vote() {
        assert_eq!(classify_video(&[0.9, 0.8, 0.1]).unwrap().label, Mci);
        let tie = classify_video(&[0.7, 0.5]).unwrap();
        assert_eq!((tie.label, tie.score, tie.mean_probability), (Mci, 0.5, 0.6));
        let all_nc = classify_video(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!((all_nc.label, all_nc.score), (Nc, 0.0));
        assert_eq!(classify_video(&[0.6, 0.2]).unwrap().label, Nc);
        assert!(classify_video(&[]).is_err());
    }

    #[test]
    fn perfect_and_constant_scores() {
        let labels = [Mci, Nc, Mci, Nc];
        let m = metrics(&labels, &[1.0, 0.0, 0.9, 0.2], &labels).unwrap();
        assert_eq!((m.accuracy, m.f1, m.auc), (1.0, 1.0, Some(1.0)));
        assert_eq!(auc(&[0.5; 4], &labels), Some(0.5));
        assert_eq!(auc(&[0.1, 0.2], &[Nc, Nc]), None);
    }

    #[test]
    fn six_video_mixed_case() {
        let labels = [Mci, Nc, Mci, Nc, Mci, Nc];
        let scores = [0.8, 0.4, 0.4, 0.1, 0.6, 0.6];
        // Pairs won by MCI: 0.8 beats all 3; 0.4 ties 0.4, beats 0.1, loses 0.6;
        // 0.6 beats 0.4 and 0.1 and ties 0.6. (3 + 1.5 + 2.5) / 9.
        assert_eq!(auc(&scores, &labels), Some(7.0 / 9.0));
        assert_eq!(auc(&scores, &labels), pairwise_auc(&scores, &labels));
    }

    #[test]
    fn always_mci_scores_prevalence() {
        let labels = [Mci, Nc, Nc, Mci, Nc];
        let m = metrics(&[Mci; 5], &[1.0; 5], &labels).unwrap();
        assert_eq!(m.accuracy, 0.4);
        assert_eq!(m.auc, Some(0.5));
        assert_eq!(metrics(&[Nc; 5], &[0.0; 5], &[Nc; 5]).unwrap().f1, 0.0);
    }

    fn labelled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<Label>)> {
        proptest::collection::vec((0u8..8, any::<bool>()), 1..=50).prop_map(|v| {
            v.into_iter().map(|(s, m)| (s as f64 / 7.0, if m { Mci } else { Nc })).unzip()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn auc_equals_pairwise_oracle((scores, labels) in labelled_scores()) {
            prop_assert_eq!(auc(&scores, &labels), pairwise_auc(&scores, &labels));
        }

        #[test]
        fn metrics_ignore_video_order((scores, labels) in labelled_scores(), rot in 0usize..50) {
            let predicted: Vec<Label> = scores.iter().map(|&s| if s >= 0.5 { Mci } else { Nc }).collect();
            let a = metrics(&predicted, &scores, &labels).unwrap();
            let k = rot % labels.len();
            fn reorder<T: Copy>(v: &[T], k: usize) -> Vec<T> {
                v[k..].iter().chain(&v[..k]).rev().copied().collect()
            }
            let b = metrics(&reorder(&predicted, k), &reorder(&scores, k), &reorder(&labels, k)).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a.accuracy) && (0.0..=1.0).contains(&a.f1));
            prop_assert!(a.auc.is_none_or(|x| (0.0..=1.0).contains(&x)));
        }
    }
}
