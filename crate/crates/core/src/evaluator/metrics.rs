//! AUC, user-averaged AUC and log loss.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Probability clamp applied before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Area under the ROC curve via the rank-sum statistic.
///
/// Tied scores receive their average rank, so a tied positive/negative pair
/// counts one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|&&y| y > 0.5).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("AUC needs at least one positive and one negative".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] > 0.5).count() as f64;
        i = j + 1;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Result of [`uauc`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UserAuc {
    pub value: f64,
    pub users_scored: usize,
    pub users_skipped: usize,
}

/// Unweighted mean of per-user AUC over users that have both classes.
pub fn uauc(scores: &[f64], labels: &[f64], user_ids: &[u64]) -> Result<UserAuc> {
    if scores.len() != labels.len() || scores.len() != user_ids.len() {
        return Err(Error::Input("scores, labels and user ids differ in length".into()));
    }
    let mut by_user: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((&s, &y), &u) in scores.iter().zip(labels).zip(user_ids) {
        let e = by_user.entry(u).or_default();
        e.0.push(s);
        e.1.push(y);
    }
    let (mut total, mut scored, mut skipped) = (0.0, 0, 0);
    for (s, y) in by_user.values() {
        match auc(s, y) {
            Ok(v) => {
                total += v;
                scored += 1;
            }
            Err(_) => skipped += 1,
        }
    }
    if scored == 0 {
        return Err(Error::UndefinedMetric("no user has both positive and negative examples".into()));
    }
    Ok(UserAuc { value: total / scored as f64, users_scored: scored, users_skipped: skipped })
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn logloss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Input(format!("{} probabilities for {} labels", probs.len(), labels.len())));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking() {
        assert_eq!(auc(&[0.9, 0.8, 0.1], &[1.0, 1.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn half_the_pairs() {
        assert_eq!(auc(&[0.8, 0.7, 0.3, 0.2], &[1.0, 0.0, 0.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn all_ties() {
        assert_eq!(auc(&[0.4; 6], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn uauc_single_user_equals_auc() {
        let s = [0.3, 0.9, 0.4, 0.2];
        let y = [0.0, 1.0, 1.0, 0.0];
        assert_eq!(uauc(&s, &y, &[5; 4]).unwrap().value, auc(&s, &y).unwrap());
    }

    #[test]
    fn uauc_mean_of_users() {
        let s = [0.9, 0.1, 0.5, 0.5, 0.7];
        let y = [1.0, 0.0, 1.0, 0.0, 1.0];
        let r = uauc(&s, &y, &[1, 1, 2, 2, 3]).unwrap();
        assert_eq!(r.value, 0.75);
        assert_eq!((r.users_scored, r.users_skipped), (2, 1));
    }

    #[test]
    fn uauc_without_scorable_user() {
        assert!(matches!(uauc(&[0.1, 0.2], &[1.0, 0.0], &[1, 2]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn logloss_coin_flip() {
        let v = logloss(&[0.5; 4], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn logloss_clamps_confident_predictions() {
        let v = logloss(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(v > 0.0 && v < 2e-7, "{v}");
        let w = logloss(&[0.0], &[1.0]).unwrap();
        assert!((w + PROB_CLAMP.ln()).abs() < 1e-12);
    }
}
