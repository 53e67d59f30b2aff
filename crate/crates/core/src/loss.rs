//! Training objectives with their gradients.

use std::collections::BTreeSet;

use crate::data::TypeId;
use crate::encoder::ops::{log_sigmoid, sigmoid};
use crate::error::{Error, Result};

/// Mean weighted binary cross-entropy:
/// `-(1/n) Σ [α y log σ(s) + (1-y) log(1-σ(s))]`. Returns the loss and
/// `dL/ds`.
pub fn bce(scores: &[f64], labels: &[bool], alpha: f64) -> (f64, Vec<f64>) {
    assert_eq!(scores.len(), labels.len());
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&s, &y) in scores.iter().zip(labels) {
        if y {
            loss -= alpha * log_sigmoid(s);
            grad.push(-alpha * (1.0 - sigmoid(s)) / n);
        } else {
            loss -= log_sigmoid(-s);
            grad.push(sigmoid(s) / n);
        }
    }
    (loss / n, grad)
}

/// [`bce`] over all `N` type scores with the gold set as positives.
pub fn mlc_loss(scores: &[f64], gold: &BTreeSet<TypeId>, alpha: f64) -> Result<f64> {
    Ok(mlc_loss_and_grad(scores, gold, alpha)?.0)
}

pub fn mlc_loss_and_grad(
    scores: &[f64],
    gold: &BTreeSet<TypeId>,
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    if let Some(&g) = gold.iter().find(|&&g| g >= scores.len()) {
        return Err(Error::Index {
            index: g,
            size: scores.len(),
        });
    }
    let labels: Vec<bool> = (0..scores.len()).map(|j| gold.contains(&j)).collect();
    Ok(bce(scores, &labels, alpha))
}

/// `max(σ(s₋) - σ(s₊) + δ, 0)` and its gradients w.r.t. `(s₊, s₋)`.
pub fn margin_loss(pos: f64, neg: f64, delta: f64) -> (f64, f64, f64) {
    let (sp, sn) = (sigmoid(pos), sigmoid(neg));
    let v = sn - sp + delta;
    if v > 0.0 {
        (v, -sp * (1.0 - sp), sn * (1.0 - sn))
    } else {
        (0.0, 0.0, 0.0)
    }
}

/// Score whose sigmoid is `p`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn bce_at_zero_is_log2() {
        let l = mlc_loss(&[0.0; 7], &BTreeSet::from([1, 4]), 1.0).unwrap();
        assert!((l - LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_saturated_and_alpha() {
        let l = mlc_loss(&[100.0, -100.0], &BTreeSet::from([0]), 1.0).unwrap();
        assert!(l < 1e-40);
        let a1 = mlc_loss(&[0.0], &BTreeSet::from([0]), 1.0).unwrap();
        let a2 = mlc_loss(&[0.0], &BTreeSet::from([0]), 2.0).unwrap();
        assert!((a2 - 2.0 * LN_2).abs() < 1e-15 && (a1 - LN_2).abs() < 1e-15);
        assert!(matches!(
            mlc_loss(&[0.0], &BTreeSet::from([3]), 1.0),
            Err(Error::Index { index: 3, size: 1 })
        ));
    }

    #[test]
    fn bce_gradient_matches_difference() {
        let s = [0.3, -1.2, 2.5];
        let y = [true, false, true];
        let (_, g) = bce(&s, &y, 4.0);
        for i in 0..3 {
            let mut p = s;
            p[i] += 1e-6;
            let mut m = s;
            m[i] -= 1e-6;
            let fd = (bce(&p, &y, 4.0).0 - bce(&m, &y, 4.0).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn margin_cases() {
        let s = logit;
        assert_eq!(margin_loss(s(0.8), s(0.3), 0.1).0, 0.0);
        assert_eq!(margin_loss(1.3, 1.3, 0.1).0, 0.1);
        assert!((margin_loss(s(0.2), s(0.9), 0.1).0 - 0.8).abs() < 1e-12);
    }
}
