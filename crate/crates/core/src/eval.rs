//! Precision/recall/F1 over type sets, recall@K, and threshold tuning.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{CandidateSet, TypeId};
use crate::error::{Error, Result};

pub type TypeSets = BTreeMap<String, BTreeSet<TypeId>>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Per-record P and R averaged, F1 the harmonic mean of the averages.
    #[default]
    Macro,
    /// As `Macro`, but F1 is the mean of per-record F1 values.
    PerRecordF1,
    /// Counts pooled over all records.
    Micro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub averaging: Averaging,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub empty_predictions: usize,
    pub records: Vec<RecordScore>,
}

pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn check_ids<A, B>(preds: &BTreeMap<String, A>, golds: &BTreeMap<String, B>) -> Result<()> {
    if preds.len() != golds.len() || preds.keys().zip(golds.keys()).any(|(a, b)| a != b) {
        let missing = golds
            .keys()
            .find(|k| !preds.contains_key(*k))
            .or_else(|| preds.keys().find(|k| !golds.contains_key(*k)));
        return Err(Error::Validation(format!(
            "prediction and gold record ids differ (e.g. {missing:?})"
        )));
    }
    Ok(())
}

/// Macro-averaged scores; see [`evaluate`] for the other conventions.
pub fn macro_prf(preds: &TypeSets, golds: &TypeSets) -> Result<EvalReport> {
    evaluate(preds, golds, Averaging::Macro)
}

pub fn evaluate(preds: &TypeSets, golds: &TypeSets, averaging: Averaging) -> Result<EvalReport> {
    check_ids(preds, golds)?;
    if golds.is_empty() {
        return Err(Error::Validation("no records to evaluate".into()));
    }
    let mut records = Vec::with_capacity(golds.len());
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    let (mut tp_all, mut pred_all, mut gold_all) = (0usize, 0usize, 0usize);
    let mut empty = 0;
    for (id, gold) in golds {
        if gold.is_empty() {
            return Err(Error::Validation(format!(
                "record {id} has an empty gold set"
            )));
        }
        let pred = &preds[id];
        let tp = pred.intersection(gold).count();
        let p = if pred.is_empty() {
            empty += 1;
            0.0
        } else {
            tp as f64 / pred.len() as f64
        };
        let r = tp as f64 / gold.len() as f64;
        let f = harmonic(p, r);
        sp += p;
        sr += r;
        sf += f;
        tp_all += tp;
        pred_all += pred.len();
        gold_all += gold.len();
        records.push(RecordScore {
            id: id.clone(),
            precision: p,
            recall: r,
            f1: f,
        });
    }
    let n = golds.len() as f64;
    let (precision, recall, f1) = match averaging {
        Averaging::Macro => (sp / n, sr / n, harmonic(sp / n, sr / n)),
        Averaging::PerRecordF1 => (sp / n, sr / n, sf / n),
        Averaging::Micro => {
            let p = if pred_all == 0 {
                0.0
            } else {
                tp_all as f64 / pred_all as f64
            };
            let r = tp_all as f64 / gold_all as f64;
            (p, r, harmonic(p, r))
        }
    };
    Ok(EvalReport {
        averaging,
        precision,
        recall,
        f1,
        empty_predictions: empty,
        records,
    })
}

/// Mean over records of the fraction of gold types in the first `k` entries.
pub fn recall_at_k(sets: &[CandidateSet], golds: &TypeSets, k: usize) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::Validation("no candidate sets".into()));
    }
    let mut total = 0.0;
    for s in sets {
        if k > s.k() {
            return Err(Error::Validation(format!(
                "recall@{k} requested but record {} has only {} candidates",
                s.record_id,
                s.k()
            )));
        }
        let gold = golds
            .get(&s.record_id)
            .ok_or_else(|| Error::Validation(format!("no gold set for record {}", s.record_id)))?;
        if gold.is_empty() {
            return Err(Error::Validation(format!(
                "record {} has an empty gold set",
                s.record_id
            )));
        }
        let hit = s.entries[..k]
            .iter()
            .filter(|e| gold.contains(&e.type_id))
            .count();
        total += hit as f64 / gold.len() as f64;
    }
    Ok(total / sets.len() as f64)
}

/// Candidate probabilities of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRecord {
    pub id: String,
    pub probs: Vec<(TypeId, f64)>,
}

/// `{t : p > tau}`; when that is empty and `force_top1` is set, the argmax
/// (lowest id among ties).
pub fn threshold_predict(probs: &[(TypeId, f64)], tau: f64, force_top1: bool) -> BTreeSet<TypeId> {
    let out: BTreeSet<TypeId> = probs
        .iter()
        .filter(|(_, p)| *p > tau)
        .map(|(t, _)| *t)
        .collect();
    if out.is_empty() && force_top1 {
        if let Some(best) = argmax(probs) {
            return BTreeSet::from([best]);
        }
    }
    out
}

fn argmax(probs: &[(TypeId, f64)]) -> Option<TypeId> {
    probs
        .iter()
        .copied()
        .reduce(|a, b| {
            if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                b
            } else {
                a
            }
        })
        .map(|(t, _)| t)
}

pub fn predict_all(dev: &[ScoredRecord], tau: f64, force_top1: bool) -> TypeSets {
    dev.iter()
        .map(|r| (r.id.clone(), threshold_predict(&r.probs, tau, force_top1)))
        .collect()
}

/// Thresholds swept by [`tune_threshold`]: 0 and every distinct probability,
/// descending.
pub fn threshold_grid(dev: &[ScoredRecord]) -> Vec<f64> {
    let mut v: Vec<f64> = dev
        .iter()
        .flat_map(|r| r.probs.iter().map(|p| p.1))
        .collect();
    v.push(0.0);
    v.sort_by(|a, b| b.total_cmp(a));
    v.dedup();
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub tau: f64,
    pub f1: f64,
}

/// Macro-F1-optimal threshold over [`threshold_grid`], ties to the larger value.
pub fn tune_threshold(dev: &[ScoredRecord], golds: &TypeSets) -> Result<f64> {
    Ok(tune_threshold_with(dev, golds, false, Averaging::Macro)?.tau)
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    tp: usize,
    pred: usize,
}

/// Threshold sweep under a chosen prediction rule and averaging.
///
/// A single incremental pass ranks every threshold; the near-best ones are
/// then re-scored with [`evaluate`] so the choice is exact.
pub fn tune_threshold_with(
    dev: &[ScoredRecord],
    golds: &TypeSets,
    force_top1: bool,
    averaging: Averaging,
) -> Result<ThresholdChoice> {
    if dev.is_empty() {
        return Err(Error::Validation("empty development set".into()));
    }
    let dev_ids: TypeSets = dev
        .iter()
        .map(|r| (r.id.clone(), BTreeSet::new()))
        .collect();
    check_ids(&dev_ids, golds)?;
    if dev_ids.len() != dev.len() {
        return Err(Error::Validation(
            "duplicate record ids in development set".into(),
        ));
    }
    let grid = threshold_grid(dev);

    // Events: (prob, record, is_gold), descending prob.
    let mut events: Vec<(f64, usize, bool)> = Vec::new();
    let mut gold_sizes = Vec::with_capacity(dev.len());
    let mut top1_hit = Vec::with_capacity(dev.len());
    for (i, r) in dev.iter().enumerate() {
        let gold = &golds[&r.id];
        if gold.is_empty() {
            return Err(Error::Validation(format!(
                "record {} has an empty gold set",
                r.id
            )));
        }
        gold_sizes.push(gold.len());
        top1_hit.push(argmax(&r.probs).map(|t| gold.contains(&t)));
        for &(t, p) in &r.probs {
            events.push((p, i, gold.contains(&t)));
        }
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));

    let contribution = |i: usize, c: Counts| -> (f64, f64, f64, usize, usize) {
        let (tp, pred) = match (c.pred, force_top1, top1_hit[i]) {
            (0, true, Some(hit)) => (hit as usize, 1),
            _ => (c.tp, c.pred),
        };
        let p = if pred == 0 {
            0.0
        } else {
            tp as f64 / pred as f64
        };
        let r = tp as f64 / gold_sizes[i] as f64;
        (p, r, harmonic(p, r), tp, pred)
    };
    let n = dev.len() as f64;
    let gold_total: usize = gold_sizes.iter().sum();
    let mut counts = vec![Counts::default(); dev.len()];
    let (mut sp, mut sr, mut sf, mut stp, mut spred) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for i in 0..dev.len() {
        let (p, r, f, tp, pr) = contribution(i, counts[i]);
        sp += p;
        sr += r;
        sf += f;
        stp += tp;
        spred += pr;
    }
    let score = |sp: f64, sr: f64, sf: f64, stp: usize, spred: usize| match averaging {
        Averaging::Macro => harmonic(sp / n, sr / n),
        Averaging::PerRecordF1 => sf / n,
        Averaging::Micro => {
            let p = if spred == 0 {
                0.0
            } else {
                stp as f64 / spred as f64
            };
            harmonic(p, stp as f64 / gold_total as f64)
        }
    };
    let mut approx = Vec::with_capacity(grid.len());
    let mut e = 0;
    for &tau in &grid {
        while e < events.len() && events[e].0 > tau {
            let (_, i, gold) = events[e];
            let (p0, r0, f0, tp0, pr0) = contribution(i, counts[i]);
            counts[i].pred += 1;
            counts[i].tp += gold as usize;
            let (p1, r1, f1, tp1, pr1) = contribution(i, counts[i]);
            sp += p1 - p0;
            sr += r1 - r0;
            sf += f1 - f0;
            stp = stp + tp1 - tp0;
            spred = spred + pr1 - pr0;
            e += 1;
        }
        approx.push(score(sp, sr, sf, stp, spred));
    }
    let best = approx.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut choice: Option<ThresholdChoice> = None;
    for (&tau, &a) in grid.iter().zip(&approx) {
        if a < best - 1e-9 {
            continue;
        }
        let f1 = evaluate(&predict_all(dev, tau, force_top1), golds, averaging)?.f1;
        // Grid is descending, so keep the first (largest) tau on ties.
        if choice.is_none_or(|c| f1 > c.f1) {
            choice = Some(ThresholdChoice { tau, f1 });
        }
    }
    Ok(choice.expect("grid is never empty"))
}
