use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::Rng as _;
use refilter::data::{CandidateEntry, CandidateSet, CandidateSource, TypeId};
use refilter::eval::{
    evaluate, predict_all, recall_at_k, threshold_grid, tune_threshold_with, Averaging,
    ScoredRecord, TypeSets,
};
use refilter::rng::{seeded, Rng};

const TYPES: usize = 12;

struct Fixture {
    preds: TypeSets,
    golds: TypeSets,
    scored: Vec<ScoredRecord>,
    candidates: Vec<CandidateSet>,
}

fn random_set(rng: &mut Rng, min: usize) -> BTreeSet<TypeId> {
    loop {
        let s: BTreeSet<TypeId> = (0..TYPES).filter(|_| rng.gen_bool(0.25)).collect();
        if s.len() >= min {
            return s;
        }
    }
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = seeded(seed, "metric-fixture");
    let n = rng.gen_range(1..=8);
    let (mut preds, mut golds) = (TypeSets::new(), TypeSets::new());
    let mut scored = Vec::new();
    let mut candidates = Vec::new();
    for i in 0..n {
        let id = format!("r{i}");
        preds.insert(id.clone(), random_set(&mut rng, 0));
        golds.insert(id.clone(), random_set(&mut rng, 1));
        // Coarse probabilities so that ties occur.
        let mut probs: Vec<(TypeId, f64)> = Vec::new();
        for t in 0..TYPES {
            if rng.gen_bool(0.6) {
                probs.push((t, rng.gen_range(0..10) as f64 / 10.0));
            }
        }
        scored.push(ScoredRecord {
            id: id.clone(),
            probs,
        });
        let mut order: Vec<TypeId> = (0..TYPES).collect();
        for j in (1..order.len()).rev() {
            order.swap(j, rng.gen_range(0..=j));
        }
        let entries = order
            .iter()
            .enumerate()
            .map(|(rank, &t)| CandidateEntry {
                type_id: t,
                score: -(rank as f64),
                source: CandidateSource::Recall,
            })
            .collect();
        candidates.push(CandidateSet::new(id, entries).unwrap());
    }
    Fixture {
        preds,
        golds,
        scored,
        candidates,
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Naive per-record counting over plain vectors.
fn brute(preds: &TypeSets, golds: &TypeSets, averaging: Averaging) -> (f64, f64, f64) {
    let mut per = Vec::new();
    let (mut tp_all, mut np_all, mut ng_all) = (0, 0, 0);
    for (id, gold) in golds {
        let pred: Vec<TypeId> = preds[id].iter().copied().collect();
        let gold: Vec<TypeId> = gold.iter().copied().collect();
        let mut tp = 0;
        for p in &pred {
            for g in &gold {
                if p == g {
                    tp += 1;
                }
            }
        }
        let p = if pred.is_empty() {
            0.0
        } else {
            tp as f64 / pred.len() as f64
        };
        let r = tp as f64 / gold.len() as f64;
        per.push((p, r, f1(p, r)));
        tp_all += tp;
        np_all += pred.len();
        ng_all += gold.len();
    }
    let n = per.len() as f64;
    let mp = per.iter().map(|x| x.0).sum::<f64>() / n;
    let mr = per.iter().map(|x| x.1).sum::<f64>() / n;
    match averaging {
        Averaging::Macro => (mp, mr, f1(mp, mr)),
        Averaging::PerRecordF1 => (mp, mr, per.iter().map(|x| x.2).sum::<f64>() / n),
        Averaging::Micro => {
            let p = if np_all == 0 {
                0.0
            } else {
                tp_all as f64 / np_all as f64
            };
            let r = tp_all as f64 / ng_all as f64;
            (p, r, f1(p, r))
        }
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn prf_matches_brute_force_on_100_fixtures() {
    for seed in 0..100 {
        let fx = fixture(seed);
        for averaging in [Averaging::Macro, Averaging::PerRecordF1, Averaging::Micro] {
            let got = evaluate(&fx.preds, &fx.golds, averaging).unwrap();
            let want = brute(&fx.preds, &fx.golds, averaging);
            assert!(
                close(got.precision, want.0) && close(got.recall, want.1) && close(got.f1, want.2),
                "seed {seed} {averaging:?}: {:?} vs {want:?}",
                (got.precision, got.recall, got.f1)
            );
        }
    }
}

#[test]
fn recall_at_k_matches_brute_force_on_100_fixtures() {
    for seed in 0..100 {
        let fx = fixture(seed);
        for k in [1, 3, TYPES] {
            let mut want = 0.0;
            for c in &fx.candidates {
                let gold = &fx.golds[&c.record_id];
                let hits = c
                    .entries
                    .iter()
                    .take(k)
                    .filter(|e| gold.contains(&e.type_id))
                    .count();
                want += hits as f64 / gold.len() as f64;
            }
            want /= fx.candidates.len() as f64;
            let got = recall_at_k(&fx.candidates, &fx.golds, k).unwrap();
            assert!(close(got, want), "seed {seed} k {k}: {got} vs {want}");
        }
    }
}

#[test]
fn tuned_threshold_matches_exhaustive_search_on_100_fixtures() {
    for seed in 0..100 {
        let fx = fixture(seed);
        for force_top1 in [false, true] {
            for averaging in [Averaging::Macro, Averaging::Micro] {
                let mut best: Option<(f64, f64)> = None;
                for tau in threshold_grid(&fx.scored) {
                    let f = evaluate(
                        &predict_all(&fx.scored, tau, force_top1),
                        &fx.golds,
                        averaging,
                    )
                    .unwrap()
                    .f1;
                    if best.is_none_or(|(_, bf)| f > bf) {
                        best = Some((tau, f));
                    }
                }
                let (tau, f) = best.unwrap();
                let got =
                    tune_threshold_with(&fx.scored, &fx.golds, force_top1, averaging).unwrap();
                assert!(close(got.f1, f), "seed {seed}: f1 {} vs {f}", got.f1);
                assert_eq!(got.tau, tau, "seed {seed}");
            }
        }
    }
}

#[test]
fn mismatched_ids_are_rejected() {
    let fx = fixture(3);
    let mut preds = fx.preds.clone();
    preds.insert("extra".into(), BTreeSet::new());
    assert!(evaluate(&preds, &fx.golds, Averaging::Macro).is_err());
}

proptest! {
    #[test]
    fn scores_are_bounded_and_perfect_is_one(seed in 0u64..10_000) {
        let fx = fixture(seed);
        for averaging in [Averaging::Macro, Averaging::PerRecordF1, Averaging::Micro] {
            let r = evaluate(&fx.preds, &fx.golds, averaging).unwrap();
            for v in [r.precision, r.recall, r.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let perfect = evaluate(&fx.golds, &fx.golds, averaging).unwrap();
            prop_assert!(close(perfect.f1, 1.0));
        }
    }

    #[test]
    fn recall_at_k_is_monotone_in_k(seed in 0u64..10_000) {
        let fx = fixture(seed);
        let mut last = 0.0;
        for k in 1..=TYPES {
            let r = recall_at_k(&fx.candidates, &fx.golds, k).unwrap();
            prop_assert!(r + 1e-12 >= last);
            last = r;
        }
        prop_assert!(close(last, 1.0));
    }
}
