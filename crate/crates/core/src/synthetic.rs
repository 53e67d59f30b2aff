//! Seeded synthetic entity-typing corpus.
//!
//! Every type owns one to three cue words; its first cue is its own surface so
//! that exact lexical matching can find it. A record's context is filler text
//! with, for each gold type, one of that type's cues injected with probability
//! `cue_strength`. Type frequencies follow a Zipf law over a shuffled ranking;
//! the least frequent `unseen_fraction` of types never occur in train.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, MentionRecord, SplitName, TypeId, TypeVocabulary};
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_types: usize,
    pub train_records: usize,
    pub dev_records: usize,
    pub test_records: usize,
    /// Inclusive range of filler words around the mention.
    pub context_words: (usize, usize),
    pub cue_strength: f64,
    pub unseen_fraction: f64,
    pub mean_gold_types: f64,
    pub zipf_exponent: f64,
    pub filler_words: usize,
    pub multiword_fraction: f64,
    /// Probability per record of injecting the cue of one non-gold type.
    pub distractor_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_types: 200,
            train_records: 2000,
            dev_records: 500,
            test_records: 500,
            context_words: (8, 12),
            cue_strength: 0.9,
            unseen_fraction: 0.3,
            mean_gold_types: 3.0,
            zipf_exponent: 1.2,
            filler_words: 300,
            multiword_fraction: 0.05,
            distractor_rate: 0.0,
        }
    }
}

/// Generated corpus plus the ground truth used to build it.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub vocab: TypeVocabulary,
    pub train: DatasetSplit,
    pub dev: DatasetSplit,
    pub test: DatasetSplit,
    /// Cue phrases per type; `cues[t][0]` is the surface of `t`.
    pub cues: Vec<Vec<String>>,
    /// Types that never appear as gold in train.
    pub unseen: BTreeSet<TypeId>,
}

pub const STOPWORDS: &[&str] = &[
    "the", "of", "and", "a", "an", "in", "on", "at", "to", "for", "with", "by", "from", "as",
    "such", "is", "was", "are", "were", "be", "this", "that", "it", "its", "he", "she", "they",
    "his", "her", "their", "or", "but", "not",
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

struct WordMint {
    used: HashSet<String>,
}

impl WordMint {
    fn new() -> Self {
        Self {
            used: STOPWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn mint(&mut self, rng: &mut Rng, syllables: usize) -> String {
        loop {
            let mut w = String::with_capacity(syllables * 2);
            for _ in 0..syllables {
                w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn poisson(rng: &mut Rng, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let limit = (-lambda).exp();
    let mut k = 0;
    let mut p = 1.0;
    loop {
        p *= rng.gen::<f64>();
        if p <= limit {
            return k;
        }
        k += 1;
    }
}

/// Draws `n` distinct indices from `pool` proportionally to `weights`.
fn weighted_without_replacement(
    rng: &mut Rng,
    pool: &[TypeId],
    weights: &[f64],
    n: usize,
) -> Vec<TypeId> {
    let mut remaining: Vec<(TypeId, f64)> = pool.iter().map(|&t| (t, weights[t])).collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n.min(remaining.len()) {
        let total: f64 = remaining.iter().map(|(_, w)| w).sum();
        let mut x = rng.gen::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (i, (_, w)) in remaining.iter().enumerate() {
            if x < *w {
                pick = i;
                break;
            }
            x -= w;
        }
        out.push(remaining.swap_remove(pick).0);
    }
    out
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    if spec.num_types < 2 {
        return Err(Error::Config(
            "synthetic corpus needs at least 2 types".into(),
        ));
    }
    if spec.train_records == 0 || spec.dev_records == 0 || spec.test_records == 0 {
        return Err(Error::Config("synthetic splits must be non-empty".into()));
    }
    if !(0.0..=1.0).contains(&spec.cue_strength) || !(0.0..1.0).contains(&spec.unseen_fraction) {
        return Err(Error::Config(
            "cue_strength must lie in [0,1] and unseen_fraction in [0,1)".into(),
        ));
    }
    if spec.context_words.0 > spec.context_words.1 || spec.mean_gold_types < 1.0 {
        return Err(Error::Config(
            "context_words must be an ordered range and mean_gold_types >= 1".into(),
        ));
    }
    let mut rng = seeded(seed, "synthetic-corpus");
    let mut mint = WordMint::new();

    let n = spec.num_types;
    let mut surfaces = Vec::with_capacity(n);
    for _ in 0..n {
        let s = if rng.gen::<f64>() < spec.multiword_fraction {
            format!("{} {}", mint.mint(&mut rng, 2), mint.mint(&mut rng, 2))
        } else {
            let syl = rng.gen_range(2..=3);
            mint.mint(&mut rng, syl)
        };
        surfaces.push(s);
    }
    let mut cues = Vec::with_capacity(n);
    for s in &surfaces {
        let extra = rng.gen_range(0..=2);
        let mut c = vec![s.clone()];
        for _ in 0..extra {
            c.push(mint.mint(&mut rng, 3));
        }
        cues.push(c);
    }
    let filler: Vec<String> = (0..spec.filler_words)
        .map(|_| mint.mint(&mut rng, 2))
        .collect();
    let names: Vec<String> = (0..100)
        .map(|_| {
            let w = mint.mint(&mut rng, 2);
            let mut chars = w.chars();
            let first = chars.next().unwrap().to_ascii_uppercase();
            std::iter::once(first).chain(chars).collect()
        })
        .collect();

    // Zipf weights over a shuffled frequency ranking.
    let mut ranking: Vec<TypeId> = (0..n).collect();
    ranking.shuffle(&mut rng);
    let mut weights = vec![0.0; n];
    for (rank, &t) in ranking.iter().enumerate() {
        weights[t] = 1.0 / ((rank + 1) as f64).powf(spec.zipf_exponent);
    }
    let n_unseen = (spec.unseen_fraction * n as f64).round() as usize;
    let unseen: BTreeSet<TypeId> = ranking[n - n_unseen..].iter().copied().collect();
    let seen: Vec<TypeId> = (0..n).filter(|t| !unseen.contains(t)).collect();
    let all: Vec<TypeId> = (0..n).collect();

    let vocab = TypeVocabulary::new(surfaces)?;

    let make_split = |name: SplitName, count: usize, pool: &[TypeId], rng: &mut Rng| {
        let records = (0..count)
            .map(|i| {
                let k = (1 + poisson(rng, spec.mean_gold_types - 1.0)).min(pool.len());
                let gold = weighted_without_replacement(rng, pool, &weights, k);
                let len = rng.gen_range(spec.context_words.0..=spec.context_words.1);
                let mut words: Vec<String> = (0..len)
                    .map(|_| {
                        if rng.gen::<f64>() < 0.3 {
                            STOPWORDS[rng.gen_range(0..STOPWORDS.len())].to_string()
                        } else {
                            filler[rng.gen_range(0..filler.len())].clone()
                        }
                    })
                    .collect();
                let inject = |t: TypeId, rng: &mut Rng, words: &mut Vec<String>| {
                    let cue = &cues[t][rng.gen_range(0..cues[t].len())];
                    let at = rng.gen_range(0..=words.len());
                    words.insert(at, cue.clone());
                };
                for &t in &gold {
                    if rng.gen::<f64>() < spec.cue_strength {
                        inject(t, rng, &mut words);
                    }
                }
                if rng.gen::<f64>() < spec.distractor_rate {
                    let t = pool[rng.gen_range(0..pool.len())];
                    if !gold.contains(&t) {
                        inject(t, rng, &mut words);
                    }
                }
                let n_names = rng.gen_range(1..=2);
                let mention = (0..n_names)
                    .map(|_| names[rng.gen_range(0..names.len())].as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                let split_at = rng.gen_range(0..=words.len());
                let right = words.split_off(split_at);
                MentionRecord {
                    id: format!("{name}-{i:05}"),
                    left_context: words.join(" "),
                    mention,
                    right_context: right.join(" "),
                    gold_types: gold.into_iter().collect(),
                }
            })
            .collect();
        DatasetSplit { name, records }
    };

    let train = make_split(SplitName::Train, spec.train_records, &seen, &mut rng);
    let dev = make_split(SplitName::Dev, spec.dev_records, &all, &mut rng);
    let test = make_split(SplitName::Test, spec.test_records, &all, &mut rng);

    Ok(SyntheticCorpus {
        vocab,
        train,
        dev,
        test,
        cues,
        unseen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_types: 200,
            train_records: 300,
            dev_records: 100,
            test_records: 100,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_synthetic_corpus(&small(), 7).unwrap();
        let b = generate_synthetic_corpus(&small(), 7).unwrap();
        assert_eq!(a.vocab, b.vocab);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = generate_synthetic_corpus(&small(), 8).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn full_cue_strength_puts_every_cue_in_context() {
        let spec = SyntheticSpec {
            cue_strength: 1.0,
            ..small()
        };
        let c = generate_synthetic_corpus(&spec, 3).unwrap();
        for r in c.train.records.iter().chain(&c.dev.records) {
            let text = format!(" {} {} {} ", r.left_context, r.mention, r.right_context);
            for &t in &r.gold_types {
                assert!(
                    c.cues[t]
                        .iter()
                        .any(|cue| text.contains(&format!(" {cue} "))),
                    "record {} lacks a cue for type {t}",
                    r.id
                );
            }
        }
    }

    #[test]
    fn unseen_fraction_removes_types_from_train() {
        let c = generate_synthetic_corpus(&small(), 11).unwrap();
        assert_eq!(c.unseen.len(), 60);
        let in_train: BTreeSet<TypeId> = c
            .train
            .records
            .iter()
            .flat_map(|r| r.gold_types.iter().copied())
            .collect();
        assert!(in_train.is_disjoint(&c.unseen));
        assert!(in_train.len() + c.unseen.len() <= 200);
    }

    #[test]
    fn mean_gold_size_within_ten_percent() {
        let spec = SyntheticSpec {
            train_records: 1200,
            ..small()
        };
        let c = generate_synthetic_corpus(&spec, 5).unwrap();
        let mean = c
            .train
            .records
            .iter()
            .map(|r| r.gold_types.len() as f64)
            .sum::<f64>()
            / c.train.len() as f64;
        assert!(
            (mean - spec.mean_gold_types).abs() <= 0.1 * spec.mean_gold_types,
            "{mean}"
        );
    }

    #[test]
    fn every_type_has_a_cue_and_records_are_valid() {
        let c = generate_synthetic_corpus(&small(), 2).unwrap();
        assert!(c.cues.iter().all(|cs| !cs.is_empty() && cs.len() <= 3));
        for (t, cs) in c.cues.iter().enumerate() {
            assert_eq!(cs[0], c.vocab.surface(t));
        }
        for r in &c.test.records {
            assert!(!r.mention.is_empty());
            assert!(!r.gold_types.is_empty());
        }
        crate::data::check_disjoint(&[&c.train, &c.dev, &c.test]).unwrap();
    }

    #[test]
    fn degenerate_specs_rejected() {
        let spec = SyntheticSpec {
            num_types: 1,
            ..small()
        };
        assert!(generate_synthetic_corpus(&spec, 0).is_err());
        let spec = SyntheticSpec {
            dev_records: 0,
            ..small()
        };
        assert!(generate_synthetic_corpus(&spec, 0).is_err());
    }
}
