//! Stage 1: a multi-label classifier over all types, and a BM25 baseline.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{
    CandidateEntry, CandidateSet, CandidateSource, DatasetSplit, MentionRecord, TypeId,
};
use crate::encoder::{
    AttentionMode, Dropout, EncoderConfig, EncoderParams, Parameters, QuadrantFlags,
};
use crate::error::{Error, Result};
use crate::eval::{recall_at_k, TypeSets};
use crate::input::{assemble_sentence, Assembled, SentencePieces};
use crate::loss::mlc_loss_and_grad;
use crate::model::{Head, Model};
use crate::rng::seeded;
use crate::tokenizer::SubwordVocabulary;
use crate::train::{fit, BatchResult, TrainConfig, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecallConfig {
    /// Candidates kept per record (K₁).
    pub k: usize,
    /// Weight of positive labels in the loss.
    pub alpha: f64,
    /// Decision threshold when the classifier is used as a final predictor.
    pub threshold: f64,
    /// Dev recall@`selection_k` picks the checkpoint; defaults to `k`.
    pub selection_k: Option<usize>,
    pub train: TrainConfig,
}

impl Default for RecallConfig {
    fn default() -> Self {
        Self {
            k: 32,
            alpha: 4.0,
            threshold: 0.5,
            selection_k: None,
            train: TrainConfig {
                epochs: 20,
                adam: crate::optim::AdamConfig {
                    lr: 1e-2,
                    ..Default::default()
                },
                ..Default::default()
            },
        }
    }
}

impl RecallConfig {
    pub fn validate(&self, num_types: usize) -> Result<()> {
        if self.k == 0 || self.k > num_types {
            return Err(Error::Config(format!(
                "recall k must lie in 1..={num_types}, got {}",
                self.k
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0,1)".into()));
        }
        self.train.validate()
    }
}

/// Fresh classifier: encoder plus a head with one output per type.
pub fn init_mlc(
    config: &EncoderConfig,
    vocab_size: usize,
    num_types: usize,
    seed: u64,
) -> Result<Model> {
    let mut rng = seeded(seed, "mlc-init");
    Ok(Model {
        encoder: EncoderParams::init(config, vocab_size, &mut rng)?,
        head: Head::init(&mut rng, config.dim, num_types),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlcOutput {
    pub scores: Vec<f64>,
    /// Context pieces dropped to fit the position budget.
    pub truncated: usize,
}

fn scores_of(model: &Model, config: &EncoderConfig, a: &Assembled) -> Result<Vec<f64>> {
    let s = model.score(
        config,
        a.input(),
        AttentionMode::Masked(QuadrantFlags::all()),
        &[0],
    )?;
    Ok(s.row(0).to_vec())
}

/// Scores over every type from the `[CLS]` state, in one encoder pass.
pub fn mlc_forward(
    record: &MentionRecord,
    tokenizer: &SubwordVocabulary,
    model: &Model,
    config: &EncoderConfig,
) -> Result<MlcOutput> {
    let a = assemble_sentence(
        &SentencePieces::new(record, tokenizer),
        config.max_positions,
    )?;
    Ok(MlcOutput {
        scores: scores_of(model, config, &a)?,
        truncated: a.truncated_context,
    })
}

/// Top `k` types by score, ties to the lower id.
pub fn top_k_entries(
    scores: &[f64],
    k: usize,
    source: CandidateSource,
) -> Result<Vec<CandidateEntry>> {
    if k > scores.len() {
        return Err(Error::Config(format!(
            "k = {k} exceeds the {} scored types",
            scores.len()
        )));
    }
    let mut ids: Vec<TypeId> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(ids[..k]
        .iter()
        .map(|&t| CandidateEntry {
            type_id: t,
            score: scores[t],
            source,
        })
        .collect())
}

pub fn recall_topk(
    record: &MentionRecord,
    tokenizer: &SubwordVocabulary,
    model: &Model,
    config: &EncoderConfig,
    k: usize,
) -> Result<CandidateSet> {
    let out = mlc_forward(record, tokenizer, model, config)?;
    CandidateSet::new(
        &record.id,
        top_k_entries(&out.scores, k, CandidateSource::Recall)?,
    )
}

pub fn golds_of(split: &DatasetSplit) -> TypeSets {
    split
        .records
        .iter()
        .map(|r| (r.id.clone(), r.gold_types.clone()))
        .collect()
}

struct Prepared {
    inputs: Vec<Assembled>,
    golds: Vec<BTreeSet<TypeId>>,
}

fn prepare(
    split: &DatasetSplit,
    tokenizer: &SubwordVocabulary,
    config: &EncoderConfig,
) -> Result<Prepared> {
    let mut inputs = Vec::with_capacity(split.len());
    let mut golds = Vec::with_capacity(split.len());
    for r in &split.records {
        inputs.push(assemble_sentence(
            &SentencePieces::new(r, tokenizer),
            config.max_positions,
        )?);
        golds.push(r.gold_types.clone());
    }
    Ok(Prepared { inputs, golds })
}

/// Gradient of the mean loss over `batch`.
pub fn mlc_train_step(
    model: &Model,
    config: &EncoderConfig,
    inputs: &[&Assembled],
    golds: &[&BTreeSet<TypeId>],
    alpha: f64,
    rng: &mut crate::rng::Rng,
) -> Result<BatchResult> {
    let mut grads = model.zeros_like();
    let mut total = 0.0;
    let n = inputs.len() as f64;
    for (a, gold) in inputs.iter().zip(golds) {
        let mut drop = Dropout {
            rate: config.dropout,
            rng: &mut *rng,
        };
        let (s, cache) = model.forward(
            config,
            a.input(),
            AttentionMode::Masked(QuadrantFlags::all()),
            &[0],
            Some(&mut drop),
        )?;
        let (loss, g) = mlc_loss_and_grad(s.row(0).as_slice().expect("contiguous"), gold, alpha)?;
        total += loss;
        let ds = Array2::from_shape_vec((1, g.len()), g.into_iter().map(|v| v / n).collect())
            .expect("one row");
        model.backward(config, a.input(), &cache, &ds, &mut grads);
    }
    Ok(BatchResult {
        loss: total / n,
        grads,
        skipped: 0,
    })
}

/// Trains the classifier, selecting the epoch with the best dev recall@K.
pub fn train_mlc(
    model: &mut Model,
    train: &DatasetSplit,
    dev: &DatasetSplit,
    tokenizer: &SubwordVocabulary,
    encoder: &EncoderConfig,
    config: &RecallConfig,
) -> Result<TrainLog> {
    let n = model.head.outputs();
    config.validate(n)?;
    if let Some(r) = train.records.iter().find(|r| r.gold_types.is_empty()) {
        return Err(Error::Validation(format!(
            "training record {} has no gold types",
            r.id
        )));
    }
    let tr = prepare(train, tokenizer, encoder)?;
    let dv = prepare(dev, tokenizer, encoder)?;
    let dev_golds = golds_of(dev);
    let sel_k = config.selection_k.unwrap_or(config.k);
    fit(
        model,
        tr.inputs.len(),
        &config.train,
        "mlc-train",
        |m, batch, rng| {
            let inputs: Vec<&Assembled> = batch.iter().map(|&i| &tr.inputs[i]).collect();
            let golds: Vec<&BTreeSet<TypeId>> = batch.iter().map(|&i| &tr.golds[i]).collect();
            mlc_train_step(m, encoder, &inputs, &golds, config.alpha, rng)
        },
        |m| {
            let sets = dv
                .inputs
                .iter()
                .zip(&dev.records)
                .map(|(a, r)| {
                    let s = scores_of(m, encoder, a)?;
                    CandidateSet::new(&r.id, top_k_entries(&s, sel_k, CandidateSource::Recall)?)
                })
                .collect::<Result<Vec<_>>>()?;
            recall_at_k(&sets, &dev_golds, sel_k)
        },
    )
}

/// Scores for every record of a split, in record order.
pub fn mlc_scores(
    split: &DatasetSplit,
    tokenizer: &SubwordVocabulary,
    model: &Model,
    config: &EncoderConfig,
) -> Result<Vec<Vec<f64>>> {
    split
        .records
        .iter()
        .map(|r| Ok(mlc_forward(r, tokenizer, model, config)?.scores))
        .collect()
}

/// Okapi BM25 over type surfaces, each type's sub-word pieces forming one document.
#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    docs: Vec<BTreeMap<usize, usize>>,
    doc_len: Vec<usize>,
    df: HashMap<usize, usize>,
    avg_len: f64,
    pub k1: f64,
    pub b: f64,
}

impl Bm25Index {
    pub fn new(documents: &[Vec<usize>]) -> Self {
        Self::with_params(documents, 1.2, 0.75)
    }

    pub fn with_params(documents: &[Vec<usize>], k1: f64, b: f64) -> Self {
        let mut docs = Vec::with_capacity(documents.len());
        let mut df = HashMap::new();
        for d in documents {
            let mut tf = BTreeMap::new();
            for &t in d {
                *tf.entry(t).or_insert(0) += 1;
            }
            for &t in tf.keys() {
                *df.entry(t).or_insert(0) += 1;
            }
            docs.push(tf);
        }
        let doc_len: Vec<usize> = documents.iter().map(Vec::len).collect();
        let avg_len = if documents.is_empty() {
            0.0
        } else {
            doc_len.iter().sum::<usize>() as f64 / documents.len() as f64
        };
        Self {
            docs,
            doc_len,
            df,
            avg_len,
            k1,
            b,
        }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn document_frequency(&self, term: usize) -> usize {
        self.df.get(&term).copied().unwrap_or(0)
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`
    pub fn idf(&self, term: usize) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.document_frequency(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Score of every document for the distinct terms of `query`.
    pub fn scores(&self, query: &[usize]) -> Vec<f64> {
        let terms: BTreeSet<usize> = query.iter().copied().collect();
        let mut out = vec![0.0; self.docs.len()];
        for &t in &terms {
            if self.document_frequency(t) == 0 {
                continue;
            }
            let idf = self.idf(t);
            for (j, doc) in self.docs.iter().enumerate() {
                if let Some(&tf) = doc.get(&t) {
                    let tf = tf as f64;
                    let norm = 1.0 - self.b + self.b * self.doc_len[j] as f64 / self.avg_len;
                    out[j] += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm);
                }
            }
        }
        out
    }
}

/// BM25 top `k` for the record's context and mention pieces.
pub fn bm25_topk(
    record: &MentionRecord,
    tokenizer: &SubwordVocabulary,
    index: &Bm25Index,
    k: usize,
) -> Result<CandidateSet> {
    let p = SentencePieces::new(record, tokenizer);
    let query: Vec<usize> = p
        .left
        .iter()
        .chain(&p.mention)
        .chain(&p.right)
        .copied()
        .collect();
    let scores = index.scores(&query);
    CandidateSet::new(
        &record.id,
        top_k_entries(&scores, k, CandidateSource::Recall)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_ties_and_permutation() {
        let e = top_k_entries(&[0.5, 0.9, 0.5, 0.1], 4, CandidateSource::Recall).unwrap();
        let ids: Vec<_> = e.iter().map(|e| e.type_id).collect();
        assert_eq!(ids, vec![1, 0, 2, 3]);
        assert!(top_k_entries(&[0.0], 2, CandidateSource::Recall).is_err());
    }

    #[test]
    fn bm25_hand_computed() {
        let idx = Bm25Index::new(&[vec![7, 8], vec![7], vec![9, 9, 9]]);
        let s = idx.scores(&[7]);
        let idf = (1.0f64 + (3.0 - 2.0 + 0.5) / (2.0 + 0.5)).ln();
        let avg = 2.0;
        let f = |dl: f64| idf * 2.2 / (1.0 + 1.2 * (0.25 + 0.75 * dl / avg));
        assert!((s[0] - f(2.0)).abs() < 1e-15);
        assert!((s[1] - f(1.0)).abs() < 1e-15);
        assert_eq!(s[2], 0.0);
        assert_eq!(idx.scores(&[8, 7, 7]), idx.scores(&[7, 8]));
        assert!(idx.scores(&[42]).iter().all(|&v| v == 0.0));
    }
}
