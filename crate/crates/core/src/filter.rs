//! Stage 3: scoring recalled candidates against the sentence.
//!
//! Three scorers share one encoder implementation:
//!
//! * `mcce-s`: every candidate is one registered type token after the sentence.
//! * `mcce-b`: every candidate is a block of `B` sub-word pieces.
//! * `vanilla-ce`: one encoder pass per (sentence, type) pair, scored from CLS.
//!
//! The multi-candidate variants score all `K` candidates in a single pass.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{CandidateSet, DatasetSplit, MentionRecord, TypeId};
use crate::embeddings::{register_type_tokens, TypeTokenRegistry};
use crate::encoder::ops::sigmoid;
use crate::encoder::{
    AttentionMode, Dropout, EncoderConfig, EncoderParams, Parameters, QuadrantFlags,
};
use crate::error::{Error, Result};
use crate::eval::{threshold_predict, tune_threshold_with, Averaging, ScoredRecord, TypeSets};
use crate::input::{
    assemble_candidates, assemble_pair, Assembled, CandidateFormat, SentencePieces,
};
use crate::loss::{bce, margin_loss};
use crate::model::{Head, Model};
use crate::rng::{seeded, Rng};
use crate::tokenizer::SubwordVocabulary;
use crate::train::{fit, BatchResult, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilterVariant {
    #[serde(rename = "mcce-s")]
    McceS,
    #[serde(rename = "mcce-b")]
    McceB,
    #[serde(rename = "vanilla-ce")]
    VanillaCe,
}

impl fmt::Display for FilterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterVariant::McceS => "mcce-s",
            FilterVariant::McceB => "mcce-b",
            FilterVariant::VanillaCe => "vanilla-ce",
        })
    }
}

impl FromStr for FilterVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcce-s" => Ok(FilterVariant::McceS),
            "mcce-b" => Ok(FilterVariant::McceB),
            "vanilla-ce" => Ok(FilterVariant::VanillaCe),
            _ => Err(Error::Config(format!(
                "unknown filter variant {s:?} (expected mcce-s, mcce-b or vanilla-ce)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub variant: FilterVariant,
    /// Use the reduced attention that never scores candidate pairs.
    pub structured_no_c2c: bool,
    pub flags: QuadrantFlags,
    /// Block width for `mcce-b`; the other variants use 1.
    pub block_size: usize,
    pub k: usize,
    pub threshold: f64,
    /// Ranking margin for the cross-encoder loss.
    pub margin: f64,
    pub force_top1: bool,
    /// Weight of positive labels in the multi-candidate loss.
    pub alpha: f64,
    pub shared_candidate_positions: bool,
    pub train: TrainConfig,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            variant: FilterVariant::McceS,
            structured_no_c2c: true,
            flags: QuadrantFlags::no_c2c(),
            block_size: 4,
            k: 32,
            threshold: 0.5,
            margin: 0.1,
            force_top1: true,
            alpha: 1.0,
            shared_candidate_positions: true,
            train: TrainConfig::default(),
        }
    }
}

impl FilterConfig {
    pub fn block(&self) -> usize {
        match self.variant {
            FilterVariant::McceB => self.block_size,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.block_size == 0 {
            return Err(Error::Config(
                "filter k and block_size must be positive".into(),
            ));
        }
        if self.structured_no_c2c && self.flags != QuadrantFlags::no_c2c() {
            return Err(Error::Config(format!(
                "structured_no_c2c requires the {} quadrant pattern, got {}",
                QuadrantFlags::no_c2c().label(),
                self.flags.label()
            )));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must lie in [0,1)".into()));
        }
        if !(self.alpha > 0.0) || self.margin < 0.0 {
            return Err(Error::Config(
                "alpha must be positive and margin non-negative".into(),
            ));
        }
        self.train.validate()
    }

    pub fn mode(&self) -> AttentionMode {
        if self.structured_no_c2c {
            AttentionMode::StructuredNoC2c
        } else {
            AttentionMode::Masked(self.flags)
        }
    }
}

/// Encoder forward passes issued by a filter.
#[derive(Debug, Default)]
pub struct PassCounter(AtomicU64);

impl PassCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

impl Clone for PassCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.get()))
    }
}

/// Everything a filter needs besides its weights.
#[derive(Debug, Clone)]
pub struct Filter {
    pub config: FilterConfig,
    pub encoder: EncoderConfig,
    pub type_pieces: Vec<Vec<usize>>,
    pub registry: Option<TypeTokenRegistry>,
    pub passes: PassCounter,
}

/// One record prepared for the filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterItem {
    pub id: String,
    pub pieces: SentencePieces,
    pub candidates: Vec<TypeId>,
    pub gold: BTreeSet<TypeId>,
}

impl FilterItem {
    pub fn new(
        record: &MentionRecord,
        candidates: &CandidateSet,
        tokenizer: &SubwordVocabulary,
    ) -> Result<Self> {
        if candidates.record_id != record.id {
            return Err(Error::Validation(format!(
                "candidate set for {} paired with record {}",
                candidates.record_id, record.id
            )));
        }
        Ok(Self {
            id: record.id.clone(),
            pieces: SentencePieces::new(record, tokenizer),
            candidates: candidates.type_ids(),
            gold: record.gold_types.clone(),
        })
    }
}

/// Pairs each record with its candidate set (same order, same ids).
pub fn filter_items(
    split: &DatasetSplit,
    candidates: &[CandidateSet],
    tokenizer: &SubwordVocabulary,
) -> Result<Vec<FilterItem>> {
    if split.len() != candidates.len() {
        return Err(Error::Validation(format!(
            "{} records but {} candidate sets",
            split.len(),
            candidates.len()
        )));
    }
    split
        .records
        .iter()
        .zip(candidates)
        .map(|(r, c)| FilterItem::new(r, c, tokenizer))
        .collect()
}

impl Filter {
    /// A filter and fresh weights. `mcce-s` appends one type token per type.
    pub fn init(
        config: FilterConfig,
        encoder: EncoderConfig,
        vocab_size: usize,
        type_pieces: Vec<Vec<usize>>,
        seed: u64,
    ) -> Result<(Self, Model)> {
        config.validate()?;
        let mut rng = seeded(seed, "filter-init");
        let mut params = EncoderParams::init(&encoder, vocab_size, &mut rng)?;
        let registry = match config.variant {
            FilterVariant::McceS => {
                Some(register_type_tokens(&type_pieces, &mut params.embeddings)?)
            }
            _ => None,
        };
        let head = Head::init(&mut rng, encoder.dim, 1);
        Ok((
            Self {
                config,
                encoder,
                type_pieces,
                registry,
                passes: PassCounter::default(),
            },
            Model {
                encoder: params,
                head,
            },
        ))
    }

    pub fn num_types(&self) -> usize {
        self.type_pieces.len()
    }

    /// Sentence plus candidates in the configured format.
    pub fn assemble(&self, pieces: &SentencePieces, candidates: &[TypeId]) -> Result<Assembled> {
        let format = match (self.config.variant, &self.registry) {
            (FilterVariant::McceS, Some(reg)) => CandidateFormat::Single(reg),
            (FilterVariant::McceS, None) => {
                return Err(Error::Config(
                    "mcce-s filter has no registered type tokens".into(),
                ))
            }
            _ => CandidateFormat::Block {
                block: self.config.block(),
                pieces: &self.type_pieces,
            },
        };
        assemble_candidates(
            pieces,
            candidates,
            format,
            self.encoder.max_positions,
            self.config.shared_candidate_positions,
        )
    }

    fn pair(&self, pieces: &SentencePieces, t: TypeId) -> Result<Assembled> {
        let tp = self.type_pieces.get(t).ok_or(Error::Index {
            index: t,
            size: self.type_pieces.len(),
        })?;
        assemble_pair(pieces, tp, self.encoder.max_positions)
    }

    /// One score per candidate from a single encoder pass.
    pub fn mcce_forward(&self, model: &Model, input: &Assembled) -> Result<Vec<f64>> {
        self.passes.bump();
        let reps = input.layout.representatives();
        let s = model.score(&self.encoder, input.input(), self.config.mode(), &reps)?;
        Ok(s.column(0).to_vec())
    }

    /// Score of one type from the CLS state of `[CLS] c [SEP] m [SEP] y`.
    pub fn ce_forward(&self, model: &Model, pieces: &SentencePieces, t: TypeId) -> Result<f64> {
        let a = self.pair(pieces, t)?;
        self.passes.bump();
        let s = model.score(
            &self.encoder,
            a.input(),
            AttentionMode::Masked(QuadrantFlags::all()),
            &[0],
        )?;
        Ok(s[[0, 0]])
    }

    /// Scores in candidate order: one pass for the multi-candidate variants,
    /// `K` passes for the cross-encoder.
    pub fn score(
        &self,
        model: &Model,
        pieces: &SentencePieces,
        candidates: &[TypeId],
    ) -> Result<Vec<f64>> {
        match self.config.variant {
            FilterVariant::VanillaCe => candidates
                .iter()
                .map(|&t| self.ce_forward(model, pieces, t))
                .collect(),
            _ => {
                let a = self.assemble(pieces, candidates)?;
                self.mcce_forward(model, &a)
            }
        }
    }

    pub fn probabilities(&self, model: &Model, item: &FilterItem) -> Result<ScoredRecord> {
        let s = self.score(model, &item.pieces, &item.candidates)?;
        Ok(ScoredRecord {
            id: item.id.clone(),
            probs: item
                .candidates
                .iter()
                .zip(s)
                .map(|(&t, s)| (t, sigmoid(s)))
                .collect(),
        })
    }

    /// `{t : σ(s_t) > τ}`, or the top candidate if that is empty and
    /// `force_top1` is set.
    pub fn predict_types(&self, model: &Model, item: &FilterItem) -> Result<BTreeSet<TypeId>> {
        let r = self.probabilities(model, item)?;
        Ok(threshold_predict(
            &r.probs,
            self.config.threshold,
            self.config.force_top1,
        ))
    }

    /// Prediction with every type as a candidate, in id order.
    pub fn full_vocab_predict(
        &self,
        model: &Model,
        record: &MentionRecord,
        tokenizer: &SubwordVocabulary,
    ) -> Result<BTreeSet<TypeId>> {
        let item = FilterItem {
            id: record.id.clone(),
            pieces: SentencePieces::new(record, tokenizer),
            candidates: (0..self.num_types()).collect(),
            gold: record.gold_types.clone(),
        };
        self.predict_types(model, &item)
    }

    /// Mean loss and gradient of the multi-candidate objective over `batch`.
    ///
    /// Candidate order is reshuffled per item; gold types outside the
    /// candidate set play no part.
    pub fn mcce_train_step(
        &self,
        model: &Model,
        batch: &[&FilterItem],
        rng: &mut Rng,
    ) -> Result<BatchResult> {
        let mut grads = model.zeros_like();
        let mut total = 0.0;
        let n = batch.len() as f64;
        for item in batch {
            let mut order = item.candidates.clone();
            order.shuffle(rng);
            let a = self.assemble(&item.pieces, &order)?;
            let reps = a.layout.representatives();
            let mut drop = Dropout {
                rate: self.encoder.dropout,
                rng: &mut *rng,
            };
            let (s, cache) = model.forward(
                &self.encoder,
                a.input(),
                self.config.mode(),
                &reps,
                Some(&mut drop),
            )?;
            let labels: Vec<bool> = order.iter().map(|t| item.gold.contains(t)).collect();
            let scores: Vec<f64> = s.column(0).to_vec();
            let (loss, g) = bce(&scores, &labels, self.config.alpha);
            total += loss;
            let ds = Array2::from_shape_vec((g.len(), 1), g.into_iter().map(|v| v / n).collect())
                .expect("column");
            model.backward(&self.encoder, a.input(), &cache, &ds, &mut grads);
        }
        Ok(BatchResult {
            loss: total / n,
            grads,
            skipped: 0,
        })
    }

    /// Mean margin loss over one sampled (positive, negative) pair per item.
    /// Items without both kinds are skipped.
    pub fn ce_train_step(
        &self,
        model: &Model,
        batch: &[&FilterItem],
        rng: &mut Rng,
    ) -> Result<BatchResult> {
        let mut pairs = Vec::with_capacity(batch.len());
        let mut skipped = 0;
        for item in batch {
            let (pos, neg): (Vec<TypeId>, Vec<TypeId>) =
                item.candidates.iter().partition(|t| item.gold.contains(t));
            if pos.is_empty() || neg.is_empty() {
                skipped += 1;
                continue;
            }
            let p = pos[rng.gen_range(0..pos.len())];
            let q = neg[rng.gen_range(0..neg.len())];
            pairs.push((*item, p, q));
        }
        if pairs.is_empty() {
            return Err(Error::EmptyBatch { skipped });
        }
        let n = pairs.len() as f64;
        let mut grads = model.zeros_like();
        let mut total = 0.0;
        for (item, p, q) in pairs {
            let ap = self.pair(&item.pieces, p)?;
            let aq = self.pair(&item.pieces, q)?;
            let mode = AttentionMode::Masked(QuadrantFlags::all());
            let run = |a: &Assembled, rng: &mut Rng| {
                let mut drop = Dropout {
                    rate: self.encoder.dropout,
                    rng,
                };
                model.forward(&self.encoder, a.input(), mode, &[0], Some(&mut drop))
            };
            let (sp, cp) = run(&ap, rng)?;
            let (sq, cq) = run(&aq, rng)?;
            let (loss, dp, dq) = margin_loss(sp[[0, 0]], sq[[0, 0]], self.config.margin);
            total += loss;
            if loss > 0.0 {
                model.backward(
                    &self.encoder,
                    ap.input(),
                    &cp,
                    &Array2::from_elem((1, 1), dp / n),
                    &mut grads,
                );
                model.backward(
                    &self.encoder,
                    aq.input(),
                    &cq,
                    &Array2::from_elem((1, 1), dq / n),
                    &mut grads,
                );
            }
        }
        Ok(BatchResult {
            loss: total / n,
            grads,
            skipped,
        })
    }

    pub fn train_step(
        &self,
        model: &Model,
        batch: &[&FilterItem],
        rng: &mut Rng,
    ) -> Result<BatchResult> {
        match self.config.variant {
            FilterVariant::VanillaCe => self.ce_train_step(model, batch, rng),
            _ => self.mcce_train_step(model, batch, rng),
        }
    }

    pub fn score_items(&self, model: &Model, items: &[FilterItem]) -> Result<Vec<ScoredRecord>> {
        items
            .iter()
            .map(|it| self.probabilities(model, it))
            .collect()
    }

    /// Tunes the threshold on `dev` for the configured prediction rule and
    /// stores it in the config.
    pub fn tune(&mut self, model: &Model, dev: &[FilterItem]) -> Result<f64> {
        let scored = self.score_items(model, dev)?;
        let golds: TypeSets = dev.iter().map(|i| (i.id.clone(), i.gold.clone())).collect();
        let c = tune_threshold_with(&scored, &golds, self.config.force_top1, Averaging::Macro)?;
        self.config.threshold = c.tau;
        Ok(c.f1)
    }

    /// Trains `model`, keeping the epoch with the best tuned dev macro-F1, and
    /// sets the threshold from that epoch.
    pub fn train(
        &mut self,
        model: &mut Model,
        train: &[FilterItem],
        dev: &[FilterItem],
    ) -> Result<TrainLog> {
        self.config.validate()?;
        let golds: TypeSets = dev.iter().map(|i| (i.id.clone(), i.gold.clone())).collect();
        let log = {
            let this = &*self;
            fit(
                model,
                train.len(),
                &this.config.train,
                "filter-train",
                |m, batch, rng| {
                    let items: Vec<&FilterItem> = batch.iter().map(|&i| &train[i]).collect();
                    this.train_step(m, &items, rng)
                },
                |m| {
                    let scored = this.score_items(m, dev)?;
                    Ok(tune_threshold_with(
                        &scored,
                        &golds,
                        this.config.force_top1,
                        Averaging::Macro,
                    )?
                    .f1)
                },
            )?
        };
        self.tune(model, dev)?;
        Ok(log)
    }
}
