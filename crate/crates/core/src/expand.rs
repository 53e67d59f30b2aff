//! Stage 2: widening the recalled candidate list.
//!
//! Two sources replace the tail of the recall ranking: types whose surface
//! occurs verbatim among the record's nouns, and types a masked language model
//! proposes for the prompt `[CLS] c [SEP] m such as [MASK]×l [SEP]`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{
    CandidateEntry, CandidateSet, CandidateSource, DatasetSplit, MentionRecord, TypeId,
    TypeVocabulary,
};
use crate::encoder::{
    AttentionMode, Dropout, EncoderConfig, EncoderParams, Parameters, QuadrantFlags,
};
use crate::error::{Error, Result};
use crate::input::{assemble_prompt, Assembled, SentencePieces};
use crate::model::{Head, Model};
use crate::rng::{seeded, Rng};
use crate::tokenizer::{SubwordVocabulary, CLS, MASK, SEP};
use crate::train::{fit, BatchResult, TrainConfig, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpandConfig {
    /// Most MLM-sourced additions per record.
    pub k2: usize,
    /// Recall entries at the end of the list that may be replaced.
    pub replace_tail: usize,
    pub template: String,
    /// Longest type, in sub-word pieces, the MLM prompt may propose.
    pub l_max: usize,
}

impl Default for ExpandConfig {
    fn default() -> Self {
        Self {
            k2: 2,
            replace_tail: 8,
            template: "such as".into(),
            l_max: 4,
        }
    }
}

impl ExpandConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.replace_tail > k {
            return Err(Error::Config(format!(
                "replace_tail = {} exceeds K = {k}",
                self.replace_tail
            )));
        }
        if self.k2 > self.replace_tail {
            return Err(Error::Config(format!(
                "k2 = {} exceeds replace_tail = {}",
                self.k2, self.replace_tail
            )));
        }
        if self.l_max == 0 {
            return Err(Error::Config("l_max must be positive".into()));
        }
        Ok(())
    }
}

const NOUN_STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "be", "been",
    "before", "but", "by", "can", "could", "did", "do", "does", "for", "from", "had", "has",
    "have", "he", "her", "his", "i", "if", "in", "into", "is", "it", "its", "may", "more", "most",
    "not", "of", "on", "one", "or", "other", "our", "out", "over", "she", "should", "so", "some",
    "such", "than", "that", "the", "their", "them", "then", "there", "these", "they", "this",
    "those", "to", "under", "up", "was", "we", "were", "what", "when", "which", "who", "will",
    "with", "would", "you", "your",
];

/// Lowercases, trims punctuation and strips a plural suffix.
pub fn normalize_word(word: &str) -> String {
    let w: String = word
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    let n = w.chars().count();
    if n > 4 && w.ends_with("ies") {
        return format!("{}y", &w[..w.len() - 3]);
    }
    if n > 3
        && ["sses", "shes", "ches", "xes", "zes"]
            .iter()
            .any(|s| w.ends_with(s))
    {
        return w[..w.len() - 2].to_string();
    }
    if n > 3 && w.ends_with('s') && !["ss", "us", "is"].iter().any(|s| w.ends_with(s)) {
        return w[..w.len() - 1].to_string();
    }
    w
}

fn is_noun_like(raw: &str, normalized: &str) -> bool {
    if normalized.is_empty() || NOUN_STOPWORDS.contains(&normalized) {
        return false;
    }
    let lower = raw.to_lowercase();
    let verbish = |suffix: &str| lower.ends_with(suffix) && lower.len() >= suffix.len() + 3;
    !(verbish("ed") || verbish("ing"))
}

/// Distinct normalized nouns of context and mention, in order of first occurrence.
pub fn extract_noun_candidates(record: &MentionRecord) -> Vec<String> {
    let mut seen = HashSet::new();
    record
        .context_words()
        .into_iter()
        .filter_map(|w| {
            let n = normalize_word(w);
            (is_noun_like(w, &n) && seen.insert(n.clone())).then_some(n)
        })
        .collect()
}

/// Type surfaces indexed for exact matching against normalized context words.
#[derive(Debug, Clone)]
pub struct SurfaceIndex {
    by_first: HashMap<String, Vec<(Vec<String>, TypeId)>>,
}

impl SurfaceIndex {
    pub fn new(vocab: &TypeVocabulary) -> Self {
        let mut by_first: HashMap<String, Vec<(Vec<String>, TypeId)>> = HashMap::new();
        for (id, surface) in vocab.iter() {
            let words: Vec<String> = surface
                .split(|c: char| c.is_whitespace() || c == '_')
                .filter(|w| !w.is_empty())
                .map(normalize_word)
                .collect();
            if let Some(first) = words.first() {
                by_first.entry(first.clone()).or_default().push((words, id));
            }
        }
        Self { by_first }
    }

    /// Matching type ids ordered by where their match starts, then id.
    ///
    /// Single-word types match a noun; longer types match a contiguous run of
    /// normalized words.
    pub fn matches(&self, record: &MentionRecord) -> Vec<TypeId> {
        let raw = record.context_words();
        let norm: Vec<String> = raw.iter().map(|w| normalize_word(w)).collect();
        let mut found: BTreeMap<TypeId, usize> = BTreeMap::new();
        for (i, w) in norm.iter().enumerate() {
            let Some(cands) = self.by_first.get(w) else {
                continue;
            };
            for (words, id) in cands {
                let hit = if words.len() == 1 {
                    is_noun_like(raw[i], w)
                } else {
                    norm.get(i..i + words.len())
                        .is_some_and(|s| s == words.as_slice())
                };
                if hit {
                    found.entry(*id).or_insert(i);
                }
            }
        }
        let mut out: Vec<(usize, TypeId)> = found.into_iter().map(|(t, p)| (p, t)).collect();
        out.sort_unstable();
        out.into_iter().map(|(_, t)| t).collect()
    }
}

pub fn exact_match_candidates(record: &MentionRecord, vocab: &TypeVocabulary) -> Vec<TypeId> {
    SurfaceIndex::new(vocab).matches(record)
}

/// A masked language model seen through the only question expansion asks.
pub trait MaskedScorer {
    /// `out[[i, j]] = log p(tokens[masks[i]] = fills[j] | tokens)`.
    fn log_probs(&self, tokens: &[usize], masks: &[usize], fills: &[usize]) -> Result<Array2<f64>>;
}

/// Context-free piece frequencies with add-one smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct UnigramScorer {
    log_p: Vec<f64>,
}

impl UnigramScorer {
    pub fn uniform(vocab_size: usize) -> Self {
        Self {
            log_p: vec![-(vocab_size as f64).ln(); vocab_size],
        }
    }

    pub fn fit<S: AsRef<str>>(texts: &[S], tokenizer: &SubwordVocabulary) -> Self {
        let v = tokenizer.len();
        let mut counts = vec![1.0; v];
        for t in texts {
            for p in tokenizer.tokenize(t.as_ref()) {
                counts[p] += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        Self {
            log_p: counts.iter().map(|c| (c / total).ln()).collect(),
        }
    }
}

impl MaskedScorer for UnigramScorer {
    fn log_probs(
        &self,
        _tokens: &[usize],
        masks: &[usize],
        fills: &[usize],
    ) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((masks.len(), fills.len()));
        for (j, &f) in fills.iter().enumerate() {
            let lp = *self.log_p.get(f).ok_or(Error::Index {
                index: f,
                size: self.log_p.len(),
            })?;
            out.column_mut(j).fill(lp);
        }
        Ok(out)
    }
}

/// The project's encoder with a vocabulary-sized output head.
#[derive(Debug, Clone)]
pub struct EncoderMlm {
    pub model: Model,
    pub config: EncoderConfig,
}

fn log_softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl EncoderMlm {
    pub fn init(config: EncoderConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed, "mlm-init");
        let encoder = EncoderParams::init(&config, vocab_size, &mut rng)?;
        let head = Head::init(&mut rng, config.dim, vocab_size);
        Ok(Self {
            model: Model { encoder, head },
            config,
        })
    }

    fn layout_of(tokens: &[usize]) -> Result<Assembled> {
        Ok(Assembled {
            tokens: tokens.to_vec(),
            positions: (0..tokens.len()).collect(),
            layout: crate::encoder::InputLayout::sentence_only(tokens.len())?,
            candidates: Vec::new(),
            truncated_context: 0,
            truncated_candidates: 0,
        })
    }
}

impl MaskedScorer for EncoderMlm {
    fn log_probs(&self, tokens: &[usize], masks: &[usize], fills: &[usize]) -> Result<Array2<f64>> {
        let v = self.model.head.outputs();
        if let Some(&f) = fills.iter().find(|&&f| f >= v) {
            return Err(Error::Index { index: f, size: v });
        }
        let a = Self::layout_of(tokens)?;
        let s = self.model.score(
            &self.config,
            a.input(),
            AttentionMode::Masked(QuadrantFlags::all()),
            masks,
        )?;
        let lp = log_softmax_rows(&s);
        Ok(Array2::from_shape_fn(
            (masks.len(), fills.len()),
            |(i, j)| lp[[i, fills[j]]],
        ))
    }
}

/// Training of [`EncoderMlm`] on prompts whose masks hide a gold type, plus
/// randomly masked context pieces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlmConfig {
    pub context_mask_rate: f64,
    pub train: TrainConfig,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            context_mask_rate: 0.15,
            train: TrainConfig {
                epochs: 6,
                adam: crate::optim::AdamConfig {
                    lr: 5e-3,
                    ..Default::default()
                },
                ..Default::default()
            },
        }
    }
}

struct MlmItem {
    pieces: SentencePieces,
    types: Vec<TypeId>,
}

fn mlm_example(
    item: &MlmItem,
    type_pieces: &[Vec<usize>],
    template: &[usize],
    max_positions: usize,
    mask_rate: f64,
    rng: &mut Rng,
) -> Result<(Assembled, Vec<usize>, Vec<usize>)> {
    let t = item.types[rng.gen_range(0..item.types.len())];
    let fill = &type_pieces[t];
    let (mut a, masks) = assemble_prompt(&item.pieces, template, fill.len(), max_positions)?;
    let mut rows = masks.clone();
    let mut targets = fill.clone();
    let prompt_start = masks[0] - template.len();
    for i in 1..prompt_start {
        let tok = a.tokens[i];
        if tok != CLS && tok != SEP && rng.gen::<f64>() < mask_rate {
            rows.push(i);
            targets.push(tok);
            a.tokens[i] = MASK;
        }
    }
    Ok((a, rows, targets))
}

/// Trains `mlm` in place; the selection metric is mean log-likelihood of the
/// gold type pieces on `dev`.
pub fn train_mlm(
    mlm: &mut EncoderMlm,
    train: &DatasetSplit,
    dev: &DatasetSplit,
    tokenizer: &SubwordVocabulary,
    type_pieces: &[Vec<usize>],
    expand: &ExpandConfig,
    config: &MlmConfig,
) -> Result<TrainLog> {
    let template = tokenizer.tokenize(&expand.template);
    let items = |split: &DatasetSplit| -> Vec<MlmItem> {
        split
            .records
            .iter()
            .filter_map(|r| {
                let types: Vec<TypeId> = r
                    .gold_types
                    .iter()
                    .copied()
                    .filter(|&t| (1..=expand.l_max).contains(&type_pieces[t].len()))
                    .collect();
                (!types.is_empty()).then(|| MlmItem {
                    pieces: SentencePieces::new(r, tokenizer),
                    types,
                })
            })
            .collect()
    };
    let tr = items(train);
    let dv = items(dev);
    let enc = mlm.config.clone();
    let mut model = mlm.model.clone();
    let log = fit(
        &mut model,
        tr.len(),
        &config.train,
        "mlm-train",
        |m, batch, rng| {
            let mut grads = m.zeros_like();
            let mut total = 0.0;
            let n = batch.len() as f64;
            for &i in batch {
                let (a, rows, targets) = mlm_example(
                    &tr[i],
                    type_pieces,
                    &template,
                    enc.max_positions,
                    config.context_mask_rate,
                    rng,
                )?;
                let mut drop = Dropout {
                    rate: enc.dropout,
                    rng: &mut *rng,
                };
                let mode = AttentionMode::Masked(QuadrantFlags::all());
                let (s, cache) = m.forward(&enc, a.input(), mode, &rows, Some(&mut drop))?;
                let lp = log_softmax_rows(&s);
                let count = rows.len() as f64;
                let mut ds = lp.mapv(f64::exp);
                for (r, &t) in targets.iter().enumerate() {
                    total -= lp[[r, t]] / count;
                    ds[[r, t]] -= 1.0;
                }
                ds /= count * n;
                m.backward(&enc, a.input(), &cache, &ds, &mut grads);
            }
            Ok(BatchResult {
                loss: total / n,
                grads,
                skipped: 0,
            })
        },
        |m| {
            let scorer = EncoderMlm {
                model: m.clone(),
                config: enc.clone(),
            };
            let mut sum = 0.0;
            let mut count = 0usize;
            for item in &dv {
                for &t in &item.types {
                    if let Some(s) = mlm_score_type(
                        &item.pieces,
                        &type_pieces[t],
                        &scorer,
                        &template,
                        expand.l_max,
                        enc.max_positions,
                    )? {
                        sum += s;
                        count += 1;
                    }
                }
            }
            Ok(if count == 0 { 0.0 } else { sum / count as f64 })
        },
    )?;
    mlm.model = model;
    Ok(log)
}

/// Mean log-probability of `type_pieces` filling the prompt's masks, or
/// `None` if the type is empty or longer than `l_max`.
pub fn mlm_score_type(
    pieces: &SentencePieces,
    type_pieces: &[usize],
    scorer: &dyn MaskedScorer,
    template: &[usize],
    l_max: usize,
    max_positions: usize,
) -> Result<Option<f64>> {
    let l = type_pieces.len();
    if l == 0 || l > l_max {
        return Ok(None);
    }
    let (a, masks) = assemble_prompt(pieces, template, l, max_positions)?;
    let lp = scorer.log_probs(&a.tokens, &masks, type_pieces)?;
    Ok(Some((0..l).map(|n| lp[[n, n]]).sum::<f64>() / l as f64))
}

/// Every type of length `1..=l_max` scored and ranked (best first, ties to
/// the lower id). One scorer call per length.
pub fn mlm_rank(
    pieces: &SentencePieces,
    type_pieces: &[Vec<usize>],
    scorer: &dyn MaskedScorer,
    template: &[usize],
    l_max: usize,
    max_positions: usize,
) -> Result<Vec<(TypeId, f64)>> {
    let mut by_len: BTreeMap<usize, Vec<TypeId>> = BTreeMap::new();
    for (t, p) in type_pieces.iter().enumerate() {
        if (1..=l_max).contains(&p.len()) {
            by_len.entry(p.len()).or_default().push(t);
        }
    }
    let mut ranked = Vec::with_capacity(type_pieces.len());
    for (l, types) in by_len {
        let fills: Vec<usize> = types
            .iter()
            .flat_map(|&t| type_pieces[t].iter().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let col: HashMap<usize, usize> = fills.iter().enumerate().map(|(j, &f)| (f, j)).collect();
        let (a, masks) = assemble_prompt(pieces, template, l, max_positions)?;
        let lp = scorer.log_probs(&a.tokens, &masks, &fills)?;
        if lp.dim() != (l, fills.len()) {
            return Err(Error::Protocol(format!(
                "scorer returned {:?} log-probabilities for {l} masks and {} fills",
                lp.dim(),
                fills.len()
            )));
        }
        for t in types {
            let s = type_pieces[t]
                .iter()
                .enumerate()
                .map(|(n, p)| lp[[n, col[p]]])
                .sum::<f64>()
                / l as f64;
            ranked.push((t, s));
        }
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// Replaces the last `replace_tail` entries of `base` with exact matches,
/// then up to `k2` MLM types, then the displaced recall entries in their
/// original order. The result has exactly `base.k()` distinct entries.
pub fn merge_tail(
    base: &CandidateSet,
    config: &ExpandConfig,
    matches: &[TypeId],
    mlm_ranked: &[(TypeId, f64)],
) -> Result<CandidateSet> {
    let k = base.k();
    config.validate(k)?;
    let keep = k - config.replace_tail;
    let mut entries: Vec<CandidateEntry> = base.entries[..keep].to_vec();
    let mut present: HashSet<TypeId> = entries.iter().map(|e| e.type_id).collect();
    for &t in matches {
        if entries.len() == k {
            break;
        }
        if present.insert(t) {
            entries.push(CandidateEntry {
                type_id: t,
                score: 0.0,
                source: CandidateSource::Match,
            });
        }
    }
    let mut added = 0;
    for &(t, s) in mlm_ranked {
        if entries.len() == k || added == config.k2 {
            break;
        }
        if present.insert(t) {
            entries.push(CandidateEntry {
                type_id: t,
                score: s,
                source: CandidateSource::Mlm,
            });
            added += 1;
        }
    }
    for e in &base.entries[keep..] {
        if entries.len() == k {
            break;
        }
        if present.insert(e.type_id) {
            entries.push(*e);
        }
    }
    CandidateSet::new(&base.record_id, entries)
}

/// Expansion with its lookup tables built once.
pub struct Expander<'a> {
    pub config: ExpandConfig,
    surfaces: SurfaceIndex,
    type_pieces: &'a [Vec<usize>],
    template: Vec<usize>,
    tokenizer: &'a SubwordVocabulary,
    max_positions: usize,
}

impl<'a> Expander<'a> {
    pub fn new(
        config: ExpandConfig,
        vocab: &TypeVocabulary,
        tokenizer: &'a SubwordVocabulary,
        type_pieces: &'a [Vec<usize>],
        max_positions: usize,
    ) -> Self {
        Self {
            template: tokenizer.tokenize(&config.template),
            config,
            surfaces: SurfaceIndex::new(vocab),
            type_pieces,
            tokenizer,
            max_positions,
        }
    }

    pub fn expand(
        &self,
        base: &CandidateSet,
        record: &MentionRecord,
        scorer: &dyn MaskedScorer,
    ) -> Result<CandidateSet> {
        self.config.validate(base.k())?;
        if base.record_id != record.id {
            return Err(Error::Validation(format!(
                "candidate set for {} paired with record {}",
                base.record_id, record.id
            )));
        }
        let matches = self.surfaces.matches(record);
        let ranked = if self.config.k2 == 0 {
            Vec::new()
        } else {
            mlm_rank(
                &SentencePieces::new(record, self.tokenizer),
                self.type_pieces,
                scorer,
                &self.template,
                self.config.l_max,
                self.max_positions,
            )?
        };
        merge_tail(base, &self.config, &matches, &ranked)
    }
}

/// `expand_candidates` for a single record.
pub fn expand_candidates(
    base: &CandidateSet,
    record: &MentionRecord,
    vocab: &TypeVocabulary,
    tokenizer: &SubwordVocabulary,
    type_pieces: &[Vec<usize>],
    scorer: &dyn MaskedScorer,
    config: &ExpandConfig,
    max_positions: usize,
) -> Result<CandidateSet> {
    Expander::new(config.clone(), vocab, tokenizer, type_pieces, max_positions)
        .expand(base, record, scorer)
}

/// First line of both sides of the external scorer protocol.
pub const PROTOCOL_HEADER: &str = "refilter-mlm 1";

fn wire(e: std::io::Error) -> Error {
    Error::Protocol(format!("stream failure: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub tokens: Vec<usize>,
    pub masks: Vec<usize>,
    pub fills: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    #[serde(default)]
    pub log_probs: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Answers requests from `input` until end of stream.
///
/// The client's header must match [`PROTOCOL_HEADER`]; the server replies
/// with its own header and then one JSON response per JSON request line.
pub fn serve_scorer<R: BufRead, W: Write>(
    scorer: &dyn MaskedScorer,
    mut input: R,
    mut output: W,
) -> Result<usize> {
    let mut line = String::new();
    input.read_line(&mut line).map_err(wire)?;
    if line.trim_end() != PROTOCOL_HEADER {
        return Err(Error::Protocol(format!(
            "unsupported client header {:?}",
            line.trim_end()
        )));
    }
    writeln!(output, "{PROTOCOL_HEADER}").map_err(wire)?;
    output.flush().map_err(wire)?;
    let mut served = 0;
    loop {
        line.clear();
        if input.read_line(&mut line).map_err(wire)? == 0 {
            return Ok(served);
        }
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<ScoreRequest>(&line) {
            Ok(req) => match scorer.log_probs(&req.tokens, &req.masks, &req.fills) {
                Ok(lp) => ScoreResponse {
                    log_probs: lp.rows().into_iter().map(|r| r.to_vec()).collect(),
                    error: None,
                },
                Err(e) => ScoreResponse {
                    log_probs: Vec::new(),
                    error: Some(e.to_string()),
                },
            },
            Err(e) => ScoreResponse {
                log_probs: Vec::new(),
                error: Some(format!("bad request: {e}")),
            },
        };
        serde_json::to_writer(&mut output, &resp).map_err(|e| Error::Protocol(e.to_string()))?;
        writeln!(output).map_err(wire)?;
        output.flush().map_err(wire)?;
        served += 1;
    }
}

struct Channel<R, W> {
    reader: R,
    writer: W,
}

/// A scorer on the other end of a line-delimited stream pair.
pub struct ExternalScorer<R: BufRead, W: Write> {
    channel: Mutex<Channel<R, W>>,
    child: Option<Child>,
}

impl<R: BufRead, W: Write> ExternalScorer<R, W> {
    /// Exchanges headers over an already open stream pair.
    pub fn connect(mut reader: R, mut writer: W) -> Result<Self> {
        writeln!(writer, "{PROTOCOL_HEADER}").map_err(wire)?;
        writer.flush().map_err(wire)?;
        let mut line = String::new();
        reader.read_line(&mut line).map_err(wire)?;
        if line.trim_end() != PROTOCOL_HEADER {
            return Err(Error::Protocol(format!(
                "unsupported server header {:?}",
                line.trim_end()
            )));
        }
        Ok(Self {
            channel: Mutex::new(Channel { reader, writer }),
            child: None,
        })
    }
}

impl ExternalScorer<BufReader<ChildStdout>, ChildStdin> {
    /// Starts `program args...` and talks to it over its stdin and stdout.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::io(program, e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut s = Self::connect(stdout, stdin)?;
        s.child = Some(child);
        Ok(s)
    }
}

impl<R: BufRead, W: Write> Drop for ExternalScorer<R, W> {
    fn drop(&mut self) {
        if let Some(mut c) = self.child.take() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

impl<R: BufRead, W: Write> MaskedScorer for ExternalScorer<R, W> {
    fn log_probs(&self, tokens: &[usize], masks: &[usize], fills: &[usize]) -> Result<Array2<f64>> {
        let req = ScoreRequest {
            tokens: tokens.to_vec(),
            masks: masks.to_vec(),
            fills: fills.to_vec(),
        };
        let mut ch = self
            .channel
            .lock()
            .map_err(|_| Error::Protocol("scorer channel poisoned".into()))?;
        serde_json::to_writer(&mut ch.writer, &req).map_err(|e| Error::Protocol(e.to_string()))?;
        writeln!(ch.writer).map_err(wire)?;
        ch.writer.flush().map_err(wire)?;
        let mut line = String::new();
        if ch.reader.read_line(&mut line).map_err(wire)? == 0 {
            return Err(Error::Protocol("scorer closed the stream".into()));
        }
        let resp: ScoreResponse = serde_json::from_str(&line)
            .map_err(|e| Error::Protocol(format!("bad response: {e}")))?;
        if let Some(e) = resp.error {
            return Err(Error::Protocol(format!("scorer error: {e}")));
        }
        if resp.log_probs.len() != masks.len()
            || resp.log_probs.iter().any(|r| r.len() != fills.len())
        {
            return Err(Error::Protocol(format!(
                "expected {}x{} log-probabilities",
                masks.len(),
                fills.len()
            )));
        }
        if resp
            .log_probs
            .iter()
            .flatten()
            .any(|&v| v.is_nan() || v > 0.0)
        {
            return Err(Error::Protocol("log-probabilities must be <= 0".into()));
        }
        let flat: Vec<f64> = resp.log_probs.into_iter().flatten().collect();
        Ok(Array2::from_shape_vec((masks.len(), fills.len()), flat).expect("checked shape"))
    }
}
