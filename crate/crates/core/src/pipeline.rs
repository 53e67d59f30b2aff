//! Stage orchestration: configuration, artifact layout and manifests.
//!
//! Every stage reads and writes files below `work_dir` and records a
//! manifest in `manifests/<stage>.json` holding the sha256 of each input and
//! output, the resolved configuration and the seed. A stage that consumes an
//! artifact checks it against the hash in its producer's manifest first.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{bench_inference, BenchConfig, BenchModel, BenchReport};
use crate::data::{
    check_disjoint, load_candidates, load_dataset, load_predictions, load_type_vocabulary,
    save_candidates, save_dataset, save_predictions, save_type_vocabulary, CandidateSet,
    CandidateSource, DatasetSplit, Predictions, SplitName, TypeVocabulary,
};
use crate::diagnostics::{run_equivalence_suite, run_gradcheck_suite};
use crate::embeddings::type_pieces;
use crate::encoder::checkpoint::{load_checkpoint, save_checkpoint, Precision};
use crate::encoder::ops::sigmoid;
use crate::encoder::{EncoderConfig, Parameters, QuadrantFlags};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, predict_all, recall_at_k, tune_threshold_with, Averaging, EvalReport, ScoredRecord,
    TypeSets,
};
use crate::expand::{
    train_mlm, EncoderMlm, ExpandConfig, Expander, ExternalScorer, MaskedScorer, MlmConfig,
    UnigramScorer,
};
use crate::filter::{filter_items, Filter, FilterConfig, FilterItem, FilterVariant};
use crate::input::SentencePieces;
use crate::model::Model;
use crate::recall::{golds_of, init_mlc, mlc_scores, recall_topk, train_mlc, RecallConfig};
use crate::rng::seeded;
use crate::synthetic::{generate_synthetic_corpus, SyntheticSpec};
use crate::tokenizer::{train_tokenizer, SubwordVocabulary};
use crate::train::{TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenData,
    TrainRecall,
    Recall,
    Expand,
    TrainFilter,
    Predict,
    Eval,
    Bench,
    Gradcheck,
    Equivalence,
    Ablate,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::GenData,
        Stage::TrainRecall,
        Stage::Recall,
        Stage::Expand,
        Stage::TrainFilter,
        Stage::Predict,
        Stage::Eval,
        Stage::Bench,
        Stage::Gradcheck,
        Stage::Equivalence,
        Stage::Ablate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainRecall => "train-recall",
            Stage::Recall => "recall",
            Stage::Expand => "expand",
            Stage::TrainFilter => "train-filter",
            Stage::Predict => "predict",
            Stage::Eval => "eval",
            Stage::Bench => "bench",
            Stage::Gradcheck => "gradcheck",
            Stage::Equivalence => "equivalence",
            Stage::Ablate => "ablate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SyntheticSpec,
    /// Used when `source = "files"`: one surface per line.
    pub types: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub tokenizer_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            synthetic: SyntheticSpec::default(),
            types: None,
            train: None,
            dev: None,
            test: None,
            tokenizer_size: 1500,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    /// A masked LM trained by the `expand` stage.
    #[default]
    Encoder,
    /// Piece frequencies of the training text; ignores context.
    Unigram,
    /// A child process speaking the line protocol in [`crate::expand`].
    External,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    /// Program and arguments for `kind = "external"`.
    pub command: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchStageConfig {
    pub k_values: Vec<usize>,
    pub variants: Vec<FilterVariant>,
    pub block_size: usize,
    pub records: usize,
    /// Sentence part length including special tokens.
    pub sentence_len: usize,
    pub repetitions: usize,
    pub warmup: usize,
}

impl Default for BenchStageConfig {
    fn default() -> Self {
        Self {
            k_values: vec![32, 128],
            variants: vec![FilterVariant::McceS, FilterVariant::VanillaCe],
            block_size: 1,
            records: 32,
            sentence_len: 10,
            repetitions: 10,
            warmup: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub averaging: Averaging,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivalenceConfig {
    pub cases: usize,
    pub tolerance: f64,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        Self {
            cases: 240,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub samples: usize,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            samples: 240,
            tolerance: 1e-4,
        }
    }
}

/// Values swept by the ablation matrix; an empty list leaves that setting
/// at its configured value.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationAxes {
    /// Quadrant patterns such as `full`, `no-c2c`, `no-c2s`.
    pub flags: Vec<String>,
    pub expand: Vec<bool>,
    pub variant: Vec<FilterVariant>,
    pub k: Vec<usize>,
    pub block: Vec<usize>,
    /// Each cell is trained once per seed and scored by the mean; empty
    /// means the run seed alone. Not an axis.
    pub seeds: Vec<u64>,
}

impl AblationAxes {
    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
            && self.expand.is_empty()
            && self.variant.is_empty()
            && self.k.is_empty()
            && self.block.is_empty()
    }
}

/// Everything a run needs, loaded from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds every stochastic component, overriding per-stage seeds.
    pub seed: u64,
    /// Root of all artifacts. Not part of the manifest.
    pub work_dir: PathBuf,
    /// Train and predict the filter on expanded rather than recalled candidates.
    pub expand_enabled: bool,
    /// Predict with every type as a candidate, skipping recall and expansion.
    pub full_vocab: bool,
    pub data: DataConfig,
    pub recall_encoder: EncoderConfig,
    pub recall: RecallConfig,
    pub expand: ExpandConfig,
    pub scorer: ScorerConfig,
    pub mlm_encoder: EncoderConfig,
    pub mlm: MlmConfig,
    pub filter_encoder: EncoderConfig,
    pub filter: FilterConfig,
    pub eval: EvalConfig,
    pub bench: BenchStageConfig,
    pub equivalence: EquivalenceConfig,
    pub gradcheck: GradcheckConfig,
    pub ablation: AblationAxes,
}

fn small_encoder(dropout: f64) -> EncoderConfig {
    EncoderConfig {
        dim: 32,
        heads: 2,
        layers: 1,
        ffn_dim: 64,
        max_positions: 128,
        dropout,
        ..Default::default()
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            work_dir: PathBuf::from("run"),
            expand_enabled: true,
            full_vocab: false,
            data: DataConfig::default(),
            recall_encoder: small_encoder(0.3),
            recall: RecallConfig::default(),
            expand: ExpandConfig::default(),
            scorer: ScorerConfig::default(),
            mlm_encoder: small_encoder(0.1),
            mlm: MlmConfig::default(),
            filter_encoder: small_encoder(0.1),
            filter: FilterConfig {
                train: TrainConfig {
                    epochs: 10,
                    batch_size: 16,
                    adam: crate::optim::AdamConfig {
                        lr: 3e-3,
                        ..Default::default()
                    },
                    ..Default::default()
                },
                ..Default::default()
            },
            eval: EvalConfig::default(),
            bench: BenchStageConfig::default(),
            equivalence: EquivalenceConfig::default(),
            gradcheck: GradcheckConfig::default(),
            ablation: AblationAxes::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// The configuration with the global seed copied into every training
    /// schedule.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.recall.train.seed = c.seed;
        c.mlm.train.seed = c.seed;
        c.filter.train.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.recall_encoder.validate()?;
        self.mlm_encoder.validate()?;
        self.filter_encoder.validate()?;
        self.recall.train.validate()?;
        self.mlm.train.validate()?;
        self.filter.validate()?;
        self.expand.validate(self.recall.k)?;
        if self.filter.k > self.recall.k {
            return Err(Error::Config(format!(
                "filter k = {} exceeds recall k = {}",
                self.filter.k, self.recall.k
            )));
        }
        if self.data.source == DataSource::Files
            && [
                &self.data.types,
                &self.data.train,
                &self.data.dev,
                &self.data.test,
            ]
            .iter()
            .any(|p| p.is_none())
        {
            return Err(Error::Config(
                "data.source = \"files\" needs types, train, dev and test paths".into(),
            ));
        }
        if self.scorer.kind == ScorerKind::External && self.scorer.command.is_empty() {
            return Err(Error::Config(
                "scorer.kind = \"external\" needs scorer.command".into(),
            ));
        }
        if self.bench.sentence_len < 5 {
            return Err(Error::Config(
                "bench.sentence_len must be at least 5".into(),
            ));
        }
        for f in &self.ablation.flags {
            f.parse::<QuadrantFlags>()?;
        }
        Ok(())
    }

    fn manifest_value(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(m) = v.as_object_mut() {
            m.remove("work_dir");
        }
        Ok(v)
    }
}

/// Paths of every artifact, relative to `work_dir`.
pub mod artifacts {
    use crate::data::SplitName;

    pub const TYPES: &str = "data/types.txt";
    pub const TOKENIZER: &str = "data/tokenizer.txt";
    pub const RECALL_MODEL: &str = "models/recall.ckpt";
    pub const MLM_MODEL: &str = "models/mlm.ckpt";
    pub const FILTER_MODEL: &str = "models/filter.ckpt";
    pub const FILTER_STATE: &str = "models/filter.json";
    pub const RECALL_LOG: &str = "reports/train-recall.json";
    pub const MLM_LOG: &str = "reports/train-mlm.json";
    pub const RECALL_REPORT: &str = "reports/recall.json";
    pub const EXPAND_REPORT: &str = "reports/expand.json";
    pub const EVAL_REPORT: &str = "reports/eval.json";
    pub const EVAL_TABLE: &str = "reports/eval.txt";
    pub const BENCH_REPORT: &str = "reports/bench.json";
    pub const BENCH_PLOT: &str = "reports/bench.tsv";
    pub const GRADCHECK_REPORT: &str = "reports/gradcheck.json";
    pub const EQUIVALENCE_REPORT: &str = "reports/equivalence.json";
    pub const ABLATION_REPORT: &str = "reports/ablation.json";
    pub const ABLATION_TABLE: &str = "reports/ablation.txt";

    pub const SPLITS: [SplitName; 3] = [SplitName::Train, SplitName::Dev, SplitName::Test];

    pub fn dataset(split: SplitName) -> String {
        format!("data/{split}.jsonl")
    }

    pub fn recalled(split: SplitName) -> String {
        format!("candidates/{split}.recall.tsv")
    }

    pub fn expanded(split: SplitName) -> String {
        format!("candidates/{split}.expanded.tsv")
    }

    pub fn predictions(split: SplitName) -> String {
        format!("outputs/{split}.pred.tsv")
    }

    pub fn manifest(stage: &str) -> String {
        format!("manifests/{stage}.json")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Record of one stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    pub deterministic: bool,
    pub config: serde_json::Value,
    /// Relative path (or absolute, for files outside the work dir) to sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

pub fn load_manifest(work_dir: &Path, stage: Stage) -> Result<Option<Manifest>> {
    let path = work_dir.join(artifacts::manifest(stage.name()));
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| Error::Validation(e.to_string()))?;
    v.push(b'\n');
    Ok(v)
}

fn from_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

/// Bookkeeping for a stage in progress.
struct Run<'a> {
    ctx: &'a StageContext,
    stage: Stage,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    producers: BTreeMap<Stage, Manifest>,
    start: Instant,
}

impl<'a> Run<'a> {
    fn new(ctx: &'a StageContext, stage: Stage) -> Self {
        Self {
            ctx,
            stage,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            producers: BTreeMap::new(),
            start: Instant::now(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.ctx.work_dir().join(rel)
    }

    /// Checks `rel` against its producer's manifest and records its hash.
    fn input(&mut self, rel: &str, producer: Stage) -> Result<PathBuf> {
        let path = self.path(rel);
        let missing = || Error::MissingArtifact {
            path: path.clone(),
            stage: producer.name().to_string(),
        };
        if !path.exists() {
            return Err(missing());
        }
        if !self.producers.contains_key(&producer) {
            let m = load_manifest(self.ctx.work_dir(), producer)?.ok_or_else(missing)?;
            self.producers.insert(producer, m);
        }
        let recorded = self.producers[&producer].outputs.get(rel).cloned();
        let actual = hash_file(&path)?;
        if recorded.as_deref() != Some(actual.as_str()) {
            return Err(Error::StaleArtifact {
                path,
                stage: producer.name().to_string(),
            });
        }
        self.inputs.insert(rel.to_string(), actual);
        Ok(path)
    }

    /// Records a file from outside the work dir.
    fn external_input(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::Config(format!(
                "input file {} does not exist",
                path.display()
            )));
        }
        self.inputs
            .insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    fn prepare(&self, rel: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(path)
    }

    fn output_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.prepare(rel)?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.outputs.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn output_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        self.output_bytes(rel, &to_json(value)?)
    }

    fn output_with(&mut self, rel: &str, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let path = self.prepare(rel)?;
        write(&path)?;
        self.outputs.insert(rel.to_string(), hash_file(&path)?);
        Ok(())
    }

    fn finish(self) -> Result<Manifest> {
        let m = Manifest {
            stage: self.stage.name().to_string(),
            seed: self.ctx.config.seed,
            deterministic: self.ctx.deterministic,
            config: self.ctx.config.manifest_value()?,
            inputs: self.inputs,
            outputs: self.outputs,
            seconds: (!self.ctx.deterministic).then(|| self.start.elapsed().as_secs_f64()),
        };
        let path = self
            .ctx
            .work_dir()
            .join(artifacts::manifest(self.stage.name()));
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, to_json(&m)?).map_err(|e| Error::io(&path, e))?;
        Ok(m)
    }
}

/// A validated configuration plus run options.
#[derive(Debug, Clone)]
pub struct StageContext {
    pub config: PipelineConfig,
    /// Leave wall-clock measurements out of every artifact.
    pub deterministic: bool,
}

impl StageContext {
    pub fn new(config: PipelineConfig, deterministic: bool) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.resolved(),
            deterministic,
        })
    }

    pub fn work_dir(&self) -> &Path {
        &self.config.work_dir
    }
}

/// What a stage produced, for the command-line summary.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub manifest: Manifest,
    pub summary: String,
}

pub fn run_stage(stage: Stage, ctx: &StageContext) -> Result<StageOutcome> {
    let mut run = Run::new(ctx, stage);
    let summary = match stage {
        Stage::GenData => gen_data(&mut run)?,
        Stage::TrainRecall => train_recall(&mut run)?,
        Stage::Recall => recall_stage(&mut run)?,
        Stage::Expand => expand_stage(&mut run)?,
        Stage::TrainFilter => train_filter(&mut run)?,
        Stage::Predict => predict(&mut run)?,
        Stage::Eval => eval_stage(&mut run)?,
        Stage::Bench => bench_stage(&mut run)?,
        Stage::Gradcheck => gradcheck_stage(&mut run)?,
        Stage::Equivalence => equivalence_stage(&mut run)?,
        Stage::Ablate => ablate_stage(&mut run)?,
    };
    Ok(StageOutcome {
        manifest: run.finish()?,
        summary,
    })
}

/// Splits, types and tokenizer as written by `gen-data`.
pub struct Corpus {
    pub vocab: TypeVocabulary,
    pub tokenizer: SubwordVocabulary,
    pub train: DatasetSplit,
    pub dev: DatasetSplit,
    pub test: DatasetSplit,
}

impl Corpus {
    pub fn split(&self, name: SplitName) -> &DatasetSplit {
        match name {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }
}

fn record_text(r: &crate::data::MentionRecord) -> String {
    format!("{} {} {}", r.left_context, r.mention, r.right_context)
}

fn gen_data(run: &mut Run<'_>) -> Result<String> {
    let cfg = &run.ctx.config;
    let (vocab, train, dev, test) = match cfg.data.source {
        DataSource::Synthetic => {
            let c = generate_synthetic_corpus(&cfg.data.synthetic, cfg.seed)?;
            (c.vocab, c.train, c.dev, c.test)
        }
        DataSource::Files => {
            let d = &cfg.data;
            let paths =
                [&d.types, &d.train, &d.dev, &d.test].map(|p| p.clone().unwrap_or_default());
            for p in &paths {
                run.external_input(p)?;
            }
            let vocab = load_type_vocabulary(&paths[0])?;
            let train = load_dataset(&paths[1], SplitName::Train, &vocab)?;
            let dev = load_dataset(&paths[2], SplitName::Dev, &vocab)?;
            let test = load_dataset(&paths[3], SplitName::Test, &vocab)?;
            (vocab, train, dev, test)
        }
    };
    check_disjoint(&[&train, &dev, &test])?;
    let mut texts: Vec<String> = train.records.iter().map(record_text).collect();
    texts.extend(vocab.surfaces().iter().cloned());
    let tokenizer = train_tokenizer(&texts, cfg.data.tokenizer_size)?;
    run.output_with(artifacts::TYPES, |p| save_type_vocabulary(p, &vocab))?;
    for split in [&train, &dev, &test] {
        run.output_with(&artifacts::dataset(split.name), |p| {
            save_dataset(p, split, &vocab)
        })?;
    }
    run.output_with(artifacts::TOKENIZER, |p| tokenizer.save(p))?;
    Ok(format!(
        "{} types, {}/{}/{} records, {} sub-word pieces",
        vocab.len(),
        train.len(),
        dev.len(),
        test.len(),
        tokenizer.len()
    ))
}

fn load_corpus(run: &mut Run<'_>) -> Result<Corpus> {
    let vocab = load_type_vocabulary(&run.input(artifacts::TYPES, Stage::GenData)?)?;
    let tokenizer = SubwordVocabulary::load(&run.input(artifacts::TOKENIZER, Stage::GenData)?)?;
    Ok(Corpus {
        train: load_split(run, SplitName::Train, &vocab)?,
        dev: load_split(run, SplitName::Dev, &vocab)?,
        test: load_split(run, SplitName::Test, &vocab)?,
        vocab,
        tokenizer,
    })
}

fn load_split(run: &mut Run<'_>, split: SplitName, vocab: &TypeVocabulary) -> Result<DatasetSplit> {
    let path = run.input(&artifacts::dataset(split), Stage::GenData)?;
    load_dataset(&path, split, vocab)
}

fn load_weights<P: Parameters>(model: &mut P, path: &Path) -> Result<()> {
    let (set, _) = load_checkpoint(path)?;
    model.load_parameter_set(&set)
}

fn save_weights<P: Parameters>(run: &mut Run<'_>, rel: &str, model: &P) -> Result<()> {
    run.output_with(rel, |p| {
        save_checkpoint(p, &model.to_parameter_set(), Precision::F64)
    })
}

fn train_recall(run: &mut Run<'_>) -> Result<String> {
    let corpus = load_corpus(run)?;
    let cfg = &run.ctx.config;
    let mut model = init_mlc(
        &cfg.recall_encoder,
        corpus.tokenizer.len(),
        corpus.vocab.len(),
        cfg.seed,
    )?;
    let log = train_mlc(
        &mut model,
        &corpus.train,
        &corpus.dev,
        &corpus.tokenizer,
        &cfg.recall_encoder,
        &cfg.recall,
    )?;
    check_finite(&model, "recall")?;
    save_weights(run, artifacts::RECALL_MODEL, &model)?;
    run.output_json(artifacts::RECALL_LOG, &log)?;
    Ok(format!(
        "dev recall@{} = {:.4} at epoch {}",
        cfg.recall.selection_k.unwrap_or(cfg.recall.k),
        log.best_metric,
        log.best_epoch
    ))
}

fn check_finite<P: Parameters>(model: &P, what: &str) -> Result<()> {
    if model.all_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "{what} weights became non-finite during training"
        )))
    }
}

fn load_recall_model(run: &mut Run<'_>, corpus: &Corpus) -> Result<Model> {
    let cfg = &run.ctx.config;
    let mut model = init_mlc(
        &cfg.recall_encoder,
        corpus.tokenizer.len(),
        corpus.vocab.len(),
        cfg.seed,
    )?;
    let path = run.input(artifacts::RECALL_MODEL, Stage::TrainRecall)?;
    load_weights(&mut model, &path)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub k: usize,
    pub recall_at_k: BTreeMap<String, f64>,
}

fn recall_stage(run: &mut Run<'_>) -> Result<String> {
    let corpus = load_corpus(run)?;
    let model = load_recall_model(run, &corpus)?;
    let cfg = &run.ctx.config;
    let k = cfg.recall.k;
    let mut report = RecallReport {
        k,
        recall_at_k: BTreeMap::new(),
    };
    for s in artifacts::SPLITS {
        let split = corpus.split(s);
        let sets = split
            .records
            .iter()
            .map(|r| recall_topk(r, &corpus.tokenizer, &model, &cfg.recall_encoder, k))
            .collect::<Result<Vec<_>>>()?;
        report
            .recall_at_k
            .insert(s.to_string(), recall_at_k(&sets, &golds_of(split), k)?);
        run.output_with(&artifacts::recalled(s), |p| {
            save_candidates(p, &sets, &corpus.vocab)
        })?;
    }
    run.output_json(artifacts::RECALL_REPORT, &report)?;
    Ok(format!(
        "recall@{k}: {}",
        format_split_map(&report.recall_at_k)
    ))
}

fn format_split_map(m: &BTreeMap<String, f64>) -> String {
    artifacts::SPLITS
        .iter()
        .filter_map(|s| m.get(&s.to_string()).map(|v| format!("{s} {v:.4}")))
        .collect::<Vec<_>>()
        .join(", ")
}

fn load_candidate_sets(
    run: &mut Run<'_>,
    corpus: &Corpus,
    split: SplitName,
    expanded: bool,
) -> Result<Vec<CandidateSet>> {
    let (rel, producer) = if expanded {
        (artifacts::expanded(split), Stage::Expand)
    } else {
        (artifacts::recalled(split), Stage::Recall)
    };
    let path = run.input(&rel, producer)?;
    load_candidates(&path, &corpus.vocab)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandSplitReport {
    pub recall_before: f64,
    pub recall_after: f64,
    pub match_entries: usize,
    pub mlm_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandReport {
    pub k: usize,
    pub scorer: ScorerKind,
    pub splits: BTreeMap<String, ExpandSplitReport>,
}

fn build_scorer(
    run: &mut Run<'_>,
    corpus: &Corpus,
    pieces: &[Vec<usize>],
) -> Result<Box<dyn MaskedScorer>> {
    let cfg = &run.ctx.config;
    match cfg.scorer.kind {
        ScorerKind::Encoder => {
            let mut mlm =
                EncoderMlm::init(cfg.mlm_encoder.clone(), corpus.tokenizer.len(), cfg.seed)?;
            let log = train_mlm(
                &mut mlm,
                &corpus.train,
                &corpus.dev,
                &corpus.tokenizer,
                pieces,
                &cfg.expand,
                &cfg.mlm,
            )?;
            check_finite(&mlm.model, "masked LM")?;
            save_weights(run, artifacts::MLM_MODEL, &mlm.model)?;
            run.output_json(artifacts::MLM_LOG, &log)?;
            Ok(Box::new(mlm))
        }
        ScorerKind::Unigram => {
            let texts: Vec<String> = corpus.train.records.iter().map(record_text).collect();
            Ok(Box::new(UnigramScorer::fit(&texts, &corpus.tokenizer)))
        }
        ScorerKind::External => {
            let (program, args) = cfg
                .scorer
                .command
                .split_first()
                .ok_or_else(|| Error::Config("empty scorer command".into()))?;
            Ok(Box::new(ExternalScorer::spawn(program, args)?))
        }
    }
}

fn expand_stage(run: &mut Run<'_>) -> Result<String> {
    let corpus = load_corpus(run)?;
    let mut base = BTreeMap::new();
    for s in artifacts::SPLITS {
        base.insert(s, load_candidate_sets(run, &corpus, s, false)?);
    }
    let pieces = type_pieces(&corpus.vocab, &corpus.tokenizer)?;
    let scorer = build_scorer(run, &corpus, &pieces)?;
    let cfg = &run.ctx.config;
    let expander = Expander::new(
        cfg.expand.clone(),
        &corpus.vocab,
        &corpus.tokenizer,
        &pieces,
        cfg.mlm_encoder.max_positions,
    );
    let mut report = ExpandReport {
        k: cfg.recall.k,
        scorer: cfg.scorer.kind,
        splits: BTreeMap::new(),
    };
    for s in artifacts::SPLITS {
        let split = corpus.split(s);
        let sets = base[&s]
            .iter()
            .zip(&split.records)
            .map(|(b, r)| expander.expand(b, r, scorer.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let golds = golds_of(split);
        let k = report.k;
        report.splits.insert(
            s.to_string(),
            ExpandSplitReport {
                recall_before: recall_at_k(&base[&s], &golds, k)?,
                recall_after: recall_at_k(&sets, &golds, k)?,
                match_entries: sets
                    .iter()
                    .map(|c| c.count_source(CandidateSource::Match))
                    .sum(),
                mlm_entries: sets
                    .iter()
                    .map(|c| c.count_source(CandidateSource::Mlm))
                    .sum(),
            },
        );
        run.output_with(&artifacts::expanded(s), |p| {
            save_candidates(p, &sets, &corpus.vocab)
        })?;
    }
    run.output_json(artifacts::EXPAND_REPORT, &report)?;
    let dev = &report.splits[&SplitName::Dev.to_string()];
    Ok(format!(
        "dev recall@{}: {:.4} -> {:.4}",
        report.k, dev.recall_before, dev.recall_after
    ))
}

/// The top `k` entries of each set.
pub fn truncate_candidates(sets: &[CandidateSet], k: usize) -> Result<Vec<CandidateSet>> {
    sets.iter()
        .map(|c| {
            if c.k() < k {
                return Err(Error::Config(format!(
                    "candidate set for {} has {} entries, filter k = {k}",
                    c.record_id,
                    c.k()
                )));
            }
            CandidateSet::new(&c.record_id, c.entries[..k].to_vec())
        })
        .collect()
}

fn filter_split_items(
    run: &mut Run<'_>,
    corpus: &Corpus,
    split: SplitName,
    expanded: bool,
    k: usize,
) -> Result<Vec<FilterItem>> {
    let sets = load_candidate_sets(run, corpus, split, expanded)?;
    filter_items(
        corpus.split(split),
        &truncate_candidates(&sets, k)?,
        &corpus.tokenizer,
    )
}

/// Tuned filter settings saved next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub config: FilterConfig,
    pub dev_f1: f64,
    pub log: TrainLog,
}

fn train_filter(run: &mut Run<'_>) -> Result<String> {
    let corpus = load_corpus(run)?;
    let cfg = run.ctx.config.clone();
    let k = cfg.filter.k;
    let train = filter_split_items(run, &corpus, SplitName::Train, cfg.expand_enabled, k)?;
    let dev = filter_split_items(run, &corpus, SplitName::Dev, cfg.expand_enabled, k)?;
    let pieces = type_pieces(&corpus.vocab, &corpus.tokenizer)?;
    let (mut filter, mut model) = Filter::init(
        cfg.filter.clone(),
        cfg.filter_encoder.clone(),
        corpus.tokenizer.len(),
        pieces,
        cfg.seed,
    )?;
    let log = filter.train(&mut model, &train, &dev)?;
    check_finite(&model, "filter")?;
    let state = FilterState {
        config: filter.config.clone(),
        dev_f1: log.best_metric,
        log,
    };
    save_weights(run, artifacts::FILTER_MODEL, &model)?;
    run.output_json(artifacts::FILTER_STATE, &state)?;
    Ok(format!(
        "{} dev macro-F1 {:.4} at threshold {:.4}",
        state.config.variant, state.dev_f1, state.config.threshold
    ))
}

fn load_filter(run: &mut Run<'_>, corpus: &Corpus) -> Result<(Filter, Model)> {
    let state: FilterState = from_json(&run.input(artifacts::FILTER_STATE, Stage::TrainFilter)?)?;
    let cfg = &run.ctx.config;
    let pieces = type_pieces(&corpus.vocab, &corpus.tokenizer)?;
    let (filter, mut model) = Filter::init(
        state.config,
        cfg.filter_encoder.clone(),
        corpus.tokenizer.len(),
        pieces,
        cfg.seed,
    )?;
    let path = run.input(artifacts::FILTER_MODEL, Stage::TrainFilter)?;
    load_weights(&mut model, &path)?;
    Ok((filter, model))
}

fn predict(run: &mut Run<'_>) -> Result<String> {
    let corpus = load_corpus(run)?;
    let (filter, model) = load_filter(run, &corpus)?;
    let cfg = run.ctx.config.clone();
    let mut counts = Vec::new();
    for s in [SplitName::Dev, SplitName::Test] {
        let preds: Predictions = if cfg.full_vocab {
            corpus
                .split(s)
                .records
                .iter()
                .map(|r| {
                    Ok((
                        r.id.clone(),
                        filter.full_vocab_predict(&model, r, &corpus.tokenizer)?,
                    ))
                })
                .collect::<Result<_>>()?
        } else {
            filter_split_items(run, &corpus, s, cfg.expand_enabled, filter.config.k)?
                .iter()
                .map(|it| Ok((it.id.clone(), filter.predict_types(&model, it)?)))
                .collect::<Result<_>>()?
        };
        counts.push(format!("{s} {}", preds.len()));
        run.output_with(&artifacts::predictions(s), |p| {
            save_predictions(p, &preds, &corpus.vocab)
        })?;
    }
    Ok(format!("predicted {} records", counts.join(", ")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterEval {
    pub variant: FilterVariant,
    pub threshold: f64,
    pub dev: EvalReport,
    pub test: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEval {
    pub threshold: f64,
    pub dev_f1: f64,
    pub test: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecall {
    pub k: usize,
    pub dev_recall: f64,
    pub test_recall: f64,
    pub dev_expanded: Option<f64>,
    pub test_expanded: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub filter: FilterEval,
    /// The recall classifier used directly as a predictor.
    pub mlc: BaselineEval,
    pub candidates: CandidateRecall,
}

impl EvalSummary {
    pub fn table(&self) -> String {
        let mut s = format!("{:<24} {:>9} {:>9} {:>9}\n", "system", "P", "R", "F1");
        let mut row = |name: &str, r: &EvalReport| {
            let _ = writeln!(
                s,
                "{:<24} {:>9.4} {:>9.4} {:>9.4}",
                name, r.precision, r.recall, r.f1
            );
        };
        row(&format!("{} (dev)", self.filter.variant), &self.filter.dev);
        row(
            &format!("{} (test)", self.filter.variant),
            &self.filter.test,
        );
        row("mlc (test)", &self.mlc.test);
        let c = &self.candidates;
        let _ = writeln!(
            s,
            "\nrecall@{} dev {:.4} test {:.4}",
            c.k, c.dev_recall, c.test_recall
        );
        if let (Some(d), Some(t)) = (c.dev_expanded, c.test_expanded) {
            let _ = writeln!(s, "expanded recall@{} dev {:.4} test {:.4}", c.k, d, t);
        }
        let _ = writeln!(
            s,
            "thresholds: filter {:.4}, mlc {:.4}",
            self.filter.threshold, self.mlc.threshold
        );
        s
    }
}

fn mlc_scored(
    split: &DatasetSplit,
    corpus: &Corpus,
    model: &Model,
    enc: &EncoderConfig,
) -> Result<Vec<ScoredRecord>> {
    Ok(mlc_scores(split, &corpus.tokenizer, model, enc)?
        .into_iter()
        .zip(&split.records)
        .map(|(sc, r)| ScoredRecord {
            id: r.id.clone(),
            probs: sc
                .iter()
                .enumerate()
                .map(|(t, &x)| (t, sigmoid(x)))
                .collect(),
        })
        .collect())
}

fn eval_stage(run: &mut Run<'_>) -> Result<String> {
    let corpus = load_corpus(run)?;
    let cfg = run.ctx.config.clone();
    let state: FilterState = from_json(&run.input(artifacts::FILTER_STATE, Stage::TrainFilter)?)?;
    let averaging = cfg.eval.averaging;
    let mut reports = Vec::new();
    for s in [SplitName::Dev, SplitName::Test] {
        let preds = load_predictions(
            &run.input(&artifacts::predictions(s), Stage::Predict)?,
            &corpus.vocab,
        )?;
        let preds: TypeSets = preds.into_iter().collect();
        reports.push(evaluate(&preds, &golds_of(corpus.split(s)), averaging)?);
    }
    let test = reports.pop().expect("two splits");
    let dev = reports.pop().expect("two splits");

    let mlc = load_recall_model(run, &corpus)?;
    let dev_scored = mlc_scored(&corpus.dev, &corpus, &mlc, &cfg.recall_encoder)?;
    let choice = tune_threshold_with(
        &dev_scored,
        &golds_of(&corpus.dev),
        state.config.force_top1,
        averaging,
    )?;
    let test_scored = mlc_scored(&corpus.test, &corpus, &mlc, &cfg.recall_encoder)?;
    let mlc_test = evaluate(
        &predict_all(&test_scored, choice.tau, state.config.force_top1),
        &golds_of(&corpus.test),
        averaging,
    )?;

    let k = cfg.recall.k;
    let mut recalls = BTreeMap::new();
    for s in [SplitName::Dev, SplitName::Test] {
        let golds = golds_of(corpus.split(s));
        let base = recall_at_k(&load_candidate_sets(run, &corpus, s, false)?, &golds, k)?;
        let expanded = if cfg.expand_enabled {
            Some(recall_at_k(
                &load_candidate_sets(run, &corpus, s, true)?,
                &golds,
                k,
            )?)
        } else {
            None
        };
        recalls.insert(s, (base, expanded));
    }
    let summary = EvalSummary {
        filter: FilterEval {
            variant: state.config.variant,
            threshold: state.config.threshold,
            dev,
            test,
        },
        mlc: BaselineEval {
            threshold: choice.tau,
            dev_f1: choice.f1,
            test: mlc_test,
        },
        candidates: CandidateRecall {
            k,
            dev_recall: recalls[&SplitName::Dev].0,
            test_recall: recalls[&SplitName::Test].0,
            dev_expanded: recalls[&SplitName::Dev].1,
            test_expanded: recalls[&SplitName::Test].1,
        },
    };
    let table = summary.table();
    run.output_json(artifacts::EVAL_REPORT, &summary)?;
    run.output_bytes(artifacts::EVAL_TABLE, table.as_bytes())?;
    Ok(table)
}

/// Synthetic items for timing: `sentence_len` pieces in the sentence part
/// and the first `k` types as candidates.
pub fn bench_items(
    records: usize,
    sentence_len: usize,
    k: usize,
    vocab_size: usize,
    seed: u64,
) -> Vec<FilterItem> {
    use rand::Rng as _;
    let mut rng = seeded(seed, "bench-items");
    let context = sentence_len.saturating_sub(5);
    let mut draw =
        |n: usize| -> Vec<usize> { (0..n).map(|_| rng.gen_range(5..vocab_size)).collect() };
    (0..records)
        .map(|i| {
            let left = draw(context / 2);
            let right = draw(context - context / 2);
            FilterItem {
                id: format!("bench-{i}"),
                pieces: SentencePieces {
                    left,
                    mention: draw(1),
                    right,
                },
                candidates: (0..k).collect(),
                gold: [0].into(),
            }
        })
        .collect()
}

fn bench_stage(run: &mut Run<'_>) -> Result<String> {
    let cfg = &run.ctx.config;
    let b = &cfg.bench;
    let vocab_size = 256;
    let max_k = b.k_values.iter().copied().max().unwrap_or(0);
    let type_pieces: Vec<Vec<usize>> = (0..max_k).map(|t| vec![5 + t % (vocab_size - 5)]).collect();
    let mut owned = Vec::new();
    for &k in &b.k_values {
        for &v in &b.variants {
            let fc = FilterConfig {
                variant: v,
                k,
                block_size: b.block_size,
                ..cfg.filter.clone()
            };
            let width = if v == FilterVariant::McceB {
                b.block_size
            } else {
                1
            };
            let enc = EncoderConfig {
                max_positions: cfg
                    .filter_encoder
                    .max_positions
                    .max(b.sentence_len + k * width),
                ..cfg.filter_encoder.clone()
            };
            let (f, m) = Filter::init(fc, enc, vocab_size, type_pieces[..k].to_vec(), cfg.seed)?;
            owned.push((format!("{v}/K={k}"), k, f, m));
        }
    }
    let bcfg = BenchConfig {
        repetitions: b.repetitions,
        warmup: b.warmup,
    };
    let mut report = BenchReport {
        repetitions: b.repetitions,
        rows: Vec::new(),
    };
    for &k in &b.k_values {
        let items = bench_items(b.records, b.sentence_len, k, vocab_size, cfg.seed);
        let models: Vec<BenchModel<'_>> = owned
            .iter()
            .filter(|o| o.1 == k)
            .map(|(name, _, f, m)| BenchModel {
                name: name.clone(),
                filter: f,
                model: m,
            })
            .collect();
        report
            .rows
            .extend(bench_inference(&models, &items, &bcfg)?.rows);
    }
    let table = report.table();
    if run.ctx.deterministic {
        for r in &mut report.rows {
            r.sweep_seconds.clear();
            r.sents_per_sec = 0.0;
        }
    }
    run.output_json(artifacts::BENCH_REPORT, &report)?;
    run.output_bytes(artifacts::BENCH_PLOT, report.plot_data().as_bytes())?;
    Ok(table)
}

fn gradcheck_stage(run: &mut Run<'_>) -> Result<String> {
    let cfg = &run.ctx.config;
    let report = run_gradcheck_suite(cfg.gradcheck.samples, cfg.seed, cfg.gradcheck.tolerance)?;
    run.output_json(artifacts::GRADCHECK_REPORT, &report)?;
    let lines: Vec<String> = report
        .heads
        .iter()
        .map(|h| {
            format!(
                "{}: {} coordinates, max relative error {:.3e}",
                h.head, h.coordinates, h.max_relative_error
            )
        })
        .collect();
    if !report.passed() {
        return Err(Error::Numerical(format!(
            "gradient check above tolerance {:e}: {}",
            report.tolerance,
            lines.join("; ")
        )));
    }
    Ok(lines.join("\n"))
}

fn equivalence_stage(run: &mut Run<'_>) -> Result<String> {
    let cfg = &run.ctx.config;
    let mut report =
        run_equivalence_suite(cfg.equivalence.cases, cfg.seed, cfg.equivalence.tolerance)?;
    let seconds = report.seconds;
    if run.ctx.deterministic {
        report.seconds = 0.0;
    }
    run.output_json(artifacts::EQUIVALENCE_REPORT, &report)?;
    let line = format!(
        "{} cases, max value diff {:.3e}, max gradient diff {:.3e}, {:.2}s",
        report.cases.len(),
        report.max_value_diff,
        report.max_grad_diff,
        seconds
    );
    if !report.passed() {
        return Err(Error::Numerical(format!(
            "{} cases above tolerance: {line}",
            report.failures
        )));
    }
    Ok(line)
}

/// Inputs shared by every cell of an ablation run.
pub struct AblationData {
    pub corpus: Corpus,
    pub type_pieces: Vec<Vec<usize>>,
    /// Candidate sets per split: recalled, and expanded when available.
    pub recalled: BTreeMap<SplitName, Vec<CandidateSet>>,
    pub expanded: Option<BTreeMap<SplitName, Vec<CandidateSet>>>,
}

/// One cell of the matrix; `None` keeps the configured value.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub flags: Option<String>,
    pub expand: Option<bool>,
    pub variant: Option<FilterVariant>,
    pub k: Option<usize>,
    pub block: Option<usize>,
}

impl AblationCell {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(f) = &self.flags {
            parts.push(format!("flags={f}"));
        }
        if let Some(e) = self.expand {
            parts.push(format!("expand={}", if e { "on" } else { "off" }));
        }
        if let Some(v) = self.variant {
            parts.push(format!("variant={v}"));
        }
        if let Some(k) = self.k {
            parts.push(format!("k={k}"));
        }
        if let Some(b) = self.block {
            parts.push(format!("B={b}"));
        }
        parts.join(" ")
    }
}

/// Test scores of one training run of a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    /// Test-set prediction throughput; absent in deterministic runs.
    pub sents_per_sec: Option<f64>,
}

/// A cell with its scores averaged over [`AblationRun`]s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub sents_per_sec: Option<f64>,
    pub runs: Vec<AblationRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<48} {:>8} {:>8} {:>8} {:>10}  {}\n",
            "cell", "P", "R", "F1", "sents/s", "F1 per seed"
        );
        for r in &self.rows {
            let speed = r
                .sents_per_sec
                .map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
            let per_seed: Vec<String> = r
                .runs
                .iter()
                .map(|x| format!("{}:{:.4}", x.seed, x.f1))
                .collect();
            let _ = writeln!(
                s,
                "{:<48} {:>8.4} {:>8.4} {:>8.4} {:>10}  {}",
                r.label,
                r.precision,
                r.recall,
                r.f1,
                speed,
                per_seed.join(" ")
            );
        }
        s
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Cross product of the non-empty axes, in axis order (flags, expand,
/// variant, k, block).
pub fn ablation_cells(axes: &AblationAxes) -> Result<Vec<AblationCell>> {
    if axes.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one non-empty axis".into(),
        ));
    }
    fn axis<T: Clone>(v: &[T]) -> Vec<Option<T>> {
        if v.is_empty() {
            vec![None]
        } else {
            v.iter().cloned().map(Some).collect()
        }
    }
    for f in &axes.flags {
        f.parse::<QuadrantFlags>()?;
    }
    let mut cells = Vec::new();
    for flags in axis(&axes.flags) {
        for expand in axis(&axes.expand) {
            for variant in axis(&axes.variant) {
                for k in axis(&axes.k) {
                    for block in axis(&axes.block) {
                        cells.push(AblationCell {
                            flags: flags.clone(),
                            expand,
                            variant,
                            k,
                            block,
                        });
                    }
                }
            }
        }
    }
    Ok(cells)
}

/// Filter configuration for one cell. A flags override selects the
/// structured no-C2C attention exactly when the pattern is `no-c2c`.
pub fn cell_config(base: &FilterConfig, cell: &AblationCell) -> Result<FilterConfig> {
    let mut c = base.clone();
    if let Some(f) = &cell.flags {
        c.flags = f.parse()?;
        c.structured_no_c2c = c.flags == QuadrantFlags::no_c2c();
    }
    if let Some(v) = cell.variant {
        c.variant = v;
    }
    if let Some(k) = cell.k {
        c.k = k;
    }
    if let Some(b) = cell.block {
        c.block_size = b;
    }
    c.validate()?;
    Ok(c)
}

fn run_cell(
    config: &PipelineConfig,
    data: &AblationData,
    cell: &AblationCell,
    seeds: &[u64],
    deterministic: bool,
) -> Result<AblationRow> {
    let runs = seeds
        .iter()
        .map(|&seed| run_cell_once(config, data, cell, seed, deterministic))
        .collect::<Result<Vec<_>>>()?;
    let n = runs.len() as f64;
    let mean = |f: fn(&AblationRun) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let speeds: Option<Vec<f64>> = runs.iter().map(|r| r.sents_per_sec).collect();
    Ok(AblationRow {
        cell: cell.clone(),
        label: cell.label(),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        sents_per_sec: speeds.map(|v| v.iter().sum::<f64>() / n),
        runs,
    })
}

fn run_cell_once(
    config: &PipelineConfig,
    data: &AblationData,
    cell: &AblationCell,
    seed: u64,
    deterministic: bool,
) -> Result<AblationRun> {
    let mut fc = cell_config(&config.filter, cell)?;
    fc.train.seed = seed;
    let expand = cell.expand.unwrap_or(config.expand_enabled);
    let sets = if expand {
        data.expanded
            .as_ref()
            .ok_or_else(|| Error::MissingArtifact {
                path: config.work_dir.join(artifacts::expanded(SplitName::Train)),
                stage: Stage::Expand.name().into(),
            })?
    } else {
        &data.recalled
    };
    let items = |s: SplitName| -> Result<Vec<FilterItem>> {
        filter_items(
            data.corpus.split(s),
            &truncate_candidates(&sets[&s], fc.k)?,
            &data.corpus.tokenizer,
        )
    };
    let (train, dev, test) = (
        items(SplitName::Train)?,
        items(SplitName::Dev)?,
        items(SplitName::Test)?,
    );
    let (mut filter, mut model) = Filter::init(
        fc,
        config.filter_encoder.clone(),
        data.corpus.tokenizer.len(),
        data.type_pieces.clone(),
        seed,
    )?;
    filter.train(&mut model, &train, &dev)?;
    check_finite(&model, "filter")?;
    let start = Instant::now();
    let preds: TypeSets = test
        .iter()
        .map(|it| Ok((it.id.clone(), filter.predict_types(&model, it)?)))
        .collect::<Result<_>>()?;
    let secs = start.elapsed().as_secs_f64();
    let r = evaluate(&preds, &golds_of(&data.corpus.test), config.eval.averaging)?;
    Ok(AblationRun {
        seed,
        precision: r.precision,
        recall: r.recall,
        f1: r.f1,
        threshold: filter.config.threshold,
        sents_per_sec: (!deterministic && secs > 0.0).then(|| test.len() as f64 / secs),
    })
}

/// Trains and evaluates filters for every cell of the axis cross product,
/// each cell with the same seeds.
pub fn run_ablation_matrix(
    config: &PipelineConfig,
    data: &AblationData,
    axes: &AblationAxes,
    deterministic: bool,
) -> Result<AblationReport> {
    let config = config.resolved();
    let cells = ablation_cells(axes)?;
    let seeds = if axes.seeds.is_empty() {
        vec![config.seed]
    } else {
        axes.seeds.clone()
    };
    let rows = cells
        .iter()
        .map(|c| run_cell(&config, data, c, &seeds, deterministic))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { rows })
}

fn ablate_stage(run: &mut Run<'_>) -> Result<String> {
    let axes = run.ctx.config.ablation.clone();
    let cells = ablation_cells(&axes)?;
    let corpus = load_corpus(run)?;
    let needs_expanded = cells
        .iter()
        .any(|c| c.expand.unwrap_or(run.ctx.config.expand_enabled));
    let mut recalled = BTreeMap::new();
    let mut expanded = BTreeMap::new();
    for s in artifacts::SPLITS {
        recalled.insert(s, load_candidate_sets(run, &corpus, s, false)?);
        if needs_expanded {
            expanded.insert(s, load_candidate_sets(run, &corpus, s, true)?);
        }
    }
    let data = AblationData {
        type_pieces: type_pieces(&corpus.vocab, &corpus.tokenizer)?,
        corpus,
        recalled,
        expanded: needs_expanded.then_some(expanded),
    };
    let report = run_ablation_matrix(&run.ctx.config, &data, &axes, run.ctx.deterministic)?;
    let table = report.table();
    run.output_json(artifacts::ABLATION_REPORT, &report)?;
    run.output_bytes(artifacts::ABLATION_TABLE, table.as_bytes())?;
    Ok(table)
}
