//! Mention records, type vocabularies, candidate sets and their file formats.
//!
//! * dataset files are JSON lines with `id`, `left`, `mention`, `right` and
//!   `types` (surfaces, resolved to ids on load);
//! * vocabulary files hold one surface per line, ids follow line order;
//! * candidate files start with a `K<TAB>k` header followed by
//!   `record_id<TAB>surface:score:source,...` lines;
//! * prediction files hold `record_id<TAB>surface,surface,...` lines.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TypeId = usize;

/// One typing instance: a mention inside its left and right context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MentionRecord {
    pub id: String,
    pub left_context: String,
    pub mention: String,
    pub right_context: String,
    pub gold_types: BTreeSet<TypeId>,
}

impl MentionRecord {
    /// Context words in order: left context, mention, right context.
    pub fn context_words(&self) -> Vec<&str> {
        self.left_context
            .split_whitespace()
            .chain(self.mention.split_whitespace())
            .chain(self.right_context.split_whitespace())
            .collect()
    }

    pub fn mention_words(&self) -> Vec<&str> {
        self.mention.split_whitespace().collect()
    }
}

/// The full type set, ids dense in `0..N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeVocabulary {
    surfaces: Vec<String>,
    index: HashMap<String, TypeId>,
}

const RESERVED_SURFACE_CHARS: [char; 4] = ['\t', '\n', ',', ':'];

impl TypeVocabulary {
    pub fn new(surfaces: Vec<String>) -> Result<Self> {
        if surfaces.is_empty() {
            return Err(Error::Vocabulary("empty type vocabulary".into()));
        }
        let mut index = HashMap::with_capacity(surfaces.len());
        for (id, s) in surfaces.iter().enumerate() {
            if s.trim().is_empty() {
                return Err(Error::Vocabulary(format!("type {id} has an empty surface")));
            }
            if s.contains(RESERVED_SURFACE_CHARS) {
                return Err(Error::Vocabulary(format!(
                    "type surface {s:?} contains a reserved character (tab, newline, ',' or ':')"
                )));
            }
            if index.insert(s.clone(), id).is_some() {
                return Err(Error::Vocabulary(format!("duplicate type surface {s:?}")));
            }
        }
        Ok(Self { surfaces, index })
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn surface(&self, id: TypeId) -> &str {
        &self.surfaces[id]
    }

    pub fn id(&self, surface: &str) -> Option<TypeId> {
        self.index.get(surface).copied()
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    pub fn iter(&self) -> impl Iterator<Item = (TypeId, &str)> {
        self.surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| (i, s.as_str()))
    }
}

/// Which stage contributed a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateSource {
    Recall,
    Match,
    Mlm,
}

impl fmt::Display for CandidateSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CandidateSource::Recall => "recall",
            CandidateSource::Match => "match",
            CandidateSource::Mlm => "mlm",
        })
    }
}

impl FromStr for CandidateSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recall" => Ok(CandidateSource::Recall),
            "match" => Ok(CandidateSource::Match),
            "mlm" => Ok(CandidateSource::Mlm),
            other => Err(Error::Validation(format!(
                "unknown candidate source {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateEntry {
    pub type_id: TypeId,
    pub score: f64,
    pub source: CandidateSource,
}

/// Ranked candidate types for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub record_id: String,
    pub entries: Vec<CandidateEntry>,
}

impl CandidateSet {
    pub fn new(record_id: impl Into<String>, entries: Vec<CandidateEntry>) -> Result<Self> {
        let set = Self {
            record_id: record_id.into(),
            entries,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn type_ids(&self) -> Vec<TypeId> {
        self.entries.iter().map(|e| e.type_id).collect()
    }

    pub fn count_source(&self, source: CandidateSource) -> usize {
        self.entries.iter().filter(|e| e.source == source).count()
    }

    /// No duplicate type ids; recall-sourced entries in descending score order.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for e in &self.entries {
            if !seen.insert(e.type_id) {
                return Err(Error::Validation(format!(
                    "candidate set {:?} repeats type id {}",
                    self.record_id, e.type_id
                )));
            }
        }
        let mut last = f64::INFINITY;
        for e in self
            .entries
            .iter()
            .filter(|e| e.source == CandidateSource::Recall)
        {
            if e.score > last {
                return Err(Error::Validation(format!(
                    "candidate set {:?}: recall entries are not in descending score order",
                    self.record_id
                )));
            }
            last = e.score;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        })
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "dev" => Ok(SplitName::Dev),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub records: Vec<MentionRecord>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Checks that the three splits do not share record ids.
pub fn check_disjoint(splits: &[&DatasetSplit]) -> Result<()> {
    let mut owner: HashMap<&str, SplitName> = HashMap::new();
    for split in splits {
        for r in &split.records {
            if let Some(prev) = owner.insert(&r.id, split.name) {
                return Err(Error::Validation(format!(
                    "record id {:?} appears in both {prev} and {}",
                    r.id, split.name
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    id: String,
    left: String,
    mention: String,
    right: String,
    types: Vec<String>,
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads a JSON-lines dataset, resolving type surfaces against `vocab`.
pub fn load_dataset(path: &Path, name: SplitName, vocab: &TypeVocabulary) -> Result<DatasetSplit> {
    let reader = open(path)?;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.mention.trim().is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty mention".into(),
            });
        }
        if !ids.insert(raw.id.clone()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate record id {:?}", raw.id),
            });
        }
        let gold_types = raw
            .types
            .iter()
            .map(|s| {
                vocab.id(s).ok_or_else(|| {
                    Error::Vocabulary(format!("line {line_no}: unknown type surface {s:?}"))
                })
            })
            .collect::<Result<BTreeSet<_>>>()?;
        records.push(MentionRecord {
            id: raw.id,
            left_context: raw.left,
            mention: raw.mention,
            right_context: raw.right,
            gold_types,
        });
    }
    Ok(DatasetSplit { name, records })
}

pub fn save_dataset(path: &Path, split: &DatasetSplit, vocab: &TypeVocabulary) -> Result<()> {
    let mut out = String::new();
    for r in &split.records {
        let line = RecordLine {
            id: r.id.clone(),
            left: r.left_context.clone(),
            mention: r.mention.clone(),
            right: r.right_context.clone(),
            types: r
                .gold_types
                .iter()
                .map(|&t| vocab.surface(t).to_string())
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_type_vocabulary(path: &Path) -> Result<TypeVocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let surfaces: Vec<String> = text.lines().map(str::to_string).collect();
    TypeVocabulary::new(surfaces)
}

pub fn save_type_vocabulary(path: &Path, vocab: &TypeVocabulary) -> Result<()> {
    let mut out = String::new();
    for s in vocab.surfaces() {
        out.push_str(s);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Serializes candidate sets to the tab-separated candidate format.
pub fn write_candidates(
    mut w: impl Write,
    sets: &[CandidateSet],
    vocab: &TypeVocabulary,
) -> std::io::Result<()> {
    let k = sets.first().map_or(0, CandidateSet::k);
    writeln!(w, "K\t{k}")?;
    for set in sets {
        write!(w, "{}\t", set.record_id)?;
        for (i, e) in set.entries.iter().enumerate() {
            if i > 0 {
                w.write_all(b",")?;
            }
            write!(w, "{}:{}:{}", vocab.surface(e.type_id), e.score, e.source)?;
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_candidates(path: &Path, sets: &[CandidateSet], vocab: &TypeVocabulary) -> Result<()> {
    let mut ids = HashSet::with_capacity(sets.len());
    let k = sets.first().map_or(0, CandidateSet::k);
    for set in sets {
        if !ids.insert(set.record_id.as_str()) {
            return Err(Error::Validation(format!(
                "duplicate record id {:?} in candidate sets",
                set.record_id
            )));
        }
        if set.record_id.contains(['\t', '\n']) {
            return Err(Error::Validation(format!(
                "record id {:?} contains a tab or newline",
                set.record_id
            )));
        }
        if set.k() != k {
            return Err(Error::Validation(format!(
                "candidate set {:?} has {} entries, expected {k}",
                set.record_id,
                set.k()
            )));
        }
        set.validate()?;
    }
    let mut buf = Vec::new();
    write_candidates(&mut buf, sets, vocab).expect("writing to memory");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_candidates(path: &Path, vocab: &TypeVocabulary) -> Result<Vec<CandidateSet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_candidates(&text, vocab)
}

pub fn parse_candidates(text: &str, vocab: &TypeVocabulary) -> Result<Vec<CandidateSet>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing K header".into(),
    })?;
    let k: usize = header
        .strip_prefix("K\t")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("bad header {header:?}, expected `K<TAB><count>`"),
        })?;
    let mut sets = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.is_empty() {
            continue;
        }
        let perr = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let (record_id, body) = line
            .split_once('\t')
            .ok_or_else(|| perr("missing TAB after record id".into()))?;
        let mut entries = Vec::with_capacity(k);
        if !body.is_empty() {
            for item in body.split(',') {
                let mut parts = item.rsplitn(3, ':');
                let source = parts
                    .next()
                    .ok_or_else(|| perr(format!("bad entry {item:?}")))?;
                let score = parts
                    .next()
                    .ok_or_else(|| perr(format!("bad entry {item:?}")))?;
                let surface = parts
                    .next()
                    .ok_or_else(|| perr(format!("bad entry {item:?}")))?;
                let type_id = vocab.id(surface).ok_or_else(|| {
                    Error::Vocabulary(format!("line {line_no}: unknown type surface {surface:?}"))
                })?;
                entries.push(CandidateEntry {
                    type_id,
                    score: score
                        .parse()
                        .map_err(|_| perr(format!("bad score {score:?}")))?,
                    source: source.parse()?,
                });
            }
        }
        if entries.len() != k {
            return Err(Error::Validation(format!(
                "line {line_no}: {} entries, header says K={k}",
                entries.len()
            )));
        }
        if !ids.insert(record_id.to_string()) {
            return Err(Error::Validation(format!(
                "line {line_no}: duplicate record id {record_id:?}"
            )));
        }
        sets.push(CandidateSet::new(record_id, entries)?);
    }
    Ok(sets)
}

/// Predicted type sets in record order.
pub type Predictions = Vec<(String, BTreeSet<TypeId>)>;

pub fn write_predictions(
    mut w: impl Write,
    preds: &Predictions,
    vocab: &TypeVocabulary,
) -> std::io::Result<()> {
    for (id, types) in preds {
        let surfaces: Vec<&str> = types.iter().map(|&t| vocab.surface(t)).collect();
        writeln!(w, "{id}\t{}", surfaces.join(","))?;
    }
    Ok(())
}

pub fn save_predictions(path: &Path, preds: &Predictions, vocab: &TypeVocabulary) -> Result<()> {
    let mut buf = Vec::new();
    write_predictions(&mut buf, preds, vocab).expect("writing to memory");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn parse_predictions(text: &str, vocab: &TypeVocabulary) -> Result<Predictions> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, body) = line.split_once('\t').ok_or(Error::Parse {
            line: i + 1,
            message: "missing TAB after record id".into(),
        })?;
        if !ids.insert(id.to_string()) {
            return Err(Error::Validation(format!(
                "line {}: duplicate record id {id:?}",
                i + 1
            )));
        }
        let types = body
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                vocab.id(s).ok_or_else(|| {
                    Error::Vocabulary(format!("line {}: unknown type surface {s:?}", i + 1))
                })
            })
            .collect::<Result<BTreeSet<_>>>()?;
        out.push((id.to_string(), types));
    }
    Ok(out)
}

pub fn load_predictions(path: &Path, vocab: &TypeVocabulary) -> Result<Predictions> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> TypeVocabulary {
        TypeVocabulary::new(
            ["person", "artist", "president", "politician"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn vocabulary_from_file_assigns_line_order_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("types.txt");
        fs::write(&p, "person\nartist\npresident\n").unwrap();
        let v = load_type_vocabulary(&p).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("person"), Some(0));
        assert_eq!(v.id("president"), Some(2));
    }

    #[test]
    fn empty_vocabulary_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("types.txt");
        fs::write(&p, "").unwrap();
        assert!(matches!(
            load_type_vocabulary(&p),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn duplicate_surface_named_in_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("types.txt");
        fs::write(&p, "person\nartist\nperson\n").unwrap();
        let err = load_type_vocabulary(&p).unwrap_err();
        assert!(err.to_string().contains("person"), "{err}");
    }

    #[test]
    fn empty_dataset_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(&p, "").unwrap();
        let split = load_dataset(&p, SplitName::Dev, &vocab()).unwrap();
        assert!(split.is_empty());
    }

    #[test]
    fn fixture_line_resolves_gold_types() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(
            &p,
            r#"{"id":"r1","left":"yesterday the president","mention":"Joe Biden","right":"spoke","types":["president","politician"]}"#,
        )
        .unwrap();
        let split = load_dataset(&p, SplitName::Train, &vocab()).unwrap();
        assert_eq!(split.records.len(), 1);
        assert_eq!(split.records[0].gold_types, BTreeSet::from([2, 3]));
        assert_eq!(split.records[0].mention, "Joe Biden");
    }

    #[test]
    fn missing_mention_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(
            &p,
            "{\"id\":\"a\",\"left\":\"\",\"mention\":\"x\",\"right\":\"\",\"types\":[]}\n{\"id\":\"b\",\"left\":\"\",\"right\":\"\",\"types\":[]}\n",
        )
        .unwrap();
        match load_dataset(&p, SplitName::Train, &vocab()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_type_surface_is_vocabulary_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(
            &p,
            r#"{"id":"a","left":"","mention":"x","right":"","types":["astronaut"]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_dataset(&p, SplitName::Train, &vocab()),
            Err(Error::Vocabulary(_))
        ));
    }

    fn set(id: &str, entries: &[(usize, f64, CandidateSource)]) -> CandidateSet {
        CandidateSet::new(
            id,
            entries
                .iter()
                .map(|&(type_id, score, source)| CandidateEntry {
                    type_id,
                    score,
                    source,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn candidates_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tsv");
        let v = vocab();
        let sets = vec![
            set(
                "r1",
                &[
                    (2, 3.25, CandidateSource::Recall),
                    (0, -0.1, CandidateSource::Recall),
                    (3, 0.0, CandidateSource::Match),
                ],
            ),
            set(
                "r2",
                &[
                    (1, 1e-17, CandidateSource::Recall),
                    (3, -2.5, CandidateSource::Mlm),
                    (0, 0.1 + 0.2, CandidateSource::Match),
                ],
            ),
        ];
        save_candidates(&p, &sets, &v).unwrap();
        assert_eq!(load_candidates(&p, &v).unwrap(), sets);
    }

    #[test]
    fn empty_candidate_list_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tsv");
        save_candidates(&p, &[], &vocab()).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "K\t0\n");
        assert!(load_candidates(&p, &vocab()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_type_in_loaded_set_is_rejected() {
        let text = "K\t2\nr1\tperson:1:recall,person:0.5:recall\n";
        assert!(matches!(
            parse_candidates(text, &vocab()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn duplicate_record_on_save_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = set("r1", &[(0, 1.0, CandidateSource::Recall)]);
        let err = save_candidates(&dir.path().join("c"), &[a.clone(), a], &vocab());
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn recall_entries_must_descend() {
        let err = CandidateSet::new(
            "r",
            vec![
                CandidateEntry {
                    type_id: 0,
                    score: 0.1,
                    source: CandidateSource::Recall,
                },
                CandidateEntry {
                    type_id: 1,
                    score: 0.9,
                    source: CandidateSource::Recall,
                },
            ],
        );
        assert!(err.is_err());
    }

    #[test]
    fn split_overlap_detected() {
        let r = MentionRecord {
            id: "x".into(),
            left_context: String::new(),
            mention: "m".into(),
            right_context: String::new(),
            gold_types: BTreeSet::new(),
        };
        let a = DatasetSplit {
            name: SplitName::Train,
            records: vec![r.clone()],
        };
        let b = DatasetSplit {
            name: SplitName::Dev,
            records: vec![r],
        };
        assert!(check_disjoint(&[&a, &b]).is_err());
    }
}
