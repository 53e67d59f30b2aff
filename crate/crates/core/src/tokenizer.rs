//! Greedy frequency-merge sub-word tokenizer.
//!
//! Text is mapped to a SentencePiece-style symbol stream: a dummy `▁` is
//! prepended and every space becomes `▁`, so `detokenize(tokenize(x)) == x`
//! for any text whose characters were seen in training. Training starts from
//! single characters and repeatedly merges the most frequent adjacent pair
//! inside words until the target size is reached or no pair repeats.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const WORD_MARK: char = '\u{2581}';

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
const HEADER: &str = "#refilter-tokenizer v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocabulary {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
    max_piece_chars: usize,
}

impl SubwordVocabulary {
    fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pieces.len());
        let mut max_piece_chars = 1;
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate piece {p:?}")));
            }
            max_piece_chars = max_piece_chars.max(p.chars().count());
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if pieces.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Vocabulary(format!("special {s} must have id {i}")));
            }
        }
        Ok(Self {
            pieces,
            index,
            max_piece_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn piece(&self, id: usize) -> &str {
        &self.pieces[id]
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    /// Longest-match-first segmentation; characters outside the alphabet map
    /// to `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        if text.is_empty() {
            return Vec::new();
        }
        let symbols: Vec<char> = std::iter::once(WORD_MARK)
            .chain(text.chars().map(|c| if c == ' ' { WORD_MARK } else { c }))
            .collect();
        let mut out = Vec::new();
        let mut buf = String::new();
        let mut i = 0;
        while i < symbols.len() {
            let mut matched = None;
            let longest = self.max_piece_chars.min(symbols.len() - i);
            for len in (1..=longest).rev() {
                buf.clear();
                buf.extend(&symbols[i..i + len]);
                if let Some(&id) = self.index.get(buf.as_str()) {
                    if id >= SPECIALS.len() {
                        matched = Some((id, len));
                        break;
                    }
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    out.push(UNK);
                    i += 1;
                }
            }
        }
        out
    }

    /// Inverse of [`tokenize`](Self::tokenize); special ids other than
    /// `[UNK]` are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            if id == UNK {
                s.push('\u{fffd}');
            } else if !self.is_special(id) {
                s.push_str(&self.pieces[id]);
            }
        }
        let s = s.replace(WORD_MARK, " ");
        match s.strip_prefix(' ') {
            Some(rest) => rest.to_string(),
            None => s,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("{HEADER} specials={}\n", SPECIALS.join(","));
        for p in &self.pieces {
            out.push_str(p);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.starts_with(HEADER) => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing tokenizer header".into(),
                })
            }
        }
        Self::from_pieces(lines.map(str::to_string).collect())
    }
}

fn to_symbols(text: &str) -> Vec<char> {
    std::iter::once(WORD_MARK)
        .chain(text.chars().map(|c| if c == ' ' { WORD_MARK } else { c }))
        .collect()
}

/// Splits a symbol stream into words, each starting at a word mark.
fn words(symbols: &[char]) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for &c in symbols {
        if c == WORD_MARK && !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        cur.push(c);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn train_tokenizer<S: AsRef<str>>(
    corpus: &[S],
    target_size: usize,
) -> Result<SubwordVocabulary> {
    if corpus.iter().all(|s| s.as_ref().is_empty()) {
        return Err(Error::Config("tokenizer corpus is empty".into()));
    }
    let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
    for text in corpus {
        let text = text.as_ref();
        if text.is_empty() {
            continue;
        }
        for w in words(&to_symbols(text)) {
            *word_freq.entry(w).or_default() += 1;
        }
    }
    let mut alphabet: Vec<char> = word_freq.keys().flat_map(|w| w.chars()).collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    let base = SPECIALS.len() + alphabet.len();
    if target_size < base {
        return Err(Error::Config(format!(
            "target size {target_size} is below alphabet plus specials ({base})"
        )));
    }
    let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    pieces.extend(alphabet.iter().map(|c| c.to_string()));

    let mut segmented: Vec<(Vec<String>, usize)> = word_freq
        .into_iter()
        .map(|(w, f)| (w.chars().map(|c| c.to_string()).collect(), f))
        .collect();

    while pieces.len() < target_size {
        let mut pair_freq: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, f) in &segmented {
            for pair in syms.windows(2) {
                *pair_freq.entry((&pair[0], &pair[1])).or_default() += f;
            }
        }
        // First maximum in lexicographic pair order.
        let best =
            pair_freq
                .iter()
                .fold(None::<(&(&str, &str), usize)>, |acc, (p, &f)| match acc {
                    Some((_, bf)) if bf >= f => acc,
                    _ => Some((p, f)),
                });
        let Some(((a, b), freq)) = best else { break };
        if freq < 2 {
            break;
        }
        let (a, b) = (a.to_string(), b.to_string());
        let merged = format!("{a}{b}");
        for (syms, _) in &mut segmented {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == a && syms[i + 1] == b {
                    syms[i] = merged.clone();
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        pieces.push(merged);
    }
    SubwordVocabulary::from_pieces(pieces)
}
