//! Sentence/candidate segmentation and quadrant attention masks.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Segmentation of an assembled sequence: `L_S` sentence positions followed
/// by `K` candidate slots of `B` positions each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputLayout {
    sentence_len: usize,
    num_candidates: usize,
    block_size: usize,
    /// `true` where the position holds padding and must not be attended to.
    key_padding: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Sentence,
    Candidate(usize),
}

impl InputLayout {
    pub fn new(sentence_len: usize, num_candidates: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Config("block size must be at least 1".into()));
        }
        if sentence_len == 0 {
            return Err(Error::Config("sentence region must be non-empty".into()));
        }
        let total = sentence_len + num_candidates * block_size;
        Ok(Self {
            sentence_len,
            num_candidates,
            block_size,
            key_padding: vec![false; total],
        })
    }

    /// Sentence-only layout, as used by MLC and the vanilla cross-encoder.
    pub fn sentence_only(sentence_len: usize) -> Result<Self> {
        Self::new(sentence_len, 0, 1)
    }

    pub fn with_padding(mut self, key_padding: Vec<bool>) -> Result<Self> {
        if key_padding.len() != self.total_len() {
            return Err(Error::Config(format!(
                "padding mask has {} entries for {} positions",
                key_padding.len(),
                self.total_len()
            )));
        }
        if key_padding[..self.sentence_len].iter().any(|&p| p) {
            return Err(Error::Config("sentence positions cannot be padding".into()));
        }
        self.key_padding = key_padding;
        Ok(self)
    }

    pub fn sentence_len(&self) -> usize {
        self.sentence_len
    }

    pub fn num_candidates(&self) -> usize {
        self.num_candidates
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// `L_C = K * B`
    pub fn candidate_len(&self) -> usize {
        self.num_candidates * self.block_size
    }

    pub fn total_len(&self) -> usize {
        self.sentence_len + self.candidate_len()
    }

    pub fn key_padding(&self) -> &[bool] {
        &self.key_padding
    }

    pub fn is_padding(&self, pos: usize) -> bool {
        self.key_padding[pos]
    }

    /// First index of candidate `j`'s slot or block.
    pub fn representative(&self, j: usize) -> usize {
        self.sentence_len + j * self.block_size
    }

    pub fn representatives(&self) -> Vec<usize> {
        (0..self.num_candidates)
            .map(|j| self.representative(j))
            .collect()
    }

    pub fn region(&self, pos: usize) -> Region {
        if pos < self.sentence_len {
            Region::Sentence
        } else {
            Region::Candidate((pos - self.sentence_len) / self.block_size)
        }
    }

    /// Absolute position ids. With `shared_candidate_positions` every block
    /// reuses ids `L_S .. L_S + B`, so candidate order carries no signal.
    pub fn position_ids(&self, shared_candidate_positions: bool) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.sentence_len).collect();
        for j in 0..self.num_candidates {
            for o in 0..self.block_size {
                ids.push(if shared_candidate_positions {
                    self.sentence_len + o
                } else {
                    self.sentence_len + j * self.block_size + o
                });
            }
        }
        ids
    }
}

/// Which of the four attention quadrants are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadrantFlags {
    pub s2s: bool,
    pub s2c: bool,
    pub c2s: bool,
    pub c2c: bool,
}

impl Default for QuadrantFlags {
    fn default() -> Self {
        Self::all()
    }
}

impl QuadrantFlags {
    pub const fn all() -> Self {
        Self {
            s2s: true,
            s2c: true,
            c2s: true,
            c2c: true,
        }
    }

    pub const fn no_c2c() -> Self {
        Self {
            c2c: false,
            ..Self::all()
        }
    }

    /// Every one of the 16 flag combinations, in binary order.
    pub fn every_combination() -> Vec<Self> {
        (0..16u8)
            .map(|m| Self {
                s2s: m & 1 != 0,
                s2c: m & 2 != 0,
                c2s: m & 4 != 0,
                c2c: m & 8 != 0,
            })
            .collect()
    }

    pub fn label(&self) -> String {
        let off: Vec<&str> = [
            (self.s2s, "S2S"),
            (self.s2c, "S2C"),
            (self.c2s, "C2S"),
            (self.c2c, "C2C"),
        ]
        .iter()
        .filter(|(on, _)| !on)
        .map(|(_, n)| *n)
        .collect();
        if off.is_empty() {
            "full".to_string()
        } else {
            format!("w/o {}", off.join(","))
        }
    }
}

impl std::str::FromStr for QuadrantFlags {
    type Err = crate::error::Error;

    /// `full`, or `no-` followed by quadrant names joined with `+`
    /// (`no-c2c`, `no-s2s+c2c`).
    fn from_str(s: &str) -> crate::error::Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "full" {
            return Ok(Self::all());
        }
        let rest = s.strip_prefix("no-").ok_or_else(|| {
            crate::error::Error::Config(format!(
                "bad quadrant pattern {s:?}; use `full` or `no-c2c`-style names"
            ))
        })?;
        let mut f = Self::all();
        for q in rest.split('+') {
            match q {
                "s2s" => f.s2s = false,
                "s2c" => f.s2c = false,
                "c2s" => f.c2s = false,
                "c2c" => f.c2c = false,
                _ => {
                    return Err(crate::error::Error::Config(format!(
                        "unknown quadrant {q:?}"
                    )))
                }
            }
        }
        Ok(f)
    }
}

/// Whether query `q` may attend to key `k`, ignoring padding.
///
/// With C2C off, positions inside the same candidate slot or block still see
/// each other; this is the intra-block attention the structured path keeps.
pub fn quadrant_allows(layout: &InputLayout, flags: QuadrantFlags, q: usize, k: usize) -> bool {
    match (layout.region(q), layout.region(k)) {
        (Region::Sentence, Region::Sentence) => flags.s2s,
        (Region::Sentence, Region::Candidate(_)) => flags.s2c,
        (Region::Candidate(_), Region::Sentence) => flags.c2s,
        (Region::Candidate(a), Region::Candidate(b)) => flags.c2c || a == b,
    }
}

pub fn build_quadrant_mask(layout: &InputLayout, flags: QuadrantFlags) -> Array2<bool> {
    let l = layout.total_len();
    Array2::from_shape_fn((l, l), |(q, k)| quadrant_allows(layout, flags, q, k))
}
