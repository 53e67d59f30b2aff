//! Token sequences for every scorer.
//!
//! The sentence part is always `[CLS] c [SEP] m [SEP]` with `c` the full
//! context (left, mention, right). When a sequence would not fit, context
//! pieces are dropped from the outer ends, longer side first, so the mention
//! survives.

use crate::data::{MentionRecord, TypeId};
use crate::embeddings::TypeTokenRegistry;
use crate::encoder::{EncoderInput, InputLayout};
use crate::error::{Error, Result};
use crate::tokenizer::{SubwordVocabulary, CLS, MASK, PAD, SEP};

/// Sub-word pieces of a record's three spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePieces {
    pub left: Vec<usize>,
    pub mention: Vec<usize>,
    pub right: Vec<usize>,
}

impl SentencePieces {
    pub fn new(record: &MentionRecord, tokenizer: &SubwordVocabulary) -> Self {
        Self {
            left: tokenizer.tokenize(&record.left_context),
            mention: tokenizer.tokenize(&record.mention),
            right: tokenizer.tokenize(&record.right_context),
        }
    }

    /// Drops outer context pieces until `left + right <= keep`; returns how
    /// many were dropped.
    fn trim_context(&self, keep: usize) -> (&[usize], &[usize], usize) {
        let (mut lo, mut hi) = (0, self.right.len());
        let mut dropped = 0;
        while (self.left.len() - lo) + hi > keep {
            if self.left.len() - lo >= hi {
                lo += 1;
            } else {
                hi -= 1;
            }
            dropped += 1;
        }
        (&self.left[lo..], &self.right[..hi], dropped)
    }

    /// `[CLS] c [SEP] m [SEP]` within `budget` positions.
    pub fn sentence(&self, budget: usize) -> Result<(Vec<usize>, usize)> {
        let fixed = 3 + 2 * self.mention.len();
        if fixed > budget {
            return Err(Error::Capacity {
                needed: fixed,
                available: budget,
            });
        }
        let (left, right, dropped) = self.trim_context(budget - fixed);
        let mut t = Vec::with_capacity(budget);
        t.push(CLS);
        t.extend_from_slice(left);
        t.extend_from_slice(&self.mention);
        t.extend_from_slice(right);
        t.push(SEP);
        t.extend_from_slice(&self.mention);
        t.push(SEP);
        Ok((t, dropped))
    }
}

/// An encoder-ready sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Assembled {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub layout: InputLayout,
    /// Candidate type ids in slot order (empty for sentence-only inputs).
    pub candidates: Vec<TypeId>,
    /// Context pieces dropped to fit.
    pub truncated_context: usize,
    /// Candidates whose pieces were cut to fit a block.
    pub truncated_candidates: usize,
}

impl Assembled {
    pub fn input(&self) -> EncoderInput<'_> {
        EncoderInput {
            tokens: &self.tokens,
            positions: &self.positions,
            layout: &self.layout,
        }
    }

    fn sentence_only(tokens: Vec<usize>, truncated_context: usize) -> Result<Self> {
        let layout = InputLayout::sentence_only(tokens.len())?;
        Ok(Self {
            positions: (0..tokens.len()).collect(),
            tokens,
            layout,
            candidates: Vec::new(),
            truncated_context,
            truncated_candidates: 0,
        })
    }
}

/// `[CLS] c [SEP] m [SEP]` for the multi-label recall scorer.
pub fn assemble_sentence(pieces: &SentencePieces, max_positions: usize) -> Result<Assembled> {
    let (t, dropped) = pieces.sentence(max_positions)?;
    Assembled::sentence_only(t, dropped)
}

/// `[CLS] c [SEP] m [SEP] y` for the one-type cross-encoder.
pub fn assemble_pair(
    pieces: &SentencePieces,
    type_pieces: &[usize],
    max_positions: usize,
) -> Result<Assembled> {
    let budget = max_positions
        .checked_sub(type_pieces.len())
        .ok_or(Error::Capacity {
            needed: type_pieces.len(),
            available: max_positions,
        })?;
    let (mut t, dropped) = pieces.sentence(budget)?;
    t.extend_from_slice(type_pieces);
    Assembled::sentence_only(t, dropped)
}

/// How candidates are written after the sentence.
#[derive(Debug, Clone, Copy)]
pub enum CandidateFormat<'a> {
    /// One registered whole-type token per candidate.
    Single(&'a TypeTokenRegistry),
    /// Each candidate's pieces, cut or padded to `block` positions.
    Block {
        block: usize,
        pieces: &'a [Vec<usize>],
    },
}

/// `[CLS] c [SEP] m [SEP] t_1 .. t_K` for the multi-candidate cross-encoder.
pub fn assemble_candidates(
    pieces: &SentencePieces,
    candidates: &[TypeId],
    format: CandidateFormat<'_>,
    max_positions: usize,
    shared_candidate_positions: bool,
) -> Result<Assembled> {
    let b = match format {
        CandidateFormat::Single(_) => 1,
        CandidateFormat::Block { block, .. } => block,
    };
    let region = candidates.len() * b;
    let minimal = 3 + 2 * pieces.mention.len();
    if region + minimal > max_positions {
        return Err(Error::Capacity {
            needed: region + minimal,
            available: max_positions,
        });
    }
    let (mut tokens, dropped) = pieces.sentence(max_positions - region)?;
    let ls = tokens.len();
    let mut padding = vec![false; ls];
    let mut cut = 0;
    for &t in candidates {
        match format {
            CandidateFormat::Single(reg) => {
                tokens.push(reg.token(t)?);
                padding.push(false);
            }
            CandidateFormat::Block { block, pieces } => {
                let p = pieces.get(t).ok_or(Error::Index {
                    index: t,
                    size: pieces.len(),
                })?;
                if p.len() > block {
                    cut += 1;
                }
                for o in 0..block {
                    match p.get(o) {
                        Some(&id) => {
                            tokens.push(id);
                            padding.push(false);
                        }
                        None => {
                            tokens.push(PAD);
                            padding.push(true);
                        }
                    }
                }
            }
        }
    }
    let layout = InputLayout::new(ls, candidates.len(), b)?.with_padding(padding)?;
    Ok(Assembled {
        positions: layout.position_ids(shared_candidate_positions),
        tokens,
        layout,
        candidates: candidates.to_vec(),
        truncated_context: dropped,
        truncated_candidates: cut,
    })
}

/// `[CLS] c_l m c_r [SEP] m <template> [MASK]×l [SEP]`; returns the sequence and
/// the mask positions.
pub fn assemble_prompt(
    pieces: &SentencePieces,
    template: &[usize],
    mask_count: usize,
    max_positions: usize,
) -> Result<(Assembled, Vec<usize>)> {
    let tail = template.len() + mask_count;
    let budget = max_positions.checked_sub(tail).ok_or(Error::Capacity {
        needed: tail,
        available: max_positions,
    })?;
    let (mut t, dropped) = pieces.sentence(budget)?;
    // The sentence ends with `m [SEP]`; the template goes between them.
    let sep = t.pop().expect("sentence ends with SEP");
    debug_assert_eq!(sep, SEP);
    t.extend_from_slice(template);
    let start = t.len();
    t.extend(std::iter::repeat_n(MASK, mask_count));
    t.push(SEP);
    let masks = (start..start + mask_count).collect();
    Ok((Assembled::sentence_only(t, dropped)?, masks))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pieces(l: usize, m: usize, r: usize) -> SentencePieces {
        SentencePieces {
            left: (100..100 + l).collect(),
            mention: (200..200 + m).collect(),
            right: (300..300 + r).collect(),
        }
    }

    #[test]
    fn sentence_layout() {
        let (t, d) = pieces(2, 1, 1).sentence(64).unwrap();
        assert_eq!(t, vec![CLS, 100, 101, 200, 300, SEP, 200, SEP]);
        assert_eq!(d, 0);
    }

    #[test]
    fn truncation_keeps_mention_and_trims_longer_side() {
        let (t, d) = pieces(4, 2, 1).sentence(3 + 4 + 3).unwrap();
        assert_eq!(d, 2);
        assert_eq!(t, vec![CLS, 102, 103, 200, 201, 300, SEP, 200, 201, SEP]);
        let (t, d) = pieces(3, 1, 3).sentence(5 + 2).unwrap();
        assert_eq!(d, 4);
        assert_eq!(t, vec![CLS, 102, 200, 300, SEP, 200, SEP]);
        assert!(pieces(0, 5, 0).sentence(12).is_err());
    }

    #[test]
    fn blocks_pad_and_cut() {
        let tp = vec![vec![10, 11], vec![12, 13, 14, 15, 16]];
        let a = assemble_candidates(
            &pieces(1, 1, 0),
            &[0, 1],
            CandidateFormat::Block {
                block: 3,
                pieces: &tp,
            },
            64,
            false,
        )
        .unwrap();
        let ls = a.layout.sentence_len();
        assert_eq!(&a.tokens[ls..], &[10, 11, PAD, 12, 13, 14]);
        assert!(a.layout.is_padding(ls + 2));
        assert_eq!(a.truncated_candidates, 1);
        assert_eq!(a.layout.representatives(), vec![ls, ls + 3]);
    }

    #[test]
    fn single_format_shape_and_capacity() {
        let reg = TypeTokenRegistry::new(50, 64);
        let ids: Vec<usize> = (0..64).collect();
        let a = assemble_candidates(
            &pieces(3, 1, 3),
            &ids,
            CandidateFormat::Single(&reg),
            128,
            false,
        )
        .unwrap();
        assert_eq!(a.layout.candidate_len(), 64);
        assert_eq!(a.tokens[a.layout.representative(5)], 55);
        assert!(matches!(
            assemble_candidates(
                &pieces(3, 1, 3),
                &ids,
                CandidateFormat::Single(&reg),
                66,
                false
            ),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn prompt_layout() {
        let (a, masks) = assemble_prompt(&pieces(1, 1, 1), &[40, 41], 2, 64).unwrap();
        assert_eq!(
            a.tokens,
            vec![CLS, 100, 200, 300, SEP, 200, 40, 41, MASK, MASK, SEP]
        );
        assert_eq!(masks, vec![8, 9]);
    }
}
