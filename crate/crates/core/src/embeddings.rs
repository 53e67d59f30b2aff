//! Whole-type tokens for the single-token candidate format.
//!
//! Each type `j` gets a fresh token id `u_j = base + j` appended after the
//! sub-word vocabulary. Its embedding row starts as the mean of the rows of the
//! type's sub-word pieces.

use ndarray::{concatenate, Array1, Array2, Axis};

use crate::data::{TypeId, TypeVocabulary};
use crate::encoder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::tokenizer::SubwordVocabulary;

/// Sub-word decomposition of every type surface, indexed by type id.
pub fn type_pieces(
    vocab: &TypeVocabulary,
    tokenizer: &SubwordVocabulary,
) -> Result<Vec<Vec<usize>>> {
    vocab
        .iter()
        .map(|(id, s)| {
            let p = tokenizer.tokenize(s);
            if p.is_empty() {
                Err(Error::Vocabulary(format!(
                    "type {id} ({s:?}) has no sub-word pieces"
                )))
            } else {
                Ok(p)
            }
        })
        .collect()
}

/// Type id to token id map; `token(j) = base + j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TypeTokenRegistry {
    base: usize,
    count: usize,
}

impl TypeTokenRegistry {
    /// Registry for a table whose first `base` rows are sub-word pieces.
    pub fn new(base: usize, count: usize) -> Self {
        Self { base, count }
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn token(&self, type_id: TypeId) -> Result<usize> {
        if type_id >= self.count {
            return Err(Error::Index {
                index: type_id,
                size: self.count,
            });
        }
        Ok(self.base + type_id)
    }

    pub fn type_of(&self, token: usize) -> Option<TypeId> {
        (token >= self.base && token < self.base + self.count).then(|| token - self.base)
    }
}

/// Appends one row per type, initialised to the mean of the type's piece rows.
///
/// Fails if the table already carries rows beyond its base vocabulary.
pub fn register_type_tokens(
    pieces: &[Vec<usize>],
    table: &mut EmbeddingTable,
) -> Result<TypeTokenRegistry> {
    if table.rows() != table.base_vocab {
        return Err(Error::AlreadyRegistered);
    }
    let base = table.base_vocab;
    let d = table.dim();
    let mut rows = Array2::zeros((pieces.len(), d));
    for (j, ps) in pieces.iter().enumerate() {
        if ps.is_empty() {
            return Err(Error::Vocabulary(format!(
                "type {j} has no sub-word pieces"
            )));
        }
        let mut sum = Array1::<f64>::zeros(d);
        for &p in ps {
            if p >= base {
                return Err(Error::Index {
                    index: p,
                    size: base,
                });
            }
            sum += &table.tokens.row(p);
        }
        rows.row_mut(j).assign(&(sum / ps.len() as f64));
    }
    table.tokens = concatenate(Axis(0), &[table.tokens.view(), rows.view()])
        .expect("matching embedding width");
    Ok(TypeTokenRegistry::new(base, pieces.len()))
}
