//! Named weight tensors for the encoder and the scoring heads.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD, Zip};
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A model whose weights can be enumerated by name in a fixed order.
///
/// Gradients use the same type as the weights they belong to.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// `self += scale * other`
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            Zip::from(&mut a).and(&b).for_each(|x, &y| *x += scale * y);
        }
    }

    fn scale(&mut self, factor: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|x| x * factor);
        }
    }

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    fn to_parameter_set(&self) -> ParameterSet {
        ParameterSet {
            tensors: self
                .tensors()
                .into_iter()
                .map(|(n, t)| (n, t.to_owned()))
                .collect(),
        }
    }

    /// Copies weights from `set`; names and shapes must match exactly.
    fn load_parameter_set(&mut self, set: &ParameterSet) -> Result<()> {
        let mut targets = self.tensors_mut();
        if targets.len() != set.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                set.tensors.len(),
                targets.len()
            )));
        }
        for ((name, dst), (src_name, src)) in targets.iter_mut().zip(&set.tensors) {
            if name != src_name {
                return Err(Error::Checkpoint(format!(
                    "expected tensor {name:?}, found {src_name:?}"
                )));
            }
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.assign(src);
        }
        Ok(())
    }
}

/// Ordered, uniquely named tensors: the unit persisted in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl ParameterSet {
    pub fn new(tensors: Vec<(String, ArrayD<f64>)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (n, _) in &tensors {
            if !seen.insert(n.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate tensor name {n:?}")));
            }
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub(crate) fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
}

/// Static token embeddings (base pieces followed by any registered type
/// tokens) and learned absolute position embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub tokens: Array2<f64>,
    pub positions: Array2<f64>,
    /// Rows below this index belong to the sub-word vocabulary.
    pub base_vocab: usize,
}

impl EmbeddingTable {
    pub fn init(rng: &mut Rng, vocab_size: usize, max_positions: usize, dim: usize) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            tokens: normal_matrix(rng, vocab_size, dim, std),
            positions: normal_matrix(rng, max_positions, dim, 0.5 * std),
            base_vocab: vocab_size,
        }
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn rows(&self) -> usize {
        self.tokens.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl LayerParams {
    fn init(rng: &mut Rng, dim: usize, ffn: usize) -> Self {
        let sd = 1.0 / (dim as f64).sqrt();
        let sf = 1.0 / (ffn as f64).sqrt();
        Self {
            ln1_gamma: Array1::ones(dim),
            ln1_beta: Array1::zeros(dim),
            wq: normal_matrix(rng, dim, dim, sd),
            bq: Array1::zeros(dim),
            wk: normal_matrix(rng, dim, dim, sd),
            wv: normal_matrix(rng, dim, dim, sd),
            bv: Array1::zeros(dim),
            wo: normal_matrix(rng, dim, dim, sd),
            bo: Array1::zeros(dim),
            ln2_gamma: Array1::ones(dim),
            ln2_beta: Array1::zeros(dim),
            w_in: normal_matrix(rng, dim, ffn, sd),
            b_in: Array1::zeros(ffn),
            w_out: normal_matrix(rng, ffn, dim, sf),
            b_out: Array1::zeros(dim),
        }
    }

    fn named(&self) -> [(&'static str, ArrayViewD<'_, f64>); 15] {
        [
            ("ln1.gamma", self.ln1_gamma.view().into_dyn()),
            ("ln1.beta", self.ln1_beta.view().into_dyn()),
            ("attn.wq", self.wq.view().into_dyn()),
            ("attn.bq", self.bq.view().into_dyn()),
            ("attn.wk", self.wk.view().into_dyn()),
            ("attn.wv", self.wv.view().into_dyn()),
            ("attn.bv", self.bv.view().into_dyn()),
            ("attn.wo", self.wo.view().into_dyn()),
            ("attn.bo", self.bo.view().into_dyn()),
            ("ln2.gamma", self.ln2_gamma.view().into_dyn()),
            ("ln2.beta", self.ln2_beta.view().into_dyn()),
            ("ffn.w_in", self.w_in.view().into_dyn()),
            ("ffn.b_in", self.b_in.view().into_dyn()),
            ("ffn.w_out", self.w_out.view().into_dyn()),
            ("ffn.b_out", self.b_out.view().into_dyn()),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, ArrayViewMutD<'_, f64>); 15] {
        [
            ("ln1.gamma", self.ln1_gamma.view_mut().into_dyn()),
            ("ln1.beta", self.ln1_beta.view_mut().into_dyn()),
            ("attn.wq", self.wq.view_mut().into_dyn()),
            ("attn.bq", self.bq.view_mut().into_dyn()),
            ("attn.wk", self.wk.view_mut().into_dyn()),
            ("attn.wv", self.wv.view_mut().into_dyn()),
            ("attn.bv", self.bv.view_mut().into_dyn()),
            ("attn.wo", self.wo.view_mut().into_dyn()),
            ("attn.bo", self.bo.view_mut().into_dyn()),
            ("ln2.gamma", self.ln2_gamma.view_mut().into_dyn()),
            ("ln2.beta", self.ln2_beta.view_mut().into_dyn()),
            ("ffn.w_in", self.w_in.view_mut().into_dyn()),
            ("ffn.b_in", self.b_in.view_mut().into_dyn()),
            ("ffn.w_out", self.w_out.view_mut().into_dyn()),
            ("ffn.b_out", self.b_out.view_mut().into_dyn()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub embeddings: EmbeddingTable,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig, vocab_size: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let embeddings = EmbeddingTable::init(rng, vocab_size, config.max_positions, config.dim);
        let layers = (0..config.layers)
            .map(|_| LayerParams::init(rng, config.dim, config.ffn_dim))
            .collect();
        Ok(Self { embeddings, layers })
    }

    /// Shape consistency against `config`.
    pub fn check(&self, config: &EncoderConfig) -> Result<()> {
        config.validate()?;
        let d = config.dim;
        if self.embeddings.dim() != d
            || self.embeddings.positions.dim() != (config.max_positions, d)
        {
            return Err(Error::Config(
                "embedding shapes disagree with config".into(),
            ));
        }
        if self.layers.len() != config.layers {
            return Err(Error::Config(format!(
                "{} layers in params, {} in config",
                self.layers.len(),
                config.layers
            )));
        }
        for l in &self.layers {
            if l.wq.dim() != (d, d) || l.w_in.dim() != (d, config.ffn_dim) {
                return Err(Error::Config("layer shapes disagree with config".into()));
            }
        }
        Ok(())
    }
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            (
                "embeddings.tokens".to_string(),
                self.embeddings.tokens.view().into_dyn(),
            ),
            (
                "embeddings.positions".to_string(),
                self.embeddings.positions.view().into_dyn(),
            ),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(
                l.named()
                    .into_iter()
                    .map(|(n, t)| (format!("layer{i}.{n}"), t)),
            );
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            (
                "embeddings.tokens".to_string(),
                self.embeddings.tokens.view_mut().into_dyn(),
            ),
            (
                "embeddings.positions".to_string(),
                self.embeddings.positions.view_mut().into_dyn(),
            ),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(
                l.named_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("layer{i}.{n}"), t)),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn names_unique_and_shapes_consistent() {
        let cfg = EncoderConfig::default();
        let p = EncoderParams::init(&cfg, 50, &mut seeded(1, "t")).unwrap();
        p.check(&cfg).unwrap();
        let set = p.to_parameter_set();
        assert!(ParameterSet::new(set.tensors.clone()).is_ok());
        assert_eq!(set.tensors.len(), 2 + 15 * cfg.layers);
        let mut q = p.zeros_like();
        q.load_parameter_set(&set).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn add_scaled_accumulates() {
        let cfg = EncoderConfig {
            layers: 1,
            ..Default::default()
        };
        let p = EncoderParams::init(&cfg, 10, &mut seeded(2, "t")).unwrap();
        let mut acc = p.zeros_like();
        acc.add_scaled(&p, 2.0);
        acc.add_scaled(&p, -1.0);
        assert_eq!(acc, p);
    }
}
