//! Encoder plus a scoring head, with a joint backward pass.
//!
//! Every scorer in the pipeline is this shape: run the encoder, pick some
//! hidden rows (CLS, candidate representatives, mask positions), push them
//! through a head. The head is layer norm followed by a linear map to `out`
//! scores per row.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};

use crate::encoder::ops::{layer_norm, layer_norm_backward, LayerNormCache};
use crate::encoder::params::normal_matrix;
use crate::encoder::stack::{gather_rows, scatter_rows};
use crate::encoder::{
    encode, encode_backward, encode_hidden, AttentionMode, Dropout, EncoderConfig, EncoderInput,
    EncoderOutput, EncoderParams, Parameters,
};
use crate::error::Result;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub ln_gamma: Array1<f64>,
    pub ln_beta: Array1<f64>,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    ln: LayerNormCache,
    normed: Array2<f64>,
}

impl Head {
    pub fn init(rng: &mut Rng, dim: usize, out: usize) -> Self {
        let sd = 1.0 / (dim as f64).sqrt();
        Self {
            ln_gamma: Array1::ones(dim),
            ln_beta: Array1::zeros(dim),
            w: normal_matrix(rng, dim, out, sd),
            b: Array1::zeros(out),
        }
    }

    pub fn outputs(&self) -> usize {
        self.b.len()
    }

    /// Zeroes the output layer so every score is exactly 0.
    pub fn zero_output(&mut self) {
        self.w.fill(0.0);
        self.b.fill(0.0);
    }

    pub fn forward(&self, rows: &Array2<f64>) -> (Array2<f64>, HeadCache) {
        let (normed, ln) = layer_norm(rows.view(), self.ln_gamma.view(), self.ln_beta.view());
        let scores = normed.dot(&self.w) + &self.b;
        (scores, HeadCache { ln, normed })
    }

    /// Returns the gradient w.r.t. the input rows.
    pub fn backward(
        &self,
        cache: &HeadCache,
        dscores: &Array2<f64>,
        grads: &mut Head,
    ) -> Array2<f64> {
        grads.w += &cache.normed.t().dot(dscores);
        grads.b += &dscores.sum_axis(Axis(0));
        let dnormed = dscores.dot(&self.w.t());
        layer_norm_backward(
            dnormed.view(),
            self.ln_gamma.view(),
            &cache.ln,
            &mut grads.ln_gamma,
            &mut grads.ln_beta,
        )
    }
}

impl Parameters for Head {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("head.ln.gamma".to_string(), self.ln_gamma.view().into_dyn()),
            ("head.ln.beta".to_string(), self.ln_beta.view().into_dyn()),
            ("head.out.w".to_string(), self.w.view().into_dyn()),
            ("head.out.b".to_string(), self.b.view().into_dyn()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            (
                "head.ln.gamma".to_string(),
                self.ln_gamma.view_mut().into_dyn(),
            ),
            (
                "head.ln.beta".to_string(),
                self.ln_beta.view_mut().into_dyn(),
            ),
            ("head.out.w".to_string(), self.w.view_mut().into_dyn()),
            ("head.out.b".to_string(), self.b.view_mut().into_dyn()),
        ]
    }
}

/// Encoder weights plus one head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub head: Head,
}

impl Parameters for Model {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut t = self.encoder.tensors();
        t.extend(self.head.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }
}

/// What [`Model::backward`] needs from a forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub encoded: EncoderOutput,
    head: HeadCache,
    rows: Vec<usize>,
}

impl Model {
    /// Scores for `rows` of the final hidden states: one row of `out` scores each.
    pub fn forward(
        &self,
        config: &EncoderConfig,
        input: EncoderInput<'_>,
        mode: AttentionMode,
        rows: &[usize],
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let encoded = encode(&self.encoder, config, input, mode, dropout)?;
        let picked = gather_rows(encoded.hidden(), rows);
        let (scores, head) = self.head.forward(&picked);
        Ok((
            scores,
            ForwardCache {
                encoded,
                head,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Inference-only scores: same values as [`Model::forward`] without dropout.
    pub fn score(
        &self,
        config: &EncoderConfig,
        input: EncoderInput<'_>,
        mode: AttentionMode,
        rows: &[usize],
    ) -> Result<Array2<f64>> {
        let hidden = encode_hidden(&self.encoder, config, input, mode)?;
        Ok(self.head.forward(&gather_rows(&hidden, rows)).0)
    }

    /// Accumulates gradients of a loss with `dscores = dL/dscores` into `grads`.
    pub fn backward(
        &self,
        config: &EncoderConfig,
        input: EncoderInput<'_>,
        cache: &ForwardCache,
        dscores: &Array2<f64>,
        grads: &mut Model,
    ) {
        let drows = self.head.backward(&cache.head, dscores, &mut grads.head);
        let dh = scatter_rows(cache.encoded.hidden().dim(), &cache.rows, &drows);
        encode_backward(
            &self.encoder,
            config,
            input,
            &cache.encoded,
            dh,
            &mut grads.encoder,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::gradcheck::grad_check;
    use crate::encoder::InputLayout;
    use crate::rng::seeded;

    #[test]
    fn head_gradients() {
        let mut rng = seeded(5, "head");
        let head = Head::init(&mut rng, 6, 3);
        let x = normal_matrix(&mut rng, 4, 6, 1.0);
        let probe = normal_matrix(&mut rng, 4, 3, 1.0);
        let (_, cache) = head.forward(&x);
        let mut g = head.zeros_like();
        head.backward(&cache, &probe, &mut g);
        let rep = grad_check(
            &head,
            &g,
            |h: &Head| Ok((h.forward(&x).0 * &probe).sum()),
            1e-5,
            60,
            &mut rng,
        )
        .unwrap();
        assert!(rep.max_relative_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn zero_output_gives_zero_scores() {
        let mut rng = seeded(6, "zero");
        let config = EncoderConfig {
            dim: 8,
            heads: 2,
            layers: 1,
            ffn_dim: 16,
            max_positions: 16,
            ..Default::default()
        };
        let mut m = Model {
            encoder: EncoderParams::init(&config, 12, &mut rng).unwrap(),
            head: Head::init(&mut rng, 8, 5),
        };
        m.head.zero_output();
        let layout = InputLayout::sentence_only(4).unwrap();
        let input = EncoderInput {
            tokens: &[2, 7, 8, 3],
            positions: &[0, 1, 2, 3],
            layout: &layout,
        };
        let (s, _) = m
            .forward(
                &config,
                input,
                AttentionMode::Masked(Default::default()),
                &[0],
                None,
            )
            .unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }
}
