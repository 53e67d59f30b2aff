//! Pre-layer-norm transformer stack with an explicit backward pass.

use ndarray::{Array2, Axis};

use super::attention::{attend, attend_backward, AttentionMode, Dropout, HeadCache};
use super::config::EncoderConfig;
use super::layout::InputLayout;
use super::ops::{
    affine, affine_backward, layer_norm, layer_norm_backward, layer_norm_infer, LayerNormCache,
};
use super::params::{EncoderParams, LayerParams};
use crate::error::{Error, Result};

/// Token ids, position ids and the segmentation of one sequence.
#[derive(Debug, Clone, Copy)]
pub struct EncoderInput<'a> {
    pub tokens: &'a [usize],
    pub positions: &'a [usize],
    pub layout: &'a InputLayout,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LayerNormCache,
    normed1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    heads: Vec<HeadCache>,
    ctx: Array2<f64>,
    ln2: LayerNormCache,
    normed2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    ffn_keep: Option<Array2<f64>>,
}

/// Hidden states after every layer plus what backward needs.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `states[0]` is the embedding sum; `states[i]` the output of layer `i`.
    pub states: Vec<Array2<f64>>,
    caches: Vec<LayerCache>,
    layout: InputLayout,
}

impl EncoderOutput {
    pub fn hidden(&self) -> &Array2<f64> {
        self.states.last().expect("at least the embedding state")
    }

    pub fn layout(&self) -> &InputLayout {
        &self.layout
    }

    /// Attention distribution of `head` in `layer` over all keys.
    pub fn attention_probs(&self, layer: usize, head: usize) -> Array2<f64> {
        self.caches[layer].heads[head].dense_probs(&self.layout)
    }
}

fn check_input(params: &EncoderParams, config: &EncoderConfig, input: &EncoderInput) -> Result<()> {
    params.check(config)?;
    let l = input.layout.total_len();
    if input.tokens.len() != l || input.positions.len() != l {
        return Err(Error::Config(format!(
            "layout covers {l} positions but got {} tokens and {} position ids",
            input.tokens.len(),
            input.positions.len()
        )));
    }
    let rows = params.embeddings.rows();
    if let Some(&t) = input.tokens.iter().find(|&&t| t >= rows) {
        return Err(Error::Index {
            index: t,
            size: rows,
        });
    }
    if let Some(&p) = input.positions.iter().find(|&&p| p >= config.max_positions) {
        return Err(Error::Capacity {
            needed: p + 1,
            available: config.max_positions,
        });
    }
    Ok(())
}

/// Runs the encoder. Dropout is applied only when `dropout` is given and the
/// configured rate is positive.
pub fn encode(
    params: &EncoderParams,
    config: &EncoderConfig,
    input: EncoderInput<'_>,
    mode: AttentionMode,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<EncoderOutput> {
    check_input(params, config, &input)?;
    if config.dropout == 0.0 {
        dropout = None;
    }
    let x = embed(params, config, &input);
    let mut states = Vec::with_capacity(params.layers.len() + 1);
    let mut caches = Vec::with_capacity(params.layers.len());
    states.push(x);
    for layer in &params.layers {
        let x = states.last().expect("state");
        let (out, cache) =
            layer_forward(layer, config, x, input.layout, mode, dropout.as_deref_mut());
        states.push(out);
        caches.push(cache);
    }
    Ok(EncoderOutput {
        states,
        caches,
        layout: input.layout.clone(),
    })
}

/// Final hidden states only, without dropout or anything kept for backward.
pub fn encode_hidden(
    params: &EncoderParams,
    config: &EncoderConfig,
    input: EncoderInput<'_>,
    mode: AttentionMode,
) -> Result<Array2<f64>> {
    check_input(params, config, &input)?;
    let mut x = embed(params, config, &input);
    for p in &params.layers {
        let normed = layer_norm_infer(x.view(), p.ln1_gamma.view(), p.ln1_beta.view());
        let q = affine(normed.view(), &p.wq, &p.bq);
        let k = normed.dot(&p.wk);
        let v = affine(normed.view(), &p.wv, &p.bv);
        let (ctx, _) = attend(&q, &k, &v, input.layout, mode, config.heads, None);
        x += &affine(ctx.view(), &p.wo, &p.bo);
        let normed = layer_norm_infer(x.view(), p.ln2_gamma.view(), p.ln2_beta.view());
        let mut act = affine(normed.view(), &p.w_in, &p.b_in);
        act.mapv_inplace(|u| config.activation.apply(u));
        x += &affine(act.view(), &p.w_out, &p.b_out);
    }
    Ok(x)
}

fn embed(params: &EncoderParams, config: &EncoderConfig, input: &EncoderInput<'_>) -> Array2<f64> {
    let mut x = Array2::zeros((input.tokens.len(), config.dim));
    for (i, (&t, &p)) in input.tokens.iter().zip(input.positions).enumerate() {
        let mut row = x.row_mut(i);
        row += &params.embeddings.tokens.row(t);
        row += &params.embeddings.positions.row(p);
    }
    x
}

fn layer_forward(
    p: &LayerParams,
    config: &EncoderConfig,
    x: &Array2<f64>,
    layout: &InputLayout,
    mode: AttentionMode,
    mut dropout: Option<&mut Dropout<'_>>,
) -> (Array2<f64>, LayerCache) {
    let (normed1, ln1) = layer_norm(x.view(), p.ln1_gamma.view(), p.ln1_beta.view());
    let q = affine(normed1.view(), &p.wq, &p.bq);
    let k = normed1.dot(&p.wk);
    let v = affine(normed1.view(), &p.wv, &p.bv);
    let (ctx, heads) = attend(
        &q,
        &k,
        &v,
        layout,
        mode,
        config.heads,
        dropout.as_deref_mut(),
    );
    let mid = x + &affine(ctx.view(), &p.wo, &p.bo);
    let (normed2, ln2) = layer_norm(mid.view(), p.ln2_gamma.view(), p.ln2_beta.view());
    let pre_act = affine(normed2.view(), &p.w_in, &p.b_in);
    let act = pre_act.mapv(|u| config.activation.apply(u));
    let mut ffn = affine(act.view(), &p.w_out, &p.b_out);
    let ffn_keep = dropout.map(|d| d.keep_for(ffn.dim()));
    if let Some(k) = &ffn_keep {
        ffn *= k;
    }
    let out = mid + ffn;
    (
        out,
        LayerCache {
            ln1,
            normed1,
            q,
            k,
            v,
            heads,
            ctx,
            ln2,
            normed2,
            pre_act,
            act,
            ffn_keep,
        },
    )
}

/// Accumulates parameter gradients for `d_hidden` (gradient w.r.t. the final
/// hidden states) into `grads`.
pub fn encode_backward(
    params: &EncoderParams,
    config: &EncoderConfig,
    input: EncoderInput<'_>,
    output: &EncoderOutput,
    d_hidden: Array2<f64>,
    grads: &mut EncoderParams,
) {
    let mut dx = d_hidden;
    for (i, layer) in params.layers.iter().enumerate().rev() {
        dx = layer_backward(
            layer,
            config,
            &output.caches[i],
            &output.layout,
            dx,
            &mut grads.layers[i],
        );
    }
    for (i, (&t, &p)) in input.tokens.iter().zip(input.positions).enumerate() {
        let g = dx.row(i);
        let mut tr = grads.embeddings.tokens.row_mut(t);
        tr += &g;
        let mut pr = grads.embeddings.positions.row_mut(p);
        pr += &g;
    }
}

fn layer_backward(
    p: &LayerParams,
    config: &EncoderConfig,
    c: &LayerCache,
    layout: &InputLayout,
    dout: Array2<f64>,
    g: &mut LayerParams,
) -> Array2<f64> {
    // FFN branch.
    let mut dffn = dout.clone();
    if let Some(k) = &c.ffn_keep {
        dffn *= k;
    }
    let dact = affine_backward(
        c.act.view(),
        &p.w_out,
        dffn.view(),
        &mut g.w_out,
        &mut g.b_out,
    );
    let mut dpre = dact;
    ndarray::Zip::from(&mut dpre)
        .and(&c.pre_act)
        .for_each(|d, &u| *d *= config.activation.derivative(u));
    let dnormed2 = affine_backward(
        c.normed2.view(),
        &p.w_in,
        dpre.view(),
        &mut g.w_in,
        &mut g.b_in,
    );
    let mut dmid = dout;
    dmid += &layer_norm_backward(
        dnormed2.view(),
        p.ln2_gamma.view(),
        &c.ln2,
        &mut g.ln2_gamma,
        &mut g.ln2_beta,
    );
    // Attention branch.
    let dctx = affine_backward(c.ctx.view(), &p.wo, dmid.view(), &mut g.wo, &mut g.bo);
    let (dq, dk, dv) = attend_backward(&c.q, &c.k, &c.v, layout, &c.heads, &dctx);
    let mut dnormed1 = affine_backward(c.normed1.view(), &p.wq, dq.view(), &mut g.wq, &mut g.bq);
    g.wk += &c.normed1.t().dot(&dk);
    dnormed1 += &dk.dot(&p.wk.t());
    dnormed1 += &affine_backward(c.normed1.view(), &p.wv, dv.view(), &mut g.wv, &mut g.bv);
    let mut dx = dmid;
    dx += &layer_norm_backward(
        dnormed1.view(),
        p.ln1_gamma.view(),
        &c.ln1,
        &mut g.ln1_gamma,
        &mut g.ln1_beta,
    );
    dx
}

/// Gathers rows `indices` of `hidden` into a new matrix.
pub fn gather_rows(hidden: &Array2<f64>, indices: &[usize]) -> Array2<f64> {
    hidden.select(Axis(0), indices)
}

/// Scatters `rows` back into a zero matrix shaped like `hidden`.
pub fn scatter_rows(shape: (usize, usize), indices: &[usize], rows: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(shape);
    for (r, &i) in indices.iter().enumerate() {
        let mut dst = out.row_mut(i);
        dst += &rows.row(r);
    }
    out
}
