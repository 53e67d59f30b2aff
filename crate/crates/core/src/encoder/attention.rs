//! Multi-head attention over a sentence+candidates layout.
//!
//! Two realisations share projections and scaling:
//!
//! * [`AttentionMode::Masked`] materialises the full `L x L` score matrix and
//!   applies the quadrant mask;
//! * [`AttentionMode::StructuredNoC2c`] never builds the candidate-to-candidate
//!   block. Sentence rows attend over `[K_S; K_C]`; candidate rows are scored
//!   against `K_S` plus their own block (`M_C`), normalised jointly, and
//!   combined as `A_CS V_S + sum_j a_j v_j`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayViewMut2, CowArray, Ix2};
use rand::Rng as _;

use super::layout::{build_quadrant_mask, InputLayout, QuadrantFlags};
use super::ops::masked_softmax_in_place;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Full score matrix under a quadrant mask.
    Masked(QuadrantFlags),
    /// C2C-free attention without the cross-candidate score matrix.
    StructuredNoC2c,
}

/// Dropout state handed to a forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

impl Dropout<'_> {
    fn keep_matrix(&mut self, shape: (usize, usize)) -> Array2<f64> {
        let scale = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        Array2::from_shape_simple_fn(shape, || {
            if self.rng.gen::<f64>() < rate {
                0.0
            } else {
                scale
            }
        })
    }

    fn keep_tensor(&mut self, shape: (usize, usize, usize)) -> Array3<f64> {
        let scale = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        Array3::from_shape_simple_fn(shape, || {
            if self.rng.gen::<f64>() < rate {
                0.0
            } else {
                scale
            }
        })
    }

    pub(crate) fn keep_for(&mut self, shape: (usize, usize)) -> Array2<f64> {
        self.keep_matrix(shape)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct HeadCache {
    kind: HeadKind,
}

#[derive(Debug, Clone)]
enum HeadKind {
    Masked {
        probs: Array2<f64>,
        keep: Option<Array2<f64>>,
    },
    Structured {
        /// Sentence rows over all keys, `L_S x L`.
        sentence: Array2<f64>,
        sentence_keep: Option<Array2<f64>>,
        /// `A_CS`, `L_C x L_S`.
        cs: Array2<f64>,
        cs_keep: Option<Array2<f64>>,
        /// `A_CC`, `K x B x B`.
        cc: Array3<f64>,
        cc_keep: Option<Array3<f64>>,
    },
}

impl HeadCache {
    /// Attention distributions of this head as rows over the full key range
    /// (disallowed keys zero). Used by tests and diagnostics.
    pub(crate) fn dense_probs(&self, layout: &InputLayout) -> Array2<f64> {
        match &self.kind {
            HeadKind::Masked { probs, .. } => probs.clone(),
            HeadKind::Structured {
                sentence, cs, cc, ..
            } => {
                let ls = layout.sentence_len();
                let b = layout.block_size();
                let l = layout.total_len();
                let mut out = Array2::zeros((l, l));
                out.slice_mut(s![..ls, ..]).assign(sentence);
                out.slice_mut(s![ls.., ..ls]).assign(cs);
                for j in 0..layout.num_candidates() {
                    for bi in 0..b {
                        for ci in 0..b {
                            out[[ls + j * b + bi, ls + j * b + ci]] = cc[[j, bi, ci]];
                        }
                    }
                }
                out
            }
        }
    }
}

fn apply_keep<'a>(p: &'a Array2<f64>, keep: &Option<Array2<f64>>) -> CowArray<'a, f64, Ix2> {
    match keep {
        Some(k) => CowArray::from(p * k),
        None => CowArray::from(p.view()),
    }
}

/// Runs all heads; returns the concatenated context (`L x D`) and caches.
pub(crate) fn attend(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    layout: &InputLayout,
    mode: AttentionMode,
    heads: usize,
    mut dropout: Option<&mut Dropout<'_>>,
) -> (Array2<f64>, Vec<HeadCache>) {
    let (l, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros((l, d));
    let allowed = match mode {
        AttentionMode::Masked(flags) => {
            let mut m = build_quadrant_mask(layout, flags);
            for row in m.rows_mut() {
                for (kk, a) in row.into_iter().enumerate() {
                    *a = *a && !layout.is_padding(kk);
                }
            }
            Some(m)
        }
        AttentionMode::StructuredNoC2c => None,
    };
    let mut caches = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(s![.., cols.clone()]);
        let kh = k.slice(s![.., cols.clone()]);
        let vh = v.slice(s![.., cols.clone()]);
        let out = ctx.slice_mut(s![.., cols]);
        let cache = match &allowed {
            Some(mask) => masked_head(qh, kh, vh, mask, scale, out, dropout.as_deref_mut()),
            None => structured_head(qh, kh, vh, layout, scale, out, dropout.as_deref_mut()),
        };
        caches.push(cache);
    }
    (ctx, caches)
}

fn masked_head(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    allowed: &Array2<bool>,
    scale: f64,
    mut out: ArrayViewMut2<f64>,
    dropout: Option<&mut Dropout<'_>>,
) -> HeadCache {
    let mut probs = q.dot(&k.t()) * scale;
    for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
        let mask = allowed.row(i);
        masked_softmax_in_place(row.as_slice_mut().expect("contiguous row"), |j| mask[j]);
    }
    let keep = dropout.map(|d| d.keep_matrix(probs.dim()));
    general_mat_mul(1.0, &apply_keep(&probs, &keep), &v, 0.0, &mut out);
    HeadCache {
        kind: HeadKind::Masked { probs, keep },
    }
}

fn structured_head(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    layout: &InputLayout,
    scale: f64,
    mut out: ArrayViewMut2<f64>,
    mut dropout: Option<&mut Dropout<'_>>,
) -> HeadCache {
    let ls = layout.sentence_len();
    let kc_count = layout.num_candidates();
    let b = layout.block_size();
    let pad = layout.key_padding();

    // Sentence queries over all keys.
    let mut sentence = q.slice(s![..ls, ..]).dot(&k.t()) * scale;
    for mut row in sentence.rows_mut() {
        masked_softmax_in_place(row.as_slice_mut().expect("contiguous row"), |j| !pad[j]);
    }
    let sentence_keep = dropout
        .as_deref_mut()
        .map(|d| d.keep_matrix(sentence.dim()));
    general_mat_mul(
        1.0,
        &apply_keep(&sentence, &sentence_keep),
        &v,
        0.0,
        &mut out.slice_mut(s![..ls, ..]),
    );

    if kc_count == 0 {
        return HeadCache {
            kind: HeadKind::Structured {
                sentence,
                sentence_keep,
                cs: Array2::zeros((0, ls)),
                cs_keep: None,
                cc: Array3::zeros((0, b, b)),
                cc_keep: None,
            },
        };
    }

    let qc = q.slice(s![ls.., ..]);
    let ks = k.slice(s![..ls, ..]);
    let kc = k.slice(s![ls.., ..]);
    let vs = v.slice(s![..ls, ..]);
    let vc = v.slice(s![ls.., ..]);

    // Candidate-to-sentence scores and the intra-block scores M_C.
    let mut cs = qc.dot(&ks.t()) * scale;
    let mut cc = Array3::zeros((kc_count, b, b));
    {
        let cc_flat = cc.as_slice_mut().expect("standard layout");
        for r in 0..kc_count * b {
            let block = r - r % b;
            let qrow = qc.row(r);
            let qrow = qrow.as_slice().expect("contiguous row");
            for ci in 0..b {
                let krow = kc.row(block + ci);
                let dot: f64 = qrow
                    .iter()
                    .zip(krow.as_slice().expect("contiguous row"))
                    .map(|(a, b)| a * b)
                    .sum();
                cc_flat[r * b + ci] = dot * scale;
            }
        }
    }

    // Joint softmax over [sentence keys; own block keys].
    {
        let cs_flat = cs.as_slice_mut().expect("standard layout");
        let cc_flat = cc.as_slice_mut().expect("standard layout");
        for r in 0..kc_count * b {
            let block = ls + r - r % b;
            joint_softmax(
                &mut cs_flat[r * ls..(r + 1) * ls],
                &pad[..ls],
                &mut cc_flat[r * b..(r + 1) * b],
                &pad[block..block + b],
            );
        }
    }
    let cs_keep = dropout.as_deref_mut().map(|d| d.keep_matrix(cs.dim()));
    let cc_keep = dropout.as_deref_mut().map(|d| d.keep_tensor(cc.dim()));

    let mut oc = out.slice_mut(s![ls.., ..]);
    general_mat_mul(1.0, &apply_keep(&cs, &cs_keep), &vs, 0.0, &mut oc);
    for j in 0..kc_count {
        for bi in 0..b {
            let r = j * b + bi;
            let mut orow = oc.row_mut(r);
            for ci in 0..b {
                let mut a = cc[[j, bi, ci]];
                if let Some(kk) = &cc_keep {
                    a *= kk[[j, bi, ci]];
                }
                if a != 0.0 {
                    orow.scaled_add(a, &vc.row(j * b + ci));
                }
            }
        }
    }

    HeadCache {
        kind: HeadKind::Structured {
            sentence,
            sentence_keep,
            cs,
            cs_keep,
            cc,
            cc_keep,
        },
    }
}

/// Softmax over the concatenation of `a` and `b`, skipping padded keys;
/// all zeros when nothing is allowed.
fn joint_softmax(a: &mut [f64], a_pad: &[bool], b: &mut [f64], b_pad: &[bool]) {
    let mut max = f64::NEG_INFINITY;
    for (v, &p) in a.iter().zip(a_pad).chain(b.iter().zip(b_pad)) {
        if !p && *v > max {
            max = *v;
        }
    }
    if max == f64::NEG_INFINITY {
        a.fill(0.0);
        b.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for (v, &p) in a.iter_mut().zip(a_pad).chain(b.iter_mut().zip(b_pad)) {
        if p {
            *v = 0.0;
        } else {
            *v = (*v - max).exp();
            sum += *v;
        }
    }
    a.iter_mut().chain(b.iter_mut()).for_each(|v| *v /= sum);
}

/// Softmax backward for one row set: `dS = P * (dP - rowsum(dP * P))`.
fn softmax_backward_rows(p: &Array2<f64>, dp: &mut Array2<f64>) {
    for (prow, mut drow) in p.rows().into_iter().zip(dp.rows_mut()) {
        let r = prow.dot(&drow);
        for (d, &pv) in drow.iter_mut().zip(prow.iter()) {
            *d = pv * (*d - r);
        }
    }
}

/// Backward through all heads; returns `(dq, dk, dv)`.
pub(crate) fn attend_backward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    layout: &InputLayout,
    caches: &[HeadCache],
    dctx: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (l, d) = q.dim();
    let heads = caches.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros((l, d));
    let mut dk = Array2::zeros((l, d));
    let mut dv = Array2::zeros((l, d));
    for (h, cache) in caches.iter().enumerate() {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(s![.., cols.clone()]);
        let kh = k.slice(s![.., cols.clone()]);
        let vh = v.slice(s![.., cols.clone()]);
        let dout = dctx.slice(s![.., cols.clone()]);
        let mut dqh = dq.slice_mut(s![.., cols.clone()]);
        let mut dkh = dk.slice_mut(s![.., cols.clone()]);
        let mut dvh = dv.slice_mut(s![.., cols]);
        match &cache.kind {
            HeadKind::Masked { probs, keep } => {
                let used = apply_keep(probs, keep);
                dvh += &used.t().dot(&dout);
                let mut dp = dout.dot(&vh.t());
                if let Some(kk) = keep {
                    dp *= kk;
                }
                softmax_backward_rows(probs, &mut dp);
                dp *= scale;
                dqh += &dp.dot(&kh);
                dkh += &dp.t().dot(&qh);
            }
            HeadKind::Structured {
                sentence,
                sentence_keep,
                cs,
                cs_keep,
                cc,
                cc_keep,
            } => {
                let ls = layout.sentence_len();
                let b = layout.block_size();
                let kc_count = layout.num_candidates();

                // Sentence rows.
                let dos = dout.slice(s![..ls, ..]);
                let used = apply_keep(sentence, sentence_keep);
                dvh += &used.t().dot(&dos);
                let mut dp = dos.dot(&vh.t());
                if let Some(kk) = sentence_keep {
                    dp *= kk;
                }
                softmax_backward_rows(sentence, &mut dp);
                dp *= scale;
                dqh.slice_mut(s![..ls, ..]).scaled_add(1.0, &dp.dot(&kh));
                dkh.scaled_add(1.0, &dp.t().dot(&qh.slice(s![..ls, ..])));

                if kc_count == 0 {
                    continue;
                }
                let doc = dout.slice(s![ls.., ..]);
                let qc = qh.slice(s![ls.., ..]);
                let ks = kh.slice(s![..ls, ..]);
                let kc = kh.slice(s![ls.., ..]);
                let vs = vh.slice(s![..ls, ..]);
                let vc = vh.slice(s![ls.., ..]);

                // O_C = A_CS V_S + sum_c A_CC v_c
                let used_cs = apply_keep(cs, cs_keep);
                dvh.slice_mut(s![..ls, ..])
                    .scaled_add(1.0, &used_cs.t().dot(&doc));
                let mut dcs = doc.dot(&vs.t());
                if let Some(kk) = cs_keep {
                    dcs *= kk;
                }
                let mut dcc = Array3::zeros(cc.dim());
                {
                    let mut dvc = dvh.slice_mut(s![ls.., ..]);
                    for j in 0..kc_count {
                        for bi in 0..b {
                            let r = j * b + bi;
                            let drow = doc.row(r);
                            for ci in 0..b {
                                let keepv = cc_keep.as_ref().map_or(1.0, |kk| kk[[j, bi, ci]]);
                                let a = cc[[j, bi, ci]] * keepv;
                                dcc[[j, bi, ci]] = drow.dot(&vc.row(j * b + ci)) * keepv;
                                if a != 0.0 {
                                    dvc.row_mut(j * b + ci).scaled_add(a, &drow);
                                }
                            }
                        }
                    }
                }
                // Joint softmax backward.
                for j in 0..kc_count {
                    for bi in 0..b {
                        let r = j * b + bi;
                        let mut dot = cs.row(r).dot(&dcs.row(r));
                        for ci in 0..b {
                            dot += cc[[j, bi, ci]] * dcc[[j, bi, ci]];
                        }
                        for (dv_, &pv) in dcs.row_mut(r).iter_mut().zip(cs.row(r).iter()) {
                            *dv_ = pv * (*dv_ - dot) * scale;
                        }
                        for ci in 0..b {
                            let p = cc[[j, bi, ci]];
                            dcc[[j, bi, ci]] = p * (dcc[[j, bi, ci]] - dot) * scale;
                        }
                    }
                }
                dqh.slice_mut(s![ls.., ..]).scaled_add(1.0, &dcs.dot(&ks));
                dkh.slice_mut(s![..ls, ..])
                    .scaled_add(1.0, &dcs.t().dot(&qc));
                let mut dqc = dqh.slice_mut(s![ls.., ..]);
                for j in 0..kc_count {
                    for bi in 0..b {
                        let r = j * b + bi;
                        for ci in 0..b {
                            let g = dcc[[j, bi, ci]];
                            if g != 0.0 {
                                let c = j * b + ci;
                                dqc.row_mut(r).scaled_add(g, &kc.row(c));
                            }
                        }
                    }
                }
                let mut dkc = dkh.slice_mut(s![ls.., ..]);
                for j in 0..kc_count {
                    for bi in 0..b {
                        let r = j * b + bi;
                        for ci in 0..b {
                            let g = dcc[[j, bi, ci]];
                            if g != 0.0 {
                                dkc.row_mut(j * b + ci).scaled_add(g, &qc.row(r));
                            }
                        }
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
