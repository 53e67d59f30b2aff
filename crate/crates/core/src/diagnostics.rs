//! Self-checks run by the `equivalence` and `gradcheck` stages.

use std::time::Instant;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::TypeId;
use crate::encoder::gradcheck::grad_check;
use crate::encoder::{
    encode, encode_backward, AttentionMode, EncoderConfig, EncoderInput, EncoderParams,
    InputLayout, Parameters, QuadrantFlags,
};
use crate::error::Result;
use crate::filter::{Filter, FilterConfig, FilterItem, FilterVariant};
use crate::input::SentencePieces;
use crate::loss::{bce, margin_loss, mlc_loss_and_grad};
use crate::model::Model;
use crate::recall::init_mlc;
use crate::rng::{seeded, Rng};

/// One randomly drawn encoder configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquivalenceCase {
    pub seed: u64,
    pub sentence_len: usize,
    pub candidates: usize,
    pub block: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub padded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceResult {
    pub case: EquivalenceCase,
    pub max_value_diff: f64,
    pub max_grad_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub tolerance: f64,
    pub cases: Vec<EquivalenceResult>,
    pub max_value_diff: f64,
    pub max_grad_diff: f64,
    pub failures: usize,
    pub seconds: f64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Draws `count` cases with `L_S <= 16`, `K <= 8`, `B in {1, 4}`,
/// `D in {8, 16}`, `H in {1, 2}` and up to two layers.
pub fn equivalence_cases(count: usize, seed: u64) -> Vec<EquivalenceCase> {
    let mut rng = seeded(seed, "equivalence-cases");
    (0..count)
        .map(|i| {
            let block = if rng.gen_bool(0.5) { 1 } else { 4 };
            EquivalenceCase {
                seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                sentence_len: rng.gen_range(1..=16),
                candidates: rng.gen_range(1..=8),
                block,
                dim: if rng.gen_bool(0.5) { 8 } else { 16 },
                heads: rng.gen_range(1..=2),
                layers: rng.gen_range(1..=2),
                padded: block > 1 && rng.gen_bool(0.5),
            }
        })
        .collect()
}

fn max_abs_diff<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>) -> f64 {
    a.zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Structured attention against the masked full attention with C2C off:
/// final hidden states and the gradients of a random linear probe.
pub fn run_equivalence_case(case: &EquivalenceCase) -> Result<EquivalenceResult> {
    let mut rng = seeded(case.seed, "equivalence-case");
    let config = EncoderConfig {
        dim: case.dim,
        heads: case.heads,
        layers: case.layers,
        ffn_dim: 2 * case.dim,
        max_positions: 64,
        dropout: 0.0,
        block_size: case.block,
        ..Default::default()
    };
    let vocab = 40;
    let params = EncoderParams::init(&config, vocab, &mut rng)?;
    let mut layout = InputLayout::new(case.sentence_len, case.candidates, case.block)?;
    let l = layout.total_len();
    let mut tokens: Vec<usize> = (0..l).map(|_| rng.gen_range(1..vocab)).collect();
    if case.padded {
        let mut pad = vec![false; l];
        for j in 0..case.candidates {
            let used = rng.gen_range(1..=case.block);
            for o in used..case.block {
                let p = case.sentence_len + j * case.block + o;
                pad[p] = true;
                tokens[p] = 0;
            }
        }
        layout = layout.with_padding(pad)?;
    }
    let positions = layout.position_ids(rng.gen_bool(0.5));
    let probe = Array2::from_shape_simple_fn((l, case.dim), || rng.gen_range(-1.0..1.0));
    let input = EncoderInput {
        tokens: &tokens,
        positions: &positions,
        layout: &layout,
    };
    let run = |mode: AttentionMode| -> Result<(Array2<f64>, EncoderParams)> {
        let out = encode(&params, &config, input, mode, None)?;
        let mut g = params.zeros_like();
        encode_backward(&params, &config, input, &out, probe.clone(), &mut g);
        Ok((out.hidden().clone(), g))
    };
    let (h_full, g_full) = run(AttentionMode::Masked(QuadrantFlags::no_c2c()))?;
    let (h_fast, g_fast) = run(AttentionMode::StructuredNoC2c)?;
    let grad_diff = g_full
        .tensors()
        .iter()
        .zip(g_fast.tensors().iter())
        .map(|((_, a), (_, b))| max_abs_diff(a.iter(), b.iter()))
        .fold(0.0, f64::max);
    Ok(EquivalenceResult {
        case: *case,
        max_value_diff: max_abs_diff(h_full.iter(), h_fast.iter()),
        max_grad_diff: grad_diff,
    })
}

pub fn run_equivalence_suite(count: usize, seed: u64, tolerance: f64) -> Result<EquivalenceReport> {
    let t = Instant::now();
    let cases = equivalence_cases(count, seed)
        .iter()
        .map(run_equivalence_case)
        .collect::<Result<Vec<_>>>()?;
    let failures = cases
        .iter()
        .filter(|c| !(c.max_value_diff <= tolerance && c.max_grad_diff <= tolerance))
        .count();
    Ok(EquivalenceReport {
        tolerance,
        max_value_diff: cases.iter().map(|c| c.max_value_diff).fold(0.0, f64::max),
        max_grad_diff: cases.iter().map(|c| c.max_grad_diff).fold(0.0, f64::max),
        cases,
        failures,
        seconds: t.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCheck {
    pub head: String,
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub worst: Option<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub heads: Vec<HeadCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.heads
            .iter()
            .all(|h| h.max_relative_error <= self.tolerance)
    }
}

fn tiny_encoder(layers: usize) -> EncoderConfig {
    EncoderConfig {
        dim: 8,
        heads: 2,
        layers,
        ffn_dim: 16,
        max_positions: 48,
        dropout: 0.0,
        ..Default::default()
    }
}

fn random_pieces(rng: &mut Rng, lo: usize, hi: usize) -> SentencePieces {
    let mut span = |n: usize| (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>();
    SentencePieces {
        left: span(3),
        mention: span(2),
        right: span(2),
    }
}

fn check<F>(
    head: &str,
    model: &Model,
    grads: &Model,
    loss: F,
    samples: usize,
    rng: &mut Rng,
) -> Result<HeadCheck>
where
    F: Fn(&Model) -> Result<f64>,
{
    let r = grad_check(model, grads, loss, 1e-5, samples, rng)?;
    Ok(HeadCheck {
        head: head.to_string(),
        coordinates: r.coordinates,
        max_relative_error: r.max_relative_error,
        max_absolute_error: r.max_absolute_error,
        worst: r.worst,
    })
}

/// Finite-difference checks of a one-layer encoder under each scoring head:
/// the multi-label classifier, the cross-encoder margin loss, and the
/// multi-candidate loss with single-token and block candidates.
pub fn run_gradcheck_suite(samples: usize, seed: u64, tolerance: f64) -> Result<GradcheckReport> {
    let mut rng = seeded(seed, "gradcheck");
    let vocab = 40;
    let num_types = 6;
    let enc = tiny_encoder(1);
    let type_pieces: Vec<Vec<usize>> = (0..num_types)
        .map(|t| (0..1 + t % 3).map(|o| 5 + (3 * t + o) % 20).collect())
        .collect();
    let pieces = random_pieces(&mut rng, 25, vocab);
    let mut heads = Vec::new();

    // Multi-label classifier over every type.
    let mlc = init_mlc(&enc, vocab, num_types, seed)?;
    let gold: std::collections::BTreeSet<TypeId> = [1, 4].into_iter().collect();
    let sentence = crate::input::assemble_sentence(&pieces, enc.max_positions)?;
    let mlc_loss = |m: &Model| -> Result<(f64, Array2<f64>, crate::model::ForwardCache)> {
        let (s, cache) = m.forward(
            &enc,
            sentence.input(),
            AttentionMode::Masked(QuadrantFlags::all()),
            &[0],
            None,
        )?;
        let (loss, g) = mlc_loss_and_grad(s.row(0).as_slice().expect("row"), &gold, 4.0)?;
        Ok((
            loss,
            Array2::from_shape_vec((1, g.len()), g).expect("row"),
            cache,
        ))
    };
    let (_, ds, cache) = mlc_loss(&mlc)?;
    let mut g = mlc.zeros_like();
    mlc.backward(&enc, sentence.input(), &cache, &ds, &mut g);
    heads.push(check(
        "mlc",
        &mlc,
        &g,
        |m| Ok(mlc_loss(m)?.0),
        samples,
        &mut rng,
    )?);

    let candidates: Vec<TypeId> = vec![3, 0, 5, 2];
    let item = FilterItem {
        id: "g".into(),
        pieces: pieces.clone(),
        candidates: candidates.clone(),
        gold: [0usize, 2].into_iter().collect(),
    };

    // Cross-encoder margin loss on one positive and one negative pair.
    let (ce, ce_model) = Filter::init(
        FilterConfig {
            variant: FilterVariant::VanillaCe,
            margin: 0.9,
            ..Default::default()
        },
        enc.clone(),
        vocab,
        type_pieces.clone(),
        seed,
    )?;
    let ce_loss = |m: &Model| -> Result<f64> {
        let sp = ce.ce_forward(m, &item.pieces, 0)?;
        let sn = ce.ce_forward(m, &item.pieces, 3)?;
        Ok(margin_loss(sp, sn, ce.config.margin).0)
    };
    let pair_grads = {
        let mut g = ce_model.zeros_like();
        let sp = ce.ce_forward(&ce_model, &item.pieces, 0)?;
        let sn = ce.ce_forward(&ce_model, &item.pieces, 3)?;
        let (_, dp, dn) = margin_loss(sp, sn, ce.config.margin);
        for (t, d) in [(0, dp), (3, dn)] {
            let a = crate::input::assemble_pair(&item.pieces, &type_pieces[t], enc.max_positions)?;
            let (_, cache) = ce_model.forward(
                &enc,
                a.input(),
                AttentionMode::Masked(QuadrantFlags::all()),
                &[0],
                None,
            )?;
            ce_model.backward(
                &enc,
                a.input(),
                &cache,
                &Array2::from_elem((1, 1), d),
                &mut g,
            );
        }
        g
    };
    heads.push(check(
        "ce",
        &ce_model,
        &pair_grads,
        ce_loss,
        samples,
        &mut rng,
    )?);

    // Multi-candidate loss, single-token and block candidates.
    for (name, variant) in [
        ("mcce-s", FilterVariant::McceS),
        ("mcce-b", FilterVariant::McceB),
    ] {
        let (f, model) = Filter::init(
            FilterConfig {
                variant,
                block_size: 2,
                ..Default::default()
            },
            enc.clone(),
            vocab,
            type_pieces.clone(),
            seed,
        )?;
        let a = f.assemble(&item.pieces, &candidates)?;
        let labels: Vec<bool> = candidates.iter().map(|t| item.gold.contains(t)).collect();
        let reps = a.layout.representatives();
        let loss = |m: &Model| -> Result<f64> {
            let (s, _) = m.forward(&enc, a.input(), f.config.mode(), &reps, None)?;
            Ok(bce(&s.column(0).to_vec(), &labels, 1.0).0)
        };
        let (s, cache) = model.forward(&enc, a.input(), f.config.mode(), &reps, None)?;
        let (_, gs) = bce(&s.column(0).to_vec(), &labels, 1.0);
        let mut g = model.zeros_like();
        model.backward(
            &enc,
            a.input(),
            &cache,
            &Array2::from_shape_vec((gs.len(), 1), gs).expect("column"),
            &mut g,
        );
        heads.push(check(name, &model, &g, loss, samples, &mut rng)?);
    }
    Ok(GradcheckReport { tolerance, heads })
}
