use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng as _;

use refilter::encoder::gradcheck::grad_check;
use refilter::encoder::{
    encode, encode_backward, forward_full, forward_structured_no_c2c, AttentionMode, Dropout,
    EncoderConfig, EncoderInput, EncoderParams, InputLayout, Parameters, QuadrantFlags,
};
use refilter::rng::{seeded, Rng};

struct Case {
    config: EncoderConfig,
    params: EncoderParams,
    tokens: Vec<usize>,
    positions: Vec<usize>,
    layout: InputLayout,
    probe: Array2<f64>,
}

impl Case {
    fn input(&self) -> EncoderInput<'_> {
        EncoderInput {
            tokens: &self.tokens,
            positions: &self.positions,
            layout: &self.layout,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn case(
    seed: u64,
    ls: usize,
    k: usize,
    b: usize,
    dim: usize,
    heads: usize,
    layers: usize,
    pad_blocks: bool,
) -> Case {
    let mut rng = seeded(seed, "encoder-case");
    let config = EncoderConfig {
        dim,
        heads,
        layers,
        ffn_dim: 2 * dim,
        max_positions: 64,
        dropout: 0.0,
        block_size: b,
        ..Default::default()
    };
    let vocab = 30;
    let params = EncoderParams::init(&config, vocab, &mut rng).unwrap();
    let mut layout = InputLayout::new(ls, k, b).unwrap();
    let l = layout.total_len();
    let mut tokens: Vec<usize> = (0..l).map(|_| rng.gen_range(1..vocab)).collect();
    if pad_blocks && b > 1 {
        let mut pad = vec![false; l];
        for j in 0..k {
            let used = rng.gen_range(1..=b);
            for o in used..b {
                let p = ls + j * b + o;
                pad[p] = true;
                tokens[p] = 0;
            }
        }
        layout = layout.with_padding(pad).unwrap();
    }
    let positions = layout.position_ids(false);
    let probe = Array2::from_shape_simple_fn((l, dim), || rng.gen_range(-1.0..1.0));
    Case {
        config,
        params,
        tokens,
        positions,
        layout,
        probe,
    }
}

fn probe_loss(c: &Case, params: &EncoderParams, mode: AttentionMode) -> f64 {
    let out = encode(params, &c.config, c.input(), mode, None).unwrap();
    (out.hidden() * &c.probe).sum()
}

fn probe_grads(c: &Case, mode: AttentionMode) -> EncoderParams {
    let out = encode(&c.params, &c.config, c.input(), mode, None).unwrap();
    let mut g = c.params.zeros_like();
    encode_backward(
        &c.params,
        &c.config,
        c.input(),
        &out,
        c.probe.clone(),
        &mut g,
    );
    g
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn max_param_diff(a: &EncoderParams, b: &EncoderParams) -> f64 {
    a.tensors()
        .iter()
        .zip(b.tensors().iter())
        .flat_map(|((_, x), (_, y))| {
            x.iter()
                .zip(y.iter())
                .map(|(p, q)| (p - q).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

#[test]
fn structured_matches_masked_reference_instance() {
    let c = case(1, 7, 5, 1, 16, 2, 2, false);
    let full = forward_full(&c.params, &c.config, c.input(), QuadrantFlags::no_c2c()).unwrap();
    let fast = forward_structured_no_c2c(&c.params, &c.config, c.input()).unwrap();
    assert!(max_abs_diff(full.hidden(), fast.hidden()) <= 1e-6);
    for (a, b) in full.states.iter().zip(&fast.states) {
        assert!(max_abs_diff(a, b) <= 1e-6);
    }
}

#[test]
fn structured_matches_masked_for_blocks() {
    let c = case(2, 6, 4, 3, 16, 2, 2, true);
    let full = forward_full(&c.params, &c.config, c.input(), QuadrantFlags::no_c2c()).unwrap();
    let fast = forward_structured_no_c2c(&c.params, &c.config, c.input()).unwrap();
    assert!(max_abs_diff(full.hidden(), fast.hidden()) <= 1e-6);
}

#[test]
fn single_candidate_structured_equals_all_flags() {
    for b in [1, 3] {
        let c = case(3, 5, 1, b, 8, 1, 2, false);
        let full = forward_full(&c.params, &c.config, c.input(), QuadrantFlags::all()).unwrap();
        let fast = forward_structured_no_c2c(&c.params, &c.config, c.input()).unwrap();
        assert!(max_abs_diff(full.hidden(), fast.hidden()) <= 1e-12);
    }
}

#[test]
fn zero_layers_is_embedding_sum() {
    let c = case(4, 4, 2, 1, 8, 2, 0, false);
    let out = forward_full(&c.params, &c.config, c.input(), QuadrantFlags::all()).unwrap();
    for (i, (&t, &p)) in c.tokens.iter().zip(&c.positions).enumerate() {
        let expect = &c.params.embeddings.tokens.row(t) + &c.params.embeddings.positions.row(p);
        assert_eq!(out.hidden().row(i), expect);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let c = case(5, 6, 4, 2, 8, 2, 1, true);
    for mode in [
        AttentionMode::Masked(QuadrantFlags::all()),
        AttentionMode::Masked(QuadrantFlags::no_c2c()),
        AttentionMode::StructuredNoC2c,
    ] {
        let out = encode(&c.params, &c.config, c.input(), mode, None).unwrap();
        for h in 0..2 {
            let p = out.attention_probs(0, h);
            for (q, row) in p.rows().into_iter().enumerate() {
                assert!((row.sum() - 1.0).abs() <= 1e-9, "{mode:?} row {q}");
                for (k, &v) in row.iter().enumerate() {
                    if c.layout.is_padding(k) {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn fully_masked_rows_give_zero_attention_output() {
    // c2s off and c2c off: candidates only see their own slot; with s2s off
    // sentence rows only see candidates. Turning every flag off leaves
    // sentence rows with no key at all.
    let c = case(6, 4, 3, 1, 8, 2, 1, false);
    let none = QuadrantFlags {
        s2s: false,
        s2c: false,
        c2s: false,
        c2c: false,
    };
    let out = forward_full(&c.params, &c.config, c.input(), none).unwrap();
    let p = out.attention_probs(0, 0);
    for q in 0..4 {
        assert!(p.row(q).iter().all(|&v| v == 0.0));
    }
    assert!(out.hidden().iter().all(|v| v.is_finite()));
}

#[test]
fn all_flags_match_unmasked_attention() {
    let c = case(7, 5, 3, 2, 8, 2, 2, false);
    let a = forward_full(&c.params, &c.config, c.input(), QuadrantFlags::all()).unwrap();
    let b = encode(
        &c.params,
        &c.config,
        c.input(),
        AttentionMode::Masked(QuadrantFlags::all()),
        None,
    )
    .unwrap();
    assert_eq!(a.hidden(), b.hidden());
}

#[test]
fn candidates_ignore_sentence_without_c2s() {
    let flags = QuadrantFlags {
        c2s: false,
        ..QuadrantFlags::all()
    };
    // single layer: holds with s2c on
    let c = case(8, 6, 3, 1, 8, 2, 1, false);
    let base = forward_full(&c.params, &c.config, c.input(), flags).unwrap();
    let mut tokens = c.tokens.clone();
    tokens[2] = (tokens[2] % 29) + 1;
    let input = EncoderInput {
        tokens: &tokens,
        ..c.input()
    };
    let moved = forward_full(&c.params, &c.config, input, flags).unwrap();
    assert!(max_abs_diff(base.hidden(), moved.hidden()) > 0.0);
    for r in 6..9 {
        assert_eq!(base.hidden().row(r), moved.hidden().row(r));
    }
    // two layers: needs s2c off as well
    let flags2 = QuadrantFlags {
        c2s: false,
        s2c: false,
        ..QuadrantFlags::all()
    };
    let c = case(9, 6, 3, 1, 8, 2, 2, false);
    let base = forward_full(&c.params, &c.config, c.input(), flags2).unwrap();
    let mut tokens = c.tokens.clone();
    tokens[2] = (tokens[2] % 29) + 1;
    let input = EncoderInput {
        tokens: &tokens,
        ..c.input()
    };
    let moved = forward_full(&c.params, &c.config, input, flags2).unwrap();
    for r in 6..9 {
        assert_eq!(base.hidden().row(r), moved.hidden().row(r));
    }
}

#[test]
fn deterministic_with_and_without_dropout_seed() {
    let mut c = case(10, 5, 4, 1, 8, 2, 2, false);
    let a = forward_structured_no_c2c(&c.params, &c.config, c.input()).unwrap();
    let b = forward_structured_no_c2c(&c.params, &c.config, c.input()).unwrap();
    assert_eq!(a.hidden(), b.hidden());
    c.config.dropout = 0.2;
    let run = |seed: u64| {
        let mut rng: Rng = seeded(seed, "dropout");
        let mut d = Dropout {
            rate: 0.2,
            rng: &mut rng,
        };
        encode(
            &c.params,
            &c.config,
            c.input(),
            AttentionMode::Masked(QuadrantFlags::all()),
            Some(&mut d),
        )
        .unwrap()
        .hidden()
        .clone()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn gradients_match_finite_differences() {
    for (mode, b) in [
        (AttentionMode::Masked(QuadrantFlags::all()), 1),
        (
            AttentionMode::Masked(QuadrantFlags {
                s2s: false,
                ..QuadrantFlags::no_c2c()
            }),
            2,
        ),
        (AttentionMode::StructuredNoC2c, 1),
        (AttentionMode::StructuredNoC2c, 3),
    ] {
        let c = case(11, 5, 3, b, 8, 2, 2, true);
        let g = probe_grads(&c, mode);
        let rep = grad_check(
            &c.params,
            &g,
            |p: &EncoderParams| Ok(probe_loss(&c, p, mode)),
            1e-5,
            200,
            &mut seeded(12, "gc"),
        )
        .unwrap();
        assert!(rep.max_relative_error <= 1e-4, "{mode:?} B={b}: {rep:?}");
    }
}

#[test]
fn dropout_gradients_match_finite_differences_for_fixed_mask() {
    let mut c = case(13, 4, 3, 2, 8, 2, 1, false);
    c.config.dropout = 0.3;
    for mode in [
        AttentionMode::Masked(QuadrantFlags::all()),
        AttentionMode::StructuredNoC2c,
    ] {
        let run = |p: &EncoderParams| {
            let mut rng = seeded(99, "mask");
            let mut d = Dropout {
                rate: 0.3,
                rng: &mut rng,
            };
            encode(p, &c.config, c.input(), mode, Some(&mut d)).unwrap()
        };
        let out = run(&c.params);
        let mut g = c.params.zeros_like();
        encode_backward(
            &c.params,
            &c.config,
            c.input(),
            &out,
            c.probe.clone(),
            &mut g,
        );
        let rep = grad_check(
            &c.params,
            &g,
            |p: &EncoderParams| Ok((run(p).hidden() * &c.probe).sum()),
            1e-5,
            120,
            &mut seeded(3, "gc"),
        )
        .unwrap();
        assert!(rep.max_relative_error <= 1e-4, "{mode:?}: {rep:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn structured_equivalence_values_and_gradients(
        seed in 0u64..10_000,
        ls in 1usize..=16,
        k in 1usize..=8,
        b in prop::sample::select(vec![1usize, 4]),
        dim in prop::sample::select(vec![8usize, 16]),
        heads in 1usize..=2,
        layers in 1usize..=2,
    ) {
        let c = case(seed, ls, k, b, dim, heads, layers, true);
        let full = forward_full(&c.params, &c.config, c.input(), QuadrantFlags::no_c2c()).unwrap();
        let fast = forward_structured_no_c2c(&c.params, &c.config, c.input()).unwrap();
        prop_assert!(max_abs_diff(full.hidden(), fast.hidden()) <= 1e-6);
        let gf = probe_grads(&c, AttentionMode::Masked(QuadrantFlags::no_c2c()));
        let gs = probe_grads(&c, AttentionMode::StructuredNoC2c);
        prop_assert!(max_param_diff(&gf, &gs) <= 1e-6);
    }
}
