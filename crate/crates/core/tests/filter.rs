use proptest::prelude::*;
use refilter::bench::{bench_inference, expected_passes, BenchConfig, BenchModel};
use refilter::encoder::{
    attention_entry_count, encode, encode_hidden, CountMode, EncoderConfig, InputLayout,
    QuadrantFlags,
};
use refilter::filter::{Filter, FilterConfig, FilterVariant};
use refilter::input::SentencePieces;
use refilter::model::Model;
use refilter::pipeline::bench_items;

fn encoder(max_positions: usize) -> EncoderConfig {
    EncoderConfig {
        dim: 8,
        heads: 2,
        layers: 2,
        ffn_dim: 16,
        max_positions,
        ..EncoderConfig::default()
    }
}

fn filter(variant: FilterVariant, types: usize, structured: bool) -> (Filter, Model) {
    let config = FilterConfig {
        variant,
        structured_no_c2c: structured,
        block_size: 2,
        ..FilterConfig::default()
    };
    let pieces = (0..types).map(|t| vec![40 + t % 7, 50 + t % 5]).collect();
    Filter::init(config, encoder(160), 64, pieces, 3).unwrap()
}

fn sentence() -> SentencePieces {
    SentencePieces {
        left: vec![10, 11, 12],
        mention: vec![13, 14],
        right: vec![15, 16],
    }
}

#[test]
fn entry_counts_for_the_reference_shape() {
    let layout = InputLayout::new(10, 128, 1).unwrap();
    assert_eq!(attention_entry_count(&layout, CountMode::Structured), 2788);
    assert_eq!(attention_entry_count(&layout, CountMode::Full), 19044);
    let full = InputLayout::new(5, 4, 3).unwrap();
    assert_eq!(
        attention_entry_count(&full, CountMode::Structured),
        25 + 2 * 5 * 12 + 4 * 9
    );
}

#[test]
fn bench_counts_passes_and_entries() {
    let items = bench_items(4, 10, 16, 64, 9);
    let (s, sm) = filter(FilterVariant::McceS, 16, true);
    let (c, cm) = filter(FilterVariant::VanillaCe, 16, false);
    let models = [
        BenchModel {
            name: "s".into(),
            filter: &s,
            model: &sm,
        },
        BenchModel {
            name: "ce".into(),
            filter: &c,
            model: &cm,
        },
    ];
    let report = bench_inference(
        &models,
        &items,
        &BenchConfig {
            repetitions: 2,
            warmup: 0,
        },
    )
    .unwrap();
    let (rs, rc) = (&report.rows[0], &report.rows[1]);
    assert_eq!(rs.forward_passes, 4);
    assert_eq!(rs.passes_per_record, 1.0);
    assert_eq!(rc.forward_passes, 64);
    assert_eq!(rc.passes_per_record, 16.0);
    assert_eq!(rs.sweep_seconds.len(), 2);
    let layout = InputLayout::new(10, 16, 1).unwrap();
    assert_eq!(
        rs.attention_entries,
        4 * attention_entry_count(&layout, CountMode::Structured)
    );
    assert_eq!(
        rs.full_attention_entries,
        4 * attention_entry_count(&layout, CountMode::Full)
    );
    assert!(rs.attention_entries < rs.full_attention_entries);
}

#[test]
fn zero_repetitions_is_an_error() {
    let (s, sm) = filter(FilterVariant::McceS, 4, true);
    let models = [BenchModel {
        name: "s".into(),
        filter: &s,
        model: &sm,
    }];
    assert!(bench_inference(
        &models,
        &bench_items(1, 10, 4, 64, 1),
        &BenchConfig {
            repetitions: 0,
            warmup: 0
        }
    )
    .is_err());
}

#[test]
fn inference_path_matches_the_training_forward() {
    for variant in [FilterVariant::McceS, FilterVariant::McceB] {
        for structured in [true, false] {
            let (f, m) = filter(variant, 12, structured);
            let a = f.assemble(&sentence(), &[3, 1, 4, 0, 9]).unwrap();
            let cfg = &f.encoder;
            let full = encode(&m.encoder, cfg, a.input(), f.config.mode(), None).unwrap();
            let fast = encode_hidden(&m.encoder, cfg, a.input(), f.config.mode()).unwrap();
            assert_eq!(full.hidden(), &fast);
        }
    }
}

#[test]
fn structured_and_masked_filters_agree() {
    for variant in [FilterVariant::McceS, FilterVariant::McceB] {
        let (mut f, m) = filter(variant, 20, true);
        let cands: Vec<usize> = (0..20).rev().collect();
        let a = f.score(&m, &sentence(), &cands).unwrap();
        f.config.structured_no_c2c = false;
        assert_eq!(f.config.flags, QuadrantFlags::no_c2c());
        let b = f.score(&m, &sentence(), &cands).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pass_count_is_one_or_k(k in 1usize..24, variant in prop_oneof![
        Just(FilterVariant::McceS), Just(FilterVariant::McceB), Just(FilterVariant::VanillaCe)
    ]) {
        let (f, m) = filter(variant, 24, variant != FilterVariant::VanillaCe);
        let cands: Vec<usize> = (0..k).collect();
        f.passes.reset();
        let s = f.score(&m, &sentence(), &cands).unwrap();
        prop_assert_eq!(s.len(), k);
        prop_assert_eq!(f.passes.get(), expected_passes(variant, k));
    }

    #[test]
    fn scores_do_not_depend_on_candidate_order(seed in 0u64..1000) {
        let (f, m) = filter(FilterVariant::McceS, 10, true);
        let mut cands: Vec<usize> = (0..10).collect();
        let a = f.score(&m, &sentence(), &cands).unwrap();
        let r = (seed as usize) % 10;
        cands.rotate_left(r);
        let b = f.score(&m, &sentence(), &cands).unwrap();
        for (i, &t) in cands.iter().enumerate() {
            prop_assert!((b[i] - a[t]).abs() < 1e-10);
        }
    }
}
