//! Inference throughput and exact cost accounting for filter models.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoder::{attention_entry_count, CountMode, InputLayout};
use crate::error::{Error, Result};
use crate::filter::{Filter, FilterItem, FilterVariant};
use crate::model::Model;

/// One filter under test.
pub struct BenchModel<'a> {
    pub name: String,
    pub filter: &'a Filter,
    pub model: &'a Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repetitions: 10,
            warmup: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub variant: FilterVariant,
    pub structured: bool,
    pub k: usize,
    pub block: usize,
    pub records: usize,
    /// Encoder passes for one sweep over the records.
    pub forward_passes: u64,
    pub passes_per_record: f64,
    /// Attention score entries per head per layer, summed over one sweep.
    pub attention_entries: u64,
    /// The same inputs under unrestricted attention.
    pub full_attention_entries: u64,
    /// Wall-clock seconds of each timed sweep.
    pub sweep_seconds: Vec<f64>,
    /// Throughput of the fastest sweep.
    pub sents_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub repetitions: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// Tab-separated series for plotting throughput and cost against K and B.
    pub fn plot_data(&self) -> String {
        let mut s = String::from(
            "name\tvariant\tk\tblock\tsents_per_sec\tattention_entries\tfull_attention_entries\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{:.3}\t{}\t{}",
                r.name,
                r.variant,
                r.k,
                r.block,
                r.sents_per_sec,
                r.attention_entries,
                r.full_attention_entries
            );
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<24} {:>5} {:>3} {:>10} {:>12} {:>12} {:>10}\n",
            "model", "K", "B", "passes", "entries", "full", "sents/s"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:>5} {:>3} {:>10} {:>12} {:>12} {:>10.2}",
                r.name,
                r.k,
                r.block,
                r.forward_passes,
                r.attention_entries,
                r.full_attention_entries,
                r.sents_per_sec
            );
        }
        s
    }
}

/// Analytic encoder pass count for scoring `candidates` candidates.
pub fn expected_passes(variant: FilterVariant, candidates: usize) -> u64 {
    match variant {
        FilterVariant::VanillaCe => candidates as u64,
        _ => 1,
    }
}

fn entry_counts(bm: &BenchModel<'_>, item: &FilterItem) -> Result<(u64, u64)> {
    let f = bm.filter;
    match f.config.variant {
        FilterVariant::VanillaCe => {
            let mut total = 0;
            for &t in &item.candidates {
                let len = f.type_pieces.get(t).map_or(0, Vec::len);
                let budget = f.encoder.max_positions - len;
                let (s, _) = item.pieces.sentence(budget)?;
                total += attention_entry_count(
                    &InputLayout::sentence_only(s.len() + len)?,
                    CountMode::Full,
                );
            }
            Ok((total, total))
        }
        _ => {
            let a = f.assemble(&item.pieces, &item.candidates)?;
            let mode = if f.config.structured_no_c2c {
                CountMode::Structured
            } else {
                CountMode::Full
            };
            Ok((
                attention_entry_count(&a.layout, mode),
                attention_entry_count(&a.layout, CountMode::Full),
            ))
        }
    }
}

/// Times prediction over `items` for each model.
///
/// Warm-up sweeps are excluded. Timed sweeps are interleaved across models
/// so that every model sees the same machine conditions, and throughput is
/// taken from each model's fastest sweep. Pass counts are checked against
/// [`expected_passes`]; a mismatch is an error.
pub fn bench_inference(
    models: &[BenchModel<'_>],
    items: &[FilterItem],
    config: &BenchConfig,
) -> Result<BenchReport> {
    if config.repetitions == 0 {
        return Err(Error::Config("bench repetitions must be positive".into()));
    }
    let sweep = |bm: &BenchModel<'_>| -> Result<f64> {
        let t = Instant::now();
        for it in items {
            bm.filter.score(bm.model, &it.pieces, &it.candidates)?;
        }
        Ok(t.elapsed().as_secs_f64())
    };
    for bm in models {
        for _ in 0..config.warmup {
            sweep(bm)?;
        }
    }
    let expected: Vec<u64> = models
        .iter()
        .map(|bm| {
            items
                .iter()
                .map(|it| expected_passes(bm.filter.config.variant, it.candidates.len()))
                .sum()
        })
        .collect();
    let mut sweeps = vec![Vec::with_capacity(config.repetitions); models.len()];
    for _ in 0..config.repetitions {
        for (i, bm) in models.iter().enumerate() {
            bm.filter.passes.reset();
            sweeps[i].push(sweep(bm)?);
            if bm.filter.passes.get() != expected[i] {
                return Err(Error::Validation(format!(
                    "{}: {} encoder passes, expected {}",
                    bm.name,
                    bm.filter.passes.get(),
                    expected[i]
                )));
            }
        }
    }
    let mut rows = Vec::with_capacity(models.len());
    for ((bm, sweep_seconds), expected) in models.iter().zip(sweeps).zip(expected) {
        let f = bm.filter;
        let (mut entries, mut full) = (0, 0);
        for it in items {
            let (e, fe) = entry_counts(bm, it)?;
            entries += e;
            full += fe;
        }
        let k = items.first().map_or(0, |it| it.candidates.len());
        let best = sweep_seconds.iter().copied().fold(f64::INFINITY, f64::min);
        rows.push(BenchRow {
            name: bm.name.clone(),
            variant: f.config.variant,
            structured: f.config.structured_no_c2c && f.config.variant != FilterVariant::VanillaCe,
            k,
            block: f.config.block(),
            records: items.len(),
            forward_passes: expected,
            passes_per_record: if items.is_empty() {
                0.0
            } else {
                expected as f64 / items.len() as f64
            },
            attention_entries: entries,
            full_attention_entries: full,
            sents_per_sec: if best > 0.0 {
                items.len() as f64 / best
            } else {
                f64::INFINITY
            },
            sweep_seconds,
        });
    }
    Ok(BenchReport {
        repetitions: config.repetitions,
        rows,
    })
}
