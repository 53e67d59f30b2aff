//! End-to-end acceptance run: one PASS/FAIL line per criterion.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::LN_2;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::Rng as _;
use refilter::bench::BenchReport;
use refilter::data::{CandidateEntry, CandidateSet, CandidateSource, TypeId};
use refilter::diagnostics::{EquivalenceReport, GradcheckReport};
use refilter::encoder::{attention_entry_count, CountMode, InputLayout};
use refilter::eval::{evaluate, recall_at_k, Averaging, TypeSets};
use refilter::expand::{mlm_score_type, MaskedScorer, UnigramScorer};
use refilter::filter::FilterVariant;
use refilter::input::SentencePieces;
use refilter::loss::{logit, margin_loss, mlc_loss};
use refilter::pipeline::{artifacts, AblationReport, EvalSummary, ExpandReport, RecallReport};
use refilter::rng::seeded;

type Check = Result<String, String>;

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml")
}

/// Runs one stage; returns wall-clock seconds.
fn stage(name: &str, work: &Path, deterministic: bool, extra: &[&str]) -> Result<f64, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_refilter"));
    cmd.arg(name)
        .arg("--config")
        .arg(config_path())
        .arg("--set")
        .arg(format!("work_dir={:?}", work.display().to_string()));
    for e in extra {
        cmd.arg("--set").arg(e);
    }
    if deterministic {
        cmd.arg("--deterministic");
    }
    let t = Instant::now();
    let out = cmd.output().map_err(|e| format!("{name}: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "{name} exited with {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(t.elapsed().as_secs_f64())
}

fn report<T: serde::de::DeserializeOwned>(work: &Path, rel: &str) -> Result<T, String> {
    let text = fs::read_to_string(work.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
    serde_json::from_str(&text).map_err(|e| format!("{rel}: {e}"))
}

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const PIPELINE: [&str; 7] = [
    "gen-data",
    "train-recall",
    "recall",
    "expand",
    "train-filter",
    "predict",
    "eval",
];

fn equivalence(work: &Path) -> Check {
    let secs = stage("equivalence", work, false, &[])?;
    let r: EquivalenceReport = report(work, artifacts::EQUIVALENCE_REPORT)?;
    verdict(
        r.cases.len() >= 200
            && r.max_value_diff <= 1e-6
            && r.max_grad_diff <= 1e-6
            && secs <= 120.0,
        format!(
            "{} configs, max value diff {:.2e}, max gradient diff {:.2e}, {secs:.1}s",
            r.cases.len(),
            r.max_value_diff,
            r.max_grad_diff
        ),
    )
}

fn gradcheck(work: &Path) -> Check {
    stage("gradcheck", work, true, &[])?;
    let r: GradcheckReport = report(work, artifacts::GRADCHECK_REPORT)?;
    let names: BTreeSet<&str> = r.heads.iter().map(|h| h.head.as_str()).collect();
    let all = ["mlc", "ce", "mcce-s", "mcce-b"]
        .iter()
        .all(|h| names.contains(h));
    let ok = all
        && r.heads
            .iter()
            .all(|h| h.coordinates >= 200 && h.max_relative_error <= 1e-4);
    let detail: Vec<String> = r
        .heads
        .iter()
        .map(|h| {
            format!(
                "{} {} coords rel {:.1e}",
                h.head, h.coordinates, h.max_relative_error
            )
        })
        .collect();
    verdict(ok, detail.join("; "))
}

fn counting(bench: &BenchReport) -> Check {
    let mut ok = !bench.rows.is_empty();
    let mut detail = Vec::new();
    for r in &bench.rows {
        let (passes, entries) = match r.variant {
            FilterVariant::VanillaCe => {
                let per = attention_entry_count(
                    &InputLayout::sentence_only(10 + 1).unwrap(),
                    CountMode::Full,
                );
                (r.k as f64, per * (r.k * r.records) as u64)
            }
            _ => {
                let layout = InputLayout::new(10, r.k, r.block).unwrap();
                let mode = if r.structured {
                    CountMode::Structured
                } else {
                    CountMode::Full
                };
                (1.0, attention_entry_count(&layout, mode) * r.records as u64)
            }
        };
        ok &= r.passes_per_record == passes && r.attention_entries == entries;
        detail.push(format!(
            "{} {}/record {} entries",
            r.name, r.passes_per_record, r.attention_entries
        ));
    }
    verdict(ok, detail.join("; "))
}

fn speed(bench: &BenchReport, secs: f64) -> Check {
    let row = |v: FilterVariant| bench.rows.iter().find(|r| r.k == 128 && r.variant == v);
    let (Some(s), Some(c)) = (row(FilterVariant::McceS), row(FilterVariant::VanillaCe)) else {
        return Err("no K=128 rows".into());
    };
    let ratio = s.sents_per_sec / c.sents_per_sec;
    let layout = InputLayout::new(10, 128, 1).unwrap();
    let structured = attention_entry_count(&layout, CountMode::Structured);
    let full = attention_entry_count(&layout, CountMode::Full);
    let share = structured as f64 / full as f64;
    verdict(
        ratio >= 10.0 && share <= 0.2 && s.attention_entries * full == s.full_attention_entries * structured && secs <= 300.0,
        format!(
            "K=128 mcce-s {:.1} vs vanilla-ce {:.1} sents/s ({ratio:.2}x); entries {structured}/{full} = {:.1}%; {secs:.1}s",
            s.sents_per_sec,
            c.sents_per_sec,
            100.0 * share
        ),
    )
}

fn end_to_end(work: &Path, secs: f64) -> Check {
    let recall: RecallReport = report(work, artifacts::RECALL_REPORT)?;
    let expand: ExpandReport = report(work, artifacts::EXPAND_REPORT)?;
    let eval: EvalSummary = report(work, artifacts::EVAL_REPORT)?;
    let dev_recall = recall.recall_at_k.get("dev").copied().unwrap_or(0.0);
    let dev = expand.splits.get("dev").ok_or("no dev expansion")?;
    let (filter_f1, mlc_f1) = (eval.filter.test.f1, eval.mlc.test.f1);
    verdict(
        dev_recall >= 0.90 && dev.recall_after > dev.recall_before && filter_f1 >= mlc_f1 && secs <= 900.0,
        format!(
            "dev r@{} {dev_recall:.4}; expanded {:.4} -> {:.4}; test F1 mcce-s {filter_f1:.4} vs mlc {mlc_f1:.4}; {secs:.0}s",
            recall.k, dev.recall_before, dev.recall_after
        ),
    )
}

fn metric_oracles() -> Check {
    let mut rng = seeded(2024, "acceptance-metrics");
    let types = 10;
    for fixture in 0..100 {
        let n = rng.gen_range(1..=6);
        let (mut preds, mut golds) = (TypeSets::new(), TypeSets::new());
        let mut sets = Vec::new();
        for i in 0..n {
            let id = format!("r{i}");
            let pred: BTreeSet<TypeId> = (0..types).filter(|_| rng.gen_bool(0.3)).collect();
            let mut gold: BTreeSet<TypeId> = (0..types).filter(|_| rng.gen_bool(0.3)).collect();
            gold.insert(rng.gen_range(0..types));
            let entries = (0..types)
                .map(|t| CandidateEntry {
                    type_id: (t * 7 + i) % types,
                    score: -(t as f64),
                    source: CandidateSource::Recall,
                })
                .collect();
            sets.push(CandidateSet::new(id.clone(), entries).unwrap());
            preds.insert(id.clone(), pred);
            golds.insert(id, gold);
        }
        let (mut sp, mut sr, mut sk) = (0.0, 0.0, 0.0);
        for (id, gold) in &golds {
            let pred = &preds[id];
            let tp = pred.iter().filter(|t| gold.contains(t)).count() as f64;
            sp += if pred.is_empty() {
                0.0
            } else {
                tp / pred.len() as f64
            };
            sr += tp / gold.len() as f64;
        }
        for s in &sets {
            let gold = &golds[&s.record_id];
            sk += s.entries[..4]
                .iter()
                .filter(|e| gold.contains(&e.type_id))
                .count() as f64
                / gold.len() as f64;
        }
        let (p, r) = (sp / n as f64, sr / n as f64);
        let f = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        let got = evaluate(&preds, &golds, Averaging::Macro).map_err(|e| e.to_string())?;
        let rk = recall_at_k(&sets, &golds, 4).map_err(|e| e.to_string())?;
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        if !(close(got.precision, p)
            && close(got.recall, r)
            && close(got.f1, f)
            && close(rk, sk / n as f64))
        {
            return Err(format!("fixture {fixture} differs from brute force"));
        }
    }
    Ok("macro P/R/F1 and recall@4 match brute force on 100 fixtures".into())
}

fn loss_values() -> Check {
    let bce = mlc_loss(&[0.0; 9], &BTreeSet::from([2, 5]), 1.0).map_err(|e| e.to_string())?;
    let m0 = margin_loss(logit(0.8), logit(0.3), 0.1).0;
    let md = margin_loss(0.4, 0.4, 0.1).0;
    let m8 = margin_loss(logit(0.2), logit(0.9), 0.1).0;
    let pieces = SentencePieces {
        left: vec![5, 6],
        mention: vec![7],
        right: vec![8],
    };
    let scorer = UnigramScorer::fit(
        &["a b c", "a a"],
        &refilter::tokenizer::train_tokenizer(&["a b c"], 20).unwrap(),
    );
    let (a, masks) =
        refilter::input::assemble_prompt(&pieces, &[9], 1, 32).map_err(|e| e.to_string())?;
    let raw = scorer
        .log_probs(&a.tokens, &masks, &[4])
        .map_err(|e| e.to_string())?[[0, 0]];
    let one = mlm_score_type(&pieces, &[4], &scorer, &[9], 4, 32).map_err(|e| e.to_string())?;
    verdict(
        (bce - LN_2).abs() < 1e-12
            && m0 == 0.0
            && (md - 0.1).abs() < 1e-15
            && (m8 - 0.8).abs() < 1e-12
            && one == Some(raw),
        format!("BCE(0) {bce:.12}; margin {m0} / {md} / {m8:.12}; MLM l=1 {one:?} vs raw {raw}"),
    )
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap().flatten() {
            let p = entry.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn determinism(a: &Path, b: &Path) -> Check {
    for s in PIPELINE {
        stage(s, b, true, &[])?;
    }
    let (ta, tb) = (tree(a), tree(b));
    let differing: Vec<String> = ta
        .keys()
        .chain(tb.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|k| ta.get(*k) != tb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    verdict(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across two runs", ta.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn ablation(work: &Path) -> Check {
    stage("ablate", work, true, &[])?;
    let r: AblationReport = report(work, artifacts::ABLATION_REPORT)?;
    let f1 = |label: &str| r.row(label).map(|x| x.f1).ok_or(format!("no row {label}"));
    let (full, no_c2c, no_c2s) = (f1("flags=full")?, f1("flags=no-c2c")?, f1("flags=no-c2s")?);
    let (d_c2c, d_c2s) = (full - no_c2c, full - no_c2s);
    verdict(
        d_c2s > d_c2c && d_c2c.abs() < 0.02,
        format!(
            "test F1 full {full:.4}, no-c2c {no_c2c:.4} ({:+.2} pts), no-c2s {no_c2s:.4} ({:+.2} pts), mean of {} seeds",
            -100.0 * d_c2c,
            -100.0 * d_c2s,
            r.rows[0].runs.len()
        ),
    )
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().expect("temp dir");
    let (main_run, second_run, diag, bench_dir) = (
        root.path().join("run-a"),
        root.path().join("run-b"),
        root.path().join("diagnostics"),
        root.path().join("bench"),
    );
    let mut results: Vec<(&str, Check)> = Vec::new();

    results.push(("attention equivalence", equivalence(&diag)));
    results.push(("gradient check", gradcheck(&diag)));

    let bench = stage("bench", &bench_dir, false, &[]).and_then(|secs| {
        Ok((
            report::<BenchReport>(&bench_dir, artifacts::BENCH_REPORT)?,
            secs,
        ))
    });
    match bench {
        Ok((b, secs)) => {
            results.push(("pass and entry counting", counting(&b)));
            results.push(("speed", speed(&b, secs)));
        }
        Err(e) => {
            results.push(("pass and entry counting", Err(e.clone())));
            results.push(("speed", Err(e)));
        }
    }

    let t = Instant::now();
    let e2e = PIPELINE
        .iter()
        .try_for_each(|s| stage(s, &main_run, true, &[]).map(|_| ()))
        .map(|()| t.elapsed().as_secs_f64());
    match e2e {
        Ok(secs) => {
            results.push(("end-to-end synthetic", end_to_end(&main_run, secs)));
            results.push(("determinism", determinism(&main_run, &second_run)));
            results.push(("ablation direction", ablation(&main_run)));
        }
        Err(e) => {
            for name in ["end-to-end synthetic", "determinism", "ablation direction"] {
                results.push((name, Err(e.clone())));
            }
        }
    }

    results.push(("metric oracles", metric_oracles()));
    results.push(("loss values", loss_values()));

    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
