use std::fs;
use std::path::Path;

use refilter::data::SplitName;
use refilter::error::Error;
use refilter::pipeline::{
    ablation_cells, artifacts, load_manifest, run_stage, sha256_hex, AblationAxes, PipelineConfig,
    Stage, StageContext,
};

fn small(work: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.work_dir = work.to_path_buf();
    c.data.synthetic.num_types = 30;
    c.data.synthetic.train_records = 60;
    c.data.synthetic.dev_records = 20;
    c.data.synthetic.test_records = 20;
    c.data.tokenizer_size = 300;
    c.recall.train.epochs = 1;
    c.recall.k = 8;
    c.expand.replace_tail = 2;
    c.expand.k2 = 1;
    c.filter.k = 8;
    c.filter.train.epochs = 1;
    c.mlm.train.epochs = 1;
    c
}

fn ctx(work: &Path) -> StageContext {
    StageContext::new(small(work), true).unwrap()
}

#[test]
fn stage_without_inputs_names_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    match run_stage(Stage::TrainRecall, &ctx(dir.path())) {
        Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "gen-data"),
        other => panic!("expected a missing artifact, got {other:?}"),
    }
}

#[test]
fn edited_input_is_reported_stale() {
    let dir = tempfile::tempdir().unwrap();
    let c = ctx(dir.path());
    run_stage(Stage::GenData, &c).unwrap();
    let train = dir.path().join(artifacts::dataset(SplitName::Train));
    let mut text = fs::read_to_string(&train).unwrap();
    text.push('\n');
    fs::write(&train, text).unwrap();
    match run_stage(Stage::TrainRecall, &c) {
        Err(Error::StaleArtifact { stage, .. }) => assert_eq!(stage, "gen-data"),
        other => panic!("expected a stale artifact, got {other:?}"),
    }
}

#[test]
fn manifest_records_hashes_seed_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let c = ctx(dir.path());
    let out = run_stage(Stage::GenData, &c).unwrap();
    let m = load_manifest(dir.path(), Stage::GenData).unwrap().unwrap();
    assert_eq!(m, out.manifest);
    assert_eq!(m.seed, 7);
    assert!(m.seconds.is_none());
    assert!(m.config.get("work_dir").is_none());
    for (rel, hash) in &m.outputs {
        let bytes = fs::read(dir.path().join(rel)).unwrap();
        assert_eq!(&sha256_hex(&bytes), hash);
    }
}

#[test]
fn deterministic_runs_write_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        let c = ctx(dir);
        for stage in [Stage::GenData, Stage::TrainRecall, Stage::Recall] {
            run_stage(stage, &c).unwrap();
        }
    }
    let m = load_manifest(a.path(), Stage::Recall).unwrap().unwrap();
    for rel in m.outputs.keys() {
        assert_eq!(
            fs::read(a.path().join(rel)).unwrap(),
            fs::read(b.path().join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn empty_ablation_axes_are_rejected() {
    assert!(matches!(
        ablation_cells(&AblationAxes::default()),
        Err(Error::Config(_))
    ));
    let axes = AblationAxes {
        flags: vec!["full".into(), "no-c2c".into()],
        expand: vec![false, true],
        ..AblationAxes::default()
    };
    assert_eq!(ablation_cells(&axes).unwrap().len(), 4);
}

#[test]
fn invalid_config_is_rejected_up_front() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.filter.k = 64;
    assert!(matches!(StageContext::new(c, false), Err(Error::Config(_))));
}
