mod common;

use std::fs;
use std::path::Path;

use adtriage_core::labeling::{Journal, Stage, Verdict};
use adtriage_core::pipeline::{artifacts, run_pipeline, PipelineConfig, PipelineStage, Runner};
use adtriage_core::synth::{generate, AdKind, SynthConfig, SynthCorpus};
use adtriage_core::Error;

fn small_corpus() -> SynthCorpus {
    generate(&SynthConfig {
        total: 400,
        trafficking: 50,
        incidental: 100,
        seed: 21,
    })
}

fn small_config(dir: &Path, out: &str) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        input: dir.join("corpus.jsonl"),
        out_dir: dir.join(out),
        seed: 3,
        ..PipelineConfig::default()
    };
    cfg.lda.topics = 8;
    cfg.lda.iterations = 200;
    cfg.projection.per_side = 60;
    cfg.projection.iterations = 300;
    cfg.labels.journal = Some(dir.join("journal.jsonl"));
    cfg
}

fn setup(dir: &Path) -> SynthCorpus {
    let corpus = small_corpus();
    fs::write(dir.join("corpus.jsonl"), corpus.to_jsonl()).unwrap();
    let mut j = Journal::open(dir.join("journal.jsonl")).unwrap();
    for id in corpus.ids_of(AdKind::Trafficking).iter().take(8) {
        for e in ["e1", "e2"] {
            j.record(id, e, Verdict::Positive, Stage::Initial).unwrap();
        }
    }
    for id in corpus.ids_of(AdKind::Incidental).iter().take(30) {
        for e in ["e1", "e2"] {
            j.record(id, e, Verdict::Negative, Stage::Initial).unwrap();
        }
    }
    corpus
}

fn result_files(cfg: &PipelineConfig) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(cfg.out_dir.join(artifacts::RESULTS_DIR))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn small_corpus_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = setup(dir.path());
    let cfg = small_config(dir.path(), "out");
    let m = run_pipeline(&cfg).unwrap();
    assert_eq!(m.dataset.raw, 400);
    assert_eq!(m.dataset.filtered, corpus.planted_count());
    assert_eq!(m.dataset.labeled, 38);
    assert_eq!(m.dataset.labeled + m.dataset.unlabeled, m.dataset.filtered);
    assert!(m.counts_consistent());
    assert_eq!(m.results.len(), 4);
    assert_eq!(m.preprocessing.entropy_text, "title+body");
    assert_eq!(m.preprocessing.lda_min_df, 2);
    assert!(m.preprocessing.stopword_count > 0);
    for r in &m.results {
        assert_eq!(r.learner_positive + r.learner_negative, m.dataset.unlabeled);
        assert_eq!(r.precision_display, "pending");
    }
    assert!(m.projection_purity.is_some());
    assert_eq!(m.phone_histogram.values().sum::<usize>() > 0, true);

    for name in [
        artifacts::MANIFEST,
        artifacts::FEATURES,
        artifacts::THETA,
        artifacts::LDA_MODEL,
        artifacts::PROJECTION_CSV,
        "report/dataset.txt",
        "report/results.txt",
        "report/phones.csv",
        "report/top_terms.csv",
    ] {
        assert!(cfg.out_dir.join(name).exists(), "{name} missing");
    }
    let results = fs::read_to_string(cfg.out_dir.join("report/results.txt")).unwrap();
    assert!(results.lines().any(|l| l.starts_with("RBF ") && l.ends_with(" pending")));
}

#[test]
fn rerun_reuses_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let cfg = small_config(dir.path(), "out");
    let first = run_pipeline(&cfg).unwrap();
    let files = result_files(&cfg);
    let second = run_pipeline(&cfg).unwrap();
    assert!(second
        .timings
        .iter()
        .all(|t| t.cached == (t.stage != PipelineStage::Report)));
    assert_eq!(result_files(&cfg), files);
    let strip = |mut m: adtriage_core::pipeline::RunManifest| {
        m.timings.clear();
        m
    };
    assert_eq!(strip(first), strip(second));
}

#[test]
fn new_labels_rerun_only_the_spread() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = setup(dir.path());
    let cfg = small_config(dir.path(), "out");
    run_pipeline(&cfg).unwrap();
    let mut j = Journal::open(cfg.journal_path()).unwrap();
    j.record(&corpus.ids_of(AdKind::Trafficking)[20], "e1", Verdict::Positive, Stage::Initial)
        .unwrap();
    let m = run_pipeline(&cfg).unwrap();
    for t in &m.timings {
        let expect_cached = t.stage < PipelineStage::Spread;
        assert_eq!(t.cached, expect_cached, "{:?}", t.stage);
    }
    assert_eq!(m.dataset.labeled, 39);
}

#[test]
fn identical_runs_write_identical_results() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let a = small_config(dir.path(), "a");
    let b = small_config(dir.path(), "b");
    run_pipeline(&a).unwrap();
    run_pipeline(&b).unwrap();
    assert_eq!(result_files(&a), result_files(&b));
    for name in [artifacts::THETA, artifacts::FEATURES, artifacts::PROJECTION_CSV] {
        assert_eq!(fs::read(a.artifact(name)).unwrap(), fs::read(b.artifact(name)).unwrap(), "{name}");
    }
}

#[test]
fn missing_lexicon_fails_before_any_stage() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let mut cfg = small_config(dir.path(), "out");
    cfg.lexicons.spa_terms = Some(dir.path().join("nope.txt"));
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(!cfg.out_dir.exists());
}

#[test]
fn empty_corpus_yields_zero_tables() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("corpus.jsonl"), "").unwrap();
    let cfg = small_config(dir.path(), "out");
    let m = run_pipeline(&cfg).unwrap();
    assert_eq!((m.dataset.raw, m.dataset.filtered, m.dataset.labeled, m.dataset.unlabeled), (0, 0, 0, 0));
    assert!(m.results.iter().all(|r| r.learner_positive == 0 && r.learner_negative == 0));
    assert!(m.results.iter().all(|r| r.precision_display == "pending"));
    let text = fs::read_to_string(cfg.out_dir.join("report/dataset.txt")).unwrap();
    assert!(text.starts_with("Raw        0\nFiltered   0\n"));
}

#[test]
fn stage_failures_name_the_stage_and_keep_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let cfg = small_config(dir.path(), "out");
    Runner::new(&cfg).unwrap().run_through(PipelineStage::Ingest).unwrap();
    fs::write(cfg.artifact(artifacts::LISTINGS), "{ broken\n").unwrap();
    let err = run_pipeline(&cfg).unwrap_err();
    match &err {
        Error::Stage { stage, .. } => assert_eq!(*stage, "features"),
        other => panic!("unexpected {other}"),
    }
    assert!(err.to_string().contains("features"));
    assert!(cfg.artifact(artifacts::CORPUS).exists());
    assert!(cfg.artifact(artifacts::LISTINGS).exists());
}

#[test]
fn toml_config_with_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    fs::write(dir.path().join("spa.txt"), "spa\nmassage\n").unwrap();
    let path = dir.path().join("run.toml");
    fs::write(
        &path,
        r#"
input = "corpus.jsonl"
out_dir = "out"
seed = 3

[lexicons]
spa_terms = "spa.txt"

[lda]
topics = 4
iterations = 30

[projection]
enabled = false

[labels]
journal = "journal.jsonl"

[[spread.kernels]]
kernel = "knn"
k = 5

[[spread.variants]]
policy = "intersection"
negative_rule = "any_negative"
"#,
    )
    .unwrap();
    let cfg = PipelineConfig::from_path(&path).unwrap();
    assert_eq!(cfg.input, dir.path().join("corpus.jsonl"));
    assert_eq!(cfg.lexicons.spa_terms, Some(dir.path().join("spa.txt")));
    let m = run_pipeline(&cfg).unwrap();
    assert_eq!(m.results.len(), 1);
    assert_eq!(m.results[0].positive_seeds, 8);
    assert!(m.projection_purity.is_none());
    assert!(dir.path().join("out/results/knn_intersection_any_negative.csv").exists());

    let json_path = dir.path().join("run.json");
    fs::write(&json_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(PipelineConfig::from_path(&json_path).unwrap(), cfg);
}

#[test]
fn csv_input() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ads.csv");
    fs::write(
        &path,
        "id,title,body,posted_at,region,age\n\
         a1,new girl,she is sweet and 98 lbs call 602 555 0134,2016-03-01T00:00:00Z,AZ,21\n\
         a2,hello,hi there,2016-03-01T00:00:00Z,AZ,\n\
         a3,broken row\n",
    )
    .unwrap();
    let mut cfg = small_config(dir.path(), "out");
    cfg.input = path;
    cfg.format = adtriage_core::corpus::InputFormat::Csv;
    cfg.lda.topics = 2;
    cfg.lda.min_df = 1;
    let m = run_pipeline(&cfg).unwrap();
    assert_eq!((m.dataset.raw, m.dataset.rejected, m.dataset.filtered), (3, 1, 1));
    assert_eq!(m.phone_histogram.get("AZ"), Some(&1));
}
