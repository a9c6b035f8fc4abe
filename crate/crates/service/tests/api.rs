use std::fs;
use std::path::Path;
use std::sync::Arc;

use adtriage_core::labeling::{read_journal, LabelView, Stage, Verdict};
use adtriage_core::pipeline::{artifacts, spread_once, PipelineConfig, PipelineStage, Runner};
use adtriage_core::ssl::HardLabel;
use adtriage_core::synth::{generate, AdKind, SynthConfig, SynthCorpus};
use adtriage_core::topics::read_theta_csv;
use adtriage_service::api::{compute_stats, CandidateList, ErrorBody, ListingDetail, QueuePage, Stats};
use adtriage_service::{router, AppState};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    corpus: SynthCorpus,
    cfg: PipelineConfig,
    app: Router,
}

fn small_config(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        input: dir.join("corpus.jsonl"),
        out_dir: dir.join("out"),
        seed: 11,
        ..PipelineConfig::default()
    };
    cfg.lda.topics = 6;
    cfg.lda.iterations = 150;
    cfg.projection.enabled = false;
    cfg.labels.sample_size = 30;
    cfg
}

/// Runs the pipeline through `last` on a 300-listing corpus and starts the app.
fn fixture(last: PipelineStage) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(&SynthConfig {
        total: 300,
        trafficking: 40,
        incidental: 80,
        seed: 5,
    });
    fs::write(dir.path().join("corpus.jsonl"), corpus.to_jsonl()).unwrap();
    let cfg = small_config(dir.path());
    Runner::new(&cfg).unwrap().run_through(last).unwrap();
    let app = router(Arc::new(AppState::load(cfg.clone()).unwrap()));
    Fixture {
        _dir: dir,
        corpus,
        cfg,
        app,
    }
}

async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req
            .header("content-type", "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn get_json<T: DeserializeOwned>(app: &Router, uri: &str) -> T {
    let (status, body) = send(app, "GET", uri, None).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

fn error_code(body: &[u8]) -> String {
    serde_json::from_slice::<ErrorBody>(body).unwrap().code
}

async fn label(app: &Router, id: &str, expert: &str, verdict: &str) {
    let (status, body) = send(
        app,
        "POST",
        "/api/labels",
        Some(json!({"listing_id": id, "expert_id": expert, "verdict": verdict, "stage": "initial"})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&body));
}

#[tokio::test]
async fn queue_pages_until_exhausted() {
    let f = fixture(PipelineStage::Filter);
    let p0: QueuePage = get_json(&f.app, "/api/queue?expert=e1&page=0").await;
    assert_eq!(p0.items.len(), 20);
    assert_eq!(p0.remaining, 30);
    assert!(!p0.exhausted);
    assert!(p0.items.iter().all(|i| i.features.len() == 15));
    let p1: QueuePage = get_json(&f.app, "/api/queue?expert=e1&page=1").await;
    assert_eq!(p1.items.len(), 10);
    let p2: QueuePage = get_json(&f.app, "/api/queue?expert=e1&page=2").await;
    assert!(p2.items.is_empty() && p2.exhausted);

    // Labeling everything (skips count as judged) exhausts page zero too.
    for item in p0.items.iter().chain(&p1.items) {
        label(&f.app, &item.listing_id, "e1", "skip").await;
    }
    let done: QueuePage = get_json(&f.app, "/api/queue?expert=e1").await;
    assert!(done.exhausted && done.items.is_empty() && done.remaining == 0);
    let other: QueuePage = get_json(&f.app, "/api/queue?expert=e2").await;
    assert_eq!(other.remaining, 30);
}

#[tokio::test]
async fn label_is_journaled_and_visible_in_stats() {
    let f = fixture(PipelineStage::Filter);
    let before: Stats = get_json(&f.app, "/api/stats").await;
    assert_eq!(before.dataset.labeled, 0);

    let q: QueuePage = get_json(&f.app, "/api/queue?expert=e1").await;
    let id = q.items[0].listing_id.clone();
    label(&f.app, &id, "e1", "positive").await;

    let journal = read_journal(&f.cfg.journal_path()).unwrap();
    assert_eq!(journal.len(), 1);
    assert_eq!(journal[0].listing_id, id);
    assert_eq!(journal[0].verdict, Verdict::Positive);

    let after: Stats = get_json(&f.app, "/api/stats").await;
    assert_eq!(after.dataset.labeled, 1);
    assert_eq!(after.dataset.unlabeled, before.dataset.unlabeled - 1);
    assert_eq!(after.dataset.agreement.per_expert["e1"].positive, 1);
    assert_eq!(after.dataset.agreement.union_pos, 1);
}

#[tokio::test]
async fn stats_track_the_journal_file() {
    let f = fixture(PipelineStage::Filter);
    let q: QueuePage = get_json(&f.app, "/api/queue?expert=x").await;
    // A write that bypasses the service still shows up.
    let mut j = adtriage_core::labeling::Journal::open(f.cfg.journal_path()).unwrap();
    j.record(&q.items[3].listing_id, "e2", Verdict::Negative, Stage::Initial).unwrap();
    let served: Stats = get_json(&f.app, "/api/stats").await;
    let fresh = compute_stats(&f.cfg).unwrap();
    assert_eq!(served.dataset, fresh.dataset);
    assert_eq!(served.dataset.agreement.union_neg, 1);
}

#[tokio::test]
async fn malformed_requests_get_machine_readable_errors() {
    let f = fixture(PipelineStage::Filter);
    let (s, b) = send(&f.app, "GET", "/api/queue", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&b), "missing_expert");

    let (s, b) = send(&f.app, "GET", "/api/queue?expert=e1&page=minus", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&b), "malformed_query");

    let (s, b) = send(&f.app, "POST", "/api/labels", Some(json!({"listing_id": "ad00001", "verdict": "maybe"}))).await;
    assert_eq!(s.as_u16() / 100, 4);
    assert_eq!(error_code(&b), "malformed_body");

    let (s, b) = send(
        &f.app,
        "POST",
        "/api/labels",
        Some(json!({"listing_id": "nope", "expert_id": "e1", "verdict": "positive"})),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&b), "not_found");

    let (s, b) = send(&f.app, "GET", "/api/listing/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&b), "not_found");
    assert!(read_journal(&f.cfg.journal_path()).unwrap().is_empty());
}

#[tokio::test]
async fn retrain_requires_both_seed_kinds() {
    let f = fixture(PipelineStage::Filter);
    let (s, b) = send(&f.app, "POST", "/api/retrain", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&b), "insufficient_seeds");

    let pos = &f.corpus.ids_of(AdKind::Trafficking)[0];
    label(&f.app, pos, "e1", "positive").await;
    let (s, _) = send(&f.app, "POST", "/api/retrain", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

async fn seed_two_experts(f: &Fixture) {
    for id in f.corpus.ids_of(AdKind::Trafficking).iter().take(6) {
        label(&f.app, id, "e1", "positive").await;
        label(&f.app, id, "e2", "positive").await;
    }
    for id in f.corpus.ids_of(AdKind::Incidental).iter().take(20) {
        label(&f.app, id, "e1", "negative").await;
        label(&f.app, id, "e2", "negative").await;
    }
}

#[tokio::test]
async fn retrain_matches_a_direct_spread() {
    let f = fixture(PipelineStage::Filter);
    seed_two_experts(&f).await;
    let (s, b) = send(&f.app, "POST", "/api/retrain", None).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
    let list: CandidateList = serde_json::from_slice(&b).unwrap();
    assert!(!list.items.is_empty());
    assert!(list.items.windows(2).all(|w| w[0].score_pos >= w[1].score_pos));
    assert!(list.items.iter().all(|i| (0.0..=1.0).contains(&i.score) && !i.seeded));
    assert_eq!(list.precision, "pending");

    // Independent run of the learner on the same journal and topic vectors.
    let thetas = read_theta_csv(&f.cfg.artifact(artifacts::THETA)).unwrap();
    let labels = read_journal(&f.cfg.journal_path()).unwrap();
    let view = LabelView::from_labels(&labels);
    let (rows, _) = spread_once(
        &thetas,
        &view,
        f.cfg.spread.kernels[0],
        f.cfg.spread.variants[0],
        &f.cfg.spread.propagation(),
    )
    .unwrap();
    let mut expected: Vec<_> = rows
        .iter()
        .filter(|r| !r.seeded && r.hard_label == HardLabel::Positive)
        .collect();
    expected.sort_by(|a, b| b.score_pos.total_cmp(&a.score_pos).then_with(|| a.listing_id.cmp(&b.listing_id)));
    let got: Vec<&str> = list.items.iter().map(|i| i.listing_id.as_str()).collect();
    let want: Vec<&str> = expected.iter().map(|r| r.listing_id.as_str()).collect();
    assert_eq!(got, want);

    let served: CandidateList = get_json(&f.app, "/api/candidates").await;
    assert_eq!(served.items.len(), list.items.len());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_retrain_is_rejected() {
    let f = fixture(PipelineStage::Filter);
    seed_two_experts(&f).await;
    let (a, b) = tokio::join!(
        send(&f.app, "POST", "/api/retrain", None),
        send(&f.app, "POST", "/api/retrain", None)
    );
    let mut codes = [a.0.as_u16(), b.0.as_u16()];
    codes.sort_unstable();
    assert_eq!(codes, [200, 409]);
    let busy = if a.0 == StatusCode::CONFLICT { &a.1 } else { &b.1 };
    assert_eq!(error_code(busy), "retrain_busy");
    // The flag is released afterwards.
    let (s, _) = send(&f.app, "POST", "/api/retrain", None).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn verification_drives_precision() {
    let f = fixture(PipelineStage::Filter);
    seed_two_experts(&f).await;
    let (_, b) = send(&f.app, "POST", "/api/retrain", None).await;
    let list: CandidateList = serde_json::from_slice(&b).unwrap();
    let n = list.items.len();
    assert!(n >= 2, "need a couple of candidates, got {n}");
    for (i, item) in list.items.iter().enumerate() {
        let (s, _) = send(
            &f.app,
            "POST",
            "/api/verify",
            Some(json!({"listing_id": item.listing_id, "expert_id": "e1", "confirmed": i != 0})),
        )
        .await;
        assert_eq!(s, StatusCode::CREATED);
    }
    let after: CandidateList = get_json(&f.app, "/api/candidates").await;
    assert_eq!(after.confirmed, n - 1);
    assert_eq!(after.rejected, 1);
    let expected = adtriage_core::ssl::precision_from_counts(n, n - 1).percent();
    assert_eq!(Some(after.precision), expected);
    let first = after.items.iter().find(|i| i.listing_id == list.items[0].listing_id).unwrap();
    assert_eq!(first.verifications["e1"], adtriage_core::labeling::VerificationStatus::Rejected);

    let stats: Stats = get_json(&f.app, "/api/stats").await;
    let primary = &stats.results[0];
    assert_eq!(primary.learner_positive, n);
    assert_eq!(primary.expert_confirmed, n - 1);
    assert_eq!(Some(primary.precision_display.clone()), expected);
}

#[tokio::test]
async fn listing_detail_has_bits_and_theta() {
    let f = fixture(PipelineStage::Topics);
    let id = &f.corpus.ids_of(AdKind::Trafficking)[0];
    let d: ListingDetail = get_json(&f.app, &format!("/api/listing/{id}")).await;
    assert!(d.filtered);
    assert_eq!(d.features.len(), 15);
    let theta = d.theta.unwrap();
    assert_eq!(theta.len(), 6);
    assert!((theta.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    let clean = &f.corpus.ids_of(AdKind::Clean)[0];
    let d: ListingDetail = get_json(&f.app, &format!("/api/listing/{clean}")).await;
    assert!(!d.filtered && d.theta.is_none());
    assert!(d.features.values().all(|b| *b == 0));
}
