use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use adtriage_core::cluster::FilterReport;
use adtriage_core::corpus::RawListing;
use adtriage_core::features::{read_feature_csv, FeatureVector};
use adtriage_core::labeling::{
    build_label_matrix, read_journal, verification_status, Journal, LabelView, Stage, Verdict, VerificationStatus,
};
use adtriage_core::pipeline::{
    artifacts, build_manifest, labeled_ids, load_corpus, read_json, read_results_csv, results_file_name, DatasetCounts,
    PipelineConfig, PipelineStage, ResultRow, Runner, ScoredListing, SeedVariant,
};
use adtriage_core::ssl::{HardLabel, KernelMeta};
use adtriage_core::topics::read_theta_csv;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

pub const PAGE_SIZE: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{message}")]
    BadRequest { code: &'static str, message: String },
    #[error("{0}")]
    NotFound(String),
    #[error("a retrain is already running")]
    Busy,
    #[error("{0}")]
    Internal(String),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn bad(code: &'static str, message: impl Into<String>) -> Self {
        ApiError::BadRequest {
            code,
            message: message.into(),
        }
    }
}

impl From<adtriage_core::Error> for ApiError {
    fn from(e: adtriage_core::Error) -> Self {
        ApiError::Internal(e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::bad("malformed_body", e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::bad("malformed_query", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = match &self {
            ApiError::BadRequest { code, .. } => (StatusCode::BAD_REQUEST, *code),
            ApiError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ApiError::Busy => (StatusCode::CONFLICT, "retrain_busy"),
            ApiError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status.is_server_error() {
            log::error!("{self}");
        }
        let body = ErrorBody {
            code: code.to_owned(),
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// The candidate set currently on display.
#[derive(Debug, Clone, Default)]
struct Candidates {
    rows: Vec<ScoredListing>,
}

pub struct AppState {
    cfg: PipelineConfig,
    corpus: BTreeMap<String, RawListing>,
    features: HashMap<String, FeatureVector>,
    filtered: BTreeSet<String>,
    review_sample: Vec<String>,
    thetas: RwLock<HashMap<String, Vec<f64>>>,
    journal: Mutex<Journal>,
    candidates: RwLock<Candidates>,
    retraining: AtomicBool,
}

impl AppState {
    /// Loads artifacts through the filter stage. Topic vectors and results
    /// are optional until the first retrain.
    pub fn load(cfg: PipelineConfig) -> adtriage_core::Result<Self> {
        let corpus = load_corpus(&cfg)?.into_iter().map(|l| (l.id.clone(), l)).collect();
        let features = read_feature_csv(&cfg.artifact(artifacts::FEATURES))?
            .into_iter()
            .map(|f| (f.listing_id.clone(), f))
            .collect();
        let filter: FilterReport = read_json(&cfg.artifact(artifacts::FILTER_REPORT))?;
        let review_sample: Vec<String> = read_json(&cfg.artifact(artifacts::REVIEW_SAMPLE))?;
        let journal = Journal::open(cfg.journal_path())?;
        let state = AppState {
            corpus,
            features,
            filtered: filter.kept_ids.into_iter().collect(),
            review_sample,
            thetas: RwLock::new(HashMap::new()),
            journal: Mutex::new(journal),
            candidates: RwLock::new(Candidates::default()),
            retraining: AtomicBool::new(false),
            cfg,
        };
        state.reload_outputs()?;
        Ok(state)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// The kernel and seeding variant whose results the service shows.
    pub fn primary(&self) -> (KernelMeta, SeedVariant) {
        (self.cfg.spread.kernels[0], self.cfg.spread.variants[0])
    }

    fn reload_outputs(&self) -> adtriage_core::Result<()> {
        let theta_path = self.cfg.artifact(artifacts::THETA);
        if theta_path.exists() {
            let thetas = read_theta_csv(&theta_path)?
                .into_iter()
                .map(|t| (t.listing_id, t.theta))
                .collect();
            *self.thetas.write().expect("theta lock") = thetas;
        }
        let (kernel, variant) = self.primary();
        let results = self.cfg.artifact(&results_file_name(&kernel, &variant));
        let rows = if results.exists() { read_results_csv(&results)? } else { Vec::new() };
        self.candidates.write().expect("candidate lock").rows = rows;
        Ok(())
    }

    fn view(&self) -> adtriage_core::Result<LabelView> {
        let path = self.cfg.journal_path();
        let labels = if path.exists() { read_journal(&path)? } else { Vec::new() };
        Ok(LabelView::from_labels(&labels))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/labels", post(post_label))
        .route("/api/candidates", get(candidates))
        .route("/api/verify", post(verify))
        .route("/api/stats", get(stats))
        .route("/api/retrain", post(retrain))
        .route("/api/listing/{id}", get(listing))
        .fallback(|| async { ApiError::NotFound("no such endpoint".into()) })
        .with_state(state)
}

#[derive(Debug, Deserialize)]
pub struct QueueParams {
    pub expert: Option<String>,
    #[serde(default)]
    pub page: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueueItem {
    pub listing_id: String,
    pub title: String,
    pub body: String,
    pub features: BTreeMap<String, u8>,
    pub my_verdict: Option<Verdict>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueuePage {
    pub expert: String,
    pub page: usize,
    pub page_size: usize,
    pub remaining: usize,
    pub items: Vec<QueueItem>,
    pub exhausted: bool,
}

fn feature_map(v: Option<&FeatureVector>) -> BTreeMap<String, u8> {
    v.map(|f| f.named_bits().into_iter().map(|(k, b)| (k.to_owned(), b)).collect())
        .unwrap_or_default()
}

fn require_expert(e: Option<&str>) -> ApiResult<String> {
    match e.map(str::trim) {
        Some(e) if !e.is_empty() => Ok(e.to_owned()),
        _ => Err(ApiError::bad("missing_expert", "expert id is required")),
    }
}

async fn queue(State(st): State<Arc<AppState>>, q: Result<Query<QueueParams>, QueryRejection>) -> ApiResult<Json<QueuePage>> {
    let Query(q) = q?;
    let expert = require_expert(q.expert.as_deref())?;
    let view = st.view()?;
    // Anything this expert already judged, skips included, leaves their queue.
    let pending: Vec<&String> = st
        .review_sample
        .iter()
        .filter(|id| view.verdict_of(id, &expert, Stage::Initial).is_none())
        .collect();
    let items: Vec<QueueItem> = pending
        .iter()
        .skip(q.page * PAGE_SIZE)
        .take(PAGE_SIZE)
        .filter_map(|id| st.corpus.get(*id))
        .map(|l| QueueItem {
            listing_id: l.id.clone(),
            title: l.title.clone(),
            body: l.body.clone(),
            features: feature_map(st.features.get(&l.id)),
            my_verdict: None,
        })
        .collect();
    Ok(Json(QueuePage {
        expert,
        page: q.page,
        page_size: PAGE_SIZE,
        remaining: pending.len(),
        exhausted: items.is_empty(),
        items,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelRequest {
    pub listing_id: String,
    pub expert_id: String,
    pub verdict: Verdict,
    #[serde(default = "initial_stage")]
    pub stage: Stage,
}

fn initial_stage() -> Stage {
    Stage::Initial
}

fn record(st: &AppState, listing_id: &str, expert_id: &str, verdict: Verdict, stage: Stage) -> ApiResult<Response> {
    let expert = require_expert(Some(expert_id))?;
    if !st.corpus.contains_key(listing_id) {
        return Err(ApiError::NotFound(format!("unknown listing `{listing_id}`")));
    }
    let label = st
        .journal
        .lock()
        .expect("journal lock")
        .record(listing_id, &expert, verdict, stage)?;
    Ok((StatusCode::CREATED, Json(label)).into_response())
}

async fn post_label(State(st): State<Arc<AppState>>, body: Result<Json<LabelRequest>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = body?;
    record(&st, &req.listing_id, &req.expert_id, req.verdict, req.stage)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VerifyRequest {
    pub listing_id: String,
    pub expert_id: String,
    pub confirmed: bool,
}

async fn verify(State(st): State<Arc<AppState>>, body: Result<Json<VerifyRequest>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = body?;
    let verdict = if req.confirmed { Verdict::Positive } else { Verdict::Negative };
    record(&st, &req.listing_id, &req.expert_id, verdict, Stage::Verification)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CandidateItem {
    pub listing_id: String,
    /// Positive share of the row, `score_pos / (score_pos + score_neg)`.
    pub score: f64,
    pub score_pos: f64,
    pub score_neg: f64,
    pub seeded: bool,
    pub status: VerificationStatus,
    pub verifications: BTreeMap<String, VerificationStatus>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CandidateList {
    pub kernel: KernelMeta,
    pub variant: SeedVariant,
    pub assigned: usize,
    pub confirmed: usize,
    pub rejected: usize,
    /// Truncated percentage, or "pending" until a candidate is verified.
    pub precision: String,
    pub items: Vec<CandidateItem>,
}

fn candidate_list(st: &AppState) -> ApiResult<CandidateList> {
    let view = st.view()?;
    let population: BTreeSet<&str> = st.filtered.iter().map(String::as_str).collect();
    let labeled = labeled_ids(&view, &population);
    let verifications = view.verdicts(Stage::Verification);
    let rows = st.candidates.read().expect("candidate lock").rows.clone();
    let mut items: Vec<CandidateItem> = rows
        .into_iter()
        .filter(|r| r.hard_label == HardLabel::Positive && !r.seeded && !labeled.contains(r.listing_id.as_str()))
        .map(|r| {
            let total = r.score_pos + r.score_neg;
            let per_expert = verifications
                .get(r.listing_id.as_str())
                .map(|m| {
                    m.iter()
                        .map(|(e, v)| {
                            let s = if *v == Verdict::Negative {
                                VerificationStatus::Rejected
                            } else {
                                VerificationStatus::Confirmed
                            };
                            ((*e).to_owned(), s)
                        })
                        .collect()
                })
                .unwrap_or_default();
            CandidateItem {
                status: verification_status(&view, &r.listing_id),
                score: if total > 0.0 { r.score_pos / total } else { 0.0 },
                listing_id: r.listing_id,
                score_pos: r.score_pos,
                score_neg: r.score_neg,
                seeded: r.seeded,
                verifications: per_expert,
            }
        })
        .collect();
    items.sort_by(|a, b| b.score_pos.total_cmp(&a.score_pos).then_with(|| a.listing_id.cmp(&b.listing_id)));
    let confirmed = items.iter().filter(|i| i.status == VerificationStatus::Confirmed).count();
    let rejected = items.iter().filter(|i| i.status == VerificationStatus::Rejected).count();
    let (kernel, variant) = st.primary();
    Ok(CandidateList {
        kernel,
        variant,
        assigned: items.len(),
        confirmed,
        rejected,
        precision: match adtriage_core::ssl::precision_from_counts(items.len(), confirmed).percent() {
            Some(p) if confirmed + rejected > 0 => p,
            _ => "pending".to_owned(),
        },
        items,
    })
}

async fn candidates(State(st): State<Arc<AppState>>) -> ApiResult<Json<CandidateList>> {
    Ok(Json(candidate_list(&st)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Stats {
    pub dataset: DatasetCounts,
    pub results: Vec<ResultRow>,
}

/// Recomputed from the journal on every call.
pub fn compute_stats(cfg: &PipelineConfig) -> adtriage_core::Result<Stats> {
    if cfg.artifact(artifacts::SPREAD).exists() {
        let m = build_manifest(cfg, Vec::new())?;
        return Ok(Stats {
            dataset: m.dataset,
            results: m.results,
        });
    }
    // Before the first spread there are no results, only dataset counts.
    let filter: FilterReport = read_json(&cfg.artifact(artifacts::FILTER_REPORT))?;
    let stats: adtriage_core::corpus::CorpusStats = read_json(&cfg.artifact(artifacts::CORPUS_STATS))?;
    let path = cfg.journal_path();
    let labels = if path.exists() { read_journal(&path)? } else { Vec::new() };
    let population: BTreeSet<&str> = filter.kept_ids.iter().map(String::as_str).collect();
    let view = LabelView::from_labels(labels.iter().filter(|l| population.contains(l.listing_id.as_str())));
    let labeled = labeled_ids(&view, &population).len();
    Ok(Stats {
        dataset: DatasetCounts {
            raw: stats.raw_count,
            rejected: stats.rejected_count,
            filtered: filter.kept_ids.len(),
            labeled,
            unlabeled: filter.kept_ids.len() - labeled,
            agreement: adtriage_core::labeling::agreement(&view, filter.kept_ids.len()),
        },
        results: Vec::new(),
    })
}

async fn stats(State(st): State<Arc<AppState>>) -> ApiResult<Json<Stats>> {
    let cfg = st.cfg.clone();
    let s = tokio::task::spawn_blocking(move || compute_stats(&cfg))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(s))
}

struct RetrainGuard<'a>(&'a AtomicBool);

impl Drop for RetrainGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

async fn retrain(State(st): State<Arc<AppState>>) -> ApiResult<Json<CandidateList>> {
    if st
        .retraining
        .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
        .is_err()
    {
        return Err(ApiError::Busy);
    }
    let worker = st.clone();
    let outcome = tokio::task::spawn_blocking(move || -> ApiResult<()> {
        let _guard = RetrainGuard(&worker.retraining);
        check_seeds(&worker)?;
        Runner::new(&worker.cfg)?.run_through(PipelineStage::Spread)?;
        worker.reload_outputs()?;
        Ok(())
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?;
    outcome?;
    Ok(Json(candidate_list(&st)?))
}

fn check_seeds(st: &AppState) -> ApiResult<()> {
    let view = st.view()?;
    let (_, variant) = st.primary();
    let ids: Vec<String> = st.filtered.iter().cloned().collect();
    let seeds = build_label_matrix(&view, &ids, variant.policy, variant.negative_rule).matrix;
    if seeds.positive_seeds() == 0 || seeds.negative_seeds() == 0 {
        return Err(ApiError::bad(
            "insufficient_seeds",
            format!(
                "retrain needs at least one positive and one negative seed (have {} and {})",
                seeds.positive_seeds(),
                seeds.negative_seeds()
            ),
        ));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ListingDetail {
    pub listing_id: String,
    pub title: String,
    pub body: String,
    pub region: String,
    pub posted_at: chrono::DateTime<chrono::Utc>,
    pub filtered: bool,
    pub features: BTreeMap<String, u8>,
    pub theta: Option<Vec<f64>>,
}

async fn listing(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ListingDetail>> {
    let l = st
        .corpus
        .get(&id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown listing `{id}`")))?;
    Ok(Json(ListingDetail {
        listing_id: l.id.clone(),
        title: l.title.clone(),
        body: l.body.clone(),
        region: l.region.clone(),
        posted_at: l.posted_at,
        filtered: st.filtered.contains(&id),
        features: feature_map(st.features.get(&id)),
        theta: st.thetas.read().expect("theta lock").get(&id).cloned(),
    }))
}
