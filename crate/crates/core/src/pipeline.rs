//! End-to-end driver: ingest, features, filter, topics, spread, report.
//!
//! Every stage writes its artifacts under `out_dir` and records a content
//! key in `out_dir/.cache/<stage>.key`. The key hashes the stage's own
//! configuration together with the bytes of every file it reads, so a rerun
//! with unchanged inputs skips straight to the first stage whose inputs moved.
//! The report stage reads the live journal and always runs.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{filter_corpus, projection_check, write_projection_csv, FilterReport, TsneConfig};
use crate::corpus::{ingest, normalize, CorpusStats, InputFormat, Listing, RawListing};
use crate::error::{Error, Result};
use crate::features::{fit_ngram_model, read_feature_csv, write_feature_csv, FeatureExtractor, FeatureVector, LexiconSources, Lexicons, NgramModel};
use crate::labeling::{
    agreement, build_label_matrix, read_journal, sample_for_review, verification_status, AgreementSummary, LabelView,
    NegativeRule, PositivePolicy, Stage, Verdict, VerificationStatus,
};
use crate::ssl::{spread_points, top_terms, HardLabel, KernelMeta, PropagationConfig, Symmetrization, DEFAULT_GAMMA, DEFAULT_K};
use crate::text::{default_stopwords, parse_lines};
use crate::topics::{fit_lda, prepare_documents, read_theta_csv, write_theta_csv, DocTopicVector, LdaConfig, DEFAULT_BETA, DEFAULT_SWEEPS, DEFAULT_TOPICS};

/// Artifact file names, relative to the output directory.
pub mod artifacts {
    pub const CORPUS: &str = "corpus.jsonl";
    pub const LISTINGS: &str = "listings.jsonl";
    pub const REJECTED: &str = "rejected.jsonl";
    pub const CORPUS_STATS: &str = "corpus_stats.json";
    pub const NGRAM_MODEL: &str = "ngram_model.json";
    pub const FEATURES: &str = "features.csv";
    pub const FILTER_REPORT: &str = "filter_report.json";
    pub const REVIEW_SAMPLE: &str = "review_sample.json";
    pub const PROJECTION_CSV: &str = "projection.csv";
    pub const PROJECTION: &str = "projection.json";
    pub const LDA_MODEL: &str = "lda_model.bin";
    pub const THETA: &str = "theta.csv";
    pub const SPREAD: &str = "spread.json";
    pub const RESULTS_DIR: &str = "results";
    pub const MANIFEST: &str = "manifest.json";
    pub const REPORT_DIR: &str = "report";
    pub const JOURNAL: &str = "journal.jsonl";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineStage {
    Ingest,
    Features,
    Filter,
    Topics,
    Spread,
    Report,
}

impl PipelineStage {
    pub const ALL: [PipelineStage; 6] = [
        PipelineStage::Ingest,
        PipelineStage::Features,
        PipelineStage::Filter,
        PipelineStage::Topics,
        PipelineStage::Spread,
        PipelineStage::Report,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PipelineStage::Ingest => "ingest",
            PipelineStage::Features => "features",
            PipelineStage::Filter => "filter",
            PipelineStage::Topics => "topics",
            PipelineStage::Spread => "spread",
            PipelineStage::Report => "report",
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdaSection {
    /// Number of topics (25).
    pub topics: usize,
    /// Document-topic prior; `None` means `50 / topics`.
    pub alpha: Option<f64>,
    /// Topic-word prior (0.01).
    pub beta: f64,
    /// Gibbs sweeps (1,000).
    pub iterations: usize,
    /// Words must appear in at least this many filtered listings (2).
    pub min_df: usize,
}

impl Default for LdaSection {
    fn default() -> Self {
        LdaSection {
            topics: DEFAULT_TOPICS,
            alpha: None,
            beta: DEFAULT_BETA,
            iterations: DEFAULT_SWEEPS,
            min_df: 2,
        }
    }
}

impl LdaSection {
    pub fn lda_config(&self, seed: u64) -> LdaConfig {
        let mut cfg = LdaConfig::with_topics(self.topics, seed);
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        cfg.beta = self.beta;
        cfg.iterations = self.iterations;
        cfg
    }
}

/// t-SNE sanity check on a sample of filtered vs. dropped feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSection {
    pub enabled: bool,
    /// Listings drawn from each side of the filter (500).
    pub per_side: usize,
    pub perplexity: f64,
    pub iterations: usize,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        let t = TsneConfig::default();
        ProjectionSection {
            enabled: true,
            per_side: 500,
            perplexity: t.perplexity,
            iterations: t.iterations,
        }
    }
}

/// One seeding variant: how expert verdicts become positive and negative seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedVariant {
    pub policy: PositivePolicy,
    pub negative_rule: NegativeRule,
}

impl SeedVariant {
    pub fn slug(&self) -> String {
        let p = match self.policy {
            PositivePolicy::Union => "union",
            PositivePolicy::Intersection => "intersection",
        };
        let n = match self.negative_rule {
            NegativeRule::AnyNegative => "any_negative",
            NegativeRule::BothNegative => "both_negative",
        };
        format!("{p}_{n}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpreadSection {
    /// Graph kernels to run; each is combined with every variant.
    pub kernels: Vec<KernelMeta>,
    pub variants: Vec<SeedVariant>,
    pub alpha: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SpreadSection {
    fn default() -> Self {
        let p = PropagationConfig::default();
        SpreadSection {
            kernels: vec![
                KernelMeta::Rbf { gamma: DEFAULT_GAMMA },
                KernelMeta::Knn {
                    k: DEFAULT_K,
                    symmetrization: Symmetrization::Union,
                },
            ],
            variants: vec![
                SeedVariant {
                    policy: PositivePolicy::Union,
                    negative_rule: NegativeRule::AnyNegative,
                },
                SeedVariant {
                    policy: PositivePolicy::Intersection,
                    negative_rule: NegativeRule::BothNegative,
                },
            ],
            alpha: p.alpha,
            max_iter: p.max_iter,
            tol: p.tol,
        }
    }
}

impl SpreadSection {
    pub fn propagation(&self) -> PropagationConfig {
        PropagationConfig {
            alpha: self.alpha,
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelSection {
    /// Expert journal; defaults to `<out_dir>/journal.jsonl`. May not exist yet.
    pub journal: Option<PathBuf>,
    /// Size of the review sample drawn from the filtered set (150).
    pub sample_size: usize,
}

impl Default for LabelSection {
    fn default() -> Self {
        LabelSection {
            journal: None,
            sample_size: 150,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Regions with this many distinct phones or fewer are left out of the
    /// histogram (0 keeps every region).
    pub phone_min_count: usize,
    pub top_terms: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            phone_min_count: 0,
            top_terms: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub format: InputFormat,
    pub out_dir: PathBuf,
    /// Master seed. The LDA chain, review sample and projection derive theirs from it.
    pub seed: u64,
    pub lexicons: LexiconSources,
    /// Stop-word list for topic modeling; built-in list when absent.
    pub stopwords: Option<PathBuf>,
    pub lda: LdaSection,
    pub projection: ProjectionSection,
    pub labels: LabelSection,
    pub spread: SpreadSection,
    pub report: ReportSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input: PathBuf::from("corpus.jsonl"),
            format: InputFormat::Jsonl,
            out_dir: PathBuf::from("out"),
            seed: 0,
            lexicons: LexiconSources::default(),
            stopwords: None,
            lda: LdaSection::default(),
            projection: ProjectionSection::default(),
            labels: LabelSection::default(),
            spread: SpreadSection::default(),
            report: ReportSection::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads TOML, or JSON when the extension is `.json`. Relative paths in
    /// the file are resolved against the file's directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg: PipelineConfig = if is_json {
            serde_json::from_str(&body).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&body).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        if let Some(base) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.input);
        fix(&mut self.out_dir);
        for p in [
            &mut self.lexicons.words_of_interest,
            &mut self.lexicons.countries,
            &mut self.lexicons.spa_terms,
            &mut self.lexicons.url_patterns,
            &mut self.lexicons.plural_markers,
            &mut self.stopwords,
            &mut self.labels.journal,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn journal_path(&self) -> PathBuf {
        self.labels
            .journal
            .clone()
            .unwrap_or_else(|| self.out_dir.join(artifacts::JOURNAL))
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Checks every referenced input path and parameter range.
    pub fn validate(&self) -> Result<()> {
        if !self.input.is_file() {
            return Err(Error::Config(format!("input file {} does not exist", self.input.display())));
        }
        for p in self.lexicons.paths().chain(self.stopwords.as_deref()) {
            if !p.is_file() {
                return Err(Error::Config(format!("lexicon file {} does not exist", p.display())));
            }
        }
        if self.lda.topics == 0 {
            return Err(Error::Config("lda.topics must be at least 1".into()));
        }
        if self.lda.alpha.is_some_and(|a| !(a > 0.0)) || !(self.lda.beta > 0.0) {
            return Err(Error::Config("lda priors must be positive".into()));
        }
        self.spread
            .propagation()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.spread.kernels.is_empty() || self.spread.variants.is_empty() {
            return Err(Error::Config("spread needs at least one kernel and one variant".into()));
        }
        for k in &self.spread.kernels {
            match *k {
                KernelMeta::Rbf { gamma } if !(gamma > 0.0) => {
                    return Err(Error::Config("rbf gamma must be positive".into()))
                }
                KernelMeta::Knn { k: 0, .. } => return Err(Error::Config("knn k must be at least 1".into())),
                _ => {}
            }
        }
        if self.labels.sample_size == 0 {
            return Err(Error::Config("labels.sample_size must be at least 1".into()));
        }
        if self.projection.enabled && !(self.projection.perplexity > 0.0) {
            return Err(Error::Config("projection perplexity must be positive".into()));
        }
        Ok(())
    }

    fn lda_seed(&self) -> u64 {
        self.seed
    }

    fn sample_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    fn projection_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    fn stopword_set(&self) -> Result<HashSet<String>> {
        match &self.stopwords {
            Some(p) => {
                let body = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Ok(parse_lines(&body).into_iter().collect())
            }
            None => Ok(default_stopwords()),
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: PipelineStage,
    pub millis: u64,
    pub cached: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub raw: usize,
    pub rejected: usize,
    pub filtered: usize,
    /// Filtered listings with at least one non-skip initial verdict.
    pub labeled: usize,
    pub unlabeled: usize,
    pub agreement: AgreementSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermCount {
    pub term: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub kernel: KernelMeta,
    pub variant: SeedVariant,
    pub positive_seeds: usize,
    pub negative_seeds: usize,
    pub conflicts: usize,
    /// Unlabeled listings the learner called positive / negative.
    pub learner_positive: usize,
    pub learner_negative: usize,
    pub expert_confirmed: usize,
    pub expert_rejected: usize,
    /// `None` until at least one learner positive has a verification verdict.
    pub precision: Option<f64>,
    pub precision_display: String,
    pub top_terms: Vec<TermCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub corpus_hash: String,
    pub timings: Vec<StageTiming>,
    pub dataset: DatasetCounts,
    pub projection_purity: Option<f64>,
    pub results: Vec<ResultRow>,
    pub phone_histogram: BTreeMap<String, usize>,
    pub preprocessing: Preprocessing,
}

/// Text-handling choices that shape the features and topics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocessing {
    /// Which fields feed the entropy bit.
    pub entropy_text: String,
    pub stopword_count: usize,
    pub lda_min_df: usize,
}

impl RunManifest {
    pub fn counts_consistent(&self) -> bool {
        let d = &self.dataset;
        d.raw >= d.filtered && d.filtered >= d.labeled + d.unlabeled
    }
}

// ---------------------------------------------------------------------------
// Stage summaries persisted between stages

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSummary {
    pub purity: Option<f64>,
    pub sampled_filtered: usize,
    pub sampled_dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadRun {
    pub kernel: KernelMeta,
    pub variant: SeedVariant,
    pub results_file: String,
    pub positive_seeds: usize,
    pub negative_seeds: usize,
    pub conflicts: usize,
    pub iterations: usize,
    pub converged: bool,
    pub isolated: usize,
}

pub fn results_file_name(kernel: &KernelMeta, variant: &SeedVariant) -> String {
    format!("{}/{}_{}.csv", artifacts::RESULTS_DIR, kernel.name(), variant.slug())
}

/// One line of a results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredListing {
    pub listing_id: String,
    pub score_pos: f64,
    pub score_neg: f64,
    pub hard_label: HardLabel,
    pub seeded: bool,
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ScoredListing>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::artifact(path, e))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::artifact(path, e)))
        .collect()
}

pub fn write_results_csv(path: &Path, rows: &[ScoredListing]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::artifact(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::artifact(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// File helpers

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn hash_optional(path: &Path) -> Result<String> {
    if path.exists() {
        hash_file(path)
    } else {
        Ok("absent".into())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value).expect("artifact serializes");
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&body).map_err(|e| Error::artifact(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("row serializes");
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::artifact(path, e))?);
        }
    }
    Ok(out)
}

fn read_journal_or_empty(path: &Path) -> Result<Vec<crate::labeling::ExpertLabel>> {
    if path.exists() {
        read_journal(path)
    } else {
        Ok(Vec::new())
    }
}

// ---------------------------------------------------------------------------
// Runner

/// Runs stages in order up to and including `last`, reusing cached ones.
pub struct Runner<'a> {
    cfg: &'a PipelineConfig,
    timings: Vec<StageTiming>,
}

impl<'a> Runner<'a> {
    pub fn new(cfg: &'a PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(cfg.out_dir.join(".cache")).map_err(|e| Error::io(&cfg.out_dir, e))?;
        fs::create_dir_all(cfg.artifact(artifacts::RESULTS_DIR)).map_err(|e| Error::io(&cfg.out_dir, e))?;
        Ok(Runner {
            cfg,
            timings: Vec::new(),
        })
    }

    pub fn timings(&self) -> &[StageTiming] {
        &self.timings
    }

    pub fn run_through(&mut self, last: PipelineStage) -> Result<Option<RunManifest>> {
        for stage in PipelineStage::ALL {
            if stage > last {
                break;
            }
            if stage == PipelineStage::Report {
                let start = Instant::now();
                let mut manifest = build_manifest(self.cfg, Vec::new()).map_err(|e| wrap(stage, e))?;
                self.timings.push(StageTiming {
                    stage,
                    millis: start.elapsed().as_millis() as u64,
                    cached: false,
                });
                manifest.timings = self.timings.clone();
                write_json(&self.cfg.artifact(artifacts::MANIFEST), &manifest).map_err(|e| wrap(stage, e))?;
                crate::report::report(&manifest)
                    .write_to(&self.cfg.artifact(artifacts::REPORT_DIR))
                    .map_err(|e| wrap(stage, e))?;
                return Ok(Some(manifest));
            }
            self.run_stage(stage)?;
        }
        Ok(None)
    }

    fn run_stage(&mut self, stage: PipelineStage) -> Result<()> {
        let start = Instant::now();
        let key = stage_key(self.cfg, stage).map_err(|e| wrap(stage, e))?;
        let key_path = self.cfg.out_dir.join(".cache").join(format!("{}.key", stage.as_str()));
        let outputs = stage_outputs(self.cfg, stage).map_err(|e| wrap(stage, e))?;
        let fresh = fs::read_to_string(&key_path).is_ok_and(|k| k == key) && outputs.iter().all(|p| p.exists());
        if fresh {
            log::info!("stage {} cached", stage.as_str());
        } else {
            log::info!("stage {} running", stage.as_str());
            // Drop the old key first so an interrupted run is never mistaken for a finished one.
            let _ = fs::remove_file(&key_path);
            execute(self.cfg, stage).map_err(|e| wrap(stage, e))?;
            fs::write(&key_path, &key).map_err(|e| wrap(stage, Error::io(&key_path, e)))?;
        }
        self.timings.push(StageTiming {
            stage,
            millis: start.elapsed().as_millis() as u64,
            cached: fresh,
        });
        Ok(())
    }
}

fn wrap(stage: PipelineStage, e: Error) -> Error {
    match e {
        already @ Error::Stage { .. } => already,
        other => Error::Stage {
            stage: stage.as_str(),
            source: Box::new(other),
        },
    }
}

/// Runs every stage and returns the manifest.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest> {
    let mut runner = Runner::new(cfg)?;
    Ok(runner
        .run_through(PipelineStage::Report)?
        .expect("report stage yields a manifest"))
}

fn stage_key(cfg: &PipelineConfig, stage: PipelineStage) -> Result<String> {
    let a = |name: &str| hash_file(&cfg.artifact(name));
    let parts: Vec<String> = match stage {
        PipelineStage::Ingest => vec![hash_file(&cfg.input)?, cfg.format.to_string()],
        PipelineStage::Features => {
            let mut v = vec![a(artifacts::LISTINGS)?];
            for p in cfg.lexicons.paths() {
                v.push(hash_file(p)?);
            }
            v.push(serde_json::to_string(&cfg.lexicons).expect("serializes"));
            v
        }
        PipelineStage::Filter => vec![
            a(artifacts::FEATURES)?,
            serde_json::to_string(&cfg.projection).expect("serializes"),
            cfg.labels.sample_size.to_string(),
            cfg.seed.to_string(),
        ],
        PipelineStage::Topics => {
            let mut v = vec![
                a(artifacts::LISTINGS)?,
                a(artifacts::FILTER_REPORT)?,
                serde_json::to_string(&cfg.lda).expect("serializes"),
                cfg.seed.to_string(),
            ];
            if let Some(p) = &cfg.stopwords {
                v.push(hash_file(p)?);
            }
            v
        }
        PipelineStage::Spread => vec![
            a(artifacts::THETA)?,
            hash_optional(&cfg.journal_path())?,
            serde_json::to_string(&cfg.spread).expect("serializes"),
        ],
        PipelineStage::Report => vec![],
    };
    Ok(sha256_hex(format!("{}\n{}", stage.as_str(), parts.join("\n")).as_bytes()))
}

fn stage_outputs(cfg: &PipelineConfig, stage: PipelineStage) -> Result<Vec<PathBuf>> {
    let names: Vec<String> = match stage {
        PipelineStage::Ingest => vec![artifacts::CORPUS, artifacts::LISTINGS, artifacts::REJECTED, artifacts::CORPUS_STATS]
            .into_iter()
            .map(String::from)
            .collect(),
        PipelineStage::Features => vec![artifacts::NGRAM_MODEL.into(), artifacts::FEATURES.into()],
        PipelineStage::Filter => vec![
            artifacts::FILTER_REPORT.into(),
            artifacts::REVIEW_SAMPLE.into(),
            artifacts::PROJECTION.into(),
        ],
        PipelineStage::Topics => vec![artifacts::THETA.into()],
        PipelineStage::Spread => {
            let spread = cfg.artifact(artifacts::SPREAD);
            let mut v = vec![artifacts::SPREAD.to_owned()];
            if spread.exists() {
                let runs: Vec<SpreadRun> = read_json(&spread)?;
                v.extend(runs.into_iter().map(|r| r.results_file));
            }
            v
        }
        PipelineStage::Report => vec![],
    };
    Ok(names.into_iter().map(|n| cfg.artifact(&n)).collect())
}

fn execute(cfg: &PipelineConfig, stage: PipelineStage) -> Result<()> {
    match stage {
        PipelineStage::Ingest => stage_ingest(cfg),
        PipelineStage::Features => stage_features(cfg),
        PipelineStage::Filter => stage_filter(cfg),
        PipelineStage::Topics => stage_topics(cfg),
        PipelineStage::Spread => stage_spread(cfg),
        PipelineStage::Report => Ok(()),
    }
}

fn stage_ingest(cfg: &PipelineConfig) -> Result<()> {
    let ingested = ingest(&cfg.input, cfg.format)?;
    let listings: Vec<Listing> = ingested.listings.iter().map(normalize).collect();
    write_jsonl(&cfg.artifact(artifacts::CORPUS), &ingested.listings)?;
    write_jsonl(&cfg.artifact(artifacts::LISTINGS), &listings)?;
    write_jsonl(&cfg.artifact(artifacts::REJECTED), &ingested.rejected)?;
    write_json(&cfg.artifact(artifacts::CORPUS_STATS), &ingested.stats)?;
    log::info!(
        "ingested {} listings, rejected {}",
        ingested.listings.len(),
        ingested.stats.rejected_count
    );
    Ok(())
}

fn stage_features(cfg: &PipelineConfig) -> Result<()> {
    let listings: Vec<Listing> = read_jsonl(&cfg.artifact(artifacts::LISTINGS))?;
    let model = if listings.is_empty() {
        NgramModel::empty()
    } else {
        fit_ngram_model(&listings)?
    };
    let fx = FeatureExtractor::new(model, Lexicons::load(&cfg.lexicons)?);
    let vectors: Vec<FeatureVector> = listings.iter().map(|l| fx.extract(l)).collect();
    fx.ngrams.save(&cfg.artifact(artifacts::NGRAM_MODEL))?;
    write_feature_csv(&cfg.artifact(artifacts::FEATURES), &vectors)
}

fn stage_filter(cfg: &PipelineConfig) -> Result<()> {
    let vectors = read_feature_csv(&cfg.artifact(artifacts::FEATURES))?;
    let report = filter_corpus(&vectors);
    let n = cfg.labels.sample_size.min(report.kept_ids.len());
    let sample = sample_for_review(&report.kept_ids, n, cfg.sample_seed())?;
    write_json(&cfg.artifact(artifacts::FILTER_REPORT), &report)?;
    write_json(&cfg.artifact(artifacts::REVIEW_SAMPLE), &sample)?;

    let mut summary = ProjectionSummary::default();
    let kept = report.kept_ids.len();
    let dropped = report.dropped_count;
    // The check needs both sides of the filter to say anything.
    if cfg.projection.enabled && kept > 0 && dropped > 0 {
        let tsne = TsneConfig {
            perplexity: cfg.projection.perplexity,
            iterations: cfg.projection.iterations,
            seed: cfg.projection_seed(),
            ..TsneConfig::default()
        };
        let proj = projection_check(&vectors, cfg.projection.per_side, &tsne, cfg.projection_seed())?;
        write_projection_csv(&cfg.artifact(artifacts::PROJECTION_CSV), &proj)?;
        summary = ProjectionSummary {
            purity: Some(proj.purity),
            sampled_filtered: proj.in_filtered.iter().filter(|b| **b).count(),
            sampled_dropped: proj.in_filtered.iter().filter(|b| !**b).count(),
        };
    }
    write_json(&cfg.artifact(artifacts::PROJECTION), &summary)
}

fn filtered_listings(cfg: &PipelineConfig) -> Result<Vec<Listing>> {
    let report: FilterReport = read_json(&cfg.artifact(artifacts::FILTER_REPORT))?;
    let keep: HashSet<&str> = report.kept_ids.iter().map(String::as_str).collect();
    let listings: Vec<Listing> = read_jsonl(&cfg.artifact(artifacts::LISTINGS))?;
    Ok(listings.into_iter().filter(|l| keep.contains(l.id.as_str())).collect())
}

fn stage_topics(cfg: &PipelineConfig) -> Result<()> {
    let listings = filtered_listings(cfg)?;
    let model_path = cfg.artifact(artifacts::LDA_MODEL);
    if listings.is_empty() {
        let _ = fs::remove_file(&model_path);
        return write_theta_csv(&cfg.artifact(artifacts::THETA), &[]);
    }
    let raw_docs: Vec<Vec<String>> = listings.iter().map(|l| l.tokens.clone()).collect();
    let docs = prepare_documents(&raw_docs, &cfg.stopword_set()?, cfg.lda.min_df);
    let fit = fit_lda(&docs, &cfg.lda.lda_config(cfg.lda_seed()))?;
    fit.model.save(&model_path)?;
    let thetas: Vec<DocTopicVector> = listings
        .iter()
        .zip(fit.doc_topic)
        .map(|(l, theta)| DocTopicVector {
            listing_id: l.id.clone(),
            theta,
        })
        .collect();
    write_theta_csv(&cfg.artifact(artifacts::THETA), &thetas)
}

/// Runs one kernel/variant spread over the given topic vectors.
pub fn spread_once(
    thetas: &[DocTopicVector],
    view: &LabelView,
    kernel: KernelMeta,
    variant: SeedVariant,
    propagation: &PropagationConfig,
) -> Result<(Vec<ScoredListing>, SpreadRun)> {
    let ids: Vec<String> = thetas.iter().map(|t| t.listing_id.clone()).collect();
    let x: Vec<Vec<f64>> = thetas.iter().map(|t| t.theta.clone()).collect();
    let seeds = build_label_matrix(view, &ids, variant.policy, variant.negative_rule);
    let mut run = SpreadRun {
        kernel,
        variant,
        results_file: results_file_name(&kernel, &variant),
        positive_seeds: seeds.matrix.positive_seeds(),
        negative_seeds: seeds.matrix.negative_seeds(),
        conflicts: seeds.conflicts,
        iterations: 0,
        converged: true,
        isolated: 0,
    };
    if ids.is_empty() {
        return Ok((Vec::new(), run));
    }
    // A KNN graph needs k < N; tiny corpora get the densest graph they allow.
    let effective = match kernel {
        KernelMeta::Knn { k, symmetrization } if k >= ids.len() => {
            log::warn!("knn k = {k} exceeds the {} filtered listings; using k = {}", ids.len(), ids.len() - 1);
            if ids.len() == 1 {
                KernelMeta::Rbf { gamma: 1.0 }
            } else {
                KernelMeta::Knn {
                    k: ids.len() - 1,
                    symmetrization,
                }
            }
        }
        other => other,
    };
    let (result, isolated) = spread_points(&ids, &x, &seeds.matrix, effective, propagation)?;
    run.iterations = result.iterations;
    run.converged = result.converged;
    run.isolated = isolated.len();
    if !result.converged {
        log::warn!("{} spread did not converge in {} iterations", kernel.name(), result.iterations);
    }
    let rows = (0..ids.len())
        .map(|i| {
            let [p, n] = result.score(i);
            ScoredListing {
                listing_id: ids[i].clone(),
                score_pos: p,
                score_neg: n,
                hard_label: result.hard[i],
                seeded: seeds.matrix.is_seeded(i),
            }
        })
        .collect();
    Ok((rows, run))
}

fn stage_spread(cfg: &PipelineConfig) -> Result<()> {
    let thetas = read_theta_csv(&cfg.artifact(artifacts::THETA))?;
    let labels = read_journal_or_empty(&cfg.journal_path())?;
    let view = LabelView::from_labels(&labels);
    let propagation = cfg.spread.propagation();
    let mut runs = Vec::new();
    for kernel in &cfg.spread.kernels {
        for variant in &cfg.spread.variants {
            let (rows, run) = spread_once(&thetas, &view, *kernel, *variant, &propagation)?;
            write_results_csv(&cfg.artifact(&run.results_file), &rows)?;
            runs.push(run);
        }
    }
    write_json(&cfg.artifact(artifacts::SPREAD), &runs)
}

/// Filtered ids that carry at least one non-skip initial verdict.
pub fn labeled_ids<'v>(view: &'v LabelView, population: &BTreeSet<&str>) -> BTreeSet<&'v str> {
    view.verdicts(Stage::Initial)
        .into_iter()
        .filter(|(id, v)| population.contains(id) && v.values().any(|x| *x != Verdict::Skip))
        .map(|(id, _)| id)
        .collect()
}

/// Assembles the manifest from persisted artifacts and the live journal.
pub fn build_manifest(cfg: &PipelineConfig, timings: Vec<StageTiming>) -> Result<RunManifest> {
    let stats: CorpusStats = read_json(&cfg.artifact(artifacts::CORPUS_STATS))?;
    let filter: FilterReport = read_json(&cfg.artifact(artifacts::FILTER_REPORT))?;
    let projection: ProjectionSummary = read_json(&cfg.artifact(artifacts::PROJECTION))?;
    let runs: Vec<SpreadRun> = read_json(&cfg.artifact(artifacts::SPREAD))?;
    let labels = read_journal_or_empty(&cfg.journal_path())?;

    let population: BTreeSet<&str> = filter.kept_ids.iter().map(String::as_str).collect();
    let in_population: Vec<_> = labels
        .iter()
        .filter(|l| population.contains(l.listing_id.as_str()))
        .collect();
    let view = LabelView::from_labels(in_population.iter().copied());
    let labeled = labeled_ids(&view, &population);

    let dataset = DatasetCounts {
        raw: stats.raw_count,
        rejected: stats.rejected_count,
        filtered: filter.kept_ids.len(),
        labeled: labeled.len(),
        unlabeled: filter.kept_ids.len() - labeled.len(),
        agreement: agreement(&view, filter.kept_ids.len()),
    };

    let listings: Vec<Listing> = read_jsonl(&cfg.artifact(artifacts::LISTINGS))?;
    let tokens_by_id: BTreeMap<&str, &Vec<String>> = listings.iter().map(|l| (l.id.as_str(), &l.tokens)).collect();
    let stopwords = cfg.stopword_set()?;

    let mut results = Vec::new();
    for run in &runs {
        let rows = read_results_csv(&cfg.artifact(&run.results_file))?;
        let evaluated: Vec<&ScoredListing> = rows.iter().filter(|r| !labeled.contains(r.listing_id.as_str())).collect();
        let positives: Vec<&ScoredListing> = evaluated
            .iter()
            .copied()
            .filter(|r| r.hard_label == HardLabel::Positive)
            .collect();
        let statuses: Vec<VerificationStatus> = positives
            .iter()
            .map(|r| verification_status(&view, &r.listing_id))
            .collect();
        let confirmed = statuses.iter().filter(|s| **s == VerificationStatus::Confirmed).count();
        let rejected = statuses.iter().filter(|s| **s == VerificationStatus::Rejected).count();
        let verified = confirmed + rejected > 0;
        let report = crate::ssl::precision_from_counts(positives.len(), confirmed);
        let docs: Vec<&Vec<String>> = positives
            .iter()
            .filter_map(|r| tokens_by_id.get(r.listing_id.as_str()).copied())
            .collect();
        let terms = top_terms(&docs, &stopwords, cfg.report.top_terms)
            .into_iter()
            .filter(|(t, _)| !t.chars().all(|c| c.is_ascii_digit()))
            .map(|(term, count)| TermCount { term, count })
            .collect();
        results.push(ResultRow {
            kernel: run.kernel,
            variant: run.variant,
            positive_seeds: run.positive_seeds,
            negative_seeds: run.negative_seeds,
            conflicts: run.conflicts,
            learner_positive: positives.len(),
            learner_negative: evaluated.len() - positives.len(),
            expert_confirmed: confirmed,
            expert_rejected: rejected,
            precision: if verified { report.precision } else { None },
            precision_display: match (verified, report.percent()) {
                (true, Some(p)) => p,
                _ => "pending".to_owned(),
            },
            top_terms: terms,
        });
    }

    let phone_histogram = stats
        .per_region_phone_counts
        .into_iter()
        .filter(|&(_, n)| cfg.report.phone_min_count == 0 || n > cfg.report.phone_min_count)
        .collect();

    Ok(RunManifest {
        config: cfg.clone(),
        corpus_hash: hash_file(&cfg.input)?,
        timings,
        dataset,
        projection_purity: projection.purity,
        results,
        phone_histogram,
        preprocessing: Preprocessing {
            entropy_text: "title+body".into(),
            stopword_count: stopwords.len(),
            lda_min_df: cfg.lda.min_df,
        },
    })
}

/// Accepted raw records keyed by id, for display.
pub fn load_corpus(cfg: &PipelineConfig) -> Result<Vec<RawListing>> {
    read_jsonl(&cfg.artifact(artifacts::CORPUS))
}
