//! Two-expert labeling workflow.
//!
//! Every verdict is appended to a JSONL journal and never rewritten. The
//! current state is the last-write-wins view keyed by
//! `(listing_id, expert_id, stage)`. From that view we derive the agreement
//! summary and the seed matrix handed to the graph learner.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Skip,
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initial,
    Verification,
}

impl FromStr for Verdict {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Verdict::Positive),
            "negative" => Ok(Verdict::Negative),
            "skip" => Ok(Verdict::Skip),
            other => Err(Error::InvalidInput(format!("unknown verdict `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertLabel {
    pub listing_id: String,
    pub expert_id: String,
    pub verdict: Verdict,
    pub stage: Stage,
    pub at: DateTime<Utc>,
}

impl ExpertLabel {
    // Later timestamp wins; on an exact tie the verdict order
    // (negative > positive > skip) decides, so replay order never matters.
    fn supersedes(&self, other: &ExpertLabel) -> bool {
        (self.at, self.verdict) > (other.at, other.verdict)
    }
}

/// Append-only JSONL journal of expert verdicts.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
    last_at: Option<DateTime<Utc>>,
}

impl Journal {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let existing = if path.exists() { read_journal(&path)? } else { Vec::new() };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Journal {
            last_at: existing.iter().map(|l| l.at).max(),
            path,
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, label: &ExpertLabel) -> Result<()> {
        let mut line = serde_json::to_string(label).expect("label serializes");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| Error::io(&self.path, e))?;
        self.last_at = Some(self.last_at.map_or(label.at, |t| t.max(label.at)));
        Ok(())
    }

    /// Records a verdict stamped now, nudged forward if needed so that
    /// journal order and timestamp order agree.
    pub fn record(&mut self, listing_id: &str, expert_id: &str, verdict: Verdict, stage: Stage) -> Result<ExpertLabel> {
        let mut at = Utc::now();
        if let Some(last) = self.last_at {
            if at <= last {
                at = last + chrono::Duration::microseconds(1);
            }
        }
        let label = ExpertLabel {
            listing_id: listing_id.to_owned(),
            expert_id: expert_id.to_owned(),
            verdict,
            stage,
            at,
        };
        self.append(&label)?;
        Ok(label)
    }
}

pub fn read_journal(path: &Path) -> Result<Vec<ExpertLabel>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let label = serde_json::from_str(&line)
            .map_err(|e| Error::artifact(path, format!("line {}: {e}", i + 1)))?;
        out.push(label);
    }
    Ok(out)
}

/// Writes a whole journal at once (fixtures and exports).
pub fn write_journal(path: &Path, labels: &[ExpertLabel]) -> Result<()> {
    let mut body = String::new();
    for l in labels {
        body.push_str(&serde_json::to_string(l).expect("label serializes"));
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Last-write-wins state of a journal.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelView {
    latest: BTreeMap<(String, String, Stage), ExpertLabel>,
}

impl LabelView {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a ExpertLabel>) -> Self {
        let mut latest: BTreeMap<(String, String, Stage), ExpertLabel> = BTreeMap::new();
        for l in labels {
            let key = (l.listing_id.clone(), l.expert_id.clone(), l.stage);
            match latest.get(&key) {
                Some(cur) if !l.supersedes(cur) => {}
                _ => {
                    latest.insert(key, l.clone());
                }
            }
        }
        LabelView { latest }
    }

    pub fn labels(&self) -> impl Iterator<Item = &ExpertLabel> {
        self.latest.values()
    }

    /// Every expert that has given an initial-stage verdict, skip included.
    pub fn experts(&self) -> BTreeSet<&str> {
        self.latest
            .values()
            .filter(|l| l.stage == Stage::Initial)
            .map(|l| l.expert_id.as_str())
            .collect()
    }

    /// Non-skip verdicts for one stage, grouped by listing then expert.
    pub fn verdicts(&self, stage: Stage) -> BTreeMap<&str, BTreeMap<&str, Verdict>> {
        let mut out: BTreeMap<&str, BTreeMap<&str, Verdict>> = BTreeMap::new();
        for l in self.latest.values() {
            if l.stage == stage && l.verdict != Verdict::Skip {
                out.entry(l.listing_id.as_str())
                    .or_default()
                    .insert(l.expert_id.as_str(), l.verdict);
            }
        }
        out
    }

    pub fn verdict_of(&self, listing_id: &str, expert_id: &str, stage: Stage) -> Option<Verdict> {
        self.latest
            .get(&(listing_id.to_owned(), expert_id.to_owned(), stage))
            .map(|l| l.verdict)
    }

    /// Listings with at least one non-skip initial verdict.
    pub fn labeled_listings(&self) -> BTreeSet<&str> {
        self.verdicts(Stage::Initial).into_keys().collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertCounts {
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub per_expert: BTreeMap<String, ExpertCounts>,
    pub intersection_pos: usize,
    pub union_pos: usize,
    pub intersection_neg: usize,
    pub union_neg: usize,
    pub labeled_count: usize,
    pub unlabeled_count: usize,
}

/// Counts over the initial-stage view. Intersection means every expert in
/// the journal gave the same verdict; it is empty with fewer than two
/// experts. `population` is the size of the pool the sample came from.
pub fn agreement(view: &LabelView, population: usize) -> AgreementSummary {
    let experts = view.experts();
    let by_listing = view.verdicts(Stage::Initial);
    let mut s = AgreementSummary::default();
    for e in &experts {
        s.per_expert.insert((*e).to_owned(), ExpertCounts::default());
    }
    for verdicts in by_listing.values() {
        for (e, v) in verdicts {
            let c = s.per_expert.get_mut(*e).expect("expert registered");
            match v {
                Verdict::Positive => c.positive += 1,
                Verdict::Negative => c.negative += 1,
                Verdict::Skip => {}
            }
        }
        let all = |want: Verdict| {
            experts.len() >= 2 && experts.iter().all(|e| verdicts.get(e) == Some(&want))
        };
        let any = |want: Verdict| verdicts.values().any(|v| *v == want);
        s.intersection_pos += all(Verdict::Positive) as usize;
        s.intersection_neg += all(Verdict::Negative) as usize;
        s.union_pos += any(Verdict::Positive) as usize;
        s.union_neg += any(Verdict::Negative) as usize;
    }
    s.labeled_count = by_listing.len();
    s.unlabeled_count = population.saturating_sub(s.labeled_count);
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositivePolicy {
    Intersection,
    Union,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeRule {
    AnyNegative,
    BothNegative,
}

/// Seed matrix: column 0 is positive, column 1 negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMatrix {
    pub ids: Vec<String>,
    pub rows: Vec<[f64; 2]>,
}

pub const POSITIVE: usize = 0;
pub const NEGATIVE: usize = 1;

impl LabelMatrix {
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn is_seeded(&self, i: usize) -> bool {
        self.rows[i] != [0.0, 0.0]
    }

    pub fn positive_seeds(&self) -> usize {
        self.rows.iter().filter(|r| r[POSITIVE] == 1.0).count()
    }

    pub fn negative_seeds(&self) -> usize {
        self.rows.iter().filter(|r| r[NEGATIVE] == 1.0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedBuild {
    pub matrix: LabelMatrix,
    /// Listings positive under the policy and negative under the rule.
    pub conflicts: usize,
}

/// Builds seed rows for `ids` from the initial-stage view. A listing that is
/// both positive (by `policy`) and negative (by `rule`) becomes negative.
pub fn build_label_matrix(view: &LabelView, ids: &[String], policy: PositivePolicy, rule: NegativeRule) -> SeedBuild {
    let experts = view.experts();
    let by_listing = view.verdicts(Stage::Initial);
    let mut conflicts = 0;
    let rows = ids
        .iter()
        .map(|id| {
            let Some(v) = by_listing.get(id.as_str()) else {
                return [0.0, 0.0];
            };
            let all = |want: Verdict| experts.len() >= 2 && experts.iter().all(|e| v.get(e) == Some(&want));
            let any = |want: Verdict| v.values().any(|x| *x == want);
            let pos = match policy {
                PositivePolicy::Intersection => all(Verdict::Positive),
                PositivePolicy::Union => any(Verdict::Positive),
            };
            let neg = match rule {
                NegativeRule::AnyNegative => any(Verdict::Negative),
                NegativeRule::BothNegative => all(Verdict::Negative),
            };
            match (pos, neg) {
                (true, true) => {
                    conflicts += 1;
                    [0.0, 1.0]
                }
                (true, false) => [1.0, 0.0],
                (false, true) => [0.0, 1.0],
                (false, false) => [0.0, 0.0],
            }
        })
        .collect();
    SeedBuild {
        matrix: LabelMatrix {
            ids: ids.to_vec(),
            rows,
        },
        conflicts,
    }
}

/// Uniform sample without replacement, returned in input order.
pub fn sample_for_review(ids: &[String], n: usize, seed: u64) -> Result<Vec<String>> {
    if n > ids.len() {
        return Err(Error::InvalidInput(format!(
            "cannot sample {n} listings from {}",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, ids.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| ids[i].clone()).collect())
}

/// Verification status of one candidate across experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerificationStatus {
    Pending,
    Confirmed,
    Rejected,
}

/// Confirmed when at least one expert confirmed and none rejected.
pub fn verification_status(view: &LabelView, listing_id: &str) -> VerificationStatus {
    let v = view.verdicts(Stage::Verification);
    match v.get(listing_id) {
        None => VerificationStatus::Pending,
        Some(m) if m.values().any(|x| *x == Verdict::Negative) => VerificationStatus::Rejected,
        Some(_) => VerificationStatus::Confirmed,
    }
}
