//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use adtriage_core::labeling::write_journal;
use adtriage_core::pipeline::{read_results_csv, results_file_name, PipelineConfig, SeedVariant};
use adtriage_core::labeling::{NegativeRule, PositivePolicy};
use adtriage_core::ssl::{HardLabel, KernelMeta};
use adtriage_core::synth::{agreeing_journal, generate, AdKind, SynthConfig, SynthCorpus};

pub struct PlantedRun {
    pub corpus: SynthCorpus,
    pub cfg: PipelineConfig,
    pub seeds_pos: Vec<String>,
    pub seeds_neg: Vec<String>,
}

/// Writes the default 2,000-ad corpus plus a journal seeding 30 trafficking
/// and 120 incidental listings, and returns a config pointing at them.
pub fn planted_setup(dir: &Path, out: &str) -> PlantedRun {
    let corpus = generate(&SynthConfig::default());
    let input = dir.join("corpus.jsonl");
    if !input.exists() {
        fs::write(&input, corpus.to_jsonl()).unwrap();
    }
    let seeds_pos: Vec<String> = corpus.ids_of(AdKind::Trafficking).into_iter().take(30).collect();
    let seeds_neg: Vec<String> = corpus.ids_of(AdKind::Incidental).into_iter().take(120).collect();
    let journal = dir.join("journal.jsonl");
    if !journal.exists() {
        let start = "2016-04-01T00:00:00Z".parse().unwrap();
        write_journal(&journal, &agreeing_journal(&seeds_pos, &seeds_neg, &["e1", "e2"], start)).unwrap();
    }
    let mut cfg = PipelineConfig {
        input,
        out_dir: dir.join(out),
        seed: 7,
        ..PipelineConfig::default()
    };
    cfg.labels.journal = Some(journal);
    PlantedRun {
        corpus,
        cfg,
        seeds_pos,
        seeds_neg,
    }
}

pub fn union_variant() -> SeedVariant {
    SeedVariant {
        policy: PositivePolicy::Union,
        negative_rule: NegativeRule::AnyNegative,
    }
}

pub fn rbf_results(cfg: &PipelineConfig) -> PathBuf {
    cfg.out_dir
        .join(results_file_name(&KernelMeta::Rbf { gamma: 20.0 }, &union_variant()))
}

/// (assigned positive, truly trafficking) among unseeded listings.
pub fn ground_truth_precision(run: &PlantedRun) -> (usize, usize) {
    let rows = read_results_csv(&rbf_results(&run.cfg)).unwrap();
    let assigned: Vec<_> = rows
        .iter()
        .filter(|r| !r.seeded && r.hard_label == HardLabel::Positive)
        .collect();
    let hits = assigned
        .iter()
        .filter(|r| run.corpus.truth[&r.listing_id] == AdKind::Trafficking)
        .count();
    (assigned.len(), hits)
}

/// Two groups of documents drawn from disjoint 30-word vocabularies.
/// Returns the documents and each document's group.
pub fn disjoint_vocab_docs(per_group: usize, len: usize, seed: u64) -> (Vec<Vec<String>>, Vec<bool>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::new();
    let mut group = Vec::new();
    for g in [false, true] {
        let prefix = if g { "b" } else { "a" };
        for _ in 0..per_group {
            docs.push((0..len).map(|_| format!("{prefix}{}", rng.random_range(0..30))).collect());
            group.push(g);
        }
    }
    (docs, group)
}

/// Journal with expert `e1` at 38 positive / 112 negative and `e2` at
/// 139 / 11 over 150 listings, 31 of them positive for both.
pub fn two_expert_fixture() -> (Vec<String>, Vec<adtriage_core::labeling::ExpertLabel>) {
    use adtriage_core::labeling::{ExpertLabel, Stage, Verdict};
    let ids: Vec<String> = (0..150).map(|i| format!("L{i:03}")).collect();
    let at = |s: i64| chrono::DateTime::from_timestamp(1_457_000_000 + s, 0).unwrap();
    let mut labels = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        let e1 = if i < 38 { Verdict::Positive } else { Verdict::Negative };
        let e2 = if i < 31 || (38..146).contains(&i) { Verdict::Positive } else { Verdict::Negative };
        for (e, v) in [("e1", e1), ("e2", e2)] {
            labels.push(ExpertLabel {
                listing_id: id.clone(),
                expert_id: e.into(),
                verdict: v,
                stage: Stage::Initial,
                at: at(labels.len() as i64),
            });
        }
    }
    (ids, labels)
}

/// Best-matching purity of argmax topic against a two-way grouping.
pub fn topic_purity(thetas: &[Vec<f64>], group: &[bool]) -> f64 {
    let assign: Vec<usize> = thetas
        .iter()
        .map(|t| (0..t.len()).max_by(|&a, &b| t[a].total_cmp(&t[b]).then(b.cmp(&a))).unwrap())
        .collect();
    adtriage_core::cluster::purity(&assign, group)
}

/// A random graph: RBF over uniform points or a KNN graph, with a random
/// subset of nodes seeded positive or negative.
pub struct RandomGraph {
    pub graph: adtriage_core::ssl::AffinityGraph,
    pub y: nalgebra::DMatrix<f64>,
}

pub fn random_graph(seed: u64, max_n: usize) -> RandomGraph {
    use adtriage_core::ssl::{knn_affinity, rbf_affinity};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=max_n);
    let dim = rng.random_range(1..=5);
    let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect();
    let graph = if rng.random_bool(0.5) {
        rbf_affinity(&ids, &x, rng.random_range(0.5..20.0)).unwrap()
    } else {
        knn_affinity(&ids, &x, rng.random_range(1..=7.min(n - 1))).unwrap()
    };
    let y = nalgebra::DMatrix::from_fn(n, 2, |_, _| 0.0);
    let mut y = y;
    for i in 0..n {
        match rng.random_range(0..4) {
            0 => y[(i, 0)] = 1.0,
            1 => y[(i, 1)] = 1.0,
            _ => {}
        }
    }
    RandomGraph { graph, y }
}

/// `log2 N - (1/N) sum c log2 c`, summed with Neumaier compensation.
pub fn entropy_oracle(tokens: &[String]) -> f64 {
    let mut counts: std::collections::HashMap<&str, u64> = std::collections::HashMap::new();
    for t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let n = tokens.len() as f64;
    if tokens.is_empty() {
        return 0.0;
    }
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &c in counts.values() {
        let term = c as f64 * (c as f64).log2();
        let t = sum + term;
        comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
        sum = t;
    }
    n.log2() - (sum + comp) / n
}
