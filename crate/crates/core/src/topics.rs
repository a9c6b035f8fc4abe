//! LDA topic model fitted by collapsed Gibbs sampling.
//!
//! Each listing becomes a `K`-dimensional document-topic mixture (`theta`),
//! which is the space the graph learner works in.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOPICS: usize = 25;
pub const DEFAULT_BETA: f64 = 0.01;
pub const DEFAULT_SWEEPS: usize = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LdaConfig {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl LdaConfig {
    /// `alpha = 50 / k`, `beta = 0.01`, 1,000 sweeps.
    pub fn with_topics(k: usize, seed: u64) -> Self {
        LdaConfig {
            k,
            alpha: 50.0 / k.max(1) as f64,
            beta: DEFAULT_BETA,
            iterations: DEFAULT_SWEEPS,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidInput("topic count must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) || !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidInput("alpha and beta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicModel {
    pub k: usize,
    pub vocabulary: Vec<String>,
    /// `k` rows of length `vocabulary.len()`, each a distribution.
    pub topic_word: Vec<Vec<f64>>,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub iterations: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocTopicVector {
    pub listing_id: String,
    pub theta: Vec<f64>,
}

/// Final Gibbs count tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountTables {
    pub doc_topic: Vec<Vec<u32>>,
    pub topic_word: Vec<Vec<u32>>,
    pub topic_totals: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct LdaFit {
    pub model: TopicModel,
    /// Per training document, `(n_dk + alpha) / (n_d + k alpha)` from the final state.
    pub doc_topic: Vec<Vec<f64>>,
    pub counts: CountTables,
}

/// Drops stop words and tokens seen in fewer than `min_df` documents.
pub fn prepare_documents(docs: &[Vec<String>], stopwords: &HashSet<String>, min_df: usize) -> Vec<Vec<String>> {
    let mut df: HashMap<&str, usize> = HashMap::new();
    for d in docs {
        let uniq: HashSet<&str> = d.iter().map(String::as_str).collect();
        for t in uniq {
            *df.entry(t).or_default() += 1;
        }
    }
    docs.iter()
        .map(|d| {
            d.iter()
                .filter(|t| !stopwords.contains(*t) && df.get(t.as_str()).copied().unwrap_or(0) >= min_df)
                .cloned()
                .collect()
        })
        .collect()
}

fn sample_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Collapsed Gibbs sampling for `cfg.iterations` sweeps.
pub fn fit_lda(docs: &[Vec<String>], cfg: &LdaConfig) -> Result<LdaFit> {
    cfg.validate()?;
    if docs.is_empty() {
        return Err(Error::InvalidInput("no documents".into()));
    }
    let vocabulary: Vec<String> = docs
        .iter()
        .flatten()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if vocabulary.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let index: HashMap<String, usize> =
        vocabulary.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    let words: Vec<Vec<usize>> = docs
        .iter()
        .map(|d| d.iter().map(|w| index[w]).collect())
        .collect();

    let k = cfg.k;
    let v = vocabulary.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut n_dk = vec![vec![0u32; k]; docs.len()];
    let mut n_kw = vec![vec![0u32; v]; k];
    let mut n_k = vec![0u32; k];
    let mut z: Vec<Vec<usize>> = Vec::with_capacity(docs.len());
    for (d, ws) in words.iter().enumerate() {
        let mut zd = Vec::with_capacity(ws.len());
        for &w in ws {
            let t = rng.random_range(0..k);
            n_dk[d][t] += 1;
            n_kw[t][w] += 1;
            n_k[t] += 1;
            zd.push(t);
        }
        z.push(zd);
    }

    let vbeta = v as f64 * cfg.beta;
    let mut p = vec![0.0; k];
    for _ in 0..cfg.iterations {
        for (d, ws) in words.iter().enumerate() {
            for (i, &w) in ws.iter().enumerate() {
                let old = z[d][i];
                n_dk[d][old] -= 1;
                n_kw[old][w] -= 1;
                n_k[old] -= 1;
                for (t, pt) in p.iter_mut().enumerate() {
                    *pt = (n_dk[d][t] as f64 + cfg.alpha) * (n_kw[t][w] as f64 + cfg.beta)
                        / (n_k[t] as f64 + vbeta);
                }
                let new = sample_index(&mut rng, &p);
                z[d][i] = new;
                n_dk[d][new] += 1;
                n_kw[new][w] += 1;
                n_k[new] += 1;
            }
        }
    }

    let topic_word = (0..k)
        .map(|t| {
            let row: Vec<f64> = (0..v)
                .map(|w| (n_kw[t][w] as f64 + cfg.beta) / (n_k[t] as f64 + vbeta))
                .collect();
            renormalize(row)
        })
        .collect();
    let kalpha = k as f64 * cfg.alpha;
    let doc_topic = n_dk
        .iter()
        .zip(&words)
        .map(|(row, ws)| {
            let denom = ws.len() as f64 + kalpha;
            renormalize(row.iter().map(|&c| (c as f64 + cfg.alpha) / denom).collect())
        })
        .collect();

    Ok(LdaFit {
        model: TopicModel {
            k,
            vocabulary,
            topic_word,
            alpha: cfg.alpha,
            beta: cfg.beta,
            seed: cfg.seed,
            iterations: cfg.iterations,
            index,
        },
        doc_topic,
        counts: CountTables {
            doc_topic: n_dk,
            topic_word: n_kw,
            topic_totals: n_k,
        },
    })
}

/// Runs one chain per seed in parallel and keeps the best in-sample fit.
pub fn fit_lda_chains(docs: &[Vec<String>], cfg: &LdaConfig, seeds: &[u64]) -> Result<LdaFit> {
    if seeds.is_empty() {
        return fit_lda(docs, cfg);
    }
    let fits: Vec<LdaFit> = seeds
        .par_iter()
        .map(|&seed| fit_lda(docs, &LdaConfig { seed, ..*cfg }))
        .collect::<Result<_>>()?;
    let scored: Vec<(f64, LdaFit)> = fits
        .into_iter()
        .map(|f| (in_sample_log_likelihood(&f, docs), f))
        .collect();
    // First seed wins ties, so the choice is reproducible.
    let best = scored
        .into_iter()
        .reduce(|a, b| if b.0 > a.0 { b } else { a })
        .expect("nonempty");
    Ok(best.1)
}

fn renormalize(mut row: Vec<f64>) -> Vec<f64> {
    let s: f64 = row.iter().sum();
    if s > 0.0 {
        row.iter_mut().for_each(|x| *x /= s);
    }
    row
}

/// `sum_d sum_w log sum_k theta_dk phi_kw` over the training documents.
pub fn in_sample_log_likelihood(fit: &LdaFit, docs: &[Vec<String>]) -> f64 {
    docs.iter()
        .zip(&fit.doc_topic)
        .map(|(d, theta)| doc_log_likelihood(&fit.model, d, theta))
        .sum()
}

fn doc_log_likelihood(model: &TopicModel, doc: &[String], theta: &[f64]) -> f64 {
    doc.iter()
        .filter_map(|w| model.word_id(w))
        .map(|w| {
            (0..model.k)
                .map(|t| theta[t] * model.topic_word[t][w])
                .sum::<f64>()
                .ln()
        })
        .sum()
}

/// Held-out log-likelihood with theta inferred per document.
pub fn held_out_log_likelihood(model: &TopicModel, docs: &[Vec<String>], burn_in: usize, samples: usize, seed: u64) -> f64 {
    docs.iter()
        .enumerate()
        .map(|(i, d)| {
            let theta = model.infer_theta(d, burn_in, samples, seed.wrapping_add(i as u64));
            doc_log_likelihood(model, d, &theta)
        })
        .sum()
}

impl TopicModel {
    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn word_id(&self, w: &str) -> Option<usize> {
        self.index.get(w).copied()
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .vocabulary
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    /// Fold-in Gibbs sampling with the topic-word table held fixed.
    ///
    /// Theta is averaged over `samples` sweeps after `burn_in`. Unknown
    /// tokens are ignored; a document with none left gets the uniform mixture.
    pub fn infer_theta<S: AsRef<str>>(&self, doc: &[S], burn_in: usize, samples: usize, seed: u64) -> Vec<f64> {
        let k = self.k;
        let ws: Vec<usize> = doc.iter().filter_map(|w| self.word_id(w.as_ref())).collect();
        if ws.is_empty() || k == 1 {
            return vec![1.0 / k as f64; k];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n_dk = vec![0u32; k];
        let mut z: Vec<usize> = ws
            .iter()
            .map(|_| {
                let t = rng.random_range(0..k);
                n_dk[t] += 1;
                t
            })
            .collect();
        let mut p = vec![0.0; k];
        let mut acc = vec![0.0; k];
        let samples = samples.max(1);
        let denom = ws.len() as f64 + k as f64 * self.alpha;
        for sweep in 0..burn_in + samples {
            for (i, &w) in ws.iter().enumerate() {
                n_dk[z[i]] -= 1;
                for (t, pt) in p.iter_mut().enumerate() {
                    *pt = (n_dk[t] as f64 + self.alpha) * self.topic_word[t][w];
                }
                let t = sample_index(&mut rng, &p);
                z[i] = t;
                n_dk[t] += 1;
            }
            if sweep >= burn_in {
                for t in 0..k {
                    acc[t] += (n_dk[t] as f64 + self.alpha) / denom;
                }
            }
        }
        renormalize(acc)
    }

    pub fn infer(&self, listing_id: &str, doc: &[String], burn_in: usize, samples: usize, seed: u64) -> DocTopicVector {
        DocTopicVector {
            listing_id: listing_id.to_owned(),
            theta: self.infer_theta(doc, burn_in, samples, seed),
        }
    }

    /// Top `n` words per topic by probability, ties broken by vocabulary order.
    pub fn top_words(&self, n: usize) -> Vec<Vec<(String, f64)>> {
        self.topic_word
            .iter()
            .map(|row| {
                let mut idx: Vec<usize> = (0..row.len()).collect();
                idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                idx.into_iter()
                    .take(n)
                    .map(|i| (self.vocabulary[i].clone(), row[i]))
                    .collect()
            })
            .collect()
    }

    /// Binary layout: one JSON header line, then the `k x V` matrix as
    /// row-major little-endian `f64`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ModelHeader {
            k: self.k,
            alpha: self.alpha,
            beta: self.beta,
            seed: self.seed,
            iterations: self.iterations,
            vocab_size: self.vocabulary.len(),
            vocabulary: self.vocabulary.clone(),
        };
        let mut buf = serde_json::to_vec(&header).expect("header serializes");
        buf.push(b'\n');
        for row in &self.topic_word {
            for x in row {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = BufReader::new(f);
        let mut line = Vec::new();
        rdr.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
        let header: ModelHeader = serde_json::from_slice(&line).map_err(|e| Error::artifact(path, e))?;
        if header.vocab_size != header.vocabulary.len() || header.k == 0 {
            return Err(Error::artifact(path, "inconsistent header"));
        }
        let mut rest = Vec::new();
        rdr.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if rest.len() != header.k * header.vocab_size * 8 {
            return Err(Error::artifact(path, "matrix size does not match header"));
        }
        let values: Vec<f64> = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let topic_word = values.chunks(header.vocab_size.max(1)).take(header.k).map(<[f64]>::to_vec).collect();
        let mut model = TopicModel {
            k: header.k,
            vocabulary: header.vocabulary,
            topic_word,
            alpha: header.alpha,
            beta: header.beta,
            seed: header.seed,
            iterations: header.iterations,
            index: HashMap::new(),
        };
        model.rebuild_index();
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    #[serde(rename = "K")]
    k: usize,
    alpha: f64,
    beta: f64,
    seed: u64,
    iterations: usize,
    vocab_size: usize,
    vocabulary: Vec<String>,
}

/// `listing_id,topic_0,...` with shortest round-trip float formatting.
pub fn write_theta_csv(path: &Path, thetas: &[DocTopicVector]) -> Result<()> {
    let k = thetas.first().map_or(0, |t| t.theta.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::artifact(path, e))?;
    let mut header = vec!["listing_id".to_owned()];
    header.extend((0..k).map(|t| format!("topic_{t}")));
    w.write_record(&header).map_err(|e| Error::artifact(path, e))?;
    for t in thetas {
        let mut row = vec![t.listing_id.clone()];
        row.extend(t.theta.iter().map(|x| x.to_string()));
        w.write_record(&row).map_err(|e| Error::artifact(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_theta_csv(path: &Path) -> Result<Vec<DocTopicVector>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::artifact(path, e))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::artifact(path, e))?;
        let theta = rec
            .iter()
            .skip(1)
            .map(|c| c.parse::<f64>().map_err(|e| Error::artifact(path, e)))
            .collect::<Result<Vec<_>>>()?;
        out.push(DocTopicVector {
            listing_id: rec[0].to_owned(),
            theta,
        });
    }
    Ok(out)
}
