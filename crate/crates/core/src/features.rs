//! The fifteen binary trafficking-signal features.
//!
//! | group | flags |
//! |-------|-------|
//! | language pattern | `third_person`, `first_person_plural`, `high_entropy`, six word 4-gram bits |
//! | words of interest | `words_of_interest` |
//! | countries of interest | `country_of_interest` |
//! | multiple victims | `multiple_victims` |
//! | victim weight | `low_weight` |
//! | website / spa | `website_link`, `spa_reference` |
//!
//! Lexicon content is configuration: the built-in lists are seeds and can be
//! replaced file by file through [`LexiconSources`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::Listing;
use crate::error::{Error, Result};
use crate::text::{contains_phrase, parse_lines, tokenize};

pub const NGRAM_N: usize = 4;
pub const NGRAM_SLOTS: usize = 6;
pub const NGRAM_THRESHOLD: f64 = 0.5;
pub const ENTROPY_THRESHOLD: f64 = 4.0;
pub const LOW_WEIGHT_LBS: u32 = 110;

pub const FEATURE_NAMES: [&str; 15] = [
    "third_person",
    "first_person_plural",
    "high_entropy",
    "ngram_1",
    "ngram_2",
    "ngram_3",
    "ngram_4",
    "ngram_5",
    "ngram_6",
    "words_of_interest",
    "country_of_interest",
    "multiple_victims",
    "low_weight",
    "website_link",
    "spa_reference",
];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub listing_id: String,
    pub third_person: bool,
    pub first_person_plural: bool,
    pub high_entropy: bool,
    pub ngram_bits: [bool; NGRAM_SLOTS],
    pub words_of_interest: bool,
    pub country_of_interest: bool,
    pub multiple_victims: bool,
    pub low_weight: bool,
    pub website_link: bool,
    pub spa_reference: bool,
}

impl FeatureVector {
    /// Flags in [`FEATURE_NAMES`] order.
    pub fn bits(&self) -> [bool; 15] {
        let n = self.ngram_bits;
        [
            self.third_person,
            self.first_person_plural,
            self.high_entropy,
            n[0],
            n[1],
            n[2],
            n[3],
            n[4],
            n[5],
            self.words_of_interest,
            self.country_of_interest,
            self.multiple_victims,
            self.low_weight,
            self.website_link,
            self.spa_reference,
        ]
    }

    pub fn from_bits(listing_id: impl Into<String>, b: [bool; 15]) -> Self {
        FeatureVector {
            listing_id: listing_id.into(),
            third_person: b[0],
            first_person_plural: b[1],
            high_entropy: b[2],
            ngram_bits: [b[3], b[4], b[5], b[6], b[7], b[8]],
            words_of_interest: b[9],
            country_of_interest: b[10],
            multiple_victims: b[11],
            low_weight: b[12],
            website_link: b[13],
            spa_reference: b[14],
        }
    }

    pub fn count_set(&self) -> usize {
        self.bits().iter().filter(|&&b| b).count()
    }

    pub fn any_set(&self) -> bool {
        self.bits().iter().any(|&b| b)
    }

    /// The flags as real coordinates, for projection and clustering.
    pub fn as_point(&self) -> Vec<f64> {
        self.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn named_bits(&self) -> BTreeMap<&'static str, u8> {
        FEATURE_NAMES
            .iter()
            .zip(self.bits())
            .map(|(&n, b)| (n, b as u8))
            .collect()
    }
}

/// Shannon entropy, in bits, of the empirical token distribution.
pub fn entropy<S: AsRef<str>>(tokens: &[S]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in tokens {
        *counts.entry(t.as_ref()).or_default() += 1;
    }
    if counts.len() == 1 {
        return 0.0;
    }
    // Fixed summation order keeps the result independent of hash iteration.
    let mut counts: Vec<usize> = counts.into_values().collect();
    counts.sort_unstable();
    let n = tokens.len() as f64;
    let h: f64 = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

/// Strictly above [`ENTROPY_THRESHOLD`].
pub fn high_entropy_bit<S: AsRef<str>>(tokens: &[S]) -> bool {
    entropy(tokens) > ENTROPY_THRESHOLD
}

/// Word 4-gram model: the selected grams and their smoothed idf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgramModel {
    pub n: usize,
    pub selected: Vec<String>,
    pub idf: BTreeMap<String, f64>,
    pub threshold: f64,
}

impl NgramModel {
    pub fn empty() -> Self {
        NgramModel {
            n: NGRAM_N,
            selected: Vec::new(),
            idf: BTreeMap::new(),
            threshold: NGRAM_THRESHOLD,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self).expect("model serializes");
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: NgramModel =
            serde_json::from_str(&body).map_err(|e| Error::artifact(path, e))?;
        if model.selected.len() > NGRAM_SLOTS {
            return Err(Error::artifact(path, "more than six selected n-grams"));
        }
        Ok(model)
    }
}

fn word_ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> impl Iterator<Item = String> + '_ {
    tokens.windows(n).map(|w| {
        w.iter()
            .map(AsRef::as_ref)
            .collect::<Vec<&str>>()
            .join(" ")
    })
}

/// Picks the six most document-frequent word 4-grams (ties lexicographic).
pub fn fit_ngram_model(corpus: &[Listing]) -> Result<NgramModel> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("n-gram model needs a nonempty corpus".into()));
    }
    let mut df: HashMap<String, usize> = HashMap::new();
    for doc in corpus {
        let grams: HashSet<String> = word_ngrams(&doc.tokens, NGRAM_N).collect();
        for g in grams {
            *df.entry(g).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = df.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(NGRAM_SLOTS);

    let n_docs = corpus.len() as f64;
    let idf = ranked
        .iter()
        .map(|(g, d)| (g.clone(), ((1.0 + n_docs) / (1.0 + *d as f64)).ln() + 1.0))
        .collect();
    Ok(NgramModel {
        n: NGRAM_N,
        selected: ranked.into_iter().map(|(g, _)| g).collect(),
        idf,
        threshold: NGRAM_THRESHOLD,
    })
}

/// L2-normalized tf-idf over the selected grams, thresholded.
pub fn ngram_bits(listing: &Listing, model: &NgramModel) -> [bool; NGRAM_SLOTS] {
    let mut bits = [false; NGRAM_SLOTS];
    if model.selected.is_empty() {
        return bits;
    }
    let mut tf: HashMap<String, usize> = HashMap::new();
    for g in word_ngrams(&listing.tokens, model.n) {
        *tf.entry(g).or_default() += 1;
    }
    let weights: Vec<f64> = model
        .selected
        .iter()
        .map(|g| tf.get(g).copied().unwrap_or(0) as f64 * model.idf.get(g).copied().unwrap_or(0.0))
        .collect();
    let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    if norm == 0.0 {
        return bits;
    }
    for (bit, w) in bits.iter_mut().zip(&weights) {
        *bit = w / norm > model.threshold;
    }
    bits
}

const THIRD_PERSON: [&str; 6] = ["she", "her", "hers", "he", "his", "him"];
const FIRST_SINGULAR: [&str; 4] = ["i", "me", "my", "mine"];
const FIRST_PLURAL: [&str; 4] = ["we", "our", "us", "ours"];

/// More third-person pronouns than first-person singular ones.
pub fn third_person_bit<S: AsRef<str>>(tokens: &[S]) -> bool {
    let count = |set: &[&str]| tokens.iter().filter(|t| set.contains(&t.as_ref())).count();
    count(&THIRD_PERSON) > count(&FIRST_SINGULAR)
}

pub fn first_person_plural_bit<S: AsRef<str>>(tokens: &[S]) -> bool {
    tokens.iter().any(|t| FIRST_PLURAL.contains(&t.as_ref()))
}

/// The nine language-pattern flags, in [`FEATURE_NAMES`] order.
pub fn language_pattern_bits(listing: &Listing, model: &NgramModel) -> [bool; 9] {
    let t = &listing.tokens;
    let n = ngram_bits(listing, model);
    [
        third_person_bit(t),
        first_person_plural_bit(t),
        high_entropy_bit(t),
        n[0],
        n[1],
        n[2],
        n[3],
        n[4],
        n[5],
    ]
}

/// Where to read each lexicon from; `None` uses the built-in list.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LexiconSources {
    pub words_of_interest: Option<PathBuf>,
    pub countries: Option<PathBuf>,
    pub spa_terms: Option<PathBuf>,
    pub url_patterns: Option<PathBuf>,
    pub plural_markers: Option<PathBuf>,
}

impl LexiconSources {
    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        [
            &self.words_of_interest,
            &self.countries,
            &self.spa_terms,
            &self.url_patterns,
            &self.plural_markers,
        ]
        .into_iter()
        .filter_map(|p| p.as_deref())
    }
}

#[derive(Debug, Clone)]
pub struct Lexicons {
    pub words_of_interest: Vec<Vec<String>>,
    pub countries: Vec<Vec<String>>,
    pub spa_terms: Vec<Vec<String>>,
    pub plural_markers: Vec<Vec<String>>,
    pub url_patterns: Vec<Regex>,
}

const BUILTIN_WORDS: &str = include_str!("../lexicons/words_of_interest.txt");
const BUILTIN_COUNTRIES: &str = include_str!("../lexicons/countries.txt");
const BUILTIN_SPA: &str = include_str!("../lexicons/spa_terms.txt");
const BUILTIN_URLS: &str = include_str!("../lexicons/url_patterns.txt");
const BUILTIN_PLURAL: &str = include_str!("../lexicons/plural_markers.txt");

fn phrase_set(name: &str, body: &str) -> Result<Vec<Vec<String>>> {
    let set: Vec<Vec<String>> = parse_lines(body)
        .iter()
        .map(|l| tokenize(l))
        .filter(|p| !p.is_empty())
        .collect();
    if set.is_empty() {
        return Err(Error::Config(format!("lexicon `{name}` is empty")));
    }
    Ok(set)
}

fn pattern_set(body: &str) -> Result<Vec<Regex>> {
    // Patterns keep their case-sensitive spelling; only comments are stripped.
    let lines: Vec<&str> = body
        .lines()
        .map(|l| l.split(" #").next().unwrap_or(""))
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();
    if lines.is_empty() {
        return Err(Error::Config("lexicon `url_patterns` is empty".into()));
    }
    lines
        .into_iter()
        .map(|l| Regex::new(l).map_err(|e| Error::Config(format!("bad url pattern `{l}`: {e}"))))
        .collect()
}

impl Lexicons {
    pub fn builtin() -> Self {
        Self::from_bodies(BUILTIN_WORDS, BUILTIN_COUNTRIES, BUILTIN_SPA, BUILTIN_URLS, BUILTIN_PLURAL)
            .expect("built-in lexicons are valid")
    }

    pub fn from_bodies(
        words: &str,
        countries: &str,
        spa: &str,
        urls: &str,
        plural: &str,
    ) -> Result<Self> {
        Ok(Lexicons {
            words_of_interest: phrase_set("words_of_interest", words)?,
            countries: phrase_set("countries", countries)?,
            spa_terms: phrase_set("spa_terms", spa)?,
            plural_markers: phrase_set("plural_markers", plural)?,
            url_patterns: pattern_set(urls)?,
        })
    }

    pub fn load(sources: &LexiconSources) -> Result<Self> {
        let read = |p: &Option<PathBuf>, fallback: &'static str| -> Result<String> {
            match p {
                Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e)),
                None => Ok(fallback.to_owned()),
            }
        };
        Self::from_bodies(
            &read(&sources.words_of_interest, BUILTIN_WORDS)?,
            &read(&sources.countries, BUILTIN_COUNTRIES)?,
            &read(&sources.spa_terms, BUILTIN_SPA)?,
            &read(&sources.url_patterns, BUILTIN_URLS)?,
            &read(&sources.plural_markers, BUILTIN_PLURAL)?,
        )
    }
}

fn any_phrase(tokens: &[String], set: &[Vec<String>]) -> bool {
    set.iter().any(|p| contains_phrase(tokens, p))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LexiconBits {
    pub words_of_interest: bool,
    pub country_of_interest: bool,
    pub website_link: bool,
    pub spa_reference: bool,
}

pub fn lexicon_bits(listing: &Listing, lex: &Lexicons) -> LexiconBits {
    let t = &listing.tokens;
    LexiconBits {
        words_of_interest: any_phrase(t, &lex.words_of_interest),
        country_of_interest: any_phrase(t, &lex.countries),
        website_link: lex.url_patterns.iter().any(|r| r.is_match(&listing.normalized_text)),
        spa_reference: any_phrase(t, &lex.spa_terms),
    }
}

const COUNT_WORDS: [&str; 22] = [
    "2", "3", "4", "5", "6", "7", "8", "9", "10", "two", "three", "four", "five", "six", "seven",
    "eight", "nine", "ten", "both", "several", "multiple", "many",
];

const PERSON_NOUNS: [&str; 18] = [
    "girl", "girls", "lady", "ladies", "woman", "women", "babes", "chicks", "hotties", "models",
    "friends", "sisters", "escorts", "beauties", "angels", "dolls", "honeys", "playmates",
];

// Numbers followed by one of these are measurements, prices or durations.
const NON_AGE_UNITS: [&str; 27] = [
    "lbs", "lb", "pounds", "ibs", "min", "mins", "minutes", "hr", "hrs", "hour", "hours", "hh",
    "h", "roses", "rose", "dollars", "usd", "bucks", "inch", "inches", "in", "cm", "kg", "am",
    "pm", "percent", "th",
];

const AGE_SUFFIXES: [&str; 7] = ["yo", "y", "yrs", "yr", "years", "year", "yrsold"];

/// Positions in `tokens` that read as a person's age.
///
/// Accepts explicit forms ("21 yo", "21yrs", "age 21") and bare numbers in
/// 18..=59 that are not measurements, durations, prices, or part of a run of
/// three or more numbers (vital statistics such as "36 24 36").
pub fn age_mentions<S: AsRef<str>>(tokens: &[S]) -> Vec<usize> {
    let toks: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    let is_num = |i: usize| toks.get(i).is_some_and(|t| t.bytes().all(|b| b.is_ascii_digit()));
    // "34c", "36dd": bust sizes sit inside measurement runs.
    let is_measure = |i: usize| {
        is_num(i)
            || toks.get(i).is_some_and(|t| {
                let d = t.bytes().take_while(u8::is_ascii_digit).count();
                d == 2 && (1..=3).contains(&(t.len() - d)) && t.bytes().skip(d).all(|b| (b'a'..=b'h').contains(&b))
            })
    };
    let mut out = Vec::new();
    for (i, &t) in toks.iter().enumerate() {
        let glued = t
            .find(|c: char| !c.is_ascii_digit())
            .filter(|&k| k > 0)
            .and_then(|k| AGE_SUFFIXES.contains(&&t[k..]).then(|| &t[..k]));
        if let Some(num) = glued {
            if num.parse::<u32>().is_ok_and(|n| (16..=70).contains(&n)) {
                out.push(i);
            }
            continue;
        }
        if !is_num(i) {
            continue;
        }
        let Ok(n) = t.parse::<u32>() else { continue };
        let next = toks.get(i + 1).copied();
        let prev = i.checked_sub(1).map(|p| toks[p]);
        let explicit = next.is_some_and(|w| AGE_SUFFIXES.contains(&w))
            || prev.is_some_and(|w| w == "age" || w == "aged");
        if explicit {
            if (16..=70).contains(&n) {
                out.push(i);
            }
            continue;
        }
        if !(18..=59).contains(&n) {
            continue;
        }
        if next.is_some_and(|w| NON_AGE_UNITS.contains(&w)) {
            continue;
        }
        if n == 24 && next == Some("7") {
            continue;
        }
        let run_start = (0..=i).rev().take_while(|&j| is_measure(j)).last().unwrap_or(i);
        let run_end = (i..toks.len()).take_while(|&j| is_measure(j)).last().unwrap_or(i);
        if run_end - run_start >= 2 {
            continue;
        }
        // Prices: "only 40", "special 60", "40 special".
        if prev.is_some_and(|w| matches!(w, "only" | "special" | "for" | "just" | "donation" | "rate" | "rates"))
            || next.is_some_and(|w| matches!(w, "special" | "specials" | "off" | "qv" | "qk"))
        {
            continue;
        }
        out.push(i);
    }
    out
}

/// More than one person advertised.
pub fn victim_count_bit(listing: &Listing, lex: &Lexicons) -> bool {
    let t = &listing.tokens;
    if any_phrase(t, &lex.plural_markers) {
        return true;
    }
    let counted_people = t
        .windows(2)
        .any(|w| COUNT_WORDS.contains(&w[0].as_str()) && PERSON_NOUNS.contains(&w[1].as_str()));
    counted_people || age_mentions(t).len() >= 2
}

pub fn low_weight_bit(listing: &Listing) -> bool {
    listing.weight_lbs.is_some_and(|w| w < LOW_WEIGHT_LBS)
}

/// Fitted n-gram model plus lexicons: everything needed to score a listing.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub ngrams: NgramModel,
    pub lexicons: Lexicons,
}

impl FeatureExtractor {
    pub fn new(ngrams: NgramModel, lexicons: Lexicons) -> Self {
        FeatureExtractor { ngrams, lexicons }
    }

    pub fn extract(&self, listing: &Listing) -> FeatureVector {
        extract_feature_vector(listing, &self.ngrams, &self.lexicons)
    }
}

pub fn extract_feature_vector(listing: &Listing, model: &NgramModel, lex: &Lexicons) -> FeatureVector {
    let lang = language_pattern_bits(listing, model);
    let lexb = lexicon_bits(listing, lex);
    FeatureVector {
        listing_id: listing.id.clone(),
        third_person: lang[0],
        first_person_plural: lang[1],
        high_entropy: lang[2],
        ngram_bits: [lang[3], lang[4], lang[5], lang[6], lang[7], lang[8]],
        words_of_interest: lexb.words_of_interest,
        country_of_interest: lexb.country_of_interest,
        multiple_victims: victim_count_bit(listing, lex),
        low_weight: low_weight_bit(listing),
        website_link: lexb.website_link,
        spa_reference: lexb.spa_reference,
    }
}

/// Writes `listing_id` plus the fifteen named 0/1 columns.
pub fn write_feature_csv(path: &Path, vectors: &[FeatureVector]) -> Result<()> {
    let mut out = String::from("listing_id");
    for n in FEATURE_NAMES {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for v in vectors {
        let mut row = vec![v.listing_id.clone()];
        row.extend(v.bits().iter().map(|&b| (b as u8).to_string()));
        w.write_record(&row).map_err(|e| Error::artifact(path, e))?;
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf8"));
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_feature_csv(path: &Path) -> Result<Vec<FeatureVector>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::artifact(path, e))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::artifact(path, e))?;
        if rec.len() != 16 {
            return Err(Error::artifact(path, "expected 16 columns"));
        }
        let mut bits = [false; 15];
        for (b, cell) in bits.iter_mut().zip(rec.iter().skip(1)) {
            *b = match cell {
                "0" => false,
                "1" => true,
                other => return Err(Error::artifact(path, format!("bad bit `{other}`"))),
            };
        }
        out.push(FeatureVector::from_bits(&rec[0], bits));
    }
    Ok(out)
}
