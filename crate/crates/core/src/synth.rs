//! Synthetic ad corpora with known ground truth.
//!
//! Three kinds of listing are generated:
//!
//! * **clean**: ordinary single-poster ads that trip none of the fifteen
//!   feature detectors (short vocabulary, first person, no lexicon hits);
//! * **incidental**: clean ads plus exactly one harmless trigger (a low
//!   weight, the word "sweet", a massage mention, ...). They survive the
//!   filter but are not trafficking;
//! * **trafficking**: long third-person ads drawn from a distinct vocabulary
//!   and carrying several injected signals at once.
//!
//! The filtered set is exactly incidental + trafficking, which gives tests a
//! planted count to check against.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::RawListing;
use crate::features::FeatureVector;
use crate::labeling::{ExpertLabel, Stage, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdKind {
    Clean,
    Incidental,
    Trafficking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub total: usize,
    pub trafficking: usize,
    pub incidental: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            total: 2_000,
            trafficking: 200,
            incidental: 600,
            seed: 2016,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub listings: Vec<RawListing>,
    pub truth: BTreeMap<String, AdKind>,
}

impl SynthCorpus {
    pub fn ids_of(&self, kind: AdKind) -> Vec<String> {
        self.listings
            .iter()
            .filter(|l| self.truth[&l.id] == kind)
            .map(|l| l.id.clone())
            .collect()
    }

    pub fn planted_count(&self) -> usize {
        self.truth.values().filter(|k| **k != AdKind::Clean).count()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for l in &self.listings {
            out.push_str(&serde_json::to_string(l).expect("listing serializes"));
            out.push('\n');
        }
        out
    }
}

const BENIGN: &[&str] = &[
    "gorgeous", "classy", "upscale", "companion", "discreet", "elegant", "incall", "outcall",
    "available", "tonight", "gentlemen", "relax", "fun", "friendly", "independent", "private",
    "clean", "safe", "satisfaction", "curvy", "blonde", "brunette", "tall", "slim", "sexy",
    "unforgettable", "experience", "pleasure", "stunning", "beautiful", "charming", "smile",
    "dinner", "date", "weekend", "travel", "luxury", "hotel", "downtown", "upstairs", "cozy",
    "romantic", "exclusive", "vip", "mature", "sophisticated", "genuine", "real", "photos",
    "verified", "reviews", "appointment", "booking", "respectful", "generous", "classic",
    "natural", "fit", "athletic", "tattoos", "redhead", "green", "eyes", "legs", "curves",
    "passion", "attention", "company", "conversation", "evening", "morning", "afternoon",
    "late", "night", "calls", "texts", "welcome", "professional", "polished", "lovely",
    "adventurous", "playful", "energetic", "wild", "calm", "relaxing", "atmosphere", "quiet",
    "parking", "easy", "access", "location", "near", "airport", "freeway", "mall", "stadium",
    "convention", "visiting", "business", "traveler", "best", "treat", "yourself", "memorable",
    "moments", "exquisite", "taste", "style", "fashion", "model", "figure", "lingerie",
    "heels", "dress", "perfume", "champagne", "wine", "music", "dancing", "sensual", "touch",
    "warm", "soft", "skin", "deposit", "screening", "required", "donations", "cash", "only",
    "serious", "inquiries", "limited", "time",
];

const TRAFFICKING_VOCAB: &[&str] = &[
    "petite", "tiny", "exotic", "innocent", "doll", "baby", "princess", "shy", "little",
    "tender", "delicate", "obedient", "daddy", "treats", "cutie", "sugar", "honey", "bunny",
    "kitten", "lollipop", "cherry", "blossom", "porcelain", "silk", "lotus", "orchid",
    "jade", "pearl", "teenage", "schoolgirl", "playful", "eager", "please", "submissive",
    "roommate", "house", "manager", "booking", "agency", "arrived", "newly", "visiting",
];

const COUNTRIES: &[&str] = &["china", "vietnam", "korea", "thailand", "taiwan", "philippines"];

const REGIONS: &[&str] = &["AZ", "CA", "TX", "NV", "FL", "NY", "IL", "GA"];

const NAMES: &[&str] = &["kim", "mia", "lin", "amy", "jade", "lily", "coco", "tina", "mei", "ana"];

fn phone(rng: &mut ChaCha8Rng) -> String {
    let area = [602, 480, 213, 310, 702, 305, 212, 312, 404, 713]
        .choose(rng)
        .copied()
        .unwrap_or(602);
    format!("{area}-{:03}-{:04}", rng.random_range(200..1000), rng.random_range(0..10_000))
}

fn clean_text(rng: &mut ChaCha8Rng) -> (String, String) {
    let content: Vec<&str> = BENIGN.choose_multiple(rng, 9).copied().collect();
    let len = rng.random_range(50..=80);
    let mut words = vec!["i"];
    for _ in 0..len {
        words.push(content.choose(rng).copied().unwrap_or("fun"));
    }
    let title = format!("{} {}", content[0], content[1]);
    let mut body = words.join(" ");
    body.push_str(&format!(" call {}", phone(rng)));
    (title, body)
}

fn incidental_trigger(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..6) {
        0 => "sweet".to_owned(),
        1 => "fresh".to_owned(),
        2 => format!("{} lbs", rng.random_range(95..=108)),
        3 => "massage".to_owned(),
        4 => "see mypics.com".to_owned(),
        _ => COUNTRIES.choose(rng).copied().unwrap_or("korea").to_owned(),
    }
}

fn trafficking_text(rng: &mut ChaCha8Rng, pool_phones: &[String]) -> (String, String) {
    let topic: Vec<&str> = TRAFFICKING_VOCAB.choose_multiple(rng, 14).copied().collect();
    let filler: Vec<&str> = BENIGN.choose_multiple(rng, 5).copied().collect();
    let mut parts: Vec<String> = Vec::new();

    let signals: Vec<String> = vec![
        "she is new in town".to_owned(),
        "we are two girls".to_owned(),
        format!("just arrived from {}", COUNTRIES.choose(rng).copied().unwrap_or("korea")),
        format!("{} lbs", rng.random_range(85..=105)),
        format!("visit www.{}{}.com", NAMES.choose(rng).copied().unwrap_or("kim"), rng.random_range(1..99)),
        "relaxing spa massage by her".to_owned(),
        "new to the game and sweet as candy".to_owned(),
        format!(
            "{} {} and {} {}",
            NAMES[rng.random_range(0..5)],
            rng.random_range(18..=22),
            NAMES[rng.random_range(5..10)],
            rng.random_range(18..=22)
        ),
        "her friend is fresh and young".to_owned(),
    ];
    let n_signals = rng.random_range(3..=6);
    let mut chosen: Vec<String> = signals.choose_multiple(rng, n_signals).cloned().collect();
    chosen.shuffle(rng);

    for s in chosen {
        parts.push(s);
        let run = rng.random_range(10..=18);
        let words: Vec<&str> = (0..run)
            .map(|_| {
                if rng.random_bool(0.75) {
                    topic.choose(rng).copied().unwrap_or("doll")
                } else {
                    filler.choose(rng).copied().unwrap_or("fun")
                }
            })
            .collect();
        parts.push(words.join(" "));
    }
    parts.push(format!("ask for her at {}", pool_phones.choose(rng).cloned().unwrap_or_default()));
    let title = format!("{} {} {}", topic[0], topic[1], topic[2]);
    (title, parts.join(", "))
}

/// Generates a corpus. Listing kinds are interleaved at random positions.
pub fn generate(cfg: &SynthConfig) -> SynthCorpus {
    assert!(
        cfg.trafficking + cfg.incidental <= cfg.total,
        "planted listings exceed corpus size"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut kinds: Vec<AdKind> = std::iter::repeat_n(AdKind::Trafficking, cfg.trafficking)
        .chain(std::iter::repeat_n(AdKind::Incidental, cfg.incidental))
        .chain(std::iter::repeat_n(AdKind::Clean, cfg.total - cfg.trafficking - cfg.incidental))
        .collect();
    kinds.shuffle(&mut rng);

    // A handful of numbers shared across trafficking ads.
    let pool_phones: Vec<String> = (0..12).map(|_| phone(&mut rng)).collect();
    let start: DateTime<Utc> = "2016-03-01T00:00:00Z".parse().expect("valid timestamp");

    let mut listings = Vec::with_capacity(cfg.total);
    let mut truth = BTreeMap::new();
    for (i, kind) in kinds.into_iter().enumerate() {
        let id = format!("ad{i:05}");
        let (title, body) = match kind {
            AdKind::Clean => clean_text(&mut rng),
            AdKind::Incidental => {
                let (t, mut b) = clean_text(&mut rng);
                b.push(' ');
                b.push_str(&incidental_trigger(&mut rng));
                (t, b)
            }
            AdKind::Trafficking => trafficking_text(&mut rng, &pool_phones),
        };
        listings.push(RawListing {
            id: id.clone(),
            title,
            body,
            posted_at: start + Duration::minutes(i as i64 * 7),
            region: REGIONS.choose(&mut rng).copied().unwrap_or("AZ").to_owned(),
            poster_age: Some(rng.random_range(19..=35)),
            poster_id: Some(format!("p{}", rng.random_range(0..400))),
        });
        truth.insert(id, kind);
    }
    SynthCorpus { listings, truth }
}

/// Two experts who agree on every listing given to them.
pub fn agreeing_journal(positives: &[String], negatives: &[String], experts: &[&str], start: DateTime<Utc>) -> Vec<ExpertLabel> {
    let mut out = Vec::new();
    let mut tick = 0i64;
    for (ids, verdict) in [(positives, Verdict::Positive), (negatives, Verdict::Negative)] {
        for id in ids {
            for e in experts {
                out.push(ExpertLabel {
                    listing_id: id.clone(),
                    expert_id: (*e).to_owned(),
                    verdict,
                    stage: Stage::Initial,
                    at: start + Duration::seconds(tick),
                });
                tick += 1;
            }
        }
    }
    out
}

/// Feature vectors for the projection check: `filtered` vectors around a
/// shared trafficking signature (third person, high entropy, first n-gram,
/// words of interest, each kept with probability 0.9, every other bit set
/// with probability 0.15, redrawn until at least three bits are set)
/// followed by `dropped` all-zero vectors.
pub fn feature_fixture(filtered: usize, dropped: usize, seed: u64) -> Vec<FeatureVector> {
    const CORE: [usize; 4] = [0, 2, 3, 9];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(filtered + dropped);
    for i in 0..filtered {
        let mut bits = [false; 15];
        while bits.iter().filter(|b| **b).count() < 3 {
            for (j, b) in bits.iter_mut().enumerate() {
                let p = if CORE.contains(&j) { 0.9 } else { 0.15 };
                *b = rng.random_bool(p);
            }
        }
        out.push(FeatureVector::from_bits(format!("f{i}"), bits));
    }
    for i in 0..dropped {
        out.push(FeatureVector::from_bits(format!("d{i}"), [false; 15]));
    }
    out
}
