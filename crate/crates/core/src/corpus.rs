//! Ingestion and cleaning of raw listing files.
//!
//! Raw records arrive as JSONL (canonical) or CSV. Each record becomes a
//! [`RawListing`]; malformed records are counted and logged, never fatal.
//! [`normalize`] turns a raw record into a [`Listing`]: phones canonicalized
//! to ten digits, weight parsed, text lowercased and tokenized.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

/// Smallest and largest weight (lbs) accepted by the parser.
pub const WEIGHT_WINDOW: (u32, u32) = (50, 500);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawListing {
    pub id: String,
    pub title: String,
    pub body: String,
    pub posted_at: DateTime<Utc>,
    pub region: String,
    #[serde(rename = "age", default, skip_serializing_if = "Option::is_none")]
    pub poster_age: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poster_id: Option<String>,
}

impl RawListing {
    /// Title and body joined; every text feature is computed over this.
    pub fn full_text(&self) -> String {
        if self.title.is_empty() {
            self.body.clone()
        } else if self.body.is_empty() {
            self.title.clone()
        } else {
            format!("{}\n{}", self.title, self.body)
        }
    }
}

/// A cleaned listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Listing {
    pub id: String,
    pub tokens: Vec<String>,
    pub normalized_text: String,
    pub phones: Vec<String>,
    pub region: String,
    pub age: Option<u32>,
    pub weight_lbs: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub raw_count: usize,
    pub rejected_count: usize,
    pub per_region_phone_counts: BTreeMap<String, usize>,
}

impl CorpusStats {
    /// Combines two partial aggregates. Region counts add, which is exact
    /// only when the two sides saw disjoint phone sets per region.
    pub fn merge(mut self, other: CorpusStats) -> CorpusStats {
        self.raw_count += other.raw_count;
        self.rejected_count += other.rejected_count;
        for (region, n) in other.per_region_phone_counts {
            *self.per_region_phone_counts.entry(region).or_default() += n;
        }
        self
    }
}

/// One line of the rejected-record log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRecord {
    pub line_number: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Jsonl,
    Csv,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "ndjson" => Ok(InputFormat::Jsonl),
            "csv" => Ok(InputFormat::Csv),
            other => Err(Error::Config(format!("unknown input format `{other}`"))),
        }
    }
}

impl fmt::Display for InputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputFormat::Jsonl => "jsonl",
            InputFormat::Csv => "csv",
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub listings: Vec<RawListing>,
    pub stats: CorpusStats,
    pub rejected: Vec<RejectedRecord>,
}

/// Reads a corpus file. Input order is preserved; bad records are skipped.
pub fn ingest(path: &Path, format: InputFormat) -> Result<Ingested> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        InputFormat::Jsonl => ingest_jsonl(BufReader::new(file), path),
        InputFormat::Csv => ingest_csv(file),
    }
}

fn ingest_jsonl<R: BufRead>(reader: R, path: &Path) -> Result<Ingested> {
    let mut acc = Accumulator::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RawListing>(&line).map_err(|e| e.to_string());
        acc.push(idx + 1, parsed);
    }
    Ok(acc.finish())
}

fn ingest_csv<R: Read>(reader: R) -> Result<Ingested> {
    let mut acc = Accumulator::default();
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        // An empty file has no header row and no records.
        Err(_) => return Ok(acc.finish()),
    };
    for record in rdr.records() {
        let (line, parsed) = match record {
            Ok(rec) => {
                let line = rec.position().map_or(0, |p| p.line() as usize);
                (line, rec.deserialize::<RawListing>(Some(&headers)).map_err(|e| e.to_string()))
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                (line, Err(e.to_string()))
            }
        };
        acc.push(line, parsed);
    }
    Ok(acc.finish())
}

#[derive(Default)]
struct Accumulator {
    seen: HashSet<String>,
    out: Ingested,
    phones: BTreeMap<String, BTreeSet<String>>,
}

impl Accumulator {
    fn push(&mut self, line_number: usize, parsed: std::result::Result<RawListing, String>) {
        self.out.stats.raw_count += 1;
        let verdict = parsed.and_then(|raw| {
            if raw.id.trim().is_empty() {
                Err("empty id".to_owned())
            } else if self.seen.contains(&raw.id) {
                Err(format!("duplicate id `{}`", raw.id))
            } else {
                Ok(raw)
            }
        });
        match verdict {
            Ok(raw) => {
                self.seen.insert(raw.id.clone());
                let region = self.phones.entry(raw.region.clone()).or_default();
                region.extend(extract_phones(&raw.full_text()));
                self.out.listings.push(raw);
            }
            Err(reason) => {
                self.out.stats.rejected_count += 1;
                self.out.rejected.push(RejectedRecord { line_number, reason });
            }
        }
    }

    fn finish(mut self) -> Ingested {
        self.out.stats.per_region_phone_counts = self
            .phones
            .into_iter()
            .map(|(region, set)| (region, set.len()))
            .collect();
        self.out
    }
}

static NUMERIC_PHONE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?:\+?1[\s.\-]?)?(?:\(\d{3}\)|\d{3})(?:[ \t]*[.\-][ \t]*|\s)?\d{3}(?:[ \t]*[.\-][ \t]*|\s)?\d{4}").unwrap()
});

static PIECE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[a-z]+|[0-9]+").unwrap());

static WEIGHT_UNIT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?:^|[^0-9a-z])([0-9]{2,3})\s*-?\s*(?:lbs|lb|pounds|pound|ibs)\b").unwrap()
});

static WEIGHT_KEYWORD: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\bweigh(?:t|s|ing)?\s*[:=\-]?\s*([0-9]{2,3})\b").unwrap()
});

const DIGIT_WORDS: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

#[derive(Debug, Clone, PartialEq, Eq)]
struct PhoneSpan {
    start: usize,
    end: usize,
    digits: String,
}

fn canonical_phone(digits: &str) -> Option<String> {
    match digits.len() {
        10 => Some(digits.to_owned()),
        11 if digits.starts_with('1') => Some(digits[1..].to_owned()),
        _ => None,
    }
}

fn phone_spans(lowered: &str) -> Vec<PhoneSpan> {
    let bytes = lowered.as_bytes();
    let mut spans = Vec::new();
    for m in NUMERIC_PHONE.find_iter(lowered) {
        let before_ok = m.start() == 0 || !bytes[m.start() - 1].is_ascii_digit();
        let after_ok = m.end() == bytes.len() || !bytes[m.end()].is_ascii_digit();
        if !(before_ok && after_ok) {
            continue;
        }
        let digits: String = m.as_str().chars().filter(char::is_ascii_digit).collect();
        if let Some(digits) = canonical_phone(&digits) {
            spans.push(PhoneSpan {
                start: m.start(),
                end: m.end(),
                digits,
            });
        }
    }

    // Spelled-out or spaced digits: "five five five 1 2 3 ...", "5-5-5-...".
    let pieces: Vec<(usize, usize, String)> = PIECE
        .find_iter(lowered)
        .filter(|m| !spans.iter().any(|s| m.start() < s.end && s.start < m.end()))
        .filter_map(|m| {
            let s = m.as_str();
            let digits = if s.bytes().all(|b| b.is_ascii_digit()) {
                s.to_owned()
            } else {
                DIGIT_WORDS.iter().position(|w| *w == s)?.to_string()
            };
            Some((m.start(), m.end(), digits))
        })
        .collect();

    let mut i = 0;
    while i < pieces.len() {
        let mut digits = String::new();
        let mut found = None;
        let mut j = i;
        while j < pieces.len() {
            if j > i {
                let gap = pieces[j].0 - pieces[j - 1].1;
                if gap > 1 {
                    break;
                }
            }
            digits.push_str(&pieces[j].2);
            if let Some(d) = canonical_phone(&digits) {
                found = Some((j, d));
            }
            // Ten digits can still grow into the "1" + ten form; nothing longer can.
            if digits.len() >= 11 || (digits.len() == 10 && !digits.starts_with('1')) {
                break;
            }
            j += 1;
        }
        match found {
            Some((end_idx, d)) => {
                spans.push(PhoneSpan {
                    start: pieces[i].0,
                    end: pieces[end_idx].1,
                    digits: d,
                });
                i = end_idx + 1;
            }
            None => i += 1,
        }
    }
    spans.sort_by_key(|s| s.start);
    spans
}

/// All phone numbers in `text`, canonicalized to ten digits, in order of appearance.
pub fn extract_phones(text: &str) -> Vec<String> {
    phone_spans(&text.to_lowercase())
        .into_iter()
        .map(|s| s.digits)
        .collect()
}

/// Parses a body weight in pounds. Values outside [`WEIGHT_WINDOW`] are ignored.
pub fn parse_weight(text: &str) -> Option<u32> {
    let lowered = text.to_lowercase();
    let (lo, hi) = WEIGHT_WINDOW;
    let mut hits: Vec<(usize, u32)> = WEIGHT_UNIT
        .captures_iter(&lowered)
        .chain(WEIGHT_KEYWORD.captures_iter(&lowered))
        .filter_map(|c| {
            let g = c.get(1)?;
            let n: u32 = g.as_str().parse().ok()?;
            (lo..=hi).contains(&n).then_some((g.start(), n))
        })
        .collect();
    hits.sort_unstable();
    hits.first().map(|&(_, n)| n)
}

/// Cleans one raw record. Total: every input yields a listing.
pub fn normalize(raw: &RawListing) -> Listing {
    let lowered = raw.full_text().to_lowercase();
    let spans = phone_spans(&lowered);

    let mut collapsed = String::with_capacity(lowered.len());
    let mut cursor = 0;
    for s in &spans {
        collapsed.push_str(&lowered[cursor..s.start]);
        collapsed.push(' ');
        collapsed.push_str(&s.digits);
        collapsed.push(' ');
        cursor = s.end;
    }
    collapsed.push_str(&lowered[cursor..]);

    let tokens = tokenize(&collapsed);
    Listing {
        id: raw.id.clone(),
        normalized_text: tokens.join(" "),
        tokens,
        phones: spans.into_iter().map(|s| s.digits).collect(),
        region: raw.region.clone(),
        age: raw.poster_age,
        weight_lbs: parse_weight(&collapsed),
    }
}

/// Distinct phones per region. With `min_count > 0`, regions at or below
/// the threshold are dropped.
pub fn phone_report(listings: &[Listing], min_count: usize) -> CorpusStats {
    let mut per_region: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    for l in listings {
        per_region
            .entry(l.region.clone())
            .or_default()
            .extend(l.phones.iter().map(String::as_str));
    }
    let per_region_phone_counts = per_region
        .into_iter()
        .map(|(r, set)| (r, set.len()))
        .filter(|&(_, n)| min_count == 0 || n > min_count)
        .collect();
    CorpusStats {
        raw_count: listings.len(),
        rejected_count: 0,
        per_region_phone_counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn raw(id: &str, body: &str) -> RawListing {
        RawListing {
            id: id.into(),
            title: String::new(),
            body: body.into(),
            posted_at: "2016-03-01T00:00:00Z".parse().unwrap(),
            region: "AZ".into(),
            poster_age: None,
            poster_id: None,
        }
    }

    #[test]
    fn hello_world() {
        assert_eq!(normalize(&raw("1", "Hello,,  WORLD!!")).tokens, vec!["hello", "world"]);
    }

    #[test]
    fn parenthesized_phone() {
        let l = normalize(&raw("1", "call (555) 123-4567 now"));
        assert_eq!(l.phones, vec!["5551234567"]);
        assert!(l.tokens.contains(&"call".to_string()));
        assert!(l.tokens.contains(&"now".to_string()));
    }

    #[test]
    fn phone_formats() {
        for text in [
            "555.123.4567",
            "555-123-4567",
            "(555)123-4567",
            "5551234567",
            "15551234567",
            "+1 555 123 4567",
            "1-555-123-4567",
            "five five five one two three four five six seven",
            "5 5 5 1 2 3 4 5 6 7",
            "5-5-5-1-2-3-4-5-6-7",
            "555 one two three 4567",
        ] {
            assert_eq!(extract_phones(text), vec!["5551234567"], "{text}");
        }
        assert!(extract_phones("555123456").is_empty());
        assert!(extract_phones("roses 100 150 200").is_empty());
        assert!(extract_phones("two girls").is_empty());
        assert_eq!(
            extract_phones("text 602.555.0101 or 480-555-0199"),
            vec!["6025550101", "4805550199"]
        );
    }

    #[test]
    fn weight_phrasings() {
        let cases: [(&str, Option<u32>); 20] = [
            ("petite 105 lbs sweetheart", Some(105)),
            ("105lbs", Some(105)),
            ("105 lb", Some(105)),
            ("105lb of fun", Some(105)),
            ("105 pounds", Some(105)),
            ("105 LBS", Some(105)),
            ("105 Lbs.", Some(105)),
            ("weight: 105 lbs", Some(105)),
            ("weight 105", Some(105)),
            ("weighing 98 pounds", Some(98)),
            ("5'2 110lbs 34c", Some(110)),
            ("34c-24-36 120 lbs", Some(120)),
            ("only 95-lbs", Some(95)),
            ("(250 lbs)", Some(250)),
            ("600 lbs", None),
            ("45 lbs", None),
            ("call 105 now", None),
            ("1105 lbs", None),
            ("no weight given", None),
            ("weighs 130 and 5'6", Some(130)),
        ];
        for (text, want) in cases {
            assert_eq!(parse_weight(text), want, "{text}");
        }
        assert_eq!(normalize(&raw("1", "petite 105 lbs sweetheart")).weight_lbs, Some(105));
    }

    #[test]
    fn phone_digits_never_become_weight() {
        let l = normalize(&raw("1", "call 555 123 4567 lbs"));
        assert_eq!(l.weight_lbs, None);
    }

    #[test]
    fn phone_report_counts_distinct() {
        let mut ls: Vec<Listing> = (0..7)
            .map(|i| normalize(&raw(&i.to_string(), "call 602-555-0101")))
            .collect();
        let mut ca = normalize(&raw("ca", "call 213-555-0101"));
        ca.region = "CA".into();
        ls.push(ca);
        let all = phone_report(&ls, 0).per_region_phone_counts;
        assert_eq!(all, BTreeMap::from([("AZ".into(), 1), ("CA".into(), 1)]));
        assert!(phone_report(&ls, 5).per_region_phone_counts.is_empty());
        assert!(phone_report(&[], 5).per_region_phone_counts.is_empty());
    }

    #[test]
    fn ingest_counts_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let mut f = File::create(&p).unwrap();
        writeln!(f, r#"{{"id":"a","title":"t","body":"","posted_at":"2016-03-01T00:00:00Z","region":"AZ"}}"#).unwrap();
        writeln!(f, "{{not json").unwrap();
        writeln!(f, r#"{{"id":"b","title":"t","body":"x","posted_at":"2016-03-01T00:00:00Z","region":"AZ","age":22}}"#).unwrap();
        drop(f);
        let got = ingest(&p, InputFormat::Jsonl).unwrap();
        assert_eq!(got.listings.len(), 2);
        assert_eq!(got.stats.raw_count, 3);
        assert_eq!(got.stats.rejected_count, 1);
        assert_eq!(got.rejected[0].line_number, 2);
        assert_eq!(got.listings[1].poster_age, Some(22));
    }

    #[test]
    fn ingest_empty_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        File::create(&p).unwrap();
        let got = ingest(&p, InputFormat::Jsonl).unwrap();
        assert!(got.listings.is_empty());
        assert_eq!(got.stats, CorpusStats::default());
        let got = ingest(&p, InputFormat::Csv).unwrap();
        assert_eq!(got.stats.raw_count, 0);

        assert!(matches!(
            ingest(&dir.path().join("nope"), InputFormat::Jsonl),
            Err(Error::Io { .. })
        ));
        assert!(matches!("xml".parse::<InputFormat>(), Err(Error::Config(_))));
    }

    #[test]
    fn ingest_csv_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        std::fs::write(
            &p,
            "id,title,body,posted_at,region,age,poster_id\n\
             a,hi,\"sweet, new in town\",2016-03-01T00:00:00Z,AZ,,\n\
             b,hi,body,not-a-date,AZ,,\n\
             a,dup,body,2016-03-01T00:00:00Z,AZ,21,p1\n\
             c,hi,body,2016-03-02T00:00:00Z,CA,21,p1\n",
        )
        .unwrap();
        let got = ingest(&p, InputFormat::Csv).unwrap();
        assert_eq!(got.stats.raw_count, 4);
        assert_eq!(got.stats.rejected_count, 2);
        let ids: Vec<_> = got.listings.iter().map(|l| l.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "c"]);
        assert_eq!(got.listings[0].body, "sweet, new in town");
        assert_eq!(got.listings[1].poster_age, Some(21));
    }
}
