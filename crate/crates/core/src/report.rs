//! Plain-text and CSV renderings of a run manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::{ResultRow, RunManifest};
use crate::ssl::KernelMeta;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportBundle {
    pub dataset_txt: String,
    pub dataset_csv: String,
    pub results_txt: String,
    pub results_csv: String,
    pub phones_csv: String,
    pub top_terms_csv: String,
}

impl ReportBundle {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("dataset.txt", &self.dataset_txt),
            ("dataset.csv", &self.dataset_csv),
            ("results.txt", &self.results_txt),
            ("results.csv", &self.results_csv),
            ("phones.csv", &self.phones_csv),
            ("top_terms.csv", &self.top_terms_csv),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

pub fn kernel_label(k: &KernelMeta) -> &'static str {
    match k {
        KernelMeta::Rbf { .. } => "RBF",
        KernelMeta::Knn { .. } => "KNN",
    }
}

/// One results line: `KERNEL learner_pos learner_neg confirmed precision`.
pub fn result_line(row: &ResultRow) -> String {
    format!(
        "{} {} {} {} {}",
        kernel_label(&row.kernel),
        row.learner_positive,
        row.learner_negative,
        row.expert_confirmed,
        row.precision_display
    )
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

pub fn report(m: &RunManifest) -> ReportBundle {
    let d = &m.dataset;
    let a = &d.agreement;

    let mut dataset_txt = String::new();
    let _ = writeln!(dataset_txt, "Raw        {}", d.raw);
    let _ = writeln!(dataset_txt, "Filtered   {}", d.filtered);
    let _ = writeln!(dataset_txt, "Labeled    {}", d.labeled);
    let _ = writeln!(dataset_txt, "Unlabeled  {}", d.unlabeled);
    let experts: Vec<&String> = a.per_expert.keys().collect();
    let mut header = String::from("          ");
    for e in &experts {
        let _ = write!(header, " {e}");
    }
    header.push_str(" intersection union");
    let _ = writeln!(dataset_txt, "{header}");
    let pos: Vec<String> = a.per_expert.values().map(|c| c.positive.to_string()).collect();
    let neg: Vec<String> = a.per_expert.values().map(|c| c.negative.to_string()).collect();
    let _ = writeln!(
        dataset_txt,
        "Positive   {} {} {}",
        pos.join(" "),
        a.intersection_pos,
        a.union_pos
    );
    let _ = writeln!(
        dataset_txt,
        "Negative   {} {} {}",
        neg.join(" "),
        a.intersection_neg,
        a.union_neg
    );

    let mut dataset_csv = String::from("metric,value\n");
    for (k, v) in [
        ("raw", d.raw),
        ("rejected", d.rejected),
        ("filtered", d.filtered),
        ("labeled", d.labeled),
        ("unlabeled", d.unlabeled),
        ("intersection_positive", a.intersection_pos),
        ("union_positive", a.union_pos),
        ("intersection_negative", a.intersection_neg),
        ("union_negative", a.union_neg),
    ] {
        let _ = writeln!(dataset_csv, "{k},{v}");
    }
    for (e, c) in &a.per_expert {
        let _ = writeln!(dataset_csv, "{},{}", csv_field(&format!("{e}_positive")), c.positive);
        let _ = writeln!(dataset_csv, "{},{}", csv_field(&format!("{e}_negative")), c.negative);
    }

    let mut results_txt = String::new();
    let mut results_csv = String::from(
        "kernel,policy,negative_rule,positive_seeds,negative_seeds,learner_positive,learner_negative,expert_confirmed,precision\n",
    );
    let mut top_terms_csv = String::from("kernel,variant,rank,term,count\n");
    // Text table grouped by variant, in the order variants first appear.
    let mut slugs: Vec<String> = Vec::new();
    for row in &m.results {
        let slug = row.variant.slug();
        if !slugs.contains(&slug) {
            slugs.push(slug);
        }
    }
    for slug in &slugs {
        let _ = writeln!(
            results_txt,
            "[{slug}] kernel learner_positive learner_negative expert_confirmed precision"
        );
        for row in m.results.iter().filter(|r| &r.variant.slug() == slug) {
            let _ = writeln!(results_txt, "{}", result_line(row));
        }
    }

    for row in &m.results {
        let slug = row.variant.slug();
        let (p, n) = slug.split_once('_').unwrap_or((&slug, ""));
        let _ = writeln!(
            results_csv,
            "{},{p},{n},{},{},{},{},{},{}",
            kernel_label(&row.kernel),
            row.positive_seeds,
            row.negative_seeds,
            row.learner_positive,
            row.learner_negative,
            row.expert_confirmed,
            row.precision_display
        );
        for (rank, t) in row.top_terms.iter().enumerate() {
            let _ = writeln!(
                top_terms_csv,
                "{},{slug},{},{},{}",
                kernel_label(&row.kernel),
                rank + 1,
                csv_field(&t.term),
                t.count
            );
        }
    }

    let mut phones_csv = String::from("region,distinct_phones\n");
    for (region, n) in &m.phone_histogram {
        let _ = writeln!(phones_csv, "{},{n}", csv_field(region));
    }

    ReportBundle {
        dataset_txt,
        dataset_csv,
        results_txt,
        results_csv,
        phones_csv,
        top_terms_csv,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::{NegativeRule, PositivePolicy};
    use crate::pipeline::{DatasetCounts, PipelineConfig, Preprocessing, SeedVariant};

    fn row(pos: usize, neg: usize, confirmed: usize, display: &str) -> ResultRow {
        ResultRow {
            kernel: KernelMeta::Rbf { gamma: 20.0 },
            variant: SeedVariant {
                policy: PositivePolicy::Union,
                negative_rule: NegativeRule::AnyNegative,
            },
            positive_seeds: 146,
            negative_seeds: 4,
            conflicts: 0,
            learner_positive: pos,
            learner_negative: neg,
            expert_confirmed: confirmed,
            expert_rejected: pos - confirmed,
            precision: None,
            precision_display: display.into(),
            top_terms: vec![],
        }
    }

    fn manifest(results: Vec<ResultRow>) -> RunManifest {
        RunManifest {
            config: PipelineConfig::default(),
            corpus_hash: String::new(),
            timings: vec![],
            dataset: DatasetCounts::default(),
            projection_purity: None,
            results,
            phone_histogram: Default::default(),
            preprocessing: Preprocessing {
                entropy_text: "title+body".into(),
                stopword_count: 0,
                lda_min_df: 2,
            },
        }
    }

    #[test]
    fn precision_row_renders() {
        let p = crate::ssl::precision_from_counts(145, 134).percent().unwrap();
        let r = row(145, 704, 134, &p);
        assert_eq!(result_line(&r), "RBF 145 704 134 92.41%");
        assert!(report(&manifest(vec![r])).results_txt.contains("RBF 145 704 134 92.41%\n"));
    }

    #[test]
    fn pending_precision() {
        let b = report(&manifest(vec![row(10, 5, 0, "pending")]));
        assert!(b.results_txt.contains("RBF 10 5 0 pending"));
        assert!(b.results_csv.contains(",pending\n"));
    }

    #[test]
    fn empty_manifest_renders_zeros() {
        let b = report(&manifest(vec![]));
        assert!(b.dataset_txt.starts_with("Raw        0\n"));
        assert!(b.dataset_csv.contains("filtered,0\n"));
        assert_eq!(b.phones_csv, "region,distinct_phones\n");
    }

    #[test]
    fn rows_group_under_their_variant() {
        let inter = SeedVariant {
            policy: PositivePolicy::Intersection,
            negative_rule: NegativeRule::BothNegative,
        };
        let knn = KernelMeta::Knn { k: 7, symmetrization: Default::default() };
        let rows = vec![
            row(1, 1, 0, "pending"),
            ResultRow { variant: inter, ..row(2, 2, 0, "pending") },
            ResultRow { kernel: knn, ..row(3, 3, 0, "pending") },
            ResultRow { kernel: knn, variant: inter, ..row(4, 4, 0, "pending") },
        ];
        let txt = report(&manifest(rows)).results_txt;
        let lines: Vec<&str> = txt.lines().map(|l| l.split(' ').next().unwrap()).collect();
        assert_eq!(lines, ["[union_any_negative]", "RBF", "KNN", "[intersection_both_negative]", "RBF", "KNN"]);
        assert!(txt.contains("KNN 3 3 0 pending\n[intersection"));
    }
}
