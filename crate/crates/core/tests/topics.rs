mod common;

use adtriage_core::topics::{fit_lda, held_out_log_likelihood, LdaConfig};

#[test]
fn rows_are_distributions() {
    let (docs, _) = common::disjoint_vocab_docs(40, 30, 1);
    for k in [1, 2, 5, 25] {
        let fit = fit_lda(&docs, &LdaConfig { iterations: 50, ..LdaConfig::with_topics(k, 3) }).unwrap();
        for row in fit.doc_topic.iter().chain(&fit.model.topic_word) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(row.iter().all(|p| *p > 0.0));
        }
        for d in docs.iter().take(5) {
            let th = fit.model.infer_theta(d, 20, 20, 9);
            assert!((th.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn disjoint_vocabularies_separate() {
    let (docs, group) = common::disjoint_vocab_docs(100, 40, 2);
    let fit = fit_lda(&docs, &LdaConfig { iterations: 300, ..LdaConfig::with_topics(2, 17) }).unwrap();
    let purity = common::topic_purity(&fit.doc_topic, &group);
    assert!(purity >= 0.95, "purity {purity}");
}

#[test]
fn one_topic_gives_unit_theta() {
    let (docs, _) = common::disjoint_vocab_docs(20, 10, 4);
    let fit = fit_lda(&docs, &LdaConfig { iterations: 20, ..LdaConfig::with_topics(1, 0) }).unwrap();
    assert!(fit.doc_topic.iter().all(|t| t == &vec![1.0]));
    assert!(docs.iter().all(|d| fit.model.infer_theta(d, 5, 5, 1) == vec![1.0]));
}

#[test]
fn held_out_likelihood_does_not_degrade() {
    let (train, _) = common::disjoint_vocab_docs(60, 40, 5);
    let (held, _) = common::disjoint_vocab_docs(10, 40, 6);
    let mut prev: Option<f64> = None;
    for sweeps in [100, 200, 300, 400, 500] {
        let fit = fit_lda(&train, &LdaConfig { iterations: sweeps, ..LdaConfig::with_topics(2, 8) }).unwrap();
        let ll = held_out_log_likelihood(&fit.model, &held, 30, 30, 2);
        assert!(ll.is_finite());
        if let Some(p) = prev {
            assert!(ll >= p - 0.02 * p.abs(), "sweeps {sweeps}: {ll} after {p}");
        }
        prev = Some(ll);
    }
}

#[test]
fn same_seed_same_counts() {
    let (docs, _) = common::disjoint_vocab_docs(30, 20, 7);
    let cfg = LdaConfig { iterations: 40, ..LdaConfig::with_topics(4, 99) };
    let a = fit_lda(&docs, &cfg).unwrap();
    let b = fit_lda(&docs, &cfg).unwrap();
    assert_eq!(a.counts, b.counts);
    assert_eq!(a.doc_topic, b.doc_topic);
    let c = fit_lda(&docs, &LdaConfig { seed: 100, ..cfg }).unwrap();
    assert_ne!(a.counts, c.counts);
}
