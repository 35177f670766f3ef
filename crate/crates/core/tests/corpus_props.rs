use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tpf_core::corpus::{load_dir, split_batches, Corpus, Triplet, DOCS_FILE, TRIPLETS_FILE, VOCAB_FILE};
use tpf_core::TpfError;

fn corpus_strategy() -> impl Strategy<Value = Corpus> {
    (1usize..6, 2usize..8, 1usize..4, any::<bool>()).prop_flat_map(|(per, v, t, with_authors)| {
        let d = per * t;
        proptest::collection::vec(proptest::collection::vec(0u32..4, v), d).prop_map(move |rows| {
            let mut trip = Vec::new();
            for (doc, row) in rows.iter().enumerate() {
                for (term, &c) in row.iter().enumerate() {
                    // Every document keeps at least one count.
                    let c = if term == doc % v { c + 1 } else { c };
                    if c > 0 {
                        trip.push(Triplet { doc, term, count: c });
                    }
                }
            }
            let periods = (0..d).map(|i| i % t).collect();
            let authors = with_authors.then(|| (0..d).map(|i| i / t).collect());
            Corpus::from_parts(&trip, periods, authors, (0..v).map(|i| format!("term{i}")).collect()).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn files_round_trip(c in corpus_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        c.write_dir(dir.path()).unwrap();
        let back = load_dir(dir.path()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn batches_partition_the_documents(c in corpus_strategy(), size in 1usize..7, seed in 0u64..100) {
        let batches = split_batches(&c, size, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut seen = BTreeSet::new();
        for b in &batches {
            prop_assert!(!b.doc_ids.is_empty() && b.doc_ids.len() <= size);
            prop_assert!((b.scale * b.doc_ids.len() as f64 - c.num_docs() as f64).abs() < 1e-9);
            for &d in &b.doc_ids {
                prop_assert!(seen.insert(d));
            }
        }
        prop_assert_eq!(seen.len(), c.num_docs());
    }

    #[test]
    fn collapsing_periods_keeps_counts(c in corpus_strategy()) {
        let one = c.collapse_periods();
        prop_assert_eq!(one.num_periods(), 1);
        prop_assert_eq!(one.total_count(), c.total_count());
        prop_assert_eq!(one.num_docs(), c.num_docs());
    }
}

fn write(dir: &std::path::Path, trip: &str, docs: &str, vocab: &str) {
    std::fs::write(dir.join(TRIPLETS_FILE), trip).unwrap();
    std::fs::write(dir.join(DOCS_FILE), docs).unwrap();
    std::fs::write(dir.join(VOCAB_FILE), vocab).unwrap();
}

#[test]
fn parse_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "doc_id,term_id,count\n0,0,1\n1,x,2\n", "doc_id,time_period\n0,0\n1,0\n", "a\nb\n");
    match load_dir(dir.path()) {
        Err(TpfError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dir(dir.path()).unwrap_err().is_io());
}

#[test]
fn author_aggregation_sums_per_author_and_period() {
    let trip = vec![
        Triplet { doc: 0, term: 0, count: 1 },
        Triplet { doc: 1, term: 0, count: 2 },
        Triplet { doc: 2, term: 1, count: 3 },
        Triplet { doc: 3, term: 1, count: 4 },
    ];
    let c = Corpus::from_parts(&trip, vec![0, 0, 1, 1], Some(vec![0, 0, 0, 1]), vec!["a".into(), "b".into()]).unwrap();
    assert!(!c.one_doc_per_author_period());
    let agg = c.aggregate_by_author().unwrap();
    assert!(agg.one_doc_per_author_period());
    assert_eq!(agg.num_docs(), 3);
    assert_eq!(agg.total_count(), 10);
    assert_eq!(agg.doc(0), (&[0u32][..], &[3u32][..]));
}
