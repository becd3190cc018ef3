mod common;

use std::fmt::Write as _;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rtransfer::embedding::{EmbeddingFormat, EmbeddingStore, LoadOptions};

#[test]
fn topk_equals_exhaustive_ranking() {
    let rows = common::random_rows(1000, 50, 7);
    let store = EmbeddingStore::from_rows(&rows, false).unwrap();
    let mut tied_queries = 0;
    for q in (0..1000).step_by(5) {
        let got = store.topk_rows(q, 10).unwrap();
        let want = common::brute_force_topk(&store, q, 10);
        assert_eq!(got, want, "query row {q}");
        if got.windows(2).any(|w| w[0].1 == w[1].1) {
            tied_queries += 1;
        }
        for (r, s) in &got {
            assert!((s - common::cosine(&rows[q].1, &rows[*r].1)).abs() < 1e-6);
        }
    }
    assert!(tied_queries > 0, "fixture should exercise exact ties");
}

#[test]
fn file_round_trip_matches_in_memory() {
    let rows = common::random_rows(200, 8, 3);
    let mut text = String::new();
    let _ = writeln!(text, "{} {}", rows.len(), 8);
    for (w, v) in &rows {
        text.push_str(w);
        for x in v {
            let _ = write!(text, " {x}");
        }
        text.push('\n');
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.vec");
    std::fs::write(&p, text).unwrap();
    let loaded = EmbeddingStore::load(&p, &LoadOptions::default()).unwrap();
    assert_eq!(loaded.format(), EmbeddingFormat::FastText);
    let mem = EmbeddingStore::from_rows(&rows, false).unwrap();
    for q in [0, 17, 199] {
        assert_eq!(
            loaded.topk_rows(q, 5).unwrap(),
            mem.topk_rows(q, 5).unwrap()
        );
    }
}

#[test]
fn neighbour_sampling_stays_in_topk() {
    let rows = common::random_rows(300, 16, 9);
    let store = EmbeddingStore::from_rows(&rows, false).unwrap();
    let allowed: Vec<String> = store
        .topk_similar("t42", 10)
        .unwrap()
        .into_iter()
        .map(|(w, _)| w)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let w = store.sample_neighbor("t42", 10, &mut rng).unwrap();
        assert!(allowed.iter().any(|a| a == w));
        assert_ne!(w, "t42");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn small_stores(n in 3usize..60, dim in 1usize..6, k_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let rows = common::random_rows(n, dim, seed);
        let store = EmbeddingStore::from_rows(&rows, false).unwrap();
        let k = 1 + ((n - 2) as f64 * k_frac) as usize;
        for q in 0..n {
            let got = store.topk_rows(q, k).unwrap();
            prop_assert_eq!(got.len(), k);
            prop_assert_eq!(got, common::brute_force_topk(&store, q, k));
        }
    }
}
