//! Property tests for the spec-level invariants: simplex outputs, scorer
//! equivariance and ranges, selection oracles, ordering laws, and buffer
//! bounds.

use proptest::prelude::*;

use replaybench_core::data::{reorder, synth_stream, OrderSpec, Scenario, SynthSpec};
use replaybench_core::matrix::Matrix;
use replaybench_core::memory::MemoryBuffer;
use replaybench_core::nn::{Batch, EmbeddingMatrix, ForwardMode, ModelParams, PredictionMatrix};
use replaybench_core::strategies::{
    score_bald, score_confidence, score_entropy, score_margin, select_coreset_from, select_kmeans,
    select_topk, Direction,
};

fn simplex_rows(n_rows: usize, classes: usize) -> impl Strategy<Value = PredictionMatrix> {
    prop::collection::vec(
        prop::collection::vec(0.01..1.0f64, classes),
        n_rows..=n_rows,
    )
    .prop_map(move |raw| {
        let rows: Vec<Vec<f64>> = raw
            .into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect();
        PredictionMatrix::from_matrix(Matrix::from_rows(&rows).unwrap()).unwrap()
    })
}

/// Small integer-grid scores so ties actually happen.
fn grid_scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-16i32..=16, 0..=max_len)
        .prop_map(|v| v.into_iter().map(|x| x as f64 / 4.0).collect())
}

fn grid_embeddings(max_rows: usize) -> impl Strategy<Value = EmbeddingMatrix> {
    (1..=max_rows).prop_flat_map(|n| {
        prop::collection::vec(prop::collection::vec(-8i32..=8, 2), n..=n).prop_map(|raw| {
            let rows: Vec<Vec<f64>> = raw
                .into_iter()
                .map(|r| r.into_iter().map(|v| v as f64 / 2.0).collect())
                .collect();
            EmbeddingMatrix::from_matrix(Matrix::from_rows(&rows).unwrap()).unwrap()
        })
    })
}

/// Independent top-k oracle: stable sort by score only, take, re-sort by
/// index. Stability realizes the lower-index tie-break.
fn brute_force_topk(scores: &[f64], n_r: usize, largest: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    if largest {
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    } else {
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    }
    let mut picked: Vec<usize> = order.into_iter().take(n_r.min(scores.len())).collect();
    picked.sort_unstable();
    picked
}

proptest! {
    #[test]
    fn forward_rows_stay_on_simplex(
        seed in 0u64..1000,
        n in 0usize..6,
        hidden in 2usize..16,
        classes in 2usize..5,
        dropout in prop::sample::select(vec![0.0, 0.25, 0.5]),
    ) {
        let params = ModelParams::init(&[3, hidden, classes], 0.1, dropout, seed).unwrap();
        let mut features = Matrix::empty(3);
        for i in 0..n {
            features.push_row(&[(i as f64) / 7.0 % 1.0, 0.5, 0.9]);
        }
        let batch = Batch::new(features, vec![0; n]).unwrap();
        for mode in [ForwardMode::Eval, ForwardMode::Train { seed: 7 }] {
            let (preds, _) = params.forward(&batch, mode).unwrap();
            for row in preds.matrix().iter_rows() {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn scorers_are_permutation_equivariant(preds in (1usize..8, 2usize..5).prop_flat_map(|(n, c)| simplex_rows(n, c)), perm_seed in 0u64..100) {
        let n = preds.rows();
        let mut perm: Vec<usize> = (0..n).collect();
        // cheap seeded permutation
        for i in (1..n).rev() {
            let j = ((perm_seed as usize).wrapping_mul(31).wrapping_add(i * 17)) % (i + 1);
            perm.swap(i, j);
        }
        let permuted = PredictionMatrix::from_matrix(preds.matrix().select_rows(&perm)).unwrap();

        for scorer in [score_confidence, score_entropy, score_margin] {
            let base = scorer(&preds);
            let shuffled = scorer(&permuted);
            for (pos, &src) in perm.iter().enumerate() {
                prop_assert_eq!(shuffled[pos], base[src]);
            }
        }
    }

    #[test]
    fn score_ranges_hold(preds in (1usize..8, 2usize..6).prop_flat_map(|(n, c)| simplex_rows(n, c))) {
        let classes = preds.classes() as f64;
        for c in score_confidence(&preds) {
            prop_assert!(c >= 1.0 / classes - 1e-12 && c <= 1.0 + 1e-12);
        }
        for m in score_margin(&preds) {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&m));
        }
        for h in score_entropy(&preds) {
            prop_assert!(h >= -1e-12 && h <= classes.ln() + 1e-12);
        }
    }

    #[test]
    fn bald_is_nonnegative(
        a in (3usize..4, 3usize..4).prop_flat_map(|(n, c)| simplex_rows(n, c)),
        b in (3usize..4, 3usize..4).prop_flat_map(|(n, c)| simplex_rows(n, c)),
        c in (3usize..4, 3usize..4).prop_flat_map(|(n, c)| simplex_rows(n, c)),
    ) {
        for s in score_bald(&[a, b, c]).unwrap() {
            prop_assert!(s >= -1e-9);
        }
    }

    #[test]
    fn topk_matches_brute_force(scores in grid_scores(10), n_r in 0usize..12, largest in any::<bool>()) {
        let dir = if largest { Direction::Largest } else { Direction::Smallest };
        let got = select_topk(&scores, n_r, dir).indices;
        prop_assert_eq!(got, brute_force_topk(&scores, n_r, largest));
    }

    #[test]
    fn topk_is_ordinal(scores in grid_scores(10), n_r in 0usize..12, largest in any::<bool>()) {
        let dir = if largest { Direction::Largest } else { Direction::Smallest };
        // strictly increasing transform; atan keeps the grid's order exactly
        let transformed: Vec<f64> = scores.iter().map(|v| v.atan()).collect();
        prop_assert_eq!(
            select_topk(&scores, n_r, dir).indices,
            select_topk(&transformed, n_r, dir).indices
        );
    }

    #[test]
    fn embedding_selectors_return_real_indices(emb in grid_embeddings(12), pick_seed in 0u64..50) {
        let n = emb.rows();
        let n_r = (pick_seed as usize % n) + 1;
        for sel in [
            select_kmeans(&emb, n_r, pick_seed, 20).unwrap(),
            select_coreset_from(&emb, n_r, pick_seed as usize % n).unwrap(),
        ] {
            prop_assert_eq!(sel.indices.len(), n_r);
            let mut sorted = sel.indices.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), n_r);
            prop_assert!(sorted.iter().all(|&i| i < n));
        }
    }

    #[test]
    fn reorder_preserves_task_multiset(perm in prop::sample::select(vec![
        vec![0usize, 1, 2], vec![2, 1, 0], vec![1, 2, 0], vec![2, 0, 1],
    ])) {
        let stream = synth_stream(
            &SynthSpec {
                scenario: Scenario::ClassIncremental,
                n_tasks: 3,
                classes_per_task: 1,
                dims: 2,
                cluster_spread: 0.1,
                domain_shift: 0.0,
                per_task_n: 4,
            },
            1,
        )
        .unwrap();
        let reordered = reorder(&stream, &OrderSpec::Permutation(perm)).unwrap();
        let mut ids: Vec<usize> = reordered.tasks.iter().map(|t| t.task_id).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, vec![0, 1, 2]);
        for t in &reordered.tasks {
            let original = &stream.tasks[t.task_id];
            prop_assert_eq!(&t.train, &original.train);
            prop_assert_eq!(&t.test, &original.test);
        }
    }

    #[test]
    fn bounded_buffer_respects_capacity(
        cap in 1usize..8,
        batch_sizes in prop::collection::vec(0usize..10, 1..6),
        seed in 0u64..100,
    ) {
        let mut buf = MemoryBuffer::bounded(cap).unwrap();
        let mut total = 0;
        for (t, &n) in batch_sizes.iter().enumerate() {
            let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / 10.0]).collect();
            let batch = Batch::new(Matrix::from_rows(&rows).unwrap(), vec![0; n]).unwrap();
            buf.store(&batch, t, seed + t as u64);
            total += n;
            prop_assert!(buf.len() <= cap);
            prop_assert_eq!(buf.seen_count(), total);
            prop_assert!(buf.seen_count() >= buf.len());
        }
    }

    #[test]
    fn embeddings_ignore_dropout_seed(seed in 0u64..200) {
        let params = ModelParams::init(&[4, 8, 3], 0.1, 0.5, seed).unwrap();
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 / 5.0; 4]).collect();
        let batch = Batch::new(Matrix::from_rows(&rows).unwrap(), vec![0; 5]).unwrap();
        let a = params.extract_embeddings(&batch).unwrap();
        let b = params.extract_embeddings(&batch).unwrap();
        prop_assert_eq!(a.matrix(), b.matrix());
    }
}
