//! Invariants of the tensor helpers, composer, scoring and ranking.

use cir_core::alignment::{fuse, global_similarity, FusionWeight};
use cir_core::autodiff::scaled_dot_attention;
use cir_core::features::{FeatureMap, Level, LevelDims, MultiLevelFeatures, TokenEmbeddings};
use cir_core::model::{score_encodings, Model, ModelConfig};
use cir_core::retrieval::{rank, Database, DatabaseEntry, QueryRecord};
use cir_core::tensor::{cosine_similarity, mean_pool};
use cir_core::trainer::contrastive_loss_value;
use cir_core::Tensor;
use proptest::prelude::*;

fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..12).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
        )
    })
}

const DIMS: [LevelDims; 3] = [LevelDims::new(2, 2, 3), LevelDims::new(1, 2, 4), LevelDims::new(1, 1, 5)];

fn features_from(seed: u64) -> MultiLevelFeatures {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    let maps = Level::ALL.map(|l| {
        let d = DIMS[l.index()];
        FeatureMap::new(l, d, (0..d.len()).map(|_| next()).collect()).unwrap()
    });
    MultiLevelFeatures::from_maps(maps).unwrap()
}

fn model(seed: u64, std: f64) -> Model {
    let mut cfg = ModelConfig::new(DIMS, 3);
    cfg.seed = seed;
    cfg.init_std = std;
    Model::new(cfg).unwrap()
}

proptest! {
    #[test]
    fn cosine_is_symmetric_bounded_and_scale_invariant((u, v) in vec_pair(), a in 0.01f64..100.0) {
        prop_assume!(cir_core::tensor::norm(&u) > 1e-3 && cir_core::tensor::norm(&v) > 1e-3);
        let c = cosine_similarity(&u, &v).unwrap();
        prop_assert_eq!(c, cosine_similarity(&v, &u).unwrap());
        prop_assert!(c.abs() <= 1.0);
        let au: Vec<f64> = u.iter().map(|x| a * x).collect();
        prop_assert!((cosine_similarity(&au, &v).unwrap() - c).abs() < 1e-9);
    }

    #[test]
    fn mean_pool_is_linear(x in prop::collection::vec(-3.0f64..3.0, 12), y in prop::collection::vec(-3.0f64..3.0, 12), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let t = |d: Vec<f64>| Tensor::new(vec![2, 2, 3], d).unwrap();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = mean_pool(&t(mix)).unwrap();
        let (px, py) = (mean_pool(&t(x)).unwrap(), mean_pool(&t(y)).unwrap());
        for i in 0..3 {
            prop_assert!((lhs[i] - (a * px[i] + b * py[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations(q in prop::collection::vec(-3.0f64..3.0, 6), k in prop::collection::vec(-3.0f64..3.0, 9), v in prop::collection::vec(-3.0f64..3.0, 12)) {
        let q = Tensor::new(vec![3, 2], q[..6].to_vec()).unwrap().reshape(vec![2, 3]).unwrap();
        let k = Tensor::new(vec![3, 3], k).unwrap();
        let v = Tensor::new(vec![3, 4], v).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for r in 0..2 {
            for c in 0..4 {
                let col: Vec<f64> = (0..3).map(|i| v.row(i)[c]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let o = out.row(r)[c];
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn compose_preserves_shape_and_ignores_token_order(seed in any::<u64>(), perm_seed in any::<u64>()) {
        let m = model(seed, 0.3);
        let x = features_from(seed ^ 1);
        let z = TokenEmbeddings::new(4, 3, (0..12).map(|i| ((i as f64) * 0.9 + seed as f64).sin()).collect()).unwrap();
        let out = m.compose_all(&x, &z).unwrap();
        prop_assert_eq!(out.dims(), x.dims());
        let mut order: Vec<usize> = (0..4).collect();
        order.rotate_left((perm_seed % 4) as usize);
        if perm_seed % 2 == 0 { order.swap(0, 3); }
        let permuted = m.compose_all(&x, &z.permuted(&order).unwrap()).unwrap();
        for (a, b) in out.maps().iter().zip(permuted.maps()) {
            prop_assert!(a.tensor().max_abs_diff(b.tensor()) < 1e-12);
        }
    }

    #[test]
    fn compose_reacts_to_text(seed in any::<u64>()) {
        let m = model(seed, 0.3);
        let x = features_from(seed);
        let z1 = TokenEmbeddings::new(2, 3, vec![1.0, 0.0, -1.0, 0.5, 0.2, 0.1]).unwrap();
        let z2 = TokenEmbeddings::new(2, 3, vec![-0.3, 1.0, 0.4, 0.0, -0.7, 0.9]).unwrap();
        let a = m.compose_all(&x, &z1).unwrap();
        let b = m.compose_all(&x, &z2).unwrap();
        let diff = a.maps().iter().zip(b.maps()).map(|(p, q)| p.tensor().max_abs_diff(q.tensor())).fold(0.0, f64::max);
        prop_assert!(diff > 1e-8);
    }

    #[test]
    fn fused_score_properties(l in -3.0f64..3.0, g in -3.0f64..3.0, d in 0.0f64..1.0, beta in 0.0f64..=1.0) {
        let w = FusionWeight::new(beta).unwrap();
        prop_assert!(fuse(l + d, g, w) >= fuse(l, g, w));
        prop_assert!(fuse(l, g + d, w) >= fuse(l, g, w));
        prop_assert!(fuse(l, g, w).abs() <= 3.0 + 1e-12);
        let at = |b: f64| fuse(l, g, FusionWeight::new(b).unwrap());
        prop_assert!((at(0.5) - 0.5 * (at(0.0) + at(1.0))).abs() < 1e-12);
        prop_assert!((at(beta) - (at(0.0) + beta * (at(1.0) - at(0.0)))).abs() < 1e-12);
    }

    #[test]
    fn global_term_ignores_positive_rescaling(seed in any::<u64>(), c in 0.01f64..50.0, level in 0usize..3) {
        let q = features_from(seed);
        let t = features_from(seed.wrapping_add(7));
        let mut maps = t.maps().clone();
        maps[level] = maps[level].scaled(c);
        let scaled = MultiLevelFeatures::from_maps(maps).unwrap();
        prop_assert!((global_similarity(&q, &t).unwrap() - global_similarity(&q, &scaled).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn ranking_ignores_database_order(seed in any::<u64>(), n in 2usize..9, rot in 0usize..9) {
        let m = model(seed, 0.1);
        let entries: Vec<DatabaseEntry> = (0..n).map(|i| DatabaseEntry {
            id: format!("e{i}"),
            label: format!("c{}", i % 2),
            // Duplicate features force ties that only the id can break.
            features: features_from(seed.wrapping_add((i / 2) as u64)),
        }).collect();
        let q = QueryRecord {
            id: "q".into(),
            label: "c0".into(),
            image_features: features_from(seed ^ 99),
            text: TokenEmbeddings::new(1, 3, vec![0.3, -0.2, 0.8]).unwrap(),
        };
        let w = FusionWeight::default();
        let base = rank(&q, &Database::new(entries.clone()).unwrap(), &m, w, true).unwrap();
        let mut shuffled = entries.clone();
        shuffled.rotate_left(rot % n);
        shuffled.reverse();
        let other = rank(&q, &Database::new(shuffled).unwrap(), &m, w, true).unwrap();
        prop_assert_eq!(&base, &other);
        // Pure function: a second call is bit-identical.
        prop_assert_eq!(&base, &rank(&q, &Database::new(entries).unwrap(), &m, w, true).unwrap());
        for pair in base.entries.windows(2) {
            prop_assert!(pair[0].scores.score >= pair[1].scores.score);
        }
    }

    #[test]
    fn loss_is_between_zero_and_log_c(sims in prop::collection::vec(-3.0f64..3.0, 16), t in 0.05f64..2.0) {
        let s = Tensor::new(vec![4, 4], sims).unwrap();
        let l = contrastive_loss_value(&s, &[0, 1, 2, 3], t).unwrap();
        prop_assert!(l >= 0.0);
        // Equal scores give exactly ln C; dominant positives push below it.
        let flat = Tensor::filled(vec![4, 4], 0.3);
        prop_assert!((contrastive_loss_value(&flat, &[0, 1, 2, 3], t).unwrap() - 4f64.ln()).abs() < 1e-12);
        let mut diag = vec![-3.0; 16];
        for i in 0..4 { diag[i * 5] = 3.0; }
        let d = Tensor::new(vec![4, 4], diag).unwrap();
        prop_assert!(contrastive_loss_value(&d, &[0, 1, 2, 3], t).unwrap() < 4f64.ln());
    }
}

#[test]
fn raising_a_score_never_lowers_rank() {
    use cir_core::model::Scores;
    use cir_core::retrieval::{RankedEntry, RankedList};
    let scores = [0.4, 0.9, 0.1, 0.4, 0.7];
    let entries = |bump: f64| -> Vec<RankedEntry> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let s = if i == 2 { s + bump } else { s };
                RankedEntry {
                    candidate_id: format!("e{i}"),
                    label: "x".into(),
                    scores: Scores { score: s, local: s, global: s },
                }
            })
            .collect()
    };
    let mut prev = usize::MAX;
    for bump in [0.0, 0.2, 0.3, 0.6, 1.0] {
        let r = RankedList::from_scored("q", entries(bump));
        let pos = r.ids().iter().position(|&id| id == "e2").unwrap();
        assert!(pos <= prev);
        prev = pos;
    }
}

#[test]
fn identical_self_attains_maximal_score() {
    // Zero-initialized blocks are identities and masks are uniform, so the
    // composed query equals its own image encoding.
    let m = model(3, 0.0);
    let img = features_from(5);
    let text = TokenEmbeddings::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    let q = m.encode_query(&img, &text).unwrap();
    let own = score_encodings(&q, &m.encode_target(&img).unwrap(), FusionWeight::default()).unwrap();
    assert!((own.score - 3.0).abs() < 1e-9);
    for s in 10..20 {
        let other = score_encodings(&q, &m.encode_target(&features_from(s)).unwrap(), FusionWeight::default()).unwrap();
        assert!(other.score <= own.score);
    }
}
