//! Bundle and checkpoint files: exact round trips and rejection of damage.

use std::fs;

use cir_core::bundle::{decode_bundle, load_bundle, save_bundle};
use cir_core::checkpoint::{decode_checkpoint, load_checkpoint, save_checkpoint};
use cir_core::synthetic::{generate_synthetic, SyntheticSpec};
use cir_core::{Error, LevelDims, Model, ModelConfig};
use proptest::prelude::*;

fn spec() -> impl Strategy<Value = SyntheticSpec> {
    (any::<u64>(), 2usize..4, 2usize..4, 1usize..3, 1usize..4, 1usize..5, 0.0f64..1.0).prop_map(
        |(seed, classes, entries, queries, side, text_dim, noise)| SyntheticSpec {
            seed,
            classes,
            entries_per_class: entries,
            queries_per_class: queries,
            level_dims: [LevelDims::new(side, side, 3), LevelDims::new(1, side, 2), LevelDims::new(1, 1, 4)],
            text_dim,
            noise,
            tokens: 2,
            separation: 0.5,
        },
    )
}

fn is_rejection(e: &Error) -> bool {
    matches!(e, Error::Format(_) | Error::Corruption(_) | Error::Version { .. })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bundle_round_trip_is_exact(spec in spec()) {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.cirb"), dir.path().join("b.cirb"));
        let bundle = generate_synthetic(&spec).unwrap();
        save_bundle(&bundle, &a).unwrap();
        let back = load_bundle(&a).unwrap();
        prop_assert_eq!(&back, &bundle);
        save_bundle(&back, &b).unwrap();
        prop_assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_bundle_is_rejected(spec in spec(), cut in 0.0f64..1.0) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.cirb");
        save_bundle(&generate_synthetic(&spec).unwrap(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let n = ((bytes.len() - 1) as f64 * cut) as usize;
        let err = decode_bundle(&bytes[..n]).unwrap_err();
        prop_assert!(is_rejection(&err), "{err}");
        prop_assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn checkpoint_round_trip_is_exact(seed in any::<u64>(), k in 1usize..4, std in 0.0f64..0.5) {
        let dims = [LevelDims::new(2, 2, 3), LevelDims::new(1, 2, 4), LevelDims::new(1, 1, 5)];
        let mut cfg = ModelConfig::new(dims, 3);
        cfg.seed = seed;
        cfg.k = k;
        cfg.init_std = std;
        let model = Model::new(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.cirm"), dir.path().join("b.cirm"));
        save_checkpoint(&model, &a).unwrap();
        let back = load_checkpoint(&a).unwrap();
        prop_assert_eq!(back.params(), model.params());
        prop_assert_eq!(back.config(), model.config());
        save_checkpoint(&back, &b).unwrap();
        let bytes = fs::read(&a).unwrap();
        prop_assert_eq!(&bytes, &fs::read(&b).unwrap());

        let err = decode_checkpoint(&bytes[..bytes.len() - 1]).unwrap_err();
        prop_assert!(is_rejection(&err), "{err}");
    }
}

#[test]
fn damaged_headers_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.cirb");
    save_bundle(&generate_synthetic(&SyntheticSpec::small(1)).unwrap(), &path).unwrap();
    let good = fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[..4].copy_from_slice(&[0; 4]);
    assert!(matches!(decode_bundle(&bad), Err(Error::Format(_))));

    let mut bad = good.clone();
    bad[4] = bad[4].wrapping_add(1);
    assert!(matches!(decode_bundle(&bad), Err(Error::Version { .. })));

    let mut bad = good.clone();
    bad.extend_from_slice(&[0; 8]);
    assert!(decode_bundle(&bad).is_err());

    // A bundle is not a checkpoint, and vice versa.
    assert!(matches!(decode_checkpoint(&good), Err(Error::Format(_))));
}
