use freqprobe::store::{self, ActivationSet, ErasureRecord, TapId};
use freqprobe::Error;
use ndarray::{array, Array2};
use proptest::prelude::*;

fn golden_activation_bytes() -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(b"FQPB");
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&4u32.to_le_bytes());
    b.extend_from_slice(b"dec2");
    b.extend_from_slice(&2u64.to_le_bytes());
    b.extend_from_slice(&3u64.to_le_bytes());
    for v in [0.5f32, -1.0, 2.25, 3.0, 0.0, -0.125] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    for v in [1i32, 0] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    for v in [64i32, 17] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

fn golden_set() -> ActivationSet {
    ActivationSet::new(
        TapId::Dec2,
        array![[0.5f32, -1.0, 2.25], [3.0, 0.0, -0.125]],
        vec![1, 0],
        vec![64, 17],
    )
    .unwrap()
}

#[test]
fn activation_encoding_matches_hand_built_bytes() {
    assert_eq!(store::encode_activations(&golden_set()).unwrap(), golden_activation_bytes());
    assert_eq!(store::decode_activations(&golden_activation_bytes()).unwrap(), golden_set());
}

#[test]
fn eraser_encoding_matches_hand_built_bytes() {
    let mut b = Vec::new();
    b.extend_from_slice(b"FQPB");
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&3u32.to_le_bytes());
    b.extend_from_slice(b"out");
    b.extend_from_slice(&2u64.to_le_bytes());
    for v in [1.0f64, 0.5, 0.0, 1.0, 0.25, -0.25, 3.0, 4.0] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    let rec = ErasureRecord {
        layer_tap: TapId::Out,
        p: array![[1.0, 0.5], [0.0, 1.0]],
        b: vec![0.25, -0.25],
        mu: vec![3.0, 4.0],
    };
    assert_eq!(store::encode_eraser(&rec).unwrap(), b);
    assert_eq!(store::decode_eraser(&b).unwrap(), rec);
}

#[test]
fn decoder_rejects_corrupt_headers() {
    let good = golden_activation_bytes();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(store::decode_activations(&bad_magic), Err(Error::BadMagic)));

    let mut bad_version = good.clone();
    bad_version[4] = 2;
    assert!(matches!(store::decode_activations(&bad_version), Err(Error::UnsupportedVersion(2))));

    let mut unknown_tap = good.clone();
    unknown_tap[12..16].copy_from_slice(b"dec9");
    assert!(store::decode_activations(&unknown_tap).is_err());

    assert!(matches!(store::decode_activations(&good[..good.len() - 1]), Err(Error::Truncated)));

    let mut trailing = good.clone();
    trailing.push(0);
    assert!(matches!(store::decode_activations(&trailing), Err(Error::InvalidRecord(_))));

    // n claims far more rows than the payload holds.
    let mut huge = good;
    huge[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(matches!(store::decode_activations(&huge), Err(Error::Truncated)));
}

#[test]
fn eraser_for_wrong_width_is_a_dimension_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.fqpb");
    store::write_eraser(&path, &ErasureRecord::identity(TapId::Dec0, 4)).unwrap();
    assert!(store::read_eraser_for(&path, 4).is_ok());
    assert!(matches!(
        store::read_eraser_for(&path, 8),
        Err(Error::Dimension { expected: 8, got: 4 })
    ));
}

#[test]
fn missing_file_is_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let err = store::read_activations(dir.path().join("absent.fqpb")).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

fn activation_set() -> impl Strategy<Value = ActivationSet> {
    (1usize..12, 1usize..9, 0usize..5).prop_flat_map(|(n, d, tap)| {
        (
            prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n * d),
            prop::collection::vec(any::<i32>(), n),
            prop::collection::vec(2i32..251, n),
        )
            .prop_map(move |(f, l, q)| {
                ActivationSet::new(
                    TapId::from_index(tap).unwrap(),
                    Array2::from_shape_vec((n, d), f).unwrap(),
                    l,
                    q,
                )
                .unwrap()
            })
    })
}

proptest! {
    #[test]
    fn activations_round_trip(set in activation_set()) {
        let bytes = store::encode_activations(&set).unwrap();
        prop_assert_eq!(bytes.len(), 8 + 4 + set.tap.as_str().len() + 16 + 4 * set.features.len() + 8 * set.len());
        prop_assert_eq!(store::decode_activations(&bytes).unwrap(), set);
    }

    #[test]
    fn erasers_round_trip(d in 1usize..7, seed in any::<u64>()) {
        let mut x = seed;
        let mut next = move || {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let rec = ErasureRecord {
            layer_tap: TapId::Dec1,
            p: Array2::from_shape_fn((d, d), |_| next()),
            b: (0..d).map(|_| next()).collect(),
            mu: (0..d).map(|_| next()).collect(),
        };
        prop_assert_eq!(store::decode_eraser(&store::encode_eraser(&rec).unwrap()).unwrap(), rec);
    }

    #[test]
    fn any_truncation_is_rejected(cut in 0usize..88) {
        let good = golden_activation_bytes();
        prop_assert!(store::decode_activations(&good[..cut.min(good.len() - 1)]).is_err());
    }
}
