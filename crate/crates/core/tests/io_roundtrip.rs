use proptest::collection::{btree_set, vec};
use proptest::prelude::*;
use svfit::io::{decode_checkpoint, decode_matrix, decode_pgm, encode_checkpoint, encode_matrix, encode_pgm, TensorSet};
use svfit::tasks::GrayImage;
use svfit::{Error, Matrix};

fn arb_matrix() -> impl Strategy<Value = Matrix> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
        vec(any::<u64>().prop_map(f64::from_bits), r * c).prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
    })
}

fn arb_set() -> impl Strategy<Value = TensorSet> {
    btree_set("[a-z][a-z0-9_.]{0,12}", 0..5).prop_flat_map(|names| {
        let names: Vec<String> = names.into_iter().collect();
        vec(arb_matrix(), names.len()).prop_map(move |ms| {
            let mut set = TensorSet::new();
            for (n, m) in names.iter().zip(ms) {
                set.insert(n.clone(), m).unwrap();
            }
            set
        })
    })
}

fn arb_levels() -> impl Strategy<Value = (usize, usize, Vec<u8>)> {
    (1usize..12, 1usize..12).prop_flat_map(|(w, h)| vec(any::<u8>(), w * h).prop_map(move |p| (w, h, p)))
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

fn config() -> ProptestConfig {
    ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn matrix_round_trip_is_bitwise(m in arb_matrix()) {
        let bytes = encode_matrix(&m);
        prop_assert_eq!(bytes.len(), 24 + 8 * m.as_slice().len());
        let back = decode_matrix(&bytes).unwrap();
        prop_assert_eq!(back.shape(), m.shape());
        prop_assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn truncated_matrix_is_rejected(m in arb_matrix(), cut in any::<prop::sample::Index>()) {
        let bytes = encode_matrix(&m);
        let keep = cut.index(bytes.len());
        prop_assert!(decode_matrix(&bytes[..keep]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        prop_assert!(matches!(decode_matrix(&longer), Err(Error::BadFormat(_))));
    }

    #[test]
    fn checkpoint_round_trip_keeps_order(set in arb_set()) {
        let back = decode_checkpoint(&encode_checkpoint(&set).unwrap()).unwrap();
        let names: Vec<&str> = back.names().collect();
        prop_assert_eq!(names, set.names().collect::<Vec<_>>());
        for ((_, a), (_, b)) in back.iter().zip(set.iter()) {
            prop_assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn any_flipped_bit_is_detected(set in arb_set(), at in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = encode_checkpoint(&set).unwrap();
        let i = at.index(bytes.len());
        bytes[i] ^= 1 << bit;
        let err = decode_checkpoint(&bytes).unwrap_err();
        prop_assert!(matches!(err, Error::ChecksumError { .. } | Error::BadMagic { .. }), "{err}");
    }

    #[test]
    fn truncated_checkpoint_is_rejected(set in arb_set(), cut in any::<prop::sample::Index>()) {
        let bytes = encode_checkpoint(&set).unwrap();
        prop_assert!(decode_checkpoint(&bytes[..cut.index(bytes.len())]).is_err());
    }

    #[test]
    fn pgm_levels_round_trip((w, h, levels) in arb_levels()) {
        let img = GrayImage::new(w, h, levels.iter().map(|&l| f64::from(l) / 255.0).collect()).unwrap();
        let bytes = encode_pgm(&img);
        prop_assert_eq!(&bytes[bytes.len() - w * h..], &levels[..]);
        prop_assert_eq!(decode_pgm(&bytes).unwrap(), img);
    }

    #[test]
    fn truncated_pgm_is_rejected((w, h, levels) in arb_levels(), cut in any::<prop::sample::Index>()) {
        let img = GrayImage::new(w, h, levels.iter().map(|&l| f64::from(l) / 255.0).collect()).unwrap();
        let bytes = encode_pgm(&img);
        prop_assert!(decode_pgm(&bytes[..cut.index(bytes.len())]).is_err());
    }
}

#[test]
fn wrong_magic_and_version() {
    let mut bytes = encode_matrix(&Matrix::identity(2));
    bytes[0] = b'X';
    assert!(matches!(decode_matrix(&bytes), Err(Error::BadMagic { .. })));
    let mut bytes = encode_matrix(&Matrix::identity(2));
    bytes[4] = 2;
    assert!(matches!(decode_matrix(&bytes), Err(Error::UnsupportedVersion(2))));
    assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0"), Err(Error::BadFormat(_))));
    assert!(matches!(decode_pgm(b"P5\n1 1\n0\n\0"), Err(Error::UnsupportedMaxval(0))));
}
