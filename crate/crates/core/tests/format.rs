use proptest::prelude::*;
use scibilic_core::volume::{decode_sciv, encode_sciv, read_sciv, write_sciv};
use scibilic_core::{read_volume, write_volume, Error, FormatError, Volume};

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop_oneof![
        Just(vec![1, 1]),
        (1usize..40).prop_map(|n| vec![1, n]),
        (1usize..40).prop_map(|n| vec![n, 1]),
        proptest::collection::vec(1usize..9, 1..4),
    ]
}

proptest! {
    #[test]
    fn file_round_trip_is_bit_exact(dims in dims_strategy(), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        // Arbitrary bit patterns, NaN payloads and signed zeros included.
        let mut state = seed;
        let data: Vec<f32> = (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits((state >> 32) as u32)
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.sciv");
        write_sciv(&dims, &data, &path).unwrap();
        let (d2, data2) = read_sciv(&path).unwrap();
        prop_assert_eq!(&d2, &dims);
        prop_assert_eq!(bits(&data2), bits(&data));
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode_sciv(&bytes);
    }

    #[test]
    fn corrupted_valid_files_never_panic(seed in any::<u64>(), cut in 0usize..64, flip in 0usize..64) {
        let data: Vec<f32> = (0..12).map(|i| i as f32 + seed as f32).collect();
        let mut bytes = encode_sciv(&[3, 4], &data).unwrap();
        let flip = flip % bytes.len();
        bytes[flip] ^= (seed as u8) | 1;
        bytes.truncate(cut.min(bytes.len()));
        let _ = decode_sciv(&bytes);
    }
}

#[test]
fn volume_round_trip_edge_dims() {
    let dir = tempfile::tempdir().unwrap();
    for dims in [vec![1, 1], vec![1, 7], vec![7, 1], vec![2, 3, 4]] {
        let n = dims.iter().product();
        let v = Volume::new(dims.clone(), (0..n).map(|i| -(i as f32) / 3.0).collect()).unwrap();
        let path = dir.path().join("e.sciv");
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.dims(), dims.as_slice());
        assert_eq!(bits(back.data()), bits(v.data()));
    }
}

#[test]
fn little_endian_layout() {
    let bytes = encode_sciv(&[1, 2], &[1.0, -2.5]).unwrap();
    let mut want = b"SCIV".to_vec();
    want.extend_from_slice(&[1, 2, 1, 0, 0, 0, 2, 0, 0, 0]);
    want.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0]);
    assert_eq!(bytes, want);
}

#[test]
fn malformed_files_name_the_problem() {
    let good = encode_sciv(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();

    let mut magic = good.clone();
    magic[..4].copy_from_slice(b"NOPE");
    assert!(
        matches!(decode_sciv(&magic), Err(FormatError::BadMagic { found }) if &found == b"NOPE")
    );

    let mut version = good.clone();
    version[4] = 9;
    assert!(matches!(
        decode_sciv(&version),
        Err(FormatError::UnsupportedVersion(9))
    ));

    assert!(matches!(
        decode_sciv(&good[..good.len() - 3]),
        Err(FormatError::Truncated { expected, actual }) if expected == good.len() && actual == good.len() - 3
    ));
    assert!(matches!(
        decode_sciv(&good[..5]),
        Err(FormatError::Truncated { .. })
    ));
    assert!(matches!(
        decode_sciv(&good[..9]),
        Err(FormatError::Truncated { .. })
    ));

    let mut trailing = good.clone();
    trailing.push(0);
    assert!(matches!(
        decode_sciv(&trailing),
        Err(FormatError::TrailingBytes(1))
    ));

    let mut zero_extent = good.clone();
    zero_extent[6..10].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(
        decode_sciv(&zero_extent),
        Err(FormatError::InvalidDims(_))
    ));

    let mut huge = b"SCIV\x01\x04".to_vec();
    for _ in 0..4 {
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
    }
    assert!(matches!(
        decode_sciv(&huge),
        Err(FormatError::DimOverflow(_) | FormatError::Truncated { .. })
    ));

    // Errors from files carry the path.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.sciv");
    std::fs::write(&path, &magic).unwrap();
    let err = read_volume(&path).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    let text = err.to_string();
    assert!(
        text.contains("bad.sciv") && text.contains("magic"),
        "{text}"
    );
    let missing = read_volume(dir.path().join("missing.sciv"))
        .unwrap_err()
        .to_string();
    assert!(missing.contains("missing.sciv"), "{missing}");
}
