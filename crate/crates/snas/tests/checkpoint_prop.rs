//! Property tests for the binary archive container.

use proptest::prelude::*;

use snas::checkpoint::{Archive, ArrayValue};

fn arb_value() -> impl Strategy<Value = ArrayValue> {
    prop_oneof![
        prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 0..32)
            .prop_map(ArrayValue::F32),
        prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 0..32)
            .prop_map(ArrayValue::F64),
    ]
}

fn arb_archive() -> impl Strategy<Value = Archive> {
    prop::collection::btree_map("[a-z][a-z0-9._]{0,24}", arb_value(), 0..8).prop_map(|m| {
        let mut archive = Archive::new();
        for (name, value) in m {
            let shape = vec![value.len()];
            archive.insert(name, shape, value);
        }
        archive
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn roundtrip_is_identity(archive in arb_archive()) {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("a.bin");
        archive.write(&path).unwrap();
        let back = Archive::read(&path).unwrap();
        prop_assert_eq!(&archive, &back);

        // writing the identical content twice is byte-stable
        let path2 = tmp.path().join("b.bin");
        back.write(&path2).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncation_is_rejected(archive in arb_archive(), frac in 0.0f64..1.0) {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("a.bin");
        archive.write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = (bytes.len() as f64 * frac) as usize;
        prop_assume!(cut < bytes.len());
        std::fs::write(&path, &bytes[..cut]).unwrap();
        prop_assert!(Archive::read(&path).is_err());
    }

    #[test]
    fn flipped_magic_is_rejected(archive in arb_archive(), byte in 0usize..8) {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("a.bin");
        archive.write(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[byte] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        prop_assert!(Archive::read(&path).is_err());
    }
}
