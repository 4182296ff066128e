use pathbench_core::embed::{read_embeddings, write_embeddings, EmbeddingSet};
use pathbench_core::nn::{AttentionMil, Checkpoint, LinearProbe};
use pathbench_core::tissue::patch_key;
use pathbench_core::{Error, Rng};
use proptest::prelude::*;

fn embedding_set(n: usize, dim: usize, seed: u64) -> EmbeddingSet {
    let mut r = Rng::new(seed);
    let keys = (0..n).map(|i| patch_key(0, (i * 224) as u32, 0)).collect();
    let values = (0..n * dim).map(|_| f32::from_bits(r.next_u64() as u32 & 0x7f7f_ffff)).collect();
    EmbeddingSet::new("slide", dim, keys, values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hemb_roundtrip_is_bit_exact(n in 0usize..20, dim in 1usize..40, seed: u64) {
        let set = embedding_set(n, dim, seed);
        let bytes = set.to_bytes().unwrap();
        let back = EmbeddingSet::from_bytes("slide", &bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.keys, set.keys);
    }

    #[test]
    fn hemb_truncation_is_detected(n in 1usize..10, dim in 1usize..10, cut in 1usize..64, seed: u64) {
        let bytes = embedding_set(n, dim, seed).to_bytes().unwrap();
        let cut = cut.min(bytes.len());
        let err = EmbeddingSet::from_bytes("slide", &bytes[..bytes.len() - cut]).unwrap_err();
        prop_assert!(matches!(err, Error::TruncatedPayload { .. }), "{err:?}");
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact(dim in 1usize..12, hidden in 1usize..6, seed: u64) {
        let mut rng = Rng::new(seed);
        let mil = AttentionMil::init(dim, hidden, 3, &mut rng).unwrap();
        let ck = Checkpoint::from_mil(&mil, serde_json::json!({"hidden": hidden}), seed, 5);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.to_mil().unwrap(), mil);

        let lin = LinearProbe::init(2, dim, &mut rng);
        let back = Checkpoint::from_bytes(&Checkpoint::from_linear(&lin, serde_json::Value::Null, 0, 0).to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.to_linear().unwrap(), lin);
    }
}

#[test]
fn hemb_file_roundtrip_and_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("slide.hemb");
    let set = embedding_set(3, 4, 1);
    write_embeddings(&set, &path).unwrap();
    let back = read_embeddings(&path).unwrap();
    assert_eq!(back.slide_id, "slide");
    assert_eq!(back.values, set.values);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[..4].copy_from_slice(b"NOPE");
    assert!(matches!(EmbeddingSet::from_bytes("slide", &bytes), Err(Error::BadMagic { .. })));
}
