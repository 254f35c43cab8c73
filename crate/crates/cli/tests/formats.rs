use cyclecorr::features::{FeatureMap, FeatureStack};
use cyclecorr_cli::format::{decode_checkpoint, decode_stack, decode_tensor, encode_stack};
use cyclecorr_cli::FormatError;
use proptest::prelude::*;

fn stack(c: usize, h: usize, w: usize, layers: usize) -> FeatureStack {
    let maps = (0..layers)
        .map(|l| FeatureMap::new(c, h, w, (0..c * h * w).map(|v| (v + l) as f32 * 0.25).collect()).unwrap())
        .collect();
    FeatureStack::new(maps, (w as u32 * 4, h as u32 * 4), "p".into()).unwrap()
}

proptest! {
    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_tensor(&bytes);
        let _ = decode_stack(&bytes, "x");
        let _ = decode_checkpoint(&bytes);
    }

    #[test]
    fn every_truncation_reports_remaining_length(
        c in 1usize..4, h in 1usize..4, w in 1usize..4, layers in 1usize..3, cut in 0.0f64..1.0,
    ) {
        let bytes = encode_stack(&stack(c, h, w, layers));
        let keep = ((bytes.len() as f64) * cut) as usize;
        match decode_stack(&bytes[..keep], "p") {
            Err(FormatError::Truncated { offset, expected, actual }) => {
                prop_assert_eq!(offset + actual, keep);
                prop_assert!(expected > actual);
            }
            other => prop_assert!(false, "expected truncation, got {:?}", other),
        }
    }
}
