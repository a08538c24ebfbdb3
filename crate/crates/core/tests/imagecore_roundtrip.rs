use osseon::imagecore::{
    decode_pgm, decode_raw, encode_pgm, encode_raw, normalize01, quantize_u8, read_labels, write_labels, Image2D,
    RawArray, Spacing,
};
use proptest::prelude::*;

fn image() -> impl Strategy<Value = Image2D> {
    (1usize..20, 1usize..20).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-0.5f64..1.5, r * c)
            .prop_map(move |d| Image2D::new(r, c, Spacing::default(), d).unwrap())
    })
}

#[test]
fn quantization_clips_then_rounds_half_up() {
    assert_eq!(quantize_u8(-0.2), 0);
    assert_eq!(quantize_u8(1.7), 255);
    assert_eq!(quantize_u8(0.5 / 255.0), 1);
    assert_eq!(quantize_u8(0.49 / 255.0), 0);
}

#[test]
fn constant_image_normalizes_to_zero() {
    let im = Image2D::filled(4, 5, Spacing::default(), 3.3);
    assert!(normalize01(&im).data().iter().all(|&v| v == 0.0));
}

#[test]
fn malformed_files_are_rejected() {
    assert!(decode_pgm(b"P2\n2 2\n255\n0 0 0 0", Spacing::default()).is_err());
    assert!(decode_pgm(b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0", Spacing::default()).is_err());
    assert!(decode_pgm(b"P5\n2 2\n255\n\0\0", Spacing::default()).is_err());
    assert!(decode_raw(b"OSSR2\x01\0\0\0").is_err());
    assert!(decode_raw(b"OSSR1\x01\0\0\0\x03\0\0\0\0\0\0\0").is_err());
}

#[test]
fn labels_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let labels = vec![("0000.pgm".to_string(), 2u8), ("0001.pgm".to_string(), 0u8)];
    write_labels(dir.path(), &labels).unwrap();
    assert_eq!(read_labels(dir.path()).unwrap(), labels);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn pgm_is_idempotent_after_first_quantization(im in image()) {
        let once = encode_pgm(&im);
        let back = decode_pgm(&once, im.spacing()).unwrap();
        prop_assert_eq!(back.dims(), im.dims());
        prop_assert_eq!(encode_pgm(&back), once);
    }

    #[test]
    fn raw_round_trip_preserves_f32_values(im in image()) {
        let arr = RawArray::from_image(&im);
        let back = decode_raw(&encode_raw(&arr)).unwrap();
        prop_assert_eq!(&back, &arr);
        let restored = back.to_image(im.spacing()).unwrap();
        for (a, b) in restored.data().iter().zip(im.data()) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn normalization_is_affine_invariant(im in image(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let n1 = normalize01(&im);
        let n2 = normalize01(&im.map(|v| a * v + b));
        for (x, y) in n1.data().iter().zip(n2.data()) {
            prop_assert!((0.0..=1.0).contains(x));
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
