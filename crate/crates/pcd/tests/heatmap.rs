use pcd::heatmap::{decode_csv, decode_pgm, encode_csv, encode_pgm, format_sig6};
use pcd_core::Tensor;

#[test]
fn pgm_header_and_rounding() {
    let m = Tensor::new(&[2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.001, 0.999]).unwrap();
    let bytes = encode_pgm(&m);
    assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    let (w, h, px) = decode_pgm(&bytes).unwrap();
    assert_eq!((w, h), (3, 2));
    assert_eq!(px, vec![0, 128, 255, 64, 0, 255]);
}

#[test]
fn pgm_rejects_garbage() {
    assert!(decode_pgm(b"P6\n1 1\n255\n\0").is_err());
    assert!(decode_pgm(b"P5\n2 2\n255\n\0").is_err());
}

#[test]
fn csv_is_row_major_six_significant_digits() {
    let m = Tensor::new(&[2, 2], vec![1.0, 0.123_456_79, 0.0, 1.5e-7]).unwrap();
    let text = encode_csv(&m);
    assert_eq!(text, "1,0.123457\n0,1.50000e-7\n");
    let back = decode_csv(&text).unwrap();
    assert_eq!(back.shape(), &[2, 2]);
    for (a, b) in back.data().iter().zip(m.data()) {
        assert!((a - b).abs() <= 5e-6 * b.abs());
    }
}

#[test]
fn sig6_formatting() {
    assert_eq!(format_sig6(0.5), "0.5");
    assert_eq!(format_sig6(123456.0), "123456");
    assert_eq!(format_sig6(1234567.0), "1.23457e6");
    assert_eq!(format_sig6(12345.6), "12345.6");
    assert_eq!(format_sig6(0.000_123_456_79), "0.000123457");
    assert_eq!(format_sig6(-2.0), "-2");
}

#[test]
fn csv_rejects_ragged_rows() {
    assert!(decode_csv("1,2\n3\n").is_err());
    assert!(decode_csv("1,x\n").is_err());
}
