use std::path::Path;

use mttt::idx::{encode_images, encode_labels, load_mnist, parse_images, parse_labels, Images, Split};
use mttt::Error;
use mttt_core::model::TokenScheme;
use proptest::prelude::*;

/// Hand-assembled big-endian IDX image file.
fn image_bytes(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for v in [count, rows, cols] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn label_bytes(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

#[test]
fn ten_mnist_sized_images() {
    let pixels: Vec<u8> = (0..10 * 784).map(|i| (i % 251) as u8).collect();
    let imgs = parse_images(&image_bytes(10, 28, 28, &pixels), Path::new("x")).unwrap();
    assert_eq!((imgs.rows, imgs.cols, imgs.pixels.len()), (28, 28, 10));
    assert_eq!(imgs.pixels[3][5], pixels[3 * 784 + 5]);

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("train-images-idx3-ubyte"), image_bytes(10, 28, 28, &pixels)).unwrap();
    std::fs::write(dir.path().join("train-labels-idx1-ubyte"), label_bytes(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9])).unwrap();
    let ds = load_mnist(dir.path(), Split::Train, TokenScheme::Pixel, None).unwrap();
    assert_eq!(ds.len(), 10);
    assert_eq!(ds.inputs[0].dims(), (784, 1));
    assert_eq!(ds.inputs[1].at(2, 0), pixels[784 + 2] as f64 / 255.0);
    assert_eq!(ds.labels[7], 7);
    assert_eq!(load_mnist(dir.path(), Split::Train, TokenScheme::Patch(4), Some(3)).unwrap().inputs.len(), 3);
}

#[test]
fn truncated_file_reports_offset() {
    let full = image_bytes(2, 2, 2, &[1, 2, 3, 4, 5, 6, 7, 8]);
    let cut = &full[..full.len() - 3];
    match parse_images(cut, Path::new("imgs")) {
        Err(Error::Truncated { offset, needed, .. }) => {
            assert_eq!(offset, cut.len() as u64);
            assert_eq!(needed, 3);
        }
        other => panic!("{other:?}"),
    }
    let e = parse_labels(&[0, 0, 8, 1, 0, 0], Path::new("labs")).unwrap_err();
    assert!(e.to_string().contains("byte offset 6"), "{e}");
}

#[test]
fn bad_magic_is_rejected() {
    let mut b = label_bytes(&[1, 2]);
    b[3] = 3;
    assert!(matches!(parse_labels(&b, Path::new("l")), Err(Error::BadMagic { found: 0x803, expected: 0x801, .. })));
    assert!(matches!(parse_images(&label_bytes(&[1]), Path::new("i")), Err(Error::BadMagic { .. })));
}

#[test]
fn trailing_bytes_are_rejected() {
    let mut b = label_bytes(&[1, 2]);
    b.push(0);
    assert!(matches!(parse_labels(&b, Path::new("l")), Err(Error::Format { .. })));
}

#[test]
fn label_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t10k-images-idx3-ubyte"), image_bytes(3, 2, 2, &[0; 12])).unwrap();
    std::fs::write(dir.path().join("t10k-labels-idx1-ubyte"), label_bytes(&[1, 2])).unwrap();
    let r = load_mnist(dir.path(), Split::Test, TokenScheme::Pixel, None);
    assert!(matches!(r, Err(Error::CountMismatch { images: 3, labels: 2 })));
}

#[test]
fn missing_file_names_path() {
    let e = load_mnist(Path::new("/nonexistent/dir"), Split::Train, TokenScheme::Pixel, None).unwrap_err();
    assert!(e.to_string().contains("/nonexistent/dir/train-images-idx3-ubyte"), "{e}");
}

proptest! {
    #[test]
    fn encode_matches_hand_layout(count in 0usize..5, rows in 1usize..5, cols in 1usize..5, seed in any::<u8>()) {
        let pixels: Vec<Vec<u8>> = (0..count).map(|i| (0..rows * cols).map(|j| seed.wrapping_add((i * 31 + j) as u8)).collect()).collect();
        let imgs = Images { rows, cols, pixels: pixels.clone() };
        let flat: Vec<u8> = pixels.concat();
        prop_assert_eq!(encode_images(&imgs), image_bytes(count as u32, rows as u32, cols as u32, &flat));
        prop_assert_eq!(parse_images(&encode_images(&imgs), Path::new("p")).unwrap(), imgs);
        let labels: Vec<u8> = (0..count).map(|i| (i as u8) ^ seed).collect();
        prop_assert_eq!(encode_labels(&labels), label_bytes(&labels));
    }
}
