use karat_core::{KaratError, Tensor};
use karat_harness::data::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;

#[test]
fn synthetic_is_balanced_and_deterministic() {
    let a = synthetic_shapes(100, 4, 16, 9).unwrap();
    let b = synthetic_shapes(100, 4, 16, 9).unwrap();
    assert_eq!(a.labels, b.labels);
    assert!(a.images.iter().zip(&b.images).all(|(x, y)| x == y));
    for k in 0..4 {
        assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 25);
    }
    assert_eq!(a.image_shape(), Some((16, 16, 1)));
}

/// The label is recovered by the strip with the largest pixel sum, a linear rule.
#[test]
fn synthetic_is_strip_separable() {
    for (classes, size) in [(2, 16), (3, 16), (4, 32)] {
        let d = synthetic_shapes(300, classes, size, 5).unwrap();
        let strip = size / classes;
        for (img, &label) in d.images.iter().zip(&d.labels) {
            let sums: Vec<f64> = (0..classes)
                .map(|k| {
                    (0..size)
                        .flat_map(|y| (k * strip..(k + 1) * strip).map(move |x| (y, x)))
                        .map(|(y, x)| img.data()[y * size + x])
                        .sum()
                })
                .collect();
            let best = (0..classes).max_by(|&i, &j| sums[i].total_cmp(&sums[j])).unwrap();
            assert_eq!(best, label);
        }
    }
}

#[test]
fn synthetic_rejects_narrow_strips() {
    assert!(matches!(synthetic_shapes(10, 8, 16, 0), Err(KaratError::Config(_))));
}

fn idx_bytes(dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, dims.len() as u8];
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

#[test]
fn idx_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pix: Vec<u8> = (0..2 * 3 * 4).map(|i| (i * 10) as u8).collect();
    let ip = dir.path().join("img.idx");
    let lp = dir.path().join("lab.idx");
    std::fs::write(&ip, idx_bytes(&[2, 3, 4], &pix)).unwrap();
    std::fs::write(&lp, idx_bytes(&[2], &[7, 1])).unwrap();
    let d = load_idx(&ip, &lp, 10).unwrap();
    assert_eq!(d.labels, vec![7, 1]);
    assert_eq!(d.images[1].shape(), &[3, 4, 1]);
    assert_eq!(d.images[1].data()[0], 120.0 / 255.0);
}

#[test]
fn idx_errors_carry_offsets() {
    let bad_magic = [1u8, 0, 8, 1, 0, 0, 0, 1, 5];
    assert!(matches!(parse_idx(&bad_magic), Err(KaratError::Format { offset: 0, .. })));
    let bad_type = [0u8, 0, 0x0d, 1, 0, 0, 0, 1, 5];
    assert!(matches!(parse_idx(&bad_type), Err(KaratError::Format { offset: 2, .. })));
    let short_header = [0u8, 0, 8, 2, 0, 0, 0, 1, 0];
    assert!(matches!(parse_idx(&short_header), Err(KaratError::Format { offset: 8, .. })));
    let short = idx_bytes(&[2, 2, 2], &[0; 7]);
    assert!(matches!(parse_idx(&short), Err(KaratError::Format { offset: 23, .. })));
    let long = idx_bytes(&[3], &[0; 4]);
    assert!(matches!(parse_idx(&long), Err(KaratError::Format { offset: 11, .. })));

    let dir = tempfile::tempdir().unwrap();
    let ip = dir.path().join("i");
    let lp = dir.path().join("l");
    std::fs::write(&ip, idx_bytes(&[2, 1, 1], &[0, 0])).unwrap();
    std::fs::write(&lp, idx_bytes(&[2], &[1, 12])).unwrap();
    assert!(matches!(load_idx(&ip, &lp, 10), Err(KaratError::Format { offset: 9, .. })));
}

fn cifar_record(label: u8, seed: u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend((0..3072).map(|i| (i as u8).wrapping_mul(seed)));
    r
}

#[test]
fn cifar_decodes_planar_channels() {
    let mut bytes = cifar_record(3, 1);
    bytes.extend(cifar_record(9, 7));
    let d = parse_cifar10(&bytes).unwrap();
    assert_eq!(d.labels, vec![3, 9]);
    let img = &d.images[0];
    assert_eq!(img.shape(), &[32, 32, 3]);
    // Pixel (0, 5): R at 5, G at 1024 + 5, B at 2048 + 5.
    let px = &img.data()[5 * 3..5 * 3 + 3];
    assert_eq!(px, &[5.0 / 255.0, (1029u32 % 256) as f64 / 255.0, (2053u32 % 256) as f64 / 255.0]);
}

#[test]
fn cifar_errors_carry_offsets() {
    let mut bytes = cifar_record(1, 1);
    bytes.extend(cifar_record(10, 1));
    assert!(matches!(parse_cifar10(&bytes), Err(KaratError::Format { offset: 3073, .. })));
    let mut trunc = cifar_record(1, 1);
    trunc.extend_from_slice(&[0; 100]);
    assert!(matches!(parse_cifar10(&trunc), Err(KaratError::Format { offset: 3073, .. })));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("data_batch_1.bin");
    std::fs::File::create(&p).unwrap().write_all(&trunc).unwrap();
    match load_cifar10(&[&p]) {
        Err(KaratError::Format { offset, message }) => {
            assert_eq!(offset, 3073);
            assert!(message.contains("data_batch_1.bin"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn augmentation() {
    let img = Tensor::new(vec![2, 3, 1], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(Augment::default().apply(&img, &mut rng), img);
    let flip = Augment { flip: true, crop_pad: 0 };
    let mirrored = Tensor::new(vec![2, 3, 1], vec![3., 2., 1., 6., 5., 4.]).unwrap();
    let mut seen = (false, false);
    for _ in 0..50 {
        let out = flip.apply(&img, &mut rng);
        if out == img {
            seen.0 = true;
        } else {
            assert_eq!(out, mirrored);
            seen.1 = true;
        }
    }
    assert!(seen.0 && seen.1);

    let crop = Augment { flip: false, crop_pad: 1 };
    let big = Tensor::new(vec![4, 4, 2], (0..32).map(f64::from).collect()).unwrap();
    for _ in 0..50 {
        let out = crop.apply(&big, &mut rng);
        assert_eq!(out.shape(), big.shape());
        // Every nonzero output value is some input value, shifted by at most one pixel.
        for (i, &v) in out.data().iter().enumerate() {
            if v != 0.0 {
                let src = v as usize;
                assert_eq!(src % 2, i % 2);
                let (sy, sx) = (src / 8, (src / 2) % 4);
                let (y, x) = (i / 8, (i / 2) % 4);
                assert!((sy as i64 - y as i64).abs() <= 1 && (sx as i64 - x as i64).abs() <= 1);
            }
        }
    }
}

#[test]
fn dataset_validation() {
    let img = Tensor::zeros(&[2, 2, 1]);
    assert!(Dataset::new(vec![img.clone()], vec![3], 3).is_err());
    assert!(Dataset::new(vec![img.clone(), Tensor::zeros(&[3, 2, 1])], vec![0, 0], 3).is_err());
    assert!(Dataset::new(vec![img], vec![0, 1], 3).is_err());
}
