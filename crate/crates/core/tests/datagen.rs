#![allow(clippy::needless_range_loop)]

mod common;

use std::collections::HashSet;
use std::path::PathBuf;

use common::{pattern, random};
use gacn::datagen::{
    augment, filter_by_foreground, generate_pair, generate_synthetic, read_manifest,
    split_train_val, synthetic_scene, write_manifest, AugmentConfig, GenConfig, ManifestEntry,
};
use gacn::imgproc::gaussian_blur;
use gacn::Tensor;

fn disc_mask(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Tensor {
    Tensor::from_fn([1, 1, h, w], |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        ((y - cy).powi(2) + (x - cx).powi(2) <= r * r) as u8 as f64
    })
}

/// Euclidean distance from each pixel to the nearest pixel of the other class.
fn boundary_distance(mask: &Tensor) -> Vec<f64> {
    let (h, w) = (mask.shape()[2], mask.shape()[3]);
    let m = mask.data();
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            (0..h * w)
                .filter(|&j| m[j] != m[i])
                .map(|j| (((j / w) as f64 - y).powi(2) + ((j % w) as f64 - x).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

#[test]
fn zero_sigma_is_identity() {
    let img = random(&[1, 1, 20, 20], 0.0, 1.0, 1);
    let s = generate_pair(&img, &disc_mask(20, 20, 9.0, 9.0, 5.0), 0.0).unwrap();
    assert_eq!(s.near, img);
    assert_eq!(s.far, img);
    assert_eq!(s.fused, img);
}

#[test]
fn full_mask_blurs_only_far() {
    let img = pattern(20, 20, 2);
    let s = generate_pair(&img, &Tensor::full([1, 1, 20, 20], 1.0), 2.0).unwrap();
    assert_eq!(s.near, img);
    let blurred = gaussian_blur(img.data(), 20, 20, 2.0);
    assert!(common::max_abs_diff(s.far.data(), &blurred) < 1e-12);
}

#[test]
fn bad_masks_are_rejected() {
    let img = pattern(8, 8, 0);
    assert!(generate_pair(&img, &Tensor::zeros([1, 1, 8, 8]), 1.0).is_err());
    assert!(generate_pair(&img, &Tensor::full([1, 1, 8, 7], 1.0), 1.0).is_err());
}

#[test]
fn reconstruction_outside_boundary_band() {
    let gen = GenConfig::desk();
    for (k, sigma) in [1.0, 2.0, 3.3, 4.0].into_iter().enumerate() {
        let (img, mask) = synthetic_scene(48, 40 + k as u64, &gen);
        let s = generate_pair(&img, &mask, sigma).unwrap();
        let dist = boundary_distance(&mask);
        let mut checked = 0;
        for i in 0..img.len() {
            if dist[i] <= 3.0 * sigma {
                continue;
            }
            checked += 1;
            let m = mask.data()[i];
            let rebuilt = m * s.near.data()[i] + (1.0 - m) * s.far.data()[i];
            assert!((rebuilt - img.data()[i]).abs() < 1.0 / 255.0);
            if m == 1.0 {
                assert!((s.near.data()[i] - img.data()[i]).abs() < 1e-12);
            }
        }
        assert!(
            checked > 100,
            "sigma {sigma}: only {checked} pixels checked"
        );
    }
}

#[test]
fn foreground_filter_bounds() {
    let cfg = GenConfig::desk();
    assert!(!filter_by_foreground(&Tensor::zeros([1, 1, 10, 10]), &cfg));
    let half = Tensor::from_fn([1, 1, 10, 10], |i| (i < 50) as u8 as f64);
    assert!(filter_by_foreground(&half, &cfg));
    assert!(!filter_by_foreground(
        &Tensor::full([1, 1, 10, 10], 1.0),
        &cfg
    ));
    // 20,000 foreground pixels on a 500x500 frame sit exactly on the lower bound
    let at = |n: usize| Tensor::from_fn([1, 1, 500, 500], move |i| (i < n) as u8 as f64);
    assert_eq!(20_000.0 / 250_000.0, cfg.min_fraction);
    assert!(filter_by_foreground(&at(20_000), &cfg));
    assert!(!filter_by_foreground(&at(19_999), &cfg));
}

#[test]
fn config_validation() {
    let mut cfg = GenConfig::desk();
    assert!(cfg.validate().is_ok());
    cfg.min_fraction = 0.7;
    assert!(cfg.validate().is_err());
    let mut cfg = GenConfig::desk();
    cfg.augment.crop = Some(cfg.resize + 1);
    assert!(cfg.validate().is_err());
}

fn sample(n: usize, seed: u64) -> gacn::datagen::TrainingSample {
    let img = random(&[1, 1, n, n], 0.0, 1.0, seed);
    generate_pair(
        &img,
        &disc_mask(n, n, n as f64 / 2.0, n as f64 / 2.0, n as f64 / 4.0),
        1.5,
    )
    .unwrap()
}

#[test]
fn disabled_augmentation_is_identity() {
    let s = sample(24, 3);
    for seed in 0..10 {
        assert_eq!(augment(&s, &AugmentConfig::disabled(), seed).unwrap(), s);
    }
}

#[test]
fn augmentation_is_deterministic() {
    let s = sample(40, 4);
    let cfg = AugmentConfig {
        crop: Some(32),
        blur_prob: 1.0,
        ..AugmentConfig::desk()
    };
    let a = augment(&s, &cfg, 77).unwrap();
    assert_eq!(a, augment(&s, &cfg, 77).unwrap());
    assert_ne!(a, augment(&s, &cfg, 78).unwrap());
    assert!(a
        .near
        .data()
        .iter()
        .chain(a.far.data())
        .all(|v| (0.0..=1.0).contains(v)));
    assert!(a.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
}

#[test]
fn crops_stay_in_bounds_and_cover_every_offset() {
    let n = 7;
    // unique values reveal where each crop came from
    let img = Tensor::from_fn([1, 1, n, n], |i| i as f64 / 64.0);
    let s = generate_pair(&img, &disc_mask(n, n, 3.0, 3.0, 2.0), 0.0).unwrap();
    let cfg = AugmentConfig {
        crop: Some(4),
        ..AugmentConfig::disabled()
    };
    let mut seen = HashSet::new();
    for seed in 0..2000 {
        let a = augment(&s, &cfg, seed).unwrap();
        assert_eq!(a.fused.shape(), &[1, 1, 4, 4]);
        let first = (a.fused.data()[0] * 64.0).round() as usize;
        let (y0, x0) = (first / n, first % n);
        assert!(y0 + 4 <= n && x0 + 4 <= n);
        for (k, v) in a.fused.data().iter().enumerate() {
            assert_eq!(*v, (((y0 + k / 4) * n + x0 + k % 4) as f64) / 64.0);
        }
        assert_eq!(
            a.mask,
            Tensor::from_fn([1, 1, 4, 4], |k| s.mask.data()
                [(y0 + k / 4) * n + x0 + k % 4])
        );
        seen.insert((y0, x0));
    }
    assert_eq!(seen.len(), 16);
    let too_big = AugmentConfig {
        crop: Some(8),
        ..AugmentConfig::disabled()
    };
    assert!(augment(&s, &too_big, 0).is_err());
}

#[test]
fn swap_inverts_the_mask() {
    let s = sample(16, 5);
    let cfg = AugmentConfig {
        swap: true,
        ..AugmentConfig::disabled()
    };
    let mut swapped = 0;
    for seed in 0..40 {
        let a = augment(&s, &cfg, seed).unwrap();
        if a.near == s.far {
            swapped += 1;
            assert_eq!(a.far, s.near);
            assert_eq!(a.mask, s.mask.map(|m| 1.0 - m));
        } else {
            assert_eq!(a, s);
        }
    }
    assert!(swapped > 5 && swapped < 35);
}

fn entry(i: usize) -> ManifestEntry {
    ManifestEntry {
        id: format!("s{i}"),
        near: PathBuf::from(format!("s{i}_near.png")),
        far: PathBuf::from(format!("sub dir/s{i}_far.png")),
        mask: PathBuf::from(format!("/abs/s{i}_mask.png")),
        fused: PathBuf::from(format!("s{i}_fused.png")),
        sigma: 1.0 + i as f64 * 0.0301,
    }
}

#[test]
fn manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for n in [0, 1, 100] {
        let path = dir.path().join(format!("m{n}.tsv"));
        let entries: Vec<_> = (0..n).map(entry).collect();
        write_manifest(&entries, &path).unwrap();
        if n == 0 {
            assert_eq!(std::fs::read(&path).unwrap().len(), 0);
        }
        assert_eq!(read_manifest(&path).unwrap(), entries);
    }
}

#[test]
fn malformed_manifest_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.tsv");
    std::fs::write(&path, "a\tn\tf\tm\tg\t1.5\nb\tn\tf\tm\n").unwrap();
    let err = read_manifest(&path).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
    std::fs::write(
        &path,
        "a\tn\tf\tm\tg\t1.5\na\tn\tf\tm\tg\t1.5\nc\tn\tf\tm\tg\tbig\n",
    )
    .unwrap();
    let err = read_manifest(&path).unwrap_err().to_string();
    assert!(err.contains("line 3") && err.contains("big"), "{err}");
    assert!(read_manifest(&dir.path().join("missing.tsv")).is_err());
}

#[test]
fn split_is_seeded_seven_to_three() {
    let (t, v) = split_train_val(100, 3);
    assert_eq!((t.len(), v.len()), (70, 30));
    let mut all: Vec<_> = t.iter().chain(&v).copied().collect();
    all.sort();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    assert_eq!(split_train_val(100, 3), (t, v));
    let (t2, v2) = split_train_val(2, 0);
    assert_eq!((t2.len(), v2.len()), (1, 1));
}

#[test]
fn synthetic_generation_is_deterministic() {
    let cfg = GenConfig {
        resize: 48,
        augment: AugmentConfig {
            crop: Some(32),
            ..AugmentConfig::desk()
        },
        ..GenConfig::desk()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = generate_synthetic(6, a.path(), &cfg, 9).unwrap();
    let sb = generate_synthetic(6, b.path(), &cfg, 9).unwrap();
    assert_eq!(sa.accepted, 6);
    assert_eq!(sa.entries, sb.entries);
    for e in &sa.entries {
        assert!((cfg.sigma_min..=cfg.sigma_max).contains(&e.sigma));
        for p in [&e.near, &e.far, &e.mask, &e.fused] {
            assert_eq!(
                std::fs::read(a.path().join(p)).unwrap(),
                std::fs::read(b.path().join(p)).unwrap()
            );
        }
        let s = e.load(a.path()).unwrap();
        assert!(filter_by_foreground(&s.mask, &cfg));
    }
    assert_eq!(
        read_manifest(&a.path().join("manifest.tsv")).unwrap(),
        sa.entries
    );
}
