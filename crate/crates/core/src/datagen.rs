//! Multi-focus training pairs from (image, foreground mask) inputs: selective
//! gaussian blurring, foreground-size filtering, seeded augmentation, the
//! sample manifest, and a procedural scene generator for corpus-free runs.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imgproc::{gaussian_blur, resize_bilinear};
use crate::io::{read_gray, write_image};
use crate::metrics::csv_error;
use crate::tensor::Tensor;

/// One synthesized pair with its ground truth; all `[1, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    /// Foreground sharp, background blurred.
    pub near: Tensor,
    /// Foreground blurred, background sharp.
    pub far: Tensor,
    /// 1 where `near` is the sharp source.
    pub mask: Tensor,
    /// The original all-in-focus image.
    pub fused: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Square crop side; `None` keeps the full frame.
    pub crop: Option<usize>,
    /// Probability of an extra blur applied to both sources.
    pub blur_prob: f64,
    /// Upper bound of the extra-blur sigma.
    pub blur_sigma_max: f64,
    /// Independent integer shift of each source, in `[-max_offset, max_offset]`.
    pub max_offset: usize,
    /// Upper bound of the additive gaussian noise sigma.
    pub noise_sigma_max: f64,
    /// Swap the two sources (inverting the mask) with probability 1/2.
    pub swap: bool,
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            crop: None,
            blur_prob: 0.0,
            blur_sigma_max: 0.0,
            max_offset: 0,
            noise_sigma_max: 0.0,
            swap: false,
        }
    }

    pub fn desk() -> Self {
        AugmentConfig {
            crop: Some(128),
            blur_prob: 0.3,
            blur_sigma_max: 0.8,
            max_offset: 2,
            noise_sigma_max: 0.01,
            swap: true,
        }
    }

    pub fn paper() -> Self {
        AugmentConfig {
            crop: Some(156),
            ..Self::desk()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub min_fraction: f64,
    pub max_fraction: f64,
    /// Side of the square the inputs are resized to before blurring.
    pub resize: usize,
    pub augment: AugmentConfig,
}

impl GenConfig {
    pub fn desk() -> Self {
        GenConfig {
            sigma_min: 1.0,
            sigma_max: 4.0,
            min_fraction: 0.08,
            max_fraction: 0.65,
            resize: 160,
            augment: AugmentConfig::desk(),
        }
    }

    pub fn paper() -> Self {
        GenConfig {
            resize: 256,
            augment: AugmentConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.min_fraction
            && self.min_fraction < self.max_fraction
            && self.max_fraction < 1.0)
        {
            return Err(Error::InvalidArgument(format!(
                "foreground bounds must satisfy 0 < min < max < 1, got [{}, {}]",
                self.min_fraction, self.max_fraction
            )));
        }
        if !(0.0 <= self.sigma_min && self.sigma_min <= self.sigma_max) {
            return Err(Error::InvalidArgument("blur sigma range is empty".into()));
        }
        if let Some(c) = self.augment.crop {
            if c > self.resize {
                return Err(Error::InvalidArgument(format!(
                    "crop {c} exceeds resize {}",
                    self.resize
                )));
            }
        }
        Ok(())
    }
}

/// Stream seed for item `id` of a seeded process (splitmix64 finalizer).
pub fn sub_seed(seed: u64, id: u64) -> u64 {
    let mut z = seed ^ id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn plane_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::InvalidArgument(format!(
            "{what} must be [1,1,H,W], got {:?}",
            t.shape()
        )));
    }
    Ok((h, w))
}

/// Blur the background of `image` into `near` and the foreground into `far`.
///
/// The blend uses the mask blurred at `sigma / 2`, so the transition has no
/// hard seam.
pub fn generate_pair(image: &Tensor, mask: &Tensor, sigma: f64) -> Result<TrainingSample> {
    let (h, w) = plane_dims(image, "image")?;
    if plane_dims(mask, "mask")? != (h, w) {
        return Err(Error::shape(
            "generate_pair",
            format!("image {:?} vs mask {:?}", image.shape(), mask.shape()),
        ));
    }
    if mask.data().iter().all(|&m| m == 0.0) {
        return Err(Error::InvalidArgument("mask has no foreground".into()));
    }
    let img = image.data();
    let blurred = gaussian_blur(img, h, w, sigma);
    // kernel sums carry ~1e-16 of rounding; snap so flat regions blend exactly
    let soft: Vec<f64> = gaussian_blur(mask.data(), h, w, sigma / 2.0)
        .into_iter()
        .map(|m| {
            if m > 1.0 - 1e-9 {
                1.0
            } else if m < 1e-9 {
                0.0
            } else {
                m
            }
        })
        .collect();
    let mut near = Vec::with_capacity(h * w);
    let mut far = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let m = soft[i];
        near.push(img[i] * m + blurred[i] * (1.0 - m));
        far.push(blurred[i] * m + img[i] * (1.0 - m));
    }
    Ok(TrainingSample {
        near: Tensor::image(h, w, near)?,
        far: Tensor::image(h, w, far)?,
        mask: mask.clone(),
        fused: image.clone(),
    })
}

pub fn foreground_fraction(mask: &Tensor) -> f64 {
    mask.data().iter().filter(|&&m| m >= 0.5).count() as f64 / mask.len().max(1) as f64
}

/// Accept a mask whose foreground fraction lies within the configured bounds.
pub fn filter_by_foreground(mask: &Tensor, cfg: &GenConfig) -> bool {
    let f = foreground_fraction(mask);
    cfg.min_fraction <= f && f <= cfg.max_fraction
}

fn crop(t: &Tensor, y0: usize, x0: usize, side: usize) -> Tensor {
    let w = t.shape()[3];
    let mut out = Vec::with_capacity(side * side);
    for y in y0..y0 + side {
        out.extend_from_slice(&t.data()[y * w + x0..y * w + x0 + side]);
    }
    Tensor::image(side, side, out).expect("crop size")
}

fn shift(t: &Tensor, dy: isize, dx: isize) -> Tensor {
    let (h, w) = (t.shape()[2], t.shape()[3]);
    let d = t.data();
    let at = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            d[at(y - dy, h) * w + at(x - dx, w)]
        })
        .collect();
    Tensor::image(h, w, data).expect("shift size")
}

/// Seeded crop, extra blur, source offsets, noise and source swap.
pub fn augment(sample: &TrainingSample, cfg: &AugmentConfig, seed: u64) -> Result<TrainingSample> {
    let (h, w) = plane_dims(&sample.near, "sample")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = sample.clone();
    if let Some(side) = cfg.crop {
        if side > h || side > w {
            return Err(Error::InvalidArgument(format!(
                "crop {side} exceeds sample {h}x{w}"
            )));
        }
        let y0 = rng.gen_range(0..=h - side);
        let x0 = rng.gen_range(0..=w - side);
        s = TrainingSample {
            near: crop(&s.near, y0, x0, side),
            far: crop(&s.far, y0, x0, side),
            mask: crop(&s.mask, y0, x0, side),
            fused: crop(&s.fused, y0, x0, side),
        };
    }
    let (h, w) = plane_dims(&s.near, "sample")?;
    if cfg.blur_prob > 0.0 && rng.gen_bool(cfg.blur_prob.min(1.0)) {
        let sigma = rng.gen_range(0.0..=cfg.blur_sigma_max);
        for t in [&mut s.near, &mut s.far] {
            *t = Tensor::image(h, w, gaussian_blur(t.data(), h, w, sigma))?;
        }
    }
    if cfg.max_offset > 0 {
        let m = cfg.max_offset as isize;
        for t in [&mut s.near, &mut s.far] {
            let (dy, dx) = (rng.gen_range(-m..=m), rng.gen_range(-m..=m));
            *t = shift(t, dy, dx);
        }
    }
    if cfg.noise_sigma_max > 0.0 {
        let sigma = rng.gen_range(0.0..=cfg.noise_sigma_max);
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for t in [&mut s.near, &mut s.far] {
            for v in t.data_mut() {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    if cfg.swap && rng.gen_bool(0.5) {
        std::mem::swap(&mut s.near, &mut s.far);
        s.mask = s.mask.map(|m| 1.0 - m);
    }
    Ok(s)
}

/// One manifest record. Paths are stored as written; relative paths are
/// resolved against the manifest's directory by [`ManifestEntry::load`].
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub near: PathBuf,
    pub far: PathBuf,
    pub mask: PathBuf,
    pub fused: PathBuf,
    pub sigma: f64,
}

impl ManifestEntry {
    pub fn load(&self, base: &Path) -> Result<TrainingSample> {
        let read = |p: &Path| read_gray(&base.join(p));
        let mask = read(&self.mask)?.map(|m| if m >= 0.5 { 1.0 } else { 0.0 });
        Ok(TrainingSample {
            near: read(&self.near)?,
            far: read(&self.far)?,
            mask,
            fused: read(&self.fused)?,
        })
    }
}

/// Tab-separated, one record per line: id, near, far, mask, fused, sigma.
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    for e in entries {
        let paths = [&e.near, &e.far, &e.mask, &e.fused].map(|p| p.to_string_lossy().into_owned());
        let [near, far, mask, fused] = paths;
        w.write_record([e.id.clone(), near, far, mask, fused, format!("{}", e.sigma)])
            .map_err(|err| csv_error(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                _ => unreachable!(),
            },
            _ => csv_error(path, e),
        })?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |detail: String| Error::format(path, format!("line {line}: {detail}"));
        if rec.len() != 6 {
            return Err(bad(format!(
                "expected 6 tab-separated fields, found {}",
                rec.len()
            )));
        }
        let sigma = rec[5]
            .parse::<f64>()
            .map_err(|_| bad(format!("sigma '{}' is not a number", &rec[5])))?;
        out.push(ManifestEntry {
            id: rec[0].to_string(),
            near: rec[1].into(),
            far: rec[2].into(),
            mask: rec[3].into(),
            fused: rec[4].into(),
            sigma,
        });
    }
    Ok(out)
}

/// Seeded 7:3 train/validation split of `n` items. With `n >= 2` both sides
/// are non-empty.
pub fn split_train_val(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_train = ((n as f64) * 0.7).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    }
    let val = idx.split_off(n_train.min(n));
    (idx, val)
}

/// Procedural all-in-focus scene and a foreground mask, both `size x size`.
///
/// Foreground and background carry independent textures (oriented gratings,
/// value noise and hard-edged shapes) so every region has detail that blur
/// removes. The mask is a union of one or two random ellipses.
pub fn synthetic_scene(size: usize, seed: u64, cfg: &GenConfig) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fg = texture(size, &mut rng);
    let bg = texture(size, &mut rng);
    let mask = loop {
        let m = ellipse_mask(size, &mut rng);
        let t = Tensor::image(size, size, m).expect("mask size");
        if filter_by_foreground(&t, cfg) {
            break t;
        }
    };
    let data = (0..size * size)
        .map(|i| if mask.data()[i] > 0.5 { fg[i] } else { bg[i] })
        .collect();
    (Tensor::image(size, size, data).expect("scene size"), mask)
}

fn ellipse_mask(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = size as f64;
    let blobs: Vec<(f64, f64, f64, f64, f64)> = (0..rng.gen_range(1..=2))
        .map(|_| {
            (
                rng.gen_range(0.2..0.8) * n,
                rng.gen_range(0.2..0.8) * n,
                rng.gen_range(0.12..0.4) * n,
                rng.gen_range(0.12..0.4) * n,
                rng.gen_range(0.0..PI),
            )
        })
        .collect();
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
            let inside = blobs.iter().any(|&(cy, cx, ry, rx, th)| {
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * th.cos() + dy * th.sin();
                let v = -dx * th.sin() + dy * th.cos();
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            });
            if inside {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn texture(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = size * size;
    let mut out = vec![0.0; n];
    for _ in 0..5 {
        let theta = rng.gen_range(0.0..PI);
        let freq = rng.gen_range(0.25..1.3);
        let amp = rng.gen_range(0.3..1.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let (fy, fx) = (freq * theta.sin(), freq * theta.cos());
        for (i, v) in out.iter_mut().enumerate() {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            *v += amp * (fy * y + fx * x + phase).sin();
        }
    }
    // value noise on a coarse grid, bilinearly upsampled
    let g = size / rng.gen_range(3..8) + 2;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.gen_range(-1.5..1.5)).collect();
    for (v, n) in out.iter_mut().zip(resize_bilinear(&grid, g, g, size, size)) {
        *v += n;
    }
    // hard-edged discs and bars
    for _ in 0..rng.gen_range(6..14) {
        let (cy, cx) = (
            rng.gen_range(0.0..size as f64),
            rng.gen_range(0.0..size as f64),
        );
        let r = rng.gen_range(2.0..size as f64 / 6.0);
        let level = rng.gen_range(-2.0..2.0);
        let bar = rng.gen_bool(0.4);
        for (i, v) in out.iter_mut().enumerate() {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let hit = if bar {
                (y - cy).abs() < r / 3.0 && (x - cx).abs() < r * 2.0
            } else {
                (y - cy).powi(2) + (x - cx).powi(2) < r * r
            };
            if hit {
                *v = 0.5 * *v + level;
            }
        }
    }
    let lo = out.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (a, b) = (rng.gen_range(0.0..0.2), rng.gen_range(0.8..1.0));
    out.iter()
        .map(|v| a + (b - a) * (v - lo) / (hi - lo).max(1e-12))
        .collect()
}

/// Outcome of [`generate_dataset`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenSummary {
    pub accepted: usize,
    pub rejected: usize,
    pub entries: Vec<ManifestEntry>,
}

/// Resize, binarize the mask, filter, blur and write one sample.
fn generate_one(
    id: &str,
    image: Tensor,
    mask: Tensor,
    out_dir: &Path,
    cfg: &GenConfig,
    seed: u64,
) -> Result<Option<ManifestEntry>> {
    let (h, w) = plane_dims(&image, "image")?;
    if plane_dims(&mask, "mask")? != (h, w) {
        return Err(Error::shape(
            "gen-data",
            format!("image and mask sizes differ for '{id}'"),
        ));
    }
    let side = cfg.resize;
    let image = Tensor::image(side, side, resize_bilinear(image.data(), h, w, side, side))?;
    let mask = Tensor::image(side, side, resize_bilinear(mask.data(), h, w, side, side))?
        .map(|m| if m >= 0.5 { 1.0 } else { 0.0 });
    if !filter_by_foreground(&mask, cfg) {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = rng.gen_range(cfg.sigma_min..=cfg.sigma_max);
    let s = generate_pair(&image, &mask, sigma)?;
    let entry = ManifestEntry {
        id: id.to_string(),
        near: format!("{id}_near.png").into(),
        far: format!("{id}_far.png").into(),
        mask: format!("{id}_mask.png").into(),
        fused: format!("{id}_fused.png").into(),
        sigma,
    };
    write_image(&out_dir.join(&entry.near), &s.near)?;
    write_image(&out_dir.join(&entry.far), &s.far)?;
    write_image(&out_dir.join(&entry.mask), &s.mask)?;
    write_image(&out_dir.join(&entry.fused), &s.fused)?;
    Ok(Some(entry))
}

fn finish(out_dir: &Path, results: Vec<Result<Option<ManifestEntry>>>) -> Result<GenSummary> {
    let mut summary = GenSummary::default();
    for r in results {
        match r? {
            Some(e) => {
                summary.accepted += 1;
                summary.entries.push(e);
            }
            None => summary.rejected += 1,
        }
    }
    write_manifest(&summary.entries, &out_dir.join("manifest.tsv"))?;
    Ok(summary)
}

/// Build a dataset from `(image, mask)` files into `out_dir`, writing
/// `manifest.tsv`. Sample `i` uses its own stream `sub_seed(seed, i)`.
pub fn generate_dataset(
    pairs: &[(String, PathBuf, PathBuf)],
    out_dir: &Path,
    cfg: &GenConfig,
    seed: u64,
) -> Result<GenSummary> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "no (image, mask) pairs to process".into(),
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (id, img, mask))| {
            generate_one(
                id,
                read_gray(img)?,
                read_gray(mask)?,
                out_dir,
                cfg,
                sub_seed(seed, i as u64),
            )
        })
        .collect();
    finish(out_dir, results)
}

/// Like [`generate_dataset`] but from `count` procedural scenes.
pub fn generate_synthetic(
    count: usize,
    out_dir: &Path,
    cfg: &GenConfig,
    seed: u64,
) -> Result<GenSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results = (0..count)
        .into_par_iter()
        .map(|i| {
            let s = sub_seed(seed, i as u64);
            let (image, mask) = synthetic_scene(cfg.resize, s, cfg);
            generate_one(
                &format!("syn{i:05}"),
                image,
                mask,
                out_dir,
                cfg,
                sub_seed(s, 1),
            )
        })
        .collect();
    finish(out_dir, results)
}
