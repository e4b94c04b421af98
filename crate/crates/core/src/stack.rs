//! Focal-stack fusion: the one-by-one serial fold and decision calibration.
//!
//! Calibration runs the extraction path once per image and the decision path
//! on the pairs `(1, j)`. Each pair map `p^(j)` says how much sharper image 1
//! is than image `j`; dividing by it turns that into a per-image activity
//! level relative to image 1, and the sharpest image wins each pixel.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{read_image, to_gray};
use crate::metrics::csv_error;
use crate::net::{fuse_images, guide_image, FusionNet};
use crate::tensor::Tensor;

/// Clamp applied to every pair probability before it enters a ratio.
pub const DV_EPS: f64 = 1e-6;

/// Co-registered images of one scene, all `[1, C, H, W]` with equal dims.
#[derive(Clone, Debug)]
pub struct FocalStack {
    images: Vec<Tensor>,
    ids: Vec<String>,
}

impl FocalStack {
    pub fn new(images: Vec<Tensor>, ids: Vec<String>) -> Result<Self> {
        if images.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a focal stack needs at least 2 images, got {}",
                images.len()
            )));
        }
        if ids.len() != images.len() {
            return Err(Error::InvalidArgument(format!(
                "{} ids for {} images",
                ids.len(),
                images.len()
            )));
        }
        images[0].dims4()?;
        for (img, id) in images.iter().zip(&ids).skip(1) {
            if img.shape() != images[0].shape() {
                return Err(Error::shape(
                    "focal stack",
                    format!(
                        "'{id}' is {:?} but '{}' is {:?}",
                        img.shape(),
                        ids[0],
                        images[0].shape()
                    ),
                ));
            }
        }
        Ok(FocalStack { images, ids })
    }

    /// Every PNG/PGM/PPM in `dir`, ordered by file name.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
                    matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "ppm")
                })
            })
            .collect();
        paths.sort();
        let images = paths
            .iter()
            .map(|p| read_image(p))
            .collect::<Result<Vec<_>>>()?;
        let ids = paths
            .iter()
            .map(|p| {
                p.file_stem()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned()
            })
            .collect();
        Self::new(images, ids)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// How many times each network path ran.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PathCounts {
    pub extraction: usize,
    pub decision: usize,
}

/// Wraps a network and counts path evaluations, including from worker threads.
struct Counted<'a> {
    net: &'a FusionNet,
    extraction: AtomicUsize,
    decision: AtomicUsize,
}

impl<'a> Counted<'a> {
    fn new(net: &'a FusionNet) -> Self {
        Counted {
            net,
            extraction: AtomicUsize::new(0),
            decision: AtomicUsize::new(0),
        }
    }

    fn activity(&self, gray: &Tensor) -> Result<Vec<Tensor>> {
        self.extraction.fetch_add(1, Ordering::Relaxed);
        self.net.activity_maps(gray)
    }

    fn final_dm(&self, sf_a: &[Tensor], sf_b: &[Tensor], guide: &Tensor) -> Result<Tensor> {
        self.decision.fetch_add(1, Ordering::Relaxed);
        Ok(self.net.decide(sf_a, sf_b, guide)?.final_dm)
    }

    fn counts(&self) -> PathCounts {
        PathCounts {
            extraction: self.extraction.load(Ordering::Relaxed),
            decision: self.decision.load(Ordering::Relaxed),
        }
    }
}

fn gray(img: &Tensor) -> Result<Tensor> {
    if img.shape()[1] == 1 {
        Ok(img.clone())
    } else {
        to_gray(img)
    }
}

/// Fold the stack pairwise: `fuse(fuse(fuse(I1, I2), I3), ...)`.
///
/// Every step re-extracts features of both operands because the running
/// result is a new image.
pub fn serial_fuse(stack: &FocalStack, net: &FusionNet) -> Result<(Tensor, PathCounts)> {
    let counted = Counted::new(net);
    let mut acc = stack.images[0].clone();
    for next in &stack.images[1..] {
        let (ga, gb) = (gray(&acc)?, gray(next)?);
        let sf_a = counted.activity(&ga)?;
        let sf_b = counted.activity(&gb)?;
        let dm = counted.final_dm(&sf_a, &sf_b, &guide_image(&ga, &gb)?)?;
        acc = fuse_images(&dm, &acc, next)?;
    }
    Ok((acc, counted.counts()))
}

/// Per-pixel activity levels of all stack images relative to image 1.
///
/// `pair_maps[j - 2]` is the final map of pair `(1, j)` for `j = 2..=N`, all
/// `[1, 1, H, W]`. Returns `N` planes: `DV^1 = p2`, `DV^2 = 1 - p2` and
/// `DV^j = p2 (1 - pj) / pj` for `j >= 3`, with every `p` clamped to
/// `[DV_EPS, 1 - DV_EPS]`.
pub fn decision_volume(pair_maps: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let first = pair_maps.first().ok_or_else(|| {
        Error::InvalidArgument("decision volume needs at least one pair map".into())
    })?;
    for m in pair_maps {
        first.same_shape(m, "decision_volume")?;
    }
    let clamp = |p: f64| p.clamp(DV_EPS, 1.0 - DV_EPS);
    let p2: Vec<f64> = first.data().iter().map(|&p| clamp(p)).collect();
    let mut dv = Vec::with_capacity(pair_maps.len() + 1);
    dv.push(p2.clone());
    dv.push(p2.iter().map(|p| 1.0 - p).collect());
    for m in &pair_maps[1..] {
        dv.push(
            m.data()
                .iter()
                .zip(&p2)
                .map(|(&pj, &p2)| {
                    let pj = clamp(pj);
                    p2 * (1.0 - pj) / pj
                })
                .collect(),
        );
    }
    Ok(dv)
}

/// Index of the largest volume entry per pixel; ties go to the lowest index.
pub fn select_sources(dv: &[Vec<f64>]) -> Vec<usize> {
    let n = dv.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let mut best = 0;
            for (j, plane) in dv.iter().enumerate().skip(1) {
                if plane[i] > dv[best][i] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Result of a calibrated fusion.
#[derive(Clone, Debug)]
pub struct Calibrated {
    pub fused: Tensor,
    pub volume: Vec<Vec<f64>>,
    /// Chosen source index (0-based) per pixel.
    pub selection: Vec<usize>,
    pub counts: PathCounts,
}

/// Decision-calibrated fusion: hard per-pixel selection from the decision volume.
pub fn calibrated_fuse(stack: &FocalStack, net: &FusionNet) -> Result<Calibrated> {
    let counted = Counted::new(net);
    let grays = stack.images.iter().map(gray).collect::<Result<Vec<_>>>()?;
    let activity = grays
        .par_iter()
        .map(|g| counted.activity(g))
        .collect::<Result<Vec<_>>>()?;
    let pair_maps = (1..grays.len())
        .into_par_iter()
        .map(|j| {
            counted.final_dm(
                &activity[0],
                &activity[j],
                &guide_image(&grays[0], &grays[j])?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let volume = decision_volume(&pair_maps)?;
    let selection = select_sources(&volume);
    let first = &stack.images[0];
    let plane = selection.len();
    let data = (0..first.len())
        .map(|i| stack.images[selection[i % plane]].data()[i])
        .collect();
    Ok(Calibrated {
        fused: Tensor::new(first.shape().to_vec(), data)?,
        volume,
        selection,
        counts: counted.counts(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Serial,
    Calibrated,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Serial => "serial",
            Strategy::Calibrated => "calibrated",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(Strategy::Serial),
            "calibrated" => Ok(Strategy::Calibrated),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy '{other}' (expected serial or calibrated)"
            ))),
        }
    }
}

/// Fuse with either strategy.
pub fn fuse_stack(
    stack: &FocalStack,
    net: &FusionNet,
    strategy: Strategy,
) -> Result<(Tensor, PathCounts)> {
    match strategy {
        Strategy::Serial => serial_fuse(stack, net),
        Strategy::Calibrated => calibrated_fuse(stack, net).map(|c| (c.fused, c.counts)),
    }
}

/// Timing of one strategy over repeated runs.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub n: usize,
    /// Per run.
    pub extraction_count: usize,
    pub decision_count: usize,
    pub wall_ms_total: f64,
    /// `wall_ms_total` divided by repetitions times stack size.
    pub wall_ms_per_image: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub serial: BenchRow,
    pub calibrated: BenchRow,
}

impl BenchReport {
    /// Wall-clock saving of calibration over the serial fold, in percent.
    pub fn time_saving_percent(&self) -> f64 {
        100.0 * (1.0 - self.calibrated.wall_ms_total / self.serial.wall_ms_total)
    }

    /// Fewer extraction passes, in percent.
    pub fn extraction_saving_percent(&self) -> f64 {
        100.0
            * (1.0 - self.calibrated.extraction_count as f64 / self.serial.extraction_count as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record([
            "strategy",
            "N",
            "extraction_count",
            "decision_count",
            "wall_ms_total",
            "wall_ms_per_image",
        ])
        .map_err(|e| csv_error(path, e))?;
        for r in [&self.serial, &self.calibrated] {
            w.write_record([
                r.strategy.name().to_string(),
                r.n.to_string(),
                r.extraction_count.to_string(),
                r.decision_count.to_string(),
                format!("{:.3}", r.wall_ms_total),
                format!("{:.3}", r.wall_ms_per_image),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Time both strategies on `stack`, `repetitions` runs each, alternating.
pub fn bench(stack: &FocalStack, net: &FusionNet, repetitions: usize) -> Result<BenchReport> {
    if repetitions == 0 {
        return Err(Error::InvalidArgument(
            "bench needs at least one repetition".into(),
        ));
    }
    let mut totals = [0.0f64; 2];
    let mut counts = [PathCounts::default(); 2];
    for _ in 0..repetitions {
        for (slot, strategy) in [Strategy::Serial, Strategy::Calibrated]
            .into_iter()
            .enumerate()
        {
            let t = Instant::now();
            let (_, c) = fuse_stack(stack, net, strategy)?;
            totals[slot] += t.elapsed().as_secs_f64() * 1e3;
            counts[slot] = c;
        }
    }
    let row = |slot: usize, strategy| BenchRow {
        strategy,
        n: stack.len(),
        extraction_count: counts[slot].extraction,
        decision_count: counts[slot].decision,
        wall_ms_total: totals[slot],
        wall_ms_per_image: totals[slot] / (repetitions * stack.len()) as f64,
    };
    Ok(BenchReport {
        serial: row(0, Strategy::Serial),
        calibrated: row(1, Strategy::Calibrated),
    })
}
