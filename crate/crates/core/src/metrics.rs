//! Evaluation-side metrics: the exact (non-smooth) `Q_g`, blur-sensitivity
//! curves and normalized difference images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imgproc::{filter3x3, gaussian_blur, SOBEL_X, SOBEL_Y};
use crate::losses::{QgConfig, EPS};
use crate::tensor::Tensor;

struct Edges {
    strength: Vec<f64>,
    orientation: Vec<f64>,
}

fn edges(plane: &[f64], h: usize, w: usize) -> Edges {
    let sx = filter3x3(plane, h, w, &SOBEL_X);
    let sy = filter3x3(plane, h, w, &SOBEL_Y);
    let strength = sx
        .iter()
        .zip(&sy)
        .map(|(x, y)| (x * x + y * y).sqrt())
        .collect();
    let orientation = sx
        .iter()
        .zip(&sy)
        .map(|(x, y)| (y * y / (x * x + EPS)).atan())
        .collect();
    Edges {
        strength,
        orientation,
    }
}

fn hw(t: &Tensor) -> Result<(usize, usize)> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::shape(
            "qg_eval",
            format!("expected a [1,1,H,W] image, got {:?}", t.shape()),
        ));
    }
    Ok((h, w))
}

/// Exact strength ratio: smaller over larger, both guarded by `EPS`.
fn strength_ratio(g_src: f64, g_f: f64) -> f64 {
    if g_src > g_f {
        g_f / (g_src + EPS)
    } else {
        g_src / (g_f + EPS)
    }
}

/// `Q_g` with the exact min/max strength ratio and exact absolute orientation
/// gap. Flat inputs (all weights zero) score 0.
pub fn qg_eval(a: &Tensor, b: &Tensor, fused: &Tensor, cfg: &QgConfig) -> Result<f64> {
    let (h, w) = hw(a)?;
    if hw(b)? != (h, w) || hw(fused)? != (h, w) {
        return Err(Error::shape(
            "qg_eval",
            format!(
                "{:?}, {:?} and fused {:?}",
                a.shape(),
                b.shape(),
                fused.shape()
            ),
        ));
    }
    let (ea, eb, ef) = (
        edges(a.data(), h, w),
        edges(b.data(), h, w),
        edges(fused.data(), h, w),
    );
    let q = |src: &Edges, i: usize| {
        let g = strength_ratio(src.strength[i], ef.strength[i]);
        let delta =
            1.0 - (src.orientation[i] - ef.orientation[i]).abs() / std::f64::consts::FRAC_PI_2;
        let (qg, qa) = cfg.preservation(g, delta);
        qg * qa
    };
    let weight = |g: f64| {
        if cfg.gamma == 1.0 {
            g
        } else {
            g.powf(cfg.gamma)
        }
    };
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..h * w {
        let (wa, wb) = (weight(ea.strength[i]), weight(eb.strength[i]));
        num += q(&ea, i) * wa + q(&eb, i) * wb;
        den += wa + wb;
    }
    Ok(num / (den + EPS))
}

/// `Q_g` of the fused image after gaussian blur at each `σ` (0 = unblurred).
pub fn blur_sensitivity(
    a: &Tensor,
    b: &Tensor,
    fused: &Tensor,
    sigmas: &[f64],
    cfg: &QgConfig,
) -> Result<Vec<(f64, f64)>> {
    if sigmas.windows(2).any(|p| p[1] <= p[0]) || sigmas.first().is_some_and(|&s| s != 0.0) {
        return Err(Error::InvalidArgument(
            "blur sigmas must be ascending and start at 0".into(),
        ));
    }
    let (h, w) = hw(fused)?;
    sigmas
        .iter()
        .map(|&s| {
            let blurred =
                Tensor::new(fused.shape().to_vec(), gaussian_blur(fused.data(), h, w, s))?;
            Ok((s, qg_eval(a, b, &blurred, cfg)?))
        })
        .collect()
}

/// `fused - near`, min-max normalized to `[0, 1]`; a constant difference maps to 0.5.
pub fn difference_image(fused: &Tensor, near: &Tensor) -> Result<Tensor> {
    fused.same_shape(near, "difference_image")?;
    let d: Vec<f64> = fused
        .data()
        .iter()
        .zip(near.data())
        .map(|(f, n)| f - n)
        .collect();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if hi > lo {
        d.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; d.len()]
    };
    Tensor::new(fused.shape().to_vec(), data)
}

/// One evaluated pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub pair_id: String,
    pub method: String,
    pub qg: f64,
    pub runtime_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    /// Mean `Q_g` over rows of `method`, or `None` if there are none.
    pub fn mean_qg(&self, method: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.qg)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["pair_id", "method", "Q_g", "runtime_ms"])
            .map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            w.write_record([
                r.pair_id.clone(),
                r.method.clone(),
                format!("{:.6}", r.qg),
                format!("{:.3}", r.runtime_ms),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}
