//! Single-plane image kernels on row-major `f64` slices.
//!
//! These are the non-differentiable building blocks; the tape ops in
//! [`crate::tensor`] wrap the forward kernels and their adjoints.

/// Sobel template for the horizontal derivative (responds to vertical edges).
pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
/// Sobel template for the vertical derivative.
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

#[inline]
fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Windowed sums with zero padding.
///
/// `out[i][j] = sum of src[y][x]` for `|y - (i + offset)| <= r` and
/// `|x - (j + offset)| <= r`, restricted to the source bounds.
pub fn window_sum(
    src: &[f64],
    (sh, sw): (usize, usize),
    r: usize,
    (oh, ow): (usize, usize),
    offset: isize,
) -> Vec<f64> {
    debug_assert_eq!(src.len(), sh * sw);
    let r = r as isize;
    let span = |o: usize, len: usize| -> (usize, usize) {
        let c = o as isize + offset;
        let lo = (c - r).clamp(0, len as isize) as usize;
        let hi = (c + r + 1).clamp(0, len as isize) as usize;
        (lo, hi.max(lo))
    };

    // horizontal pass: sh x ow
    let mut rows = vec![0.0; sh * ow];
    let mut prefix = vec![0.0; sw + 1];
    for y in 0..sh {
        let row = &src[y * sw..(y + 1) * sw];
        for (x, v) in row.iter().enumerate() {
            prefix[x + 1] = prefix[x] + v;
        }
        for j in 0..ow {
            let (lo, hi) = span(j, sw);
            rows[y * ow + j] = prefix[hi] - prefix[lo];
        }
    }

    // vertical pass: oh x ow
    let mut out = vec![0.0; oh * ow];
    let mut col_prefix = vec![0.0; (sh + 1) * ow];
    for y in 0..sh {
        for j in 0..ow {
            col_prefix[(y + 1) * ow + j] = col_prefix[y * ow + j] + rows[y * ow + j];
        }
    }
    for i in 0..oh {
        let (lo, hi) = span(i, sh);
        for j in 0..ow {
            out[i * ow + j] = col_prefix[hi * ow + j] - col_prefix[lo * ow + j];
        }
    }
    out
}

/// Number of in-bounds pixels in each centered `(2r+1)^2` window.
pub fn window_counts(h: usize, w: usize, r: usize) -> Vec<f64> {
    let count = |i: usize, len: usize| {
        let lo = i.saturating_sub(r);
        let hi = (i + r + 1).min(len);
        (hi - lo) as f64
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(count(y, h) * count(x, w));
        }
    }
    out
}

/// Mean over each centered window clipped to the image.
pub fn box_mean(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let sums = window_sum(src, (h, w), r, (h, w), 0);
    let counts = window_counts(h, w, r);
    sums.iter().zip(&counts).map(|(s, n)| s / n).collect()
}

/// Per-pixel squared first differences of a `channels x h x w` feature stack,
/// summed over channels, on the replicate-padded grid `(h + 2r) x (w + 2r)`.
fn sf_energy(features: &[f64], channels: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut energy = vec![0.0; ph * pw];
    let ri = r as isize;
    for c in 0..channels {
        let plane = &features[c * h * w..(c + 1) * h * w];
        for py in 0..ph {
            let y = py as isize - ri;
            let (cy, cym) = (clamp_index(y, h), clamp_index(y - 1, h));
            for px in 0..pw {
                let x = px as isize - ri;
                let (cx, cxm) = (clamp_index(x, w), clamp_index(x - 1, w));
                let v = plane[cy * w + cx];
                let dh = v - plane[cy * w + cxm];
                let dv = v - plane[cym * w + cx];
                energy[py * pw + px] += dh * dh + dv * dv;
            }
        }
    }
    energy
}

/// Pixel-wise spatial frequency of a feature stack with window radius `r`.
///
/// Row and column frequencies are the windowed sums of squared horizontal and
/// vertical first differences of the channel vectors; borders use replicate
/// padding. Returns an `h x w` map.
pub fn spatial_frequency(
    features: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    r: usize,
) -> Vec<f64> {
    let energy = sf_energy(features, channels, h, w, r);
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    window_sum(&energy, (h + 2 * r, w + 2 * r), r, (h, w), r as isize)
        .into_iter()
        .map(|s| (s / n).sqrt())
        .collect()
}

/// Adjoint of [`spatial_frequency`]: gradient w.r.t. the features given the
/// output map and its gradient. The sqrt derivative is guarded by `1e-12`.
pub fn spatial_frequency_backward(
    features: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    r: usize,
    output: &[f64],
    grad_out: &[f64],
) -> Vec<f64> {
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let grad_sum: Vec<f64> = grad_out
        .iter()
        .zip(output)
        .map(|(g, sf)| g * 0.5 / (sf + 1e-12) / n)
        .collect();
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let grad_energy = window_sum(&grad_sum, (h, w), r, (ph, pw), -(r as isize));

    let mut grad = vec![0.0; channels * h * w];
    let ri = r as isize;
    for c in 0..channels {
        let plane = &features[c * h * w..(c + 1) * h * w];
        let gplane = &mut grad[c * h * w..(c + 1) * h * w];
        for py in 0..ph {
            let y = py as isize - ri;
            let (cy, cym) = (clamp_index(y, h), clamp_index(y - 1, h));
            for px in 0..pw {
                let ge = grad_energy[py * pw + px];
                if ge == 0.0 {
                    continue;
                }
                let x = px as isize - ri;
                let (cx, cxm) = (clamp_index(x, w), clamp_index(x - 1, w));
                let v = plane[cy * w + cx];
                let dh = 2.0 * ge * (v - plane[cy * w + cxm]);
                let dv = 2.0 * ge * (v - plane[cym * w + cx]);
                gplane[cy * w + cx] += dh + dv;
                gplane[cy * w + cxm] -= dh;
                gplane[cym * w + cx] -= dv;
            }
        }
    }
    grad
}

/// Guide-dependent quantities of a guided filter. Since the guide is fixed,
/// the filter is linear in its input and these fully determine it.
#[derive(Clone, Debug)]
pub struct GuidedFilterPlan {
    pub height: usize,
    pub width: usize,
    pub radius: usize,
    guide: Vec<f64>,
    counts: Vec<f64>,
    mean_guide: Vec<f64>,
    denom: Vec<f64>,
}

impl GuidedFilterPlan {
    pub fn new(guide: &[f64], height: usize, width: usize, radius: usize, eps: f64) -> Self {
        let counts = window_counts(height, width, radius);
        let mean = |v: &[f64]| -> Vec<f64> {
            window_sum(v, (height, width), radius, (height, width), 0)
                .iter()
                .zip(&counts)
                .map(|(s, n)| s / n)
                .collect()
        };
        let mean_guide = mean(guide);
        let sq: Vec<f64> = guide.iter().map(|g| g * g).collect();
        let denom = mean(&sq)
            .iter()
            .zip(&mean_guide)
            .map(|(m2, m)| m2 - m * m + eps)
            .collect();
        GuidedFilterPlan {
            height,
            width,
            radius,
            guide: guide.to_vec(),
            counts,
            mean_guide,
            denom,
        }
    }

    fn mean(&self, v: &[f64]) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        window_sum(v, (h, w), self.radius, (h, w), 0)
            .iter()
            .zip(&self.counts)
            .map(|(s, n)| s / n)
            .collect()
    }

    /// Adjoint of [`Self::mean`]: the window relation is symmetric, so it is a
    /// window sum of the count-normalized input.
    fn mean_adjoint(&self, g: &[f64]) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let scaled: Vec<f64> = g.iter().zip(&self.counts).map(|(g, n)| g / n).collect();
        window_sum(&scaled, (h, w), self.radius, (h, w), 0)
    }

    /// Unclamped filter output for input `p`.
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let mean_p = self.mean(p);
        let ip: Vec<f64> = self.guide.iter().zip(p).map(|(i, p)| i * p).collect();
        let corr = self.mean(&ip);
        let a: Vec<f64> = (0..p.len())
            .map(|k| (corr[k] - self.mean_guide[k] * mean_p[k]) / self.denom[k])
            .collect();
        let b: Vec<f64> = (0..p.len())
            .map(|k| mean_p[k] - a[k] * self.mean_guide[k])
            .collect();
        let mean_a = self.mean(&a);
        let mean_b = self.mean(&b);
        (0..p.len())
            .map(|k| mean_a[k] * self.guide[k] + mean_b[k])
            .collect()
    }

    /// Gradient w.r.t. the filter input given the output gradient.
    pub fn apply_adjoint(&self, grad_out: &[f64]) -> Vec<f64> {
        let gq_i: Vec<f64> = grad_out
            .iter()
            .zip(&self.guide)
            .map(|(g, i)| g * i)
            .collect();
        let mut ga = self.mean_adjoint(&gq_i);
        let gb = self.mean_adjoint(grad_out);
        let mut g_mean_p = gb.clone();
        for k in 0..ga.len() {
            ga[k] -= gb[k] * self.mean_guide[k];
        }
        let mut g_corr = vec![0.0; ga.len()];
        for k in 0..ga.len() {
            g_corr[k] = ga[k] / self.denom[k];
            g_mean_p[k] -= ga[k] * self.mean_guide[k] / self.denom[k];
        }
        let from_corr = self.mean_adjoint(&g_corr);
        let from_mean = self.mean_adjoint(&g_mean_p);
        (0..ga.len())
            .map(|k| self.guide[k] * from_corr[k] + from_mean[k])
            .collect()
    }
}

/// 3x3 correlation with replicate padding.
pub fn filter3x3(src: &[f64], h: usize, w: usize, kernel: &[f64; 9]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let rows = [
            clamp_index(y as isize - 1, h),
            y,
            clamp_index(y as isize + 1, h),
        ];
        for x in 0..w {
            let cols = [
                clamp_index(x as isize - 1, w),
                x,
                clamp_index(x as isize + 1, w),
            ];
            // positive and negative taps summed apart so that a flat
            // neighbourhood under a zero-sum kernel gives exactly zero
            let (mut pos, mut neg) = (0.0, 0.0);
            for (ky, &sy) in rows.iter().enumerate() {
                for (kx, &sx) in cols.iter().enumerate() {
                    let t = kernel[ky * 3 + kx] * src[sy * w + sx];
                    if kernel[ky * 3 + kx] >= 0.0 {
                        pos += t;
                    } else {
                        neg -= t;
                    }
                }
            }
            out[y * w + x] = pos - neg;
        }
    }
    out
}

/// Adjoint of [`filter3x3`].
pub fn filter3x3_adjoint(grad_out: &[f64], h: usize, w: usize, kernel: &[f64; 9]) -> Vec<f64> {
    let mut grad = vec![0.0; h * w];
    for y in 0..h {
        let rows = [
            clamp_index(y as isize - 1, h),
            y,
            clamp_index(y as isize + 1, h),
        ];
        for x in 0..w {
            let g = grad_out[y * w + x];
            let cols = [
                clamp_index(x as isize - 1, w),
                x,
                clamp_index(x as isize + 1, w),
            ];
            for (ky, &sy) in rows.iter().enumerate() {
                for (kx, &sx) in cols.iter().enumerate() {
                    grad[sy * w + sx] += kernel[ky * 3 + kx] * g;
                }
            }
        }
    }
    grad
}

/// Normalized 1-D gaussian taps truncated at `3 sigma`. `sigma <= 0` gives `[1]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Separable gaussian blur with replicate borders.
pub fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_kernel(sigma);
    if taps.len() == 1 {
        return src.to_vec();
    }
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(t, k)| k * row[clamp_index(x as isize + t as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(t, k)| k * tmp[clamp_index(y as isize + t as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Bilinear resampling with pixel-center alignment.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    if (h, w) == (nh, nw) {
        return src.to_vec();
    }
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..nw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// ITU-R BT.601 luma.
#[inline]
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_window_sum(
        src: &[f64],
        sh: usize,
        sw: usize,
        r: usize,
        oh: usize,
        ow: usize,
        off: isize,
    ) -> Vec<f64> {
        let r = r as isize;
        let mut out = vec![0.0; oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for y in 0..sh as isize {
                    for x in 0..sw as isize {
                        if (y - (i as isize + off)).abs() <= r
                            && (x - (j as isize + off)).abs() <= r
                        {
                            acc += src[y as usize * sw + x as usize];
                        }
                    }
                }
                out[i * ow + j] = acc;
            }
        }
        out
    }

    #[test]
    fn window_sum_matches_naive_for_all_offsets() {
        let src: Vec<f64> = (0..7 * 5).map(|i| ((i * 31 % 17) as f64) / 7.0).collect();
        for &(r, oh, ow, off) in &[(1, 7, 5, 0), (2, 11, 9, -2), (2, 3, 1, 2), (0, 7, 5, 0)] {
            let fast = window_sum(&src, (7, 5), r, (oh, ow), off);
            let slow = naive_window_sum(&src, 7, 5, r, oh, ow, off);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_kernel_is_normalized_and_truncated() {
        let k = gaussian_kernel(1.5);
        assert_eq!(k.len(), 2 * 5 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
    }

    #[test]
    fn blur_preserves_constants() {
        let src = vec![0.3; 6 * 4];
        for v in gaussian_blur(&src, 6, 4, 2.0) {
            assert!((v - 0.3).abs() < 1e-14);
        }
    }

    #[test]
    fn filter3x3_adjoint_is_transpose() {
        let (h, w) = (5, 4);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.91).cos()).collect();
        let ax = filter3x3(&x, h, w, &SOBEL_X);
        let aty = filter3x3_adjoint(&y, h, w, &SOBEL_X);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn guided_filter_adjoint_is_transpose() {
        let (h, w) = (9, 7);
        let guide: Vec<f64> = (0..h * w).map(|i| ((i * 13 % 11) as f64) / 10.0).collect();
        let plan = GuidedFilterPlan::new(&guide, h, w, 2, 0.05);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.91).cos()).collect();
        let lhs: f64 = plan.apply(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x
            .iter()
            .zip(&plan.apply_adjoint(&y))
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn resize_identity_and_constant() {
        let src: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(resize_bilinear(&src, 3, 4, 3, 4), src);
        let c = resize_bilinear(&[0.5; 12], 3, 4, 7, 5);
        assert!(c.iter().all(|v| (v - 0.5).abs() < 1e-15));
    }
}
