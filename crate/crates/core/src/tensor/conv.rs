//! Stride-1, zero-padded "same" 2-D convolution lowered to GEMM.
//!
//! The input is copied once into a zero-padded buffer whose rows are
//! `W + 2r` wide. In that layout the receptive-field tap `(ky, kx)` of every
//! output pixel is a constant offset away, so each tap is a single GEMM over
//! a strided view of the padded planes; no im2col buffer is needed. Outputs
//! are computed on the padded row pitch and the `2r` spare columns per row
//! are dropped (or kept at zero in the backward pass).

use matrixmultiply::dgemm;

use super::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
}

/// Padded layout of one batch item.
struct Padded {
    /// Row pitch, `W + 2r`.
    pitch: usize,
    /// Channel stride; one spare row's worth beyond `(H + 2r) * pitch` keeps
    /// every shifted view in bounds.
    stride: usize,
    /// Output pixels on the padded pitch, `H * pitch`.
    npx: usize,
}

impl ConvGeom {
    fn padded(&self) -> Padded {
        let r = self.k / 2;
        let pitch = self.width + 2 * r;
        Padded {
            pitch,
            stride: (self.height + 2 * r) * pitch + 2 * r,
            npx: self.height * pitch,
        }
    }

    fn tap_offset(&self, p: &Padded, tap: usize) -> usize {
        (tap / self.k) * p.pitch + tap % self.k
    }
}

/// Copy one batch item's planes into a zero-padded buffer.
fn pad_input(src: &[f64], g: &ConvGeom, p: &Padded) -> Vec<f64> {
    let (h, w, r) = (g.height, g.width, g.k / 2);
    let mut out = vec![0.0; g.cin * p.stride];
    for ci in 0..g.cin {
        for y in 0..h {
            let s = &src[(ci * h + y) * w..(ci * h + y + 1) * w];
            let d0 = ci * p.stride + (y + r) * p.pitch + r;
            out[d0..d0 + w].copy_from_slice(s);
        }
    }
    out
}

/// Spread `[C, H, W]` planes onto the padded output pitch; spare columns are zero.
fn to_pitch(src: &[f64], c: usize, g: &ConvGeom, p: &Padded) -> Vec<f64> {
    let (h, w) = (g.height, g.width);
    let mut out = vec![0.0; c * p.npx];
    for ch in 0..c {
        for y in 0..h {
            let s = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            let d0 = ch * p.npx + y * p.pitch;
            out[d0..d0 + w].copy_from_slice(s);
        }
    }
    out
}

/// Which GEMM lowering to use.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Lowering {
    /// One `cout x cin` GEMM per tap over a shifted view; good when `cout` is large.
    Shifted,
    /// One `k^2 x cin` GEMM per output channel, then shift-and-add; good for
    /// very few output channels, where the shifted GEMMs degenerate to GEMVs.
    Expanded,
}

fn lowering(g: &ConvGeom) -> Lowering {
    if g.cout <= 2 && g.k > 1 {
        Lowering::Expanded
    } else {
        Lowering::Shifted
    }
}

pub(crate) fn forward(input: &Tensor, weight: &Tensor, bias: &Tensor, g: &ConvGeom) -> Tensor {
    forward_with(input, weight, bias, g, lowering(g))
}

fn forward_with(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    g: &ConvGeom,
    how: Lowering,
) -> Tensor {
    let (h, w) = (g.height, g.width);
    let hw = h * w;
    let p = g.padded();
    let kk = g.k * g.k;
    let mut out = vec![0.0; g.batch * g.cout * hw];
    let mut acc = vec![0.0; g.cout * p.npx];
    for b in 0..g.batch {
        let xp = pad_input(&input.data()[b * g.cin * hw..(b + 1) * g.cin * hw], g, &p);
        acc.fill(0.0);
        if how == Lowering::Expanded {
            expanded_forward(&xp, weight.data(), g, &p, &mut acc);
        } else {
            for tap in 0..kk {
                // acc (cout x npx) += W[:, :, tap] (cout x cin) * shifted xp (cin x npx)
                unsafe {
                    dgemm(
                        g.cout,
                        g.cin,
                        p.npx,
                        1.0,
                        weight.data().as_ptr().add(tap),
                        (g.cin * kk) as isize,
                        kk as isize,
                        xp.as_ptr().add(g.tap_offset(&p, tap)),
                        p.stride as isize,
                        1,
                        1.0,
                        acc.as_mut_ptr(),
                        p.npx as isize,
                        1,
                    );
                }
            }
        }
        for co in 0..g.cout {
            let bv = bias.data()[co];
            for y in 0..h {
                let s = &acc[co * p.npx + y * p.pitch..co * p.npx + y * p.pitch + w];
                let d =
                    &mut out[((b * g.cout + co) * h + y) * w..((b * g.cout + co) * h + y + 1) * w];
                for (dv, sv) in d.iter_mut().zip(s) {
                    *dv = sv + bv;
                }
            }
        }
    }
    Tensor {
        shape: vec![g.batch, g.cout, h, w],
        data: out,
    }
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn backward(
    grad_out: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads {
    backward_with(grad_out, input, weight, g, need, lowering(g))
}

fn backward_with(
    grad_out: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    g: &ConvGeom,
    need: [bool; 3],
    how: Lowering,
) -> ConvGrads {
    let [need_in, need_w, need_b] = need;
    let (h, w, r) = (g.height, g.width, g.k / 2);
    let hw = h * w;
    let kk = g.k * g.k;
    let p = g.padded();
    let go = grad_out.data();

    let bias = need_b.then(|| {
        let mut gb = vec![0.0; g.cout];
        for b in 0..g.batch {
            for (co, acc) in gb.iter_mut().enumerate() {
                let start = (b * g.cout + co) * hw;
                *acc += go[start..start + hw].iter().sum::<f64>();
            }
        }
        Tensor {
            shape: vec![g.cout],
            data: gb,
        }
    });

    let mut gw = need_w.then(|| vec![0.0; g.cout * g.cin * kk]);
    let mut gin = need_in.then(|| vec![0.0; g.batch * g.cin * hw]);
    if need_in || need_w {
        for b in 0..g.batch {
            // spare columns of gp stay zero, so they contribute nothing below
            let gp = to_pitch(&go[b * g.cout * hw..(b + 1) * g.cout * hw], g.cout, g, &p);
            if how == Lowering::Expanded {
                let xp = pad_input(&input.data()[b * g.cin * hw..(b + 1) * g.cin * hw], g, &p);
                let gs = shifted_stack(&gp, g, &p);
                let gin_b = gin
                    .as_mut()
                    .map(|v| &mut v[b * g.cin * hw..(b + 1) * g.cin * hw]);
                expanded_backward(&gs, &xp, weight.data(), g, &p, gw.as_deref_mut(), gin_b);
                continue;
            }
            if let Some(gw) = gw.as_mut() {
                let xp = pad_input(&input.data()[b * g.cin * hw..(b + 1) * g.cin * hw], g, &p);
                for tap in 0..kk {
                    // gW[:, :, tap] (cout x cin) += gp (cout x npx) * shifted xp^T (npx x cin)
                    unsafe {
                        dgemm(
                            g.cout,
                            p.npx,
                            g.cin,
                            1.0,
                            gp.as_ptr(),
                            p.npx as isize,
                            1,
                            xp.as_ptr().add(g.tap_offset(&p, tap)),
                            1,
                            p.stride as isize,
                            1.0,
                            gw.as_mut_ptr().add(tap),
                            (g.cin * kk) as isize,
                            kk as isize,
                        );
                    }
                }
            }
            if let Some(gin) = gin.as_mut() {
                let mut gxp = vec![0.0; g.cin * p.stride];
                for tap in 0..kk {
                    // shifted gxp (cin x npx) += W[:, :, tap]^T (cin x cout) * gp (cout x npx)
                    unsafe {
                        dgemm(
                            g.cin,
                            g.cout,
                            p.npx,
                            1.0,
                            weight.data().as_ptr().add(tap),
                            kk as isize,
                            (g.cin * kk) as isize,
                            gp.as_ptr(),
                            p.npx as isize,
                            1,
                            1.0,
                            gxp.as_mut_ptr().add(g.tap_offset(&p, tap)),
                            p.stride as isize,
                            1,
                        );
                    }
                }
                for ci in 0..g.cin {
                    for y in 0..h {
                        let s0 = ci * p.stride + (y + r) * p.pitch + r;
                        let d0 = ((b * g.cin + ci) * h + y) * w;
                        gin[d0..d0 + w].copy_from_slice(&gxp[s0..s0 + w]);
                    }
                }
            }
        }
    }

    ConvGrads {
        input: gin.map(|data| Tensor {
            shape: input.shape().to_vec(),
            data,
        }),
        weight: gw.map(|data| Tensor {
            shape: weight.shape().to_vec(),
            data,
        }),
        bias,
    }
}

/// `acc[co, q] = sum_tap Y[co, tap, q + off(tap)]` with
/// `Y[co] = W[co] (k^2 x cin) * xp (cin x stride)`.
fn expanded_forward(xp: &[f64], weight: &[f64], g: &ConvGeom, p: &Padded, acc: &mut [f64]) {
    let kk = g.k * g.k;
    let mut y = vec![0.0; kk * p.stride];
    for co in 0..g.cout {
        unsafe {
            dgemm(
                kk,
                g.cin,
                p.stride,
                1.0,
                weight.as_ptr().add(co * g.cin * kk),
                1,
                kk as isize,
                xp.as_ptr(),
                p.stride as isize,
                1,
                0.0,
                y.as_mut_ptr(),
                p.stride as isize,
                1,
            );
        }
        let out = &mut acc[co * p.npx..(co + 1) * p.npx];
        for tap in 0..kk {
            let off = g.tap_offset(p, tap);
            let row = &y[tap * p.stride + off..tap * p.stride + off + p.npx];
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
    }
}

/// `gs[co, tap, q'] = gp[co, q' - off(tap)]`, zero outside the pitch grid.
fn shifted_stack(gp: &[f64], g: &ConvGeom, p: &Padded) -> Vec<f64> {
    let kk = g.k * g.k;
    let mut gs = vec![0.0; g.cout * kk * p.stride];
    for co in 0..g.cout {
        for tap in 0..kk {
            let off = g.tap_offset(p, tap);
            let d0 = (co * kk + tap) * p.stride + off;
            gs[d0..d0 + p.npx].copy_from_slice(&gp[co * p.npx..(co + 1) * p.npx]);
        }
    }
    gs
}

fn expanded_backward(
    gs: &[f64],
    xp: &[f64],
    weight: &[f64],
    g: &ConvGeom,
    p: &Padded,
    gw: Option<&mut [f64]>,
    gin: Option<&mut [f64]>,
) {
    let kk = g.k * g.k;
    if let Some(gw) = gw {
        for co in 0..g.cout {
            // gW[co] (k^2 x cin) += gs[co] (k^2 x stride) * xp^T (stride x cin)
            unsafe {
                dgemm(
                    kk,
                    p.stride,
                    g.cin,
                    1.0,
                    gs.as_ptr().add(co * kk * p.stride),
                    p.stride as isize,
                    1,
                    xp.as_ptr(),
                    1,
                    p.stride as isize,
                    1.0,
                    gw.as_mut_ptr().add(co * g.cin * kk),
                    1,
                    kk as isize,
                );
            }
        }
    }
    if let Some(gin) = gin {
        let mut gxp = vec![0.0; g.cin * p.stride];
        for co in 0..g.cout {
            // gxp (cin x stride) += W[co]^T (cin x k^2) * gs[co] (k^2 x stride)
            unsafe {
                dgemm(
                    g.cin,
                    kk,
                    p.stride,
                    1.0,
                    weight.as_ptr().add(co * g.cin * kk),
                    kk as isize,
                    1,
                    gs.as_ptr().add(co * kk * p.stride),
                    p.stride as isize,
                    1,
                    1.0,
                    gxp.as_mut_ptr(),
                    p.stride as isize,
                    1,
                );
            }
        }
        let (h, w, r) = (g.height, g.width, g.k / 2);
        for ci in 0..g.cin {
            for y in 0..h {
                let s0 = ci * p.stride + (y + r) * p.pitch + r;
                let d0 = (ci * h + y) * w;
                gin[d0..d0 + w].copy_from_slice(&gxp[s0..s0 + w]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(input: &Tensor, weight: &Tensor, bias: &Tensor, g: &ConvGeom) -> Vec<f64> {
        let (h, w, k) = (g.height, g.width, g.k);
        let p = (k / 2) as isize;
        let mut out = vec![0.0; g.batch * g.cout * h * w];
        for b in 0..g.batch {
            for co in 0..g.cout {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = bias.data()[co];
                        for ci in 0..g.cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - p;
                                    let sx = x as isize + kx as isize - p;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let iv = input.data()
                                        [((b * g.cin + ci) * h + sy as usize) * w + sx as usize];
                                    let wv = weight.data()[((co * g.cin + ci) * k + ky) * k + kx];
                                    acc += iv * wv;
                                }
                            }
                        }
                        out[((b * g.cout + co) * h + y) * w + x] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn gemm_path_matches_direct_loops() {
        for &(batch, cin, cout, height, width, k) in &[
            (1, 1, 1, 3, 3, 3),
            (2, 3, 4, 6, 5, 3),
            (1, 5, 1, 9, 8, 7),
            (1, 2, 2, 2, 9, 7),
        ] {
            let g = ConvGeom {
                batch,
                cin,
                cout,
                height,
                width,
                k,
            };
            let input = Tensor::from_fn([batch, cin, height, width], |i| {
                ((i * 37 % 11) as f64 - 5.0) / 3.0
            });
            let weight = Tensor::from_fn([cout, cin, k, k], |i| ((i * 13 % 7) as f64 - 3.0) / 5.0);
            let bias = Tensor::from_fn([cout], |i| i as f64 * 0.25);
            let slow = naive(&input, &weight, &bias, &g);
            for how in [Lowering::Shifted, Lowering::Expanded] {
                let fast = forward_with(&input, &weight, &bias, &g, how);
                for (a, b) in fast.data().iter().zip(&slow) {
                    assert!((a - b).abs() < 1e-12, "{how:?}: {a} vs {b}");
                }
            }
        }
    }

    /// Adjoint identity `<conv(x), g> = <x, conv^T(g)>` and the weight
    /// gradient as a naive correlation, for both lowerings.
    #[test]
    fn backward_matches_direct_loops() {
        for &(batch, cin, cout, height, width, k) in &[
            (1, 1, 1, 3, 3, 3),
            (2, 3, 4, 6, 5, 3),
            (1, 5, 1, 9, 8, 7),
            (2, 4, 2, 7, 6, 7),
        ] {
            let g = ConvGeom {
                batch,
                cin,
                cout,
                height,
                width,
                k,
            };
            let input = Tensor::from_fn([batch, cin, height, width], |i| {
                ((i * 37 % 11) as f64 - 5.0) / 3.0
            });
            let weight = Tensor::from_fn([cout, cin, k, k], |i| ((i * 13 % 7) as f64 - 3.0) / 5.0);
            let grad = Tensor::from_fn([batch, cout, height, width], |i| {
                ((i * 7 % 13) as f64 - 6.0) / 4.0
            });
            let (h, w, r) = (height as isize, width as isize, (k / 2) as isize);
            let mut gin_ref = vec![0.0; input.len()];
            let mut gw_ref = vec![0.0; weight.len()];
            for b in 0..batch {
                for co in 0..cout {
                    for y in 0..h {
                        for x in 0..w {
                            let gv = grad.data()
                                [((b * cout + co) * height + y as usize) * width + x as usize];
                            for ci in 0..cin {
                                for ky in 0..k as isize {
                                    for kx in 0..k as isize {
                                        let (sy, sx) = (y + ky - r, x + kx - r);
                                        if sy < 0 || sx < 0 || sy >= h || sx >= w {
                                            continue;
                                        }
                                        let ii = ((b * cin + ci) * height + sy as usize) * width
                                            + sx as usize;
                                        let wi =
                                            ((co * cin + ci) * k + ky as usize) * k + kx as usize;
                                        gin_ref[ii] += gv * weight.data()[wi];
                                        gw_ref[wi] += gv * input.data()[ii];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for how in [Lowering::Shifted, Lowering::Expanded] {
                let got = backward_with(&grad, &input, &weight, &g, [true, true, true], how);
                for (a, b) in got.input.unwrap().data().iter().zip(&gin_ref) {
                    assert!((a - b).abs() < 1e-11, "{how:?} input: {a} vs {b}");
                }
                for (a, b) in got.weight.unwrap().data().iter().zip(&gw_ref) {
                    assert!((a - b).abs() < 1e-11, "{how:?} weight: {a} vs {b}");
                }
            }
        }
    }
}
