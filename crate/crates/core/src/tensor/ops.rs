use std::rc::Rc;

use super::conv::{self, ConvGeom};
use super::tape::Var;
use super::Tensor;
use crate::error::{Error, Result};
use crate::imgproc::{self, GuidedFilterPlan};

/// Denominator guard for [`Var::div`].
pub const DIV_EPS: f64 = 1e-12;
/// Guard on the sqrt derivative at zero.
pub const SQRT_EPS: f64 = 1e-12;

pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Rc<Tensor>,
        weight: Rc<Tensor>,
        geom: ConvGeom,
    },
    Relu(Rc<Tensor>),
    Sigmoid(Rc<Tensor>),
    Abs(Rc<Tensor>),
    Atan(Rc<Tensor>),
    Sqrt(Rc<Tensor>),
    Square(Rc<Tensor>),
    Powf(Rc<Tensor>, f64),
    Scale(f64),
    AddScalar,
    Clamp(Rc<Tensor>, f64, f64),
    Add,
    Sub,
    Mul(Rc<Tensor>, Rc<Tensor>),
    Div(Rc<Tensor>, Rc<Tensor>),
    Sum(Vec<usize>),
    GlobalAvgPool(Vec<usize>),
    Dense(Rc<Tensor>, Rc<Tensor>),
    Concat {
        channels: Vec<usize>,
        batch: usize,
        plane: usize,
    },
    ScaleChannels(Rc<Tensor>, Rc<Tensor>),
    ScaleSpatial(Rc<Tensor>, Rc<Tensor>),
    SpatialFrequency {
        input: Rc<Tensor>,
        output: Rc<Tensor>,
        radius: usize,
    },
    GuidedFilter(Vec<GuidedFilterPlan>),
    Select(Rc<Vec<bool>>),
    Filter3x3([f64; 9], Vec<usize>),
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data,
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Logistic function. The negative half is computed as `1 - sigmoid(-x)`, so
/// `sigmoid(x) + sigmoid(-x) == 1` holds exactly.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        1.0 - 1.0 / (1.0 + x.exp())
    }
}

#[inline]
fn guard(d: f64) -> f64 {
    if d.abs() >= DIV_EPS {
        d
    } else if d < 0.0 {
        -DIV_EPS
    } else {
        DIV_EPS
    }
}

impl Op {
    /// Input gradients for `grad_out`; entries are `None` where `need` is false.
    pub(crate) fn backward(&self, g: &Tensor, need: &[bool]) -> Vec<Option<Tensor>> {
        let gd = g.data();
        let unary = |data: Vec<f64>| vec![Some(like(g, data))];
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                geom,
            } => {
                let grads = conv::backward(g, input, weight, geom, [need[0], need[1], need[2]]);
                vec![grads.input, grads.weight, grads.bias]
            }
            Op::Relu(x) => unary(zip_map(gd, x.data(), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Sigmoid(y) => unary(zip_map(gd, y.data(), |g, y| g * y * (1.0 - y))),
            Op::Abs(x) => unary(zip_map(gd, x.data(), |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            })),
            Op::Atan(x) => unary(zip_map(gd, x.data(), |g, x| g / (1.0 + x * x))),
            Op::Sqrt(y) => unary(zip_map(gd, y.data(), |g, y| g * 0.5 / (y + SQRT_EPS))),
            Op::Square(x) => unary(zip_map(gd, x.data(), |g, x| 2.0 * g * x)),
            Op::Powf(x, e) => unary(zip_map(gd, x.data(), |g, x| {
                if x == 0.0 {
                    0.0
                } else {
                    g * e * x.powf(e - 1.0)
                }
            })),
            Op::Scale(s) => unary(gd.iter().map(|g| g * s).collect()),
            Op::AddScalar => vec![Some(g.clone())],
            Op::Clamp(x, lo, hi) => unary(zip_map(gd, x.data(), |g, x| {
                if x >= *lo && x <= *hi {
                    g
                } else {
                    0.0
                }
            })),
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                need[0].then(|| like(g, zip_map(gd, b.data(), |g, b| g * b))),
                need[1].then(|| like(g, zip_map(gd, a.data(), |g, a| g * a))),
            ],
            Op::Div(a, b) => vec![
                need[0].then(|| like(g, zip_map(gd, b.data(), |g, b| g / guard(b)))),
                need[1].then(|| {
                    let data = (0..gd.len())
                        .map(|i| {
                            let d = guard(b.data()[i]);
                            -gd[i] * a.data()[i] / (d * d)
                        })
                        .collect();
                    like(g, data)
                }),
            ],
            Op::Sum(shape) => {
                let n = shape.iter().product();
                vec![Some(Tensor {
                    shape: shape.clone(),
                    data: vec![gd[0]; n],
                })]
            }
            Op::GlobalAvgPool(shape) => {
                let plane = shape[2] * shape[3];
                let mut data = Vec::with_capacity(shape.iter().product());
                for &gv in gd {
                    data.extend(std::iter::repeat_n(gv / plane as f64, plane));
                }
                vec![Some(Tensor {
                    shape: shape.clone(),
                    data,
                })]
            }
            Op::Dense(x, w) => {
                let (batch, n) = (x.shape[0], x.shape[1]);
                let m = w.shape[0];
                let gx = need[0].then(|| {
                    let mut data = vec![0.0; batch * n];
                    for b in 0..batch {
                        for o in 0..m {
                            let go = gd[b * m + o];
                            for i in 0..n {
                                data[b * n + i] += go * w.data[o * n + i];
                            }
                        }
                    }
                    like(x, data)
                });
                let gw = need[1].then(|| {
                    let mut data = vec![0.0; m * n];
                    for b in 0..batch {
                        for o in 0..m {
                            let go = gd[b * m + o];
                            for i in 0..n {
                                data[o * n + i] += go * x.data[b * n + i];
                            }
                        }
                    }
                    like(w, data)
                });
                let gb = need[2].then(|| {
                    let mut data = vec![0.0; m];
                    for b in 0..batch {
                        for o in 0..m {
                            data[o] += gd[b * m + o];
                        }
                    }
                    Tensor {
                        shape: vec![m],
                        data,
                    }
                });
                vec![gx, gw, gb]
            }
            Op::Concat {
                channels,
                batch,
                plane,
            } => {
                let total: usize = channels.iter().sum();
                let mut offset = 0;
                let mut out = Vec::with_capacity(channels.len());
                for (k, &c) in channels.iter().enumerate() {
                    if need[k] {
                        let mut data = Vec::with_capacity(batch * c * plane);
                        for b in 0..*batch {
                            let start = (b * total + offset) * plane;
                            data.extend_from_slice(&gd[start..start + c * plane]);
                        }
                        out.push(Some(Tensor {
                            shape: vec![*batch, c, g.shape[2], g.shape[3]],
                            data,
                        }));
                    } else {
                        out.push(None);
                    }
                    offset += c;
                }
                out
            }
            Op::ScaleChannels(x, s) => {
                let (batch, ch, h, w) = x.dims4().expect("rank-4");
                let plane = h * w;
                let gx = need[0].then(|| {
                    let mut data = gd.to_vec();
                    for (p, chunk) in data.chunks_mut(plane).enumerate() {
                        let sv = s.data[p];
                        chunk.iter_mut().for_each(|v| *v *= sv);
                    }
                    like(x, data)
                });
                let gs = need[1].then(|| {
                    let data = (0..batch * ch)
                        .map(|p| {
                            let r = p * plane..(p + 1) * plane;
                            gd[r.clone()]
                                .iter()
                                .zip(&x.data[r])
                                .map(|(g, x)| g * x)
                                .sum()
                        })
                        .collect();
                    like(s, data)
                });
                vec![gx, gs]
            }
            Op::ScaleSpatial(x, gate) => {
                let (batch, ch, h, w) = x.dims4().expect("rank-4");
                let plane = h * w;
                let gx = need[0].then(|| {
                    let mut data = gd.to_vec();
                    for b in 0..batch {
                        let gt = &gate.data[b * plane..(b + 1) * plane];
                        for c in 0..ch {
                            let start = (b * ch + c) * plane;
                            for (v, s) in data[start..start + plane].iter_mut().zip(gt) {
                                *v *= s;
                            }
                        }
                    }
                    like(x, data)
                });
                let ggate = need[1].then(|| {
                    let mut data = vec![0.0; batch * plane];
                    for b in 0..batch {
                        let acc = &mut data[b * plane..(b + 1) * plane];
                        for c in 0..ch {
                            let start = (b * ch + c) * plane;
                            let r = start..start + plane;
                            for ((a, g), xv) in acc.iter_mut().zip(&gd[r.clone()]).zip(&x.data[r]) {
                                *a += g * xv;
                            }
                        }
                    }
                    like(gate, data)
                });
                vec![gx, ggate]
            }
            Op::SpatialFrequency {
                input,
                output,
                radius,
            } => {
                let (batch, ch, h, w) = input.dims4().expect("rank-4");
                let mut data = Vec::with_capacity(input.len());
                for b in 0..batch {
                    data.extend(imgproc::spatial_frequency_backward(
                        &input.data[b * ch * h * w..(b + 1) * ch * h * w],
                        ch,
                        h,
                        w,
                        *radius,
                        &output.data[b * h * w..(b + 1) * h * w],
                        &gd[b * h * w..(b + 1) * h * w],
                    ));
                }
                vec![Some(like(input, data))]
            }
            Op::GuidedFilter(plans) => {
                let plane = g.shape[2] * g.shape[3];
                let mut data = Vec::with_capacity(gd.len());
                for (b, plan) in plans.iter().enumerate() {
                    data.extend(plan.apply_adjoint(&gd[b * plane..(b + 1) * plane]));
                }
                unary(data)
            }
            Op::Select(mask) => vec![
                need[0].then(|| {
                    like(
                        g,
                        gd.iter()
                            .zip(mask.iter())
                            .map(|(&g, &m)| if m { g } else { 0.0 })
                            .collect(),
                    )
                }),
                need[1].then(|| {
                    like(
                        g,
                        gd.iter()
                            .zip(mask.iter())
                            .map(|(&g, &m)| if m { 0.0 } else { g })
                            .collect(),
                    )
                }),
            ],
            Op::Filter3x3(kernel, shape) => {
                let (h, w) = (shape[2], shape[3]);
                let mut data = Vec::with_capacity(gd.len());
                for chunk in gd.chunks(h * w) {
                    data.extend(imgproc::filter3x3_adjoint(chunk, h, w, kernel));
                }
                unary(data)
            }
        }
    }
}

impl<'t> Var<'t> {
    fn unary(&self, data: Vec<f64>, op: impl FnOnce() -> Op) -> Var<'t> {
        self.tape.record(like(&self.value, data), &[self], op)
    }

    /// Branch states `-`, `0`, `+` of every element, for traced tapes.
    fn note_sign(&self) {
        self.tape.note_branches(|| {
            self.value
                .data
                .iter()
                .map(|&x| (x >= 0.0) as u8 + (x > 0.0) as u8)
        });
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.value.data.iter().map(|&x| f(x)).collect()
    }

    /// Same-padded, stride-1 2-D convolution. `weight` is `[cout, cin, k, k]`
    /// with odd `k`, `bias` is `[cout]`.
    pub fn conv2d(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let (batch, cin, height, width) = self.value.dims4()?;
        let (cout, wcin, kh, kw) = weight.value.dims4().map_err(|_| {
            Error::shape(
                "conv2d",
                format!("weight must be [cout, cin, k, k], got {:?}", weight.shape()),
            )
        })?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight expects {wcin}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square with odd size, got {kh}x{kw}"),
            ));
        }
        if bias.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias must be [{cout}], got {:?}", bias.shape()),
            ));
        }
        let geom = ConvGeom {
            batch,
            cin,
            cout,
            height,
            width,
            k: kh,
        };
        let out = conv::forward(&self.value, &weight.value, &bias.value, &geom);
        Ok(self.tape.record(out, &[self, weight, bias], || Op::Conv2d {
            input: self.value_rc(),
            weight: weight.value_rc(),
            geom,
        }))
    }

    pub fn relu(&self) -> Var<'t> {
        self.note_sign();
        self.unary(self.map(|x| x.max(0.0)), || Op::Relu(self.value_rc()))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let out = Rc::new(like(&self.value, self.map(sigmoid)));
        let saved = Rc::clone(&out);
        self.tape.record_rc(out, &[self], || Op::Sigmoid(saved))
    }

    pub fn abs(&self) -> Var<'t> {
        self.note_sign();
        self.unary(self.map(f64::abs), || Op::Abs(self.value_rc()))
    }

    pub fn atan(&self) -> Var<'t> {
        self.unary(self.map(f64::atan), || Op::Atan(self.value_rc()))
    }

    pub fn sqrt(&self) -> Var<'t> {
        let out = Rc::new(like(&self.value, self.map(f64::sqrt)));
        let saved = Rc::clone(&out);
        self.tape.record_rc(out, &[self], || Op::Sqrt(saved))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(self.map(|x| x * x), || Op::Square(self.value_rc()))
    }

    pub fn powf(&self, exponent: f64) -> Var<'t> {
        self.unary(self.map(|x| x.powf(exponent)), || {
            Op::Powf(self.value_rc(), exponent)
        })
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        self.unary(self.map(|x| x * factor), || Op::Scale(factor))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(self.map(|x| x + c), || Op::AddScalar)
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Var<'t> {
        self.scale(-1.0).add_scalar(1.0)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.tape.note_branches(|| {
            self.value
                .data
                .iter()
                .map(move |&x| (x >= lo) as u8 + (x > hi) as u8)
        });
        self.unary(self.map(|x| x.clamp(lo, hi)), || {
            Op::Clamp(self.value_rc(), lo, hi)
        })
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce() -> Op,
    ) -> Result<Var<'t>> {
        self.value.same_shape(&other.value, name)?;
        let data = zip_map(self.value.data(), other.value.data(), f);
        Ok(self
            .tape
            .record(like(&self.value, data), &[self, other], op))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, || Op::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, || Op::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "mul",
            |a, b| a * b,
            || Op::Mul(self.value_rc(), other.value_rc()),
        )
    }

    /// Elementwise division; denominators smaller than `1e-12` in magnitude
    /// are replaced by `±1e-12`.
    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "div",
            |a, b| a / guard(b),
            || Op::Div(self.value_rc(), other.value_rc()),
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Var<'t> {
        let shape = self.value.shape.clone();
        self.tape
            .record(Tensor::scalar(self.value.sum()), &[self], || Op::Sum(shape))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Var<'t>> {
        let (batch, ch, h, w) = self.value.dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::shape("global_avg_pool", "empty spatial extent"));
        }
        let data = self
            .value
            .data
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let out = Tensor {
            shape: vec![batch, ch],
            data,
        };
        let shape = self.value.shape.clone();
        Ok(self.tape.record(out, &[self], || Op::GlobalAvgPool(shape)))
    }

    /// `[B, N] x [M, N]^T + [M] -> [B, M]`.
    pub fn dense(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let (batch, n) = match *self.shape() {
            [b, n] => (b, n),
            _ => {
                return Err(Error::shape(
                    "dense",
                    format!("input must be [batch, features], got {:?}", self.shape()),
                ))
            }
        };
        let m = match *weight.shape() {
            [m, wn] if wn == n => m,
            _ => {
                return Err(Error::shape(
                    "dense",
                    format!(
                        "weight {:?} does not accept {n} input features",
                        weight.shape()
                    ),
                ))
            }
        };
        if bias.shape() != [m] {
            return Err(Error::shape(
                "dense",
                format!("bias must be [{m}], got {:?}", bias.shape()),
            ));
        }
        let (x, w, bv) = (&self.value.data, &weight.value.data, &bias.value.data);
        let mut data = vec![0.0; batch * m];
        for b in 0..batch {
            for o in 0..m {
                let row = &w[o * n..(o + 1) * n];
                data[b * m + o] = bv[o]
                    + row
                        .iter()
                        .zip(&x[b * n..(b + 1) * n])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
            }
        }
        let out = Tensor {
            shape: vec![batch, m],
            data,
        };
        Ok(self.tape.record(out, &[self, weight, bias], || {
            Op::Dense(self.value_rc(), weight.value_rc())
        }))
    }

    /// Concatenate `[B, Ci, H, W]` tensors along the channel axis.
    pub fn concat_channels(xs: &[Var<'t>]) -> Result<Var<'t>> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let (batch, _, h, w) = first.value.dims4()?;
        let mut channels = Vec::with_capacity(xs.len());
        for x in xs {
            let (b, c, xh, xw) = x.value.dims4()?;
            if (b, xh, xw) != (batch, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", x.shape(), first.shape()),
                ));
            }
            channels.push(c);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(batch * total * plane);
        for b in 0..batch {
            for (x, &c) in xs.iter().zip(&channels) {
                data.extend_from_slice(&x.value.data[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let out = Tensor {
            shape: vec![batch, total, h, w],
            data,
        };
        let refs: Vec<&Var<'t>> = xs.iter().collect();
        Ok(first.tape.record(out, &refs, || Op::Concat {
            channels,
            batch,
            plane,
        }))
    }

    /// `x[b, c, :, :] * s[b, c]`.
    pub fn scale_channels(&self, s: &Var<'t>) -> Result<Var<'t>> {
        let (batch, ch, h, w) = self.value.dims4()?;
        if s.shape() != [batch, ch] {
            return Err(Error::shape(
                "scale_channels",
                format!("scale {:?} does not match {:?}", s.shape(), self.shape()),
            ));
        }
        let mut data = self.value.data.clone();
        for (p, chunk) in data.chunks_mut(h * w).enumerate() {
            let sv = s.value.data[p];
            chunk.iter_mut().for_each(|v| *v *= sv);
        }
        Ok(self.tape.record(like(&self.value, data), &[self, s], || {
            Op::ScaleChannels(self.value_rc(), s.value_rc())
        }))
    }

    /// `x[b, c, y, x] * gate[b, 0, y, x]`.
    pub fn scale_spatial(&self, gate: &Var<'t>) -> Result<Var<'t>> {
        let (batch, ch, h, w) = self.value.dims4()?;
        if gate.shape() != [batch, 1, h, w] {
            return Err(Error::shape(
                "scale_spatial",
                format!("gate {:?} does not match {:?}", gate.shape(), self.shape()),
            ));
        }
        let plane = h * w;
        let mut data = self.value.data.clone();
        for b in 0..batch {
            let gt = &gate.value.data[b * plane..(b + 1) * plane];
            for c in 0..ch {
                let start = (b * ch + c) * plane;
                for (v, s) in data[start..start + plane].iter_mut().zip(gt) {
                    *v *= s;
                }
            }
        }
        Ok(self
            .tape
            .record(like(&self.value, data), &[self, gate], || {
                Op::ScaleSpatial(self.value_rc(), gate.value_rc())
            }))
    }

    /// Pixel-wise spatial frequency, `[B, C, H, W] -> [B, 1, H, W]`.
    pub fn spatial_frequency(&self, radius: usize) -> Result<Var<'t>> {
        let (batch, ch, h, w) = self.value.dims4()?;
        let mut data = Vec::with_capacity(batch * h * w);
        for b in 0..batch {
            data.extend(imgproc::spatial_frequency(
                &self.value.data[b * ch * h * w..(b + 1) * ch * h * w],
                ch,
                h,
                w,
                radius,
            ));
        }
        let out = Rc::new(Tensor {
            shape: vec![batch, 1, h, w],
            data,
        });
        let saved = Rc::clone(&out);
        Ok(self.tape.record_rc(out, &[self], || Op::SpatialFrequency {
            input: self.value_rc(),
            output: saved,
            radius,
        }))
    }

    /// Guided filter of a `[B, 1, H, W]` map steered by a constant guide of the
    /// same shape. Linear in `self`; the result is not clamped.
    pub fn guided_filter(&self, guide: &Tensor, radius: usize, eps: f64) -> Result<Var<'t>> {
        let (batch, ch, h, w) = self.value.dims4()?;
        if ch != 1 || guide.shape() != self.shape() {
            return Err(Error::shape(
                "guided_filter",
                format!(
                    "map {:?} and guide {:?} must be single-channel and equal",
                    self.shape(),
                    guide.shape()
                ),
            ));
        }
        let plane = h * w;
        let plans: Vec<GuidedFilterPlan> = (0..batch)
            .map(|b| {
                GuidedFilterPlan::new(&guide.data[b * plane..(b + 1) * plane], h, w, radius, eps)
            })
            .collect();
        let mut data = Vec::with_capacity(batch * plane);
        for (b, plan) in plans.iter().enumerate() {
            data.extend(plan.apply(&self.value.data[b * plane..(b + 1) * plane]));
        }
        Ok(self
            .tape
            .record(like(&self.value, data), &[self], || Op::GuidedFilter(plans)))
    }

    /// Per-element `mask ? on_true : on_false`. The mask is a constant.
    pub fn select(mask: Rc<Vec<bool>>, on_true: &Var<'t>, on_false: &Var<'t>) -> Result<Var<'t>> {
        on_true.value.same_shape(&on_false.value, "select")?;
        if mask.len() != on_true.value.len() {
            return Err(Error::shape(
                "select",
                format!("mask has {} entries for {:?}", mask.len(), on_true.shape()),
            ));
        }
        on_true.tape.note_branches(|| mask.iter().map(|&m| m as u8));
        let data = mask
            .iter()
            .zip(on_true.value.data.iter().zip(&on_false.value.data))
            .map(|(&m, (&a, &b))| if m { a } else { b })
            .collect();
        Ok(on_true
            .tape
            .record(like(&on_true.value, data), &[on_true, on_false], || {
                Op::Select(mask)
            }))
    }

    /// Fixed 3x3 correlation with replicate padding, applied to every plane.
    pub fn filter3x3(&self, kernel: [f64; 9]) -> Result<Var<'t>> {
        let (_, _, h, w) = self.value.dims4()?;
        let mut data = Vec::with_capacity(self.value.len());
        for chunk in self.value.data.chunks(h * w) {
            data.extend(imgproc::filter3x3(chunk, h, w, &kernel));
        }
        let shape = self.value.shape.clone();
        Ok(self.tape.record(like(&self.value, data), &[self], || {
            Op::Filter3x3(kernel, shape)
        }))
    }
}
