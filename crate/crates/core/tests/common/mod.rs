//! Shared helpers and brute-force oracles for the integration tests.
#![allow(dead_code)]

use gacn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(lo..hi))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Smooth non-constant test image in `[0.2, 0.8]`.
pub fn pattern(h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let (fx, fy, ph) = (
        r.gen_range(0.3..0.9),
        r.gen_range(0.3..0.9),
        r.gen_range(0.0..6.0),
    );
    Tensor::from_fn([1, 1, h, w], |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        0.5 + 0.3 * (fx * x + ph).sin() * (fy * y).cos()
    })
}

/// Replicate-padded sample of a `c x h x w` stack.
fn at(f: &[f64], h: usize, w: usize, c: usize, y: isize, x: isize) -> f64 {
    let y = y.clamp(0, h as isize - 1) as usize;
    let x = x.clamp(0, w as isize - 1) as usize;
    f[(c * h + y) * w + x]
}

/// Spatial frequency straight from the window definition.
pub fn naive_sf(f: &[f64], c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let r = r as isize;
    let side = (2 * r + 1) as f64;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut rf = 0.0;
            let mut cf = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (y, x) = (i + dy, j + dx);
                    for ch in 0..c {
                        let v = at(f, h, w, ch, y, x);
                        rf += (v - at(f, h, w, ch, y, x - 1)).powi(2);
                        cf += (v - at(f, h, w, ch, y - 1, x)).powi(2);
                    }
                }
            }
            out.push(((rf + cf) / (side * side)).sqrt());
        }
    }
    out
}

/// Mean over the part of the centred window that lies inside the image.
fn window_mean(v: &[f64], h: usize, w: usize, r: usize, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for y in i.saturating_sub(r)..=(i + r).min(h - 1) {
        for x in j.saturating_sub(r)..=(j + r).min(w - 1) {
            s += v[y * w + x];
            n += 1;
        }
    }
    s / n as f64
}

/// Unclamped guided filter, every statistic computed per window.
pub fn naive_guided(guide: &[f64], p: &[f64], h: usize, w: usize, r: usize, eps: f64) -> Vec<f64> {
    let n = h * w;
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for i in 0..h {
        for j in 0..w {
            let mut si = 0.0;
            let mut sp = 0.0;
            let mut sii = 0.0;
            let mut sip = 0.0;
            let mut cnt = 0.0;
            for y in i.saturating_sub(r)..=(i + r).min(h - 1) {
                for x in j.saturating_sub(r)..=(j + r).min(w - 1) {
                    let (g, q) = (guide[y * w + x], p[y * w + x]);
                    si += g;
                    sp += q;
                    sii += g * g;
                    sip += g * q;
                    cnt += 1.0;
                }
            }
            let (mi, mp) = (si / cnt, sp / cnt);
            let var = sii / cnt - mi * mi;
            let cov = sip / cnt - mi * mp;
            let k = i * w + j;
            a[k] = cov / (var + eps);
            b[k] = mp - a[k] * mi;
        }
    }
    (0..n)
        .map(|k| {
            let (i, j) = (k / w, k % w);
            window_mean(&a, h, w, r, i, j) * guide[k] + window_mean(&b, h, w, r, i, j)
        })
        .collect()
}

/// 3x3 correlation with replicate padding.
pub fn naive_filter3(img: &[f64], h: usize, w: usize, k: &[f64; 9]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut s = 0.0;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    s += k[((dy + 1) * 3 + dx + 1) as usize] * at(img, h, w, 0, i + dy, j + dx);
                }
            }
            out[(i * w as isize + j) as usize] = s;
        }
    }
    out
}

/// Binary map `p > 0.5`, 8-connected components of the foreground and of the
/// background, added together.
pub fn connected_components(p: &[f64], h: usize, w: usize) -> usize {
    let fg: Vec<bool> = p.iter().map(|&v| v > 0.5).collect();
    let mut seen = vec![false; h * w];
    let mut count = 0;
    for start in 0..h * w {
        if seen[start] {
            continue;
        }
        count += 1;
        let label = fg[start];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(k) = stack.pop() {
            let (y, x) = ((k / w) as isize, (k % w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let nk = ny as usize * w + nx as usize;
                    if !seen[nk] && fg[nk] == label {
                        seen[nk] = true;
                        stack.push(nk);
                    }
                }
            }
        }
    }
    count
}
