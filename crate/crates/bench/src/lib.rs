//! Deterministic inputs shared by the benchmarks.

use gacn::stack::FocalStack;
use gacn::Tensor;

/// Smooth pseudo-texture in `[0.1, 0.9]`; different seeds give different phases.
pub fn texture(shape: &[usize], seed: u64) -> Tensor {
    let w = *shape.last().expect("non-empty shape");
    let s = seed as f64 * 0.7311;
    Tensor::from_fn(shape.to_vec(), |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        0.5 + 0.2 * (0.31 * x + s).sin() * (0.17 * y - s).cos()
            + 0.2 * (1.3 * x + 0.9 * y + 3.0 * s).sin()
    })
}

/// `n` grayscale images of `size x size`.
pub fn focal_stack(n: usize, size: usize) -> FocalStack {
    let images = (0..n)
        .map(|k| texture(&[1, 1, size, size], k as u64))
        .collect();
    FocalStack::new(images, (0..n).map(|k| format!("{k:02}")).collect()).expect("valid stack")
}
