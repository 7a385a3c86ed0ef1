//! Deterministic inputs for the kernel benchmarks.

use glassfuse::wff::{Linear, WffParams};
use glassfuse::{Mask, Tensor};

/// Smooth pseudo-random values in `[-1, 1]`, cheap and reproducible.
pub fn wave(shape: &[usize], phase: f32) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |i| (i as f32 * 0.618 + phase).sin())
}

/// Input, kernel and bias of a 3×3 convolution.
pub fn conv_case(n: usize, cin: usize, cout: usize, size: usize) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
    (
        wave(&[n, cin, size, size], 0.0),
        wave(&[cout, cin, 3, 3], 1.0),
        wave(&[cout], 2.0),
    )
}

/// Two feature maps and fusion parameters for `c` channels.
pub fn wff_case(n: usize, c: usize, size: usize) -> (Tensor<f32>, Tensor<f32>, WffParams<f32>) {
    let linear = |i: usize, o: usize, phase: f32| Linear {
        weight: wave(&[o, i], phase),
        bias: wave(&[o], phase + 0.5),
    };
    let params = WffParams::new(linear(c, c / 2, 3.0), linear(c / 2, c, 4.0), linear(c / 2, c, 5.0))
        .expect("even channel count");
    (wave(&[n, c, size, size], 6.0), wave(&[n, c, size, size], 7.0), params)
}

/// A disc and a slightly shifted square, so both masks have long contours.
pub fn mask_pair(size: usize) -> (Mask, Mask) {
    let r = size as f32 / 3.0;
    let c = size as f32 / 2.0;
    let disc = Mask::from_fn(size, size, |y, x| {
        let (dy, dx) = (y as f32 - c, x as f32 - c);
        dy * dy + dx * dx < r * r
    });
    let lo = size / 4 + 1;
    let square = Mask::from_fn(size, size, |y, x| (lo..size - lo + 1).contains(&y) && (lo..size - lo).contains(&x));
    (disc, square)
}
