//! Kernels checked against direct loop implementations, and every
//! differentiable op checked against central differences.

mod common;

use glassfuse::graph::{finite_diff_check_all, Graph, ParamStore, Var};
use glassfuse::ops::{self, Elementwise};
use glassfuse::{Result, Tensor};
use rand::Rng;

use common::{rng, uniform};

fn close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
    }
}

fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, cin, h, w] = x.shape()[..] else { panic!() };
    let [cout, _, kh, kw] = k.shape()[..] else { panic!() };
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * cin + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out.data_mut()[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Adjoint of the direct convolution, accumulated loop by loop.
fn naive_conv_backward(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    g: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let [n, cin, h, w] = x.shape()[..] else { panic!() };
    let [cout, _, kh, kw] = k.shape()[..] else { panic!() };
    let [_, _, oh, ow] = g.shape()[..] else { panic!() };
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dk = Tensor::zeros(k.shape().to_vec());
    let mut db = Tensor::zeros([cout]);
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g.data()[((ni * cout + co) * oh + oy) * ow + ox];
                    db.data_mut()[co] += gv;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((ni * cin + ci) * h + iy as usize) * w + ix as usize;
                                let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                dx.data_mut()[xi] += gv * k.data()[ki];
                                dk.data_mut()[ki] += gv * x.data()[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

#[test]
fn conv2d_matches_direct_loops_on_random_shapes() {
    let mut r = rng(1);
    let mut checked = 0;
    while checked < 120 {
        let n = r.random_range(1..=2);
        let cin = r.random_range(1..=4);
        let cout = r.random_range(1..=4);
        let k = [1, 3][r.random_range(0..2)];
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=1);
        let h = r.random_range(1..=9);
        let w = r.random_range(1..=9);
        if h + 2 * pad < k || w + 2 * pad < k {
            continue;
        }
        let x = uniform(&[n, cin, h, w], -1.0, 1.0, &mut r);
        let kernel = uniform(&[cout, cin, k, k], -1.0, 1.0, &mut r);
        let bias = uniform(&[cout], -1.0, 1.0, &mut r);
        let out = ops::conv2d(&x, &kernel, &bias, stride, pad).unwrap();
        close(&out, &naive_conv(&x, &kernel, &bias, stride, pad), 1e-12);

        let g = uniform(out.shape(), -1.0, 1.0, &mut r);
        let (dx, dk, db) = ops::conv2d_backward(&x, &kernel, &bias, stride, pad, &g).unwrap();
        let (ex, ek, eb) = naive_conv_backward(&x, &kernel, &g, stride, pad);
        close(&dx, &ex, 1e-12);
        close(&dk, &ek, 1e-12);
        close(&db, &eb, 1e-12);
        checked += 1;
    }
}

#[test]
fn conv2d_rejects_bad_shapes() {
    let x = Tensor::<f64>::zeros([1, 2, 4, 4]);
    let k = Tensor::<f64>::zeros([3, 1, 3, 3]);
    assert!(ops::conv2d(&x, &k, &Tensor::zeros([3]), 1, 1).is_err());
    let k = Tensor::<f64>::zeros([3, 2, 3, 3]);
    assert!(ops::conv2d(&x, &k, &Tensor::zeros([2]), 1, 1).is_err());
    assert!(ops::conv2d(&Tensor::<f64>::zeros([1, 2, 1, 1]), &k, &Tensor::zeros([3]), 1, 0).is_err());
}

#[test]
fn pooling_fc_and_softmax_match_direct_formulas() {
    let mut r = rng(2);
    for _ in 0..100 {
        let (n, c, h, w) = (r.random_range(1..=3), r.random_range(1..=5), r.random_range(1..=6), r.random_range(1..=6));
        let x = uniform(&[n, c, h, w], -2.0, 2.0, &mut r);
        let pooled = ops::global_avg_pool(&x).unwrap();
        assert_eq!(pooled.shape(), &[n, c, 1, 1]);
        for (i, plane) in x.data().chunks(h * w).enumerate() {
            let mean = plane.iter().sum::<f64>() / (h * w) as f64;
            assert!((pooled.data()[i] - mean).abs() < 1e-12);
        }

        let cout = r.random_range(1..=5);
        let a = uniform(&[n, c], -1.0, 1.0, &mut r);
        let wt = uniform(&[cout, c], -1.0, 1.0, &mut r);
        let b = uniform(&[cout], -1.0, 1.0, &mut r);
        let y = ops::fully_connected(&a, &wt, &b).unwrap();
        for i in 0..n {
            for o in 0..cout {
                let expect: f64 = b.data()[o] + (0..c).map(|j| a.data()[i * c + j] * wt.data()[o * c + j]).sum::<f64>();
                assert!((y.data()[i * cout + o] - expect).abs() < 1e-12);
            }
        }

        let s = ops::softmax(&x, 1).unwrap();
        for ni in 0..n {
            for p in 0..h * w {
                let at = |ci: usize| (ni * c + ci) * h * w + p;
                let total: f64 = (0..c).map(|ci| x.data()[at(ci)].exp()).sum();
                for ci in 0..c {
                    assert!((s.data()[at(ci)] - x.data()[at(ci)].exp() / total).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn softmax_examples() {
    let x = Tensor::new([1, 2, 1, 1], vec![0.0f64, 0.0]).unwrap();
    assert_eq!(ops::softmax(&x, 1).unwrap().data(), &[0.5, 0.5]);
    let x = Tensor::new([1, 2, 1, 1], vec![1000.0f64, 0.0]).unwrap();
    let s = ops::softmax(&x, 1).unwrap();
    assert_eq!(s.data()[0], 1.0);
    assert!(s.is_finite());
}

fn naive_upsample(x: &Tensor<f64>, th: usize, tw: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.shape()[..] else { panic!() };
    let coord = |i: usize, src: usize, dst: usize| {
        let p = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
        let lo = (p.floor() as usize).min(src - 1);
        (lo, (lo + 1).min(src - 1), p - lo as f64)
    };
    let mut out = Tensor::zeros([n, c, th, tw]);
    for plane in 0..n * c {
        for oy in 0..th {
            let (y0, y1, ly) = coord(oy, h, th);
            for ox in 0..tw {
                let (x0, x1, lx) = coord(ox, w, tw);
                let at = |y: usize, xx: usize| x.data()[plane * h * w + y * w + xx];
                let v = (1.0 - ly) * ((1.0 - lx) * at(y0, x0) + lx * at(y0, x1))
                    + ly * ((1.0 - lx) * at(y1, x0) + lx * at(y1, x1));
                out.data_mut()[(plane * th + oy) * tw + ox] = v;
            }
        }
    }
    out
}

#[test]
fn upsample_matches_scalar_formula() {
    let mut r = rng(3);
    for _ in 0..100 {
        let (h, w) = (r.random_range(1..=6), r.random_range(1..=6));
        let (th, tw) = (h * r.random_range(1..=4), w + r.random_range(0..=7));
        let x = uniform(&[1, 2, h, w], -1.0, 1.0, &mut r);
        close(&ops::bilinear_upsample(&x, th, tw).unwrap(), &naive_upsample(&x, th, tw), 1e-12);
    }
}

#[test]
fn upsample_examples() {
    let c = Tensor::full([1, 1, 3, 5], 0.7f64);
    assert!(ops::bilinear_upsample(&c, 12, 20).unwrap().data().iter().all(|&v| v == 0.7));
    let x = uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng(4));
    assert_eq!(ops::bilinear_upsample(&x, 4, 4).unwrap(), x);
    assert!(ops::bilinear_upsample(&x, 2, 4).is_err());
}

#[test]
fn concat_and_narrow_bookkeeping() {
    let mut r = rng(5);
    for _ in 0..100 {
        let (n, h, w) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=4));
        let (c1, c2) = (r.random_range(1..=3), r.random_range(1..=3));
        let a = uniform(&[n, c1, h, w], -1.0, 1.0, &mut r);
        let b = uniform(&[n, c2, h, w], -1.0, 1.0, &mut r);
        let cat = ops::concat(&[&a, &b], 1).unwrap();
        assert_eq!(cat.shape(), &[n, c1 + c2, h, w]);
        for ni in 0..n {
            for c in 0..c1 + c2 {
                let src = if c < c1 { a.plane(ni, c) } else { b.plane(ni, c - c1) };
                assert_eq!(cat.plane(ni, c), src);
            }
        }
        assert_eq!(ops::narrow(&cat, 1, 0, c1).unwrap(), a);
        assert_eq!(ops::narrow(&cat, 1, c1, c2).unwrap(), b);
    }
    let a = Tensor::<f64>::zeros([1, 1, 2, 2]);
    let b = Tensor::<f64>::zeros([1, 1, 3, 2]);
    assert!(ops::concat(&[&a, &b], 1).is_err());
}

/// Contracts the output of `build` with fixed random weights so every
/// output element influences the scalar loss.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = uniform(g.value(out).shape(), -1.0, 1.0, &mut rng(seed));
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn store(entries: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    for (n, t) in entries {
        p.insert(*n, t.clone());
    }
    p
}

fn assert_grads(params: &ParamStore<f64>, f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>) {
    let (err, name) = finite_diff_check_all(params, 1e-5, f).unwrap();
    assert!(err < 1e-4, "{name}: relative error {err}");
}

#[test]
fn gradients_of_conv_pool_fc() {
    let mut r = rng(6);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
        let p = store(&[
            ("x", uniform(&[2, 2, 5, 6], -1.0, 1.0, &mut r)),
            ("k", uniform(&[3, 2, k, k], -1.0, 1.0, &mut r)),
            ("b", uniform(&[3], -1.0, 1.0, &mut r)),
        ]);
        assert_grads(&p, |g, p| {
            let (x, k, b) = (g.param_from(p, "x")?, g.param_from(p, "k")?, g.param_from(p, "b")?);
            let y = g.conv2d(x, k, b, stride, pad)?;
            weighted_sum(g, y, 60)
        });
    }
    let p = store(&[("x", uniform(&[2, 3, 4, 3], -1.0, 1.0, &mut r))]);
    assert_grads(&p, |g, p| {
        let x = g.param_from(p, "x")?;
        let y = g.global_avg_pool(x)?;
        weighted_sum(g, y, 61)
    });
    let p = store(&[
        ("x", uniform(&[3, 4], -1.0, 1.0, &mut r)),
        ("w", uniform(&[2, 4], -1.0, 1.0, &mut r)),
        ("b", uniform(&[2], -1.0, 1.0, &mut r)),
    ]);
    assert_grads(&p, |g, p| {
        let (x, w, b) = (g.param_from(p, "x")?, g.param_from(p, "w")?, g.param_from(p, "b")?);
        let y = g.fully_connected(x, w, b)?;
        weighted_sum(g, y, 62)
    });
}

#[test]
fn gradients_of_softmax_upsample_relu_scale() {
    let mut r = rng(7);
    let p = store(&[("x", uniform(&[2, 3, 2, 2], -2.0, 2.0, &mut r))]);
    for axis in [1, 3] {
        assert_grads(&p, |g, p| {
            let x = g.param_from(p, "x")?;
            let y = g.softmax(x, axis)?;
            weighted_sum(g, y, 70)
        });
    }
    let p = store(&[("x", uniform(&[1, 2, 3, 4], -1.0, 1.0, &mut r))]);
    assert_grads(&p, |g, p| {
        let x = g.param_from(p, "x")?;
        let y = g.bilinear_upsample(x, 7, 9)?;
        weighted_sum(g, y, 71)
    });
    // Keep inputs away from the ReLU kink.
    let x = Tensor::from_fn([2, 3, 2, 2], |i| if i % 2 == 0 { 0.3 + i as f64 * 0.01 } else { -0.4 - i as f64 * 0.01 });
    assert_grads(&store(&[("x", x)]), |g, p| {
        let x = g.param_from(p, "x")?;
        let y = g.relu(x);
        let y = g.scale(y, 1.7);
        weighted_sum(g, y, 72)
    });
}

#[test]
fn gradients_of_structural_ops() {
    let mut r = rng(8);
    let p = store(&[
        ("a", uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut r)),
        ("b", uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut r)),
        ("c", uniform(&[3], -1.0, 1.0, &mut r)),
    ]);
    assert_grads(&p, |g, p| {
        let (a, b) = (g.param_from(p, "a")?, g.param_from(p, "b")?);
        let cat = g.concat(&[a, b], 1)?;
        let part = g.narrow(cat, 1, 1, 3)?;
        let flat = g.reshape(part, vec![2, 27])?;
        weighted_sum(g, flat, 80)
    });
    assert_grads(&p, |g, p| {
        let (b, c) = (g.param_from(p, "b")?, g.param_from(p, "c")?);
        let sum = g.elementwise(b, c, Elementwise::Add)?;
        let prod = g.elementwise(sum, c, Elementwise::Mul)?;
        let sq = g.mul(prod, b)?;
        weighted_sum(g, sq, 81)
    });
}

#[test]
fn gradients_of_blend_and_cross_entropy() {
    let mut r = rng(9);
    let p = store(&[
        ("a", uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut r)),
        ("b", uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut r)),
        ("wa", uniform(&[2, 3], 0.1, 0.9, &mut r)),
    ]);
    assert_grads(&p, |g, p| {
        let (a, b, wa) = (g.param_from(p, "a")?, g.param_from(p, "b")?, g.param_from(p, "wa")?);
        let one = g.constant(Tensor::full([2, 3], 1.0));
        let neg = g.scale(wa, -1.0);
        let wb = g.add(one, neg)?;
        let y = g.weighted_blend(a, b, wa, wb)?;
        weighted_sum(g, y, 90)
    });
    let labels: Vec<u8> = (0..2 * 3 * 3).map(|i| (i % 3 == 0) as u8).collect();
    let p = store(&[("z", uniform(&[2, 2, 3, 3], -2.0, 2.0, &mut r))]);
    assert_grads(&p, |g, p| {
        let z = g.param_from(p, "z")?;
        let probs = g.softmax(z, 1)?;
        g.cross_entropy(probs, &labels, 1e-7)
    });
}
