//! Forward kernels and their vector-Jacobian products.
//!
//! Every function here is pure: it reads its operands and returns a new
//! tensor. The `*_backward` functions take the upstream gradient and return
//! the gradient with respect to each differentiable operand.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (len + 2 * padding - kernel) / stride + 1
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn check<T: Element>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (n, cin, h, w) = input.dims4("conv2d")?;
        let (cout, kcin, kh, kw) = kernel.dims4("conv2d")?;
        if kcin != cin {
            return Err(Error::shape("conv2d", input.shape(), kernel.shape()));
        }
        if bias.shape() != [cout] {
            return Err(Error::shape("conv2d", kernel.shape(), bias.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
                ),
            ));
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho: conv_out_len(h, kh, stride, padding),
            wo: conv_out_len(w, kw, stride, padding),
            stride,
            padding,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1×1, stride-1, unpadded convolution reads the input planes directly.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col<T: Element>(&self, image: &[T], cols: &mut [T]) {
        let p = self.positions();
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &image[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, cols: &[T], image: &mut [T]) {
        let p = self.positions();
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut image[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of an `[N, Cin, H, W]` input with a
/// `[Cout, Cin, kh, kw]` kernel, plus a per-output-channel bias.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::check(input, kernel, bias, stride, padding)?;
    let (k, p) = (g.patch_len(), g.positions());
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for n in 0..g.n {
        let image = &input.data()[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let out_n = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        for (co, row) in out_n.chunks_exact_mut(p).enumerate() {
            row.fill(bias.data()[co]);
        }
        let cols_ref: &[T] = if g.is_pointwise() {
            image
        } else {
            g.im2col(image, &mut cols);
            &cols
        };
        T::gemm(
            g.cout,
            k,
            p,
            T::one(),
            kernel.data(),
            k as isize,
            1,
            cols_ref,
            p as isize,
            1,
            T::one(),
            out_n,
            p as isize,
            1,
        );
    }
    Tensor::new(vec![g.n, g.cout, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::check(input, kernel, bias, stride, padding)?;
    let (k, p) = (g.patch_len(), g.positions());
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            &[g.n, g.cout, g.ho, g.wo],
            grad_out.shape(),
        ));
    }
    let plane = g.cin * g.h * g.w;
    let mut d_input = vec![T::zero(); g.n * plane];
    let mut d_kernel = vec![T::zero(); g.cout * k];
    let mut d_bias = vec![T::zero(); g.cout];
    let mut cols = vec![T::zero(); k * p];
    let mut d_cols = vec![T::zero(); k * p];
    for n in 0..g.n {
        let image = &input.data()[n * plane..(n + 1) * plane];
        let go = &grad_out.data()[n * g.cout * p..(n + 1) * g.cout * p];
        for (co, row) in go.chunks_exact(p).enumerate() {
            d_bias[co] = row.iter().fold(d_bias[co], |acc, &v| acc + v);
        }
        let cols_ref: &[T] = if g.is_pointwise() {
            image
        } else {
            g.im2col(image, &mut cols);
            &cols
        };
        // dK += G · colsᵀ
        T::gemm(
            g.cout,
            p,
            k,
            T::one(),
            go,
            p as isize,
            1,
            cols_ref,
            1,
            p as isize,
            T::one(),
            &mut d_kernel,
            k as isize,
            1,
        );
        let d_image = &mut d_input[n * plane..(n + 1) * plane];
        if g.is_pointwise() {
            // dX = Kᵀ · G written straight into the input gradient.
            T::gemm(
                k,
                g.cout,
                p,
                T::one(),
                kernel.data(),
                1,
                k as isize,
                go,
                p as isize,
                1,
                T::zero(),
                d_image,
                p as isize,
                1,
            );
        } else {
            T::gemm(
                k,
                g.cout,
                p,
                T::one(),
                kernel.data(),
                1,
                k as isize,
                go,
                p as isize,
                1,
                T::zero(),
                &mut d_cols,
                p as isize,
                1,
            );
            g.col2im(&d_cols, d_image);
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), d_input)?,
        Tensor::new(kernel.shape().to_vec(), d_kernel)?,
        Tensor::new(bias.shape().to_vec(), d_bias)?,
    ))
}

/// Sum whose result does not depend on the order of `values`.
///
/// Values are summed in ascending order, so any permutation of the same
/// multiset gives a bit-identical result.
fn order_free_sum<T: Element>(values: &[T], scratch: &mut Vec<T>) -> T {
    scratch.clear();
    scratch.extend_from_slice(values);
    scratch.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    scratch.iter().fold(T::zero(), |acc, &v| acc + v)
}

/// Mean over the spatial positions of each channel: `[N,C,h,w] -> [N,C,1,1]`.
pub fn global_avg_pool<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("global_avg_pool")?;
    if h == 0 || w == 0 {
        return Err(Error::invalid("global_avg_pool", "empty spatial extent"));
    }
    let count = T::from_f64((h * w) as f64);
    let mut scratch = Vec::with_capacity(h * w);
    let data = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| order_free_sum(plane, &mut scratch) / count)
        .collect();
    Tensor::new(vec![n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Element>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::invalid("global_avg_pool_backward", "rank-4 input expected"));
    };
    if grad_out.len() != n * c {
        return Err(Error::shape(
            "global_avg_pool_backward",
            input_shape,
            grad_out.shape(),
        ));
    }
    let scale = T::one() / T::from_f64((h * w) as f64);
    let mut out = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        out.extend(std::iter::repeat_n(g * scale, h * w));
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// `input · weightᵀ + bias` for `[N, Cin]` inputs and `[Cout, Cin]` weights.
pub fn fully_connected<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, cin) = input.dims2("fully_connected")?;
    let (cout, wcin) = weight.dims2("fully_connected")?;
    if wcin != cin {
        return Err(Error::shape("fully_connected", input.shape(), weight.shape()));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape("fully_connected", weight.shape(), bias.shape()));
    }
    let mut out: Vec<T> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    T::gemm(
        n,
        cin,
        cout,
        T::one(),
        input.data(),
        cin as isize,
        1,
        weight.data(),
        1,
        cin as isize,
        T::one(),
        &mut out,
        cout as isize,
        1,
    );
    Tensor::new(vec![n, cout], out)
}

pub fn fully_connected_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, cin) = input.dims2("fully_connected_backward")?;
    let (cout, _) = weight.dims2("fully_connected_backward")?;
    if grad_out.shape() != [n, cout] {
        return Err(Error::shape(
            "fully_connected_backward",
            &[n, cout],
            grad_out.shape(),
        ));
    }
    let mut d_input = vec![T::zero(); n * cin];
    T::gemm(
        n,
        cout,
        cin,
        T::one(),
        grad_out.data(),
        cout as isize,
        1,
        weight.data(),
        cin as isize,
        1,
        T::zero(),
        &mut d_input,
        cin as isize,
        1,
    );
    let mut d_weight = vec![T::zero(); cout * cin];
    T::gemm(
        cout,
        n,
        cin,
        T::one(),
        grad_out.data(),
        1,
        cout as isize,
        input.data(),
        cin as isize,
        1,
        T::zero(),
        &mut d_weight,
        cin as isize,
        1,
    );
    let mut d_bias = vec![T::zero(); cout];
    for row in grad_out.data().chunks_exact(cout) {
        for (d, &g) in d_bias.iter_mut().zip(row) {
            *d = *d + g;
        }
    }
    Ok((
        Tensor::new(vec![n, cin], d_input)?,
        Tensor::new(vec![cout, cin], d_weight)?,
        Tensor::new(vec![cout], d_bias)?,
    ))
}

/// `(outer, axis_len, inner)` split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-stabilised softmax along `axis`.
pub fn softmax<T: Element>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= input.rank() {
        return Err(Error::invalid(
            "softmax",
            format!("axis {axis} out of range for shape {:?}", input.shape()),
        ));
    }
    let (outer, len, inner) = axis_split(input.shape(), axis);
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).fold(T::neg_infinity(), |m, k| m.max(x[at(k)]));
            let mut total = T::zero();
            for k in 0..len {
                let e = (x[at(k)] - m).exp();
                out[at(k)] = e;
                total = total + e;
            }
            for k in 0..len {
                out[at(k)] = out[at(k)] / total;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Gradient of softmax given its output `y`: `y ⊙ (g − Σ g⊙y)`.
pub fn softmax_backward<T: Element>(
    output: &Tensor<T>,
    axis: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if output.shape() != grad_out.shape() {
        return Err(Error::shape("softmax_backward", output.shape(), grad_out.shape()));
    }
    let (outer, len, inner) = axis_split(output.shape(), axis);
    let (y, g) = (output.data(), grad_out.data());
    let mut out = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot = (0..len).fold(T::zero(), |acc, k| acc + g[at(k)] * y[at(k)]);
            for k in 0..len {
                out[at(k)] = y[at(k)] * (g[at(k)] - dot);
            }
        }
    }
    Tensor::new(output.shape().to_vec(), out)
}

/// Source taps for align-corners-false linear resampling along one axis:
/// `(low index, high index, weight of high)`.
fn resample_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear upsampling of `[N,C,h,w]` to `[N,C,target_h,target_w]`
/// (align-corners-false).
pub fn bilinear_upsample<T: Element>(
    input: &Tensor<T>,
    target_h: usize,
    target_w: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("bilinear_upsample")?;
    if target_h < h || target_w < w || h == 0 || w == 0 {
        return Err(Error::invalid(
            "bilinear_upsample",
            format!("cannot resample {h}x{w} to {target_h}x{target_w}; only upsampling is supported"),
        ));
    }
    let rows = resample_taps(h, target_h);
    let cols = resample_taps(w, target_w);
    let mut out = Vec::with_capacity(n * c * target_h * target_w);
    for plane in input.data().chunks_exact(h * w) {
        for &(y0, y1, ly) in &rows {
            let ly = T::from_f64(ly);
            let (r0, r1) = (&plane[y0 * w..][..w], &plane[y1 * w..][..w]);
            for &(x0, x1, lx) in &cols {
                let lx = T::from_f64(lx);
                let top = r0[x0] + lx * (r0[x1] - r0[x0]);
                let bottom = r1[x0] + lx * (r1[x1] - r1[x0]);
                out.push(top + ly * (bottom - top));
            }
        }
    }
    Tensor::new(vec![n, c, target_h, target_w], out)
}

pub fn bilinear_upsample_backward<T: Element>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::invalid("bilinear_upsample_backward", "rank-4 input expected"));
    };
    let (gn, gc, th, tw) = grad_out.dims4("bilinear_upsample_backward")?;
    if (gn, gc) != (n, c) {
        return Err(Error::shape(
            "bilinear_upsample_backward",
            input_shape,
            grad_out.shape(),
        ));
    }
    let rows = resample_taps(h, th);
    let cols = resample_taps(w, tw);
    let mut out = vec![T::zero(); n * c * h * w];
    for (plane, g) in out
        .chunks_exact_mut(h * w)
        .zip(grad_out.data().chunks_exact(th * tw))
    {
        for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
            let ly = T::from_f64(ly);
            for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                let lx = T::from_f64(lx);
                let gv = g[oy * tw + ox];
                let top = gv * (T::one() - ly);
                let bottom = gv * ly;
                plane[y0 * w + x0] = plane[y0 * w + x0] + top * (T::one() - lx);
                plane[y0 * w + x1] = plane[y0 * w + x1] + top * lx;
                plane[y1 * w + x0] = plane[y1 * w + x0] + bottom * (T::one() - lx);
                plane[y1 * w + x1] = plane[y1 * w + x1] + bottom * lx;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// Shape `b` takes when broadcast against `a`, or `None` if it cannot be.
///
/// Accepted: identical shapes; a `[C]` vector against a rank-4 `[N,C,h,w]`
/// tensor (treated as `[1,C,1,1]`); any shape of equal rank whose dims are
/// either equal to `a`'s or 1.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(b.to_vec());
    }
    if a.len() == 4 && b.len() == 1 && b[0] == a[1] {
        return Some(vec![1, b[0], 1, 1]);
    }
    if a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| y == x || y == 1) {
        return Some(b.to_vec());
    }
    None
}

/// Index into the broadcast operand for every flat index of `a`.
fn broadcast_indices(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len();
    let mut b_strides = vec![0usize; rank];
    let mut stride = 1;
    for d in (0..rank).rev() {
        b_strides[d] = if b[d] == 1 { 0 } else { stride };
        stride *= b[d];
    }
    let total: usize = a.iter().product();
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(total);
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += b_strides[d];
            if idx[d] < a[d] {
                break;
            }
            offset -= b_strides[d] * a[d];
            idx[d] = 0;
        }
    }
    out
}

/// Pointwise `a + b` or `a ⊙ b`, broadcasting `b` onto `a`'s shape.
pub fn elementwise<T: Element>(a: &Tensor<T>, b: &Tensor<T>, kind: Elementwise) -> Result<Tensor<T>> {
    let op = match kind {
        Elementwise::Add => "add",
        Elementwise::Mul => "mul",
    };
    let b_shape =
        broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(op, a.shape(), b.shape()))?;
    let f = |x: T, y: T| match kind {
        Elementwise::Add => x + y,
        Elementwise::Mul => x * y,
    };
    let data = if b_shape == a.shape() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        broadcast_indices(a.shape(), &b_shape)
            .into_iter()
            .zip(a.data())
            .map(|(j, &x)| f(x, b.data()[j]))
            .collect()
    };
    Tensor::new(a.shape().to_vec(), data)
}

/// Gradients of [`elementwise`] with respect to `a` and `b` (reduced back to
/// `b`'s own shape).
pub fn elementwise_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    kind: Elementwise,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let b_shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| Error::shape("elementwise_backward", a.shape(), b.shape()))?;
    let g = grad_out.data();
    let index: Vec<usize> = if b_shape == a.shape() {
        (0..a.len()).collect()
    } else {
        broadcast_indices(a.shape(), &b_shape)
    };
    let mut d_b = vec![T::zero(); b.len()];
    let d_a = match kind {
        Elementwise::Add => {
            for (&j, &gv) in index.iter().zip(g) {
                d_b[j] = d_b[j] + gv;
            }
            g.to_vec()
        }
        Elementwise::Mul => {
            for ((&j, &gv), &x) in index.iter().zip(g).zip(a.data()) {
                d_b[j] = d_b[j] + gv * x;
            }
            index.iter().zip(g).map(|(&j, &gv)| gv * b.data()[j]).collect()
        }
    };
    Ok((
        Tensor::new(a.shape().to_vec(), d_a)?,
        Tensor::new(b.shape().to_vec(), d_b)?,
    ))
}

/// Joins tensors along `axis`; all other dimensions must agree.
pub fn concat<T: Element>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat", "no tensors to concatenate"))?;
    if axis >= first.rank() {
        return Err(Error::invalid(
            "concat",
            format!("axis {axis} out of range for shape {:?}", first.shape()),
        ));
    }
    for p in &parts[1..] {
        let compatible = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, out)
}

/// The sub-tensor `[start, start + len)` along `axis`.
pub fn narrow<T: Element>(input: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= input.rank() || start + len > input.shape()[axis] {
        return Err(Error::invalid(
            "narrow",
            format!(
                "range {start}..{} on axis {axis} of shape {:?}",
                start + len,
                input.shape()
            ),
        ));
    }
    let (outer, full, inner) = axis_split(input.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&input.data()[base..base + len * inner]);
    }
    let mut shape = input.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

/// Scatters `grad_out` back into a zero tensor of `input_shape`.
pub fn narrow_backward<T: Element>(
    input_shape: &[usize],
    axis: usize,
    start: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (outer, full, inner) = axis_split(input_shape, axis);
    let len = grad_out.shape()[axis];
    let mut out = vec![T::zero(); outer * full * inner];
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out[base..base + len * inner]
            .copy_from_slice(&grad_out.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::new(input_shape.to_vec(), out)
}

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    // NaN passes through so a poisoned input still reaches the loss.
    input.map(|v| if v.is_nan() || v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("relu_backward: shape mismatch")
}

/// Per-channel convex blend `ψ_a ⊙ a + ψ_b ⊙ b` of two `[N,C,h,w]` maps with
/// `[N,C]` weights.
///
/// The result is clamped into `[min(a,b), max(a,b)]` so rounding in the two
/// products can never push it outside the operands.
pub fn weighted_blend<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    weight_a: &Tensor<T>,
    weight_b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = a.dims4("weighted_blend")?;
    if a.shape() != b.shape() {
        return Err(Error::shape("weighted_blend", a.shape(), b.shape()));
    }
    for wt in [weight_a, weight_b] {
        if wt.shape() != [n, c] {
            return Err(Error::shape("weighted_blend", a.shape(), wt.shape()));
        }
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(a.len());
    for plane in 0..n * c {
        let (wa, wb) = (weight_a.data()[plane], weight_b.data()[plane]);
        let range = plane * hw..(plane + 1) * hw;
        for (&x, &y) in a.data()[range.clone()].iter().zip(&b.data()[range]) {
            let v = wa * x + wb * y;
            out.push(if v.is_nan() { v } else { v.max(x.min(y)).min(x.max(y)) });
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// Gradients of [`weighted_blend`] for `(a, b, weight_a, weight_b)`. The
/// rounding clamp is treated as the identity.
pub fn weighted_blend_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    weight_a: &Tensor<T>,
    weight_b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<[Tensor<T>; 4]> {
    let (n, c, h, w) = a.dims4("weighted_blend_backward")?;
    let hw = h * w;
    let mut d_a = Vec::with_capacity(a.len());
    let mut d_b = Vec::with_capacity(a.len());
    let mut d_wa = vec![T::zero(); n * c];
    let mut d_wb = vec![T::zero(); n * c];
    for plane in 0..n * c {
        let (wa, wb) = (weight_a.data()[plane], weight_b.data()[plane]);
        let range = plane * hw..(plane + 1) * hw;
        let g = &grad_out.data()[range.clone()];
        let (x, y) = (&a.data()[range.clone()], &b.data()[range]);
        for i in 0..hw {
            d_a.push(g[i] * wa);
            d_b.push(g[i] * wb);
            d_wa[plane] = d_wa[plane] + g[i] * x[i];
            d_wb[plane] = d_wb[plane] + g[i] * y[i];
        }
    }
    Ok([
        Tensor::new(a.shape().to_vec(), d_a)?,
        Tensor::new(a.shape().to_vec(), d_b)?,
        Tensor::new(vec![n, c], d_wa)?,
        Tensor::new(vec![n, c], d_wb)?,
    ])
}
