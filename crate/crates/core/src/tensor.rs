//! Rank-4 `f64` tensors in `(n, c, h, w)` layout and the numerical primitives
//! the layers are built on.
//!
//! Convolution is cross-correlation with symmetric zero padding. The fast path
//! lowers each sample to a patch matrix and runs one GEMM; [`conv2d_naive`] is
//! the literal loop nest the fast path is tested against.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{} elements cannot fill shape {shape:?} ({expected} elements)",
                data.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Elements per sample, `c * h * w`.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.offset(n, c, y, x);
        self.data[i] = value;
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Tensor4::from_vec(shape, self.data)
    }

    /// Collapses to `(n, c*h*w, 1, 1)`.
    pub fn flatten(self) -> Self {
        let shape = [self.shape[0], self.sample_len(), 1, 1];
        Tensor4 {
            shape,
            data: self.data,
        }
    }

    /// Gathers the listed samples into a new tensor, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor4 {
            shape: [indices.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn ensure_same_shape(a: &Tensor4, b: &Tensor4, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    ensure_same_shape(a, b, "add")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor4 {
        shape: a.shape,
        data,
    })
}

pub fn scale(a: &Tensor4, factor: f64) -> Tensor4 {
    Tensor4 {
        shape: a.shape,
        data: a.data.iter().map(|x| x * factor).collect(),
    }
}

pub fn relu_forward(x: &Tensor4) -> Tensor4 {
    Tensor4 {
        shape: x.shape,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Passes `grad` where `x > 0`; the subgradient at zero is zero.
pub fn relu_backward(x: &Tensor4, grad: &Tensor4) -> Result<Tensor4> {
    ensure_same_shape(x, grad, "relu_backward")?;
    let data = x
        .data
        .iter()
        .zip(&grad.data)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor4 {
        shape: x.shape,
        data,
    })
}

/// Square, odd kernel with stride and symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "kernel size must be odd and positive, got {kernel}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        Ok(ConvGeometry {
            kernel,
            stride,
            padding,
        })
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let dim = |size: usize| {
            let padded = size + 2 * self.padding;
            if padded < self.kernel {
                None
            } else {
                Some((padded - self.kernel) / self.stride + 1)
            }
        };
        match (dim(h), dim(w)) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::Shape(format!(
                "kernel {} with padding {} does not fit a {h}x{w} input",
                self.kernel, self.padding
            ))),
        }
    }
}

fn check_conv(
    input: &Tensor4,
    kernels: &Tensor4,
    bias: Option<&[f64]>,
    geom: &ConvGeometry,
) -> Result<(usize, usize)> {
    let [c_out, c_in, kh, kw] = kernels.shape;
    if kh != kw || kh != geom.kernel {
        return Err(Error::Shape(format!(
            "kernels {:?} do not match geometry kernel size {}",
            kernels.shape, geom.kernel
        )));
    }
    if geom.kernel.is_multiple_of(2) || geom.stride == 0 {
        return Err(Error::InvalidArgument(format!("invalid geometry {geom:?}")));
    }
    if c_in != input.c() {
        return Err(Error::Shape(format!(
            "kernels expect {c_in} input channels, input {:?} has {}",
            input.shape,
            input.c()
        )));
    }
    if let Some(bias) = bias {
        if bias.len() != c_out {
            return Err(Error::Shape(format!(
                "bias has {} entries for {c_out} output channels",
                bias.len()
            )));
        }
    }
    geom.output_dims(input.h(), input.w())
}

/// Literal six-deep loop nest. Never optimized; it is the reference the fast
/// path must reproduce.
pub fn conv2d_naive(
    input: &Tensor4,
    kernels: &Tensor4,
    bias: &[f64],
    geom: &ConvGeometry,
) -> Result<Tensor4> {
    let (oh, ow) = check_conv(input, kernels, Some(bias), geom)?;
    let [c_out, c_in, k, _] = kernels.shape;
    let (h, w) = (input.h() as isize, input.w() as isize);
    let pad = geom.padding as isize;
    let mut out = Tensor4::zeros([input.n(), c_out, oh, ow]);
    for n in 0..input.n() {
        for (o, &b) in bias.iter().enumerate().take(c_out) {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = b;
                    for i in 0..c_in {
                        for dy in 0..k {
                            for dx in 0..k {
                                let iy = (y * geom.stride + dy) as isize - pad;
                                let ix = (x * geom.stride + dx) as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h || ix >= w {
                                    continue;
                                }
                                acc += input.get(n, i, iy as usize, ix as usize)
                                    * kernels.get(o, i, dy, dx);
                            }
                        }
                    }
                    out.set(n, o, y, x, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Row-major `(c_in*k*k) x (oh*ow)` patch matrix of one sample.
fn im2col(
    sample: &[f64],
    (c_in, h, w): (usize, usize, usize),
    geom: &ConvGeometry,
    (oh, ow): (usize, usize),
    cols: &mut [f64],
) {
    let k = geom.kernel;
    let pad = geom.padding as isize;
    let p = oh * ow;
    for i in 0..c_in {
        let plane = &sample[i * h * w..(i + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let row = &mut cols[((i * k + dy) * k + dx) * p..][..p];
                for y in 0..oh {
                    let iy = (y * geom.stride + dy) as isize - pad;
                    let dst = &mut row[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let ix = (x * geom.stride + dx) as isize - pad;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto one sample's gradient.
fn col2im(
    cols: &[f64],
    (c_in, h, w): (usize, usize, usize),
    geom: &ConvGeometry,
    (oh, ow): (usize, usize),
    sample: &mut [f64],
) {
    let k = geom.kernel;
    let pad = geom.padding as isize;
    let p = oh * ow;
    for i in 0..c_in {
        let plane = &mut sample[i * h * w..(i + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let row = &cols[((i * k + dy) * k + dx) * p..][..p];
                for y in 0..oh {
                    let iy = (y * geom.stride + dy) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for x in 0..ow {
                        let ix = (x * geom.stride + dx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[y * ow + x];
                        }
                    }
                }
            }
        }
    }
}

/// A strided read-only matrix operand for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn span(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.row_stride + (cols - 1) * self.col_stride + 1
        }
    }
}

/// `c (m x n, row-major) = a (m x k) * b (k x n) + beta * c`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    assert!(a.data.len() >= a.span(m, k), "gemm: lhs too short");
    assert!(b.data.len() >= b.span(k, n), "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(
    input: &Tensor4,
    kernels: &Tensor4,
    bias: &[f64],
    geom: &ConvGeometry,
) -> Result<Tensor4> {
    let (oh, ow) = check_conv(input, kernels, Some(bias), geom)?;
    let [c_out, c_in, k, _] = kernels.shape;
    let rows = c_in * k * k;
    let p = oh * ow;
    let mut out = Tensor4::zeros([input.n(), c_out, oh, ow]);
    let mut cols = vec![0.0; rows * p];
    for n in 0..input.n() {
        im2col(
            input.sample(n),
            (c_in, input.h(), input.w()),
            geom,
            (oh, ow),
            &mut cols,
        );
        let dst = out.sample_mut(n);
        for (o, plane) in dst.chunks_exact_mut(p).enumerate() {
            plane.fill(bias[o]);
        }
        gemm(
            c_out,
            rows,
            p,
            MatRef::row_major(kernels.data(), rows),
            MatRef::row_major(&cols, p),
            1.0,
            dst,
        );
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    /// `None` only when the caller asked to skip the input gradient.
    pub input: Option<Tensor4>,
    pub kernels: Tensor4,
    pub bias: Vec<f64>,
}

/// Gradients of `sum(grad_out * conv2d_forward(input, kernels, bias))` with
/// respect to input, kernels and bias.
pub fn conv2d_backward(
    input: &Tensor4,
    kernels: &Tensor4,
    geom: &ConvGeometry,
    grad_out: &Tensor4,
) -> Result<ConvGrads> {
    conv2d_backward_impl(input, kernels, geom, grad_out, true)
}

pub(crate) fn conv2d_backward_impl(
    input: &Tensor4,
    kernels: &Tensor4,
    geom: &ConvGeometry,
    grad_out: &Tensor4,
    want_input: bool,
) -> Result<ConvGrads> {
    let (oh, ow) = check_conv(input, kernels, None, geom)?;
    let [c_out, c_in, k, _] = kernels.shape;
    if grad_out.shape != [input.n(), c_out, oh, ow] {
        return Err(Error::Shape(format!(
            "grad_out {:?} does not match forward output {:?}",
            grad_out.shape,
            [input.n(), c_out, oh, ow]
        )));
    }
    let rows = c_in * k * k;
    let p = oh * ow;
    let dims = (c_in, input.h(), input.w());
    let mut grad_kernels = Tensor4::zeros(kernels.shape);
    let mut grad_bias = vec![0.0; c_out];
    let mut grad_input = want_input.then(|| Tensor4::zeros(input.shape));
    let mut cols = vec![0.0; rows * p];
    let mut grad_cols = if want_input {
        vec![0.0; rows * p]
    } else {
        Vec::new()
    };

    for n in 0..input.n() {
        let g = grad_out.sample(n);
        for (o, plane) in g.chunks_exact(p).enumerate() {
            grad_bias[o] += plane.iter().sum::<f64>();
        }
        im2col(input.sample(n), dims, geom, (oh, ow), &mut cols);
        gemm(
            c_out,
            p,
            rows,
            MatRef::row_major(g, p),
            MatRef::transposed(&cols, p),
            1.0,
            grad_kernels.data_mut(),
        );
        if let Some(gi) = grad_input.as_mut() {
            gemm(
                rows,
                c_out,
                p,
                MatRef::transposed(kernels.data(), rows),
                MatRef::row_major(g, p),
                0.0,
                &mut grad_cols,
            );
            col2im(&grad_cols, dims, geom, (oh, ow), gi.sample_mut(n));
        }
    }
    Ok(ConvGrads {
        input: grad_input,
        kernels: grad_kernels,
        bias: grad_bias,
    })
}

/// Max pooling without padding. Returns the pooled tensor and, per output
/// cell, the flat index of the winning input element. Ties go to the first
/// element in row-major scan order.
pub fn maxpool2d(input: &Tensor4, window: usize, stride: usize) -> Result<(Tensor4, Vec<usize>)> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "pool window and stride must be at least 1".into(),
        ));
    }
    if window > input.h() || window > input.w() {
        return Err(Error::Shape(format!(
            "pool window {window} larger than input {}x{}",
            input.h(),
            input.w()
        )));
    }
    let oh = (input.h() - window) / stride + 1;
    let ow = (input.w() - window) / stride + 1;
    let mut out = Tensor4::zeros([input.n(), input.c(), oh, ow]);
    let mut argmax = Vec::with_capacity(out.len());
    let mut cursor = 0;
    for n in 0..input.n() {
        for c in 0..input.c() {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = input.offset(n, c, y * stride, x * stride);
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = input.offset(n, c, y * stride + dy, x * stride + dx);
                            if input.data[idx] > input.data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.data[cursor] = input.data[best];
                    argmax.push(best);
                    cursor += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient to the input element that won the forward max.
pub fn maxpool2d_backward(
    grad_out: &Tensor4,
    argmax: &[usize],
    input_shape: [usize; 4],
) -> Result<Tensor4> {
    if grad_out.len() != argmax.len() {
        return Err(Error::Shape(format!(
            "grad_out has {} elements, argmax has {}",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut grad_in = Tensor4::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(&grad_out.data) {
        if idx >= grad_in.len() {
            return Err(Error::Shape(format!(
                "argmax index {idx} outside input shape {input_shape:?}"
            )));
        }
        grad_in.data[idx] += g;
    }
    Ok(grad_in)
}
