//! Dense row-major `f32` tensors and the raw kernels behind the graph ops.
//!
//! Convolution follows the cross-correlation convention (no kernel flip).
//! Every kernel runs a fixed loop nest, so identical inputs give identical
//! output bits.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f32] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Transposed copy of a rank-2 tensor.
    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }
}

/// `(outer, extent, inner)` split of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

// ── GEMM ────────────────────────────────────────────────────────────────

/// Operand layout for [`gemm`].
#[derive(Clone, Copy, Debug)]
pub(crate) enum Layout {
    /// Stored as written (`rows × cols`, row-major).
    Normal,
    /// Stored transposed (`cols × rows`, row-major).
    Transposed,
}

/// `c = a·b + beta·c` for logical `a: m×k`, `b: k×n`, `c: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_layout: Layout,
    b: &[f32],
    b_layout: Layout,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements (checked
    // above) and the strides describe in-bounds row-major views of them.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, Layout::Normal, &b.data, Layout::Normal, &mut out, 0.0);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Dot product with a fixed left-to-right summation order.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

// ── Convolution ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 || kernel[1] != input[0] || kernel[2] != kernel[3]
        {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        let k = kernel[2];
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("conv2d kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (h, w) = (input[1], input[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Config(format!(
                "conv2d output extent non-positive: input {h}x{w}, kernel {k}, padding {pad}"
            )));
        }
        Ok(Self {
            c_in: input[0],
            h,
            w,
            c_out: kernel[0],
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn macs(&self) -> u64 {
        (self.c_out * self.patch_len() * self.out_pixels()) as u64
    }
}

fn im2col(input: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let px = g.out_pixels();
    let mut cols = vec![0.0; g.patch_len() * px];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * px..(row + 1) * px];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &ConvGeometry, out: &mut [f32]) {
    let px = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * px..(row + 1) * px];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution: `out[co] = bias[co] + Σ kernel[co,ci,ky,kx]·input[ci, y·s+ky−p, x·s+kx−p]`.
pub(crate) fn conv2d_forward(
    input: &[f32],
    kernel: &[f32],
    bias: Option<&[f32]>,
    g: &ConvGeometry,
) -> Vec<f32> {
    let px = g.out_pixels();
    let mut out = vec![0.0; g.c_out * px];
    let beta = if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(px).enumerate() {
            chunk.fill(b[co]);
        }
        1.0
    } else {
        0.0
    };
    if g.is_pointwise() {
        gemm(g.c_out, g.c_in, px, kernel, Layout::Normal, input, Layout::Normal, &mut out, beta);
    } else {
        let cols = im2col(input, g);
        gemm(
            g.c_out,
            g.patch_len(),
            px,
            kernel,
            Layout::Normal,
            &cols,
            Layout::Normal,
            &mut out,
            beta,
        );
    }
    out
}

/// Accumulates gradients of a convolution into the optional input/kernel/bias buffers.
pub(crate) fn conv2d_backward(
    input: &[f32],
    kernel: &[f32],
    grad_out: &[f32],
    g: &ConvGeometry,
    grad_input: Option<&mut [f32]>,
    grad_kernel: Option<&mut [f32]>,
    grad_bias: Option<&mut [f32]>,
) {
    let px = g.out_pixels();
    if let Some(gb) = grad_bias {
        for (co, chunk) in grad_out.chunks(px).enumerate() {
            gb[co] += chunk.iter().sum::<f32>();
        }
    }
    let pointwise = g.is_pointwise();
    let cols_owned;
    let cols: &[f32] = if pointwise {
        input
    } else if grad_kernel.is_some() {
        cols_owned = im2col(input, g);
        &cols_owned
    } else {
        &[]
    };
    if let Some(gk) = grad_kernel {
        gemm(
            g.c_out,
            px,
            g.patch_len(),
            grad_out,
            Layout::Normal,
            cols,
            Layout::Transposed,
            gk,
            1.0,
        );
    }
    if let Some(gi) = grad_input {
        if pointwise {
            gemm(g.c_in, g.c_out, px, kernel, Layout::Transposed, grad_out, Layout::Normal, gi, 1.0);
        } else {
            let mut dcols = vec![0.0; g.patch_len() * px];
            gemm(
                g.patch_len(),
                g.c_out,
                px,
                kernel,
                Layout::Transposed,
                grad_out,
                Layout::Normal,
                &mut dcols,
                0.0,
            );
            col2im(&dcols, g, gi);
        }
    }
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(&input.shape, &kernel.shape, stride, padding)?;
    let data = conv2d_forward(&input.data, &kernel.data, None, &g);
    Ok(Tensor {
        shape: vec![g.c_out, g.h_out, g.w_out],
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        Tensor::matrix(m, n, out).unwrap()
    }

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
        let (co, k) = (w.dim(0), w.dim(2));
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.data()[((o * ci + c) * k + ky) * k + kx]
                                        * x.data()[(c * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * ho + y) * wo + xo] = acc;
                }
            }
        }
        Tensor::new(vec![co, ho, wo], out).unwrap()
    }

    #[test]
    fn identity_matmul_returns_rhs() {
        let eye = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let b = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);
    }

    #[test]
    fn small_matmul_by_hand() {
        let a = Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::matrix(2, 1, vec![5., 6.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17., 39.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[4, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) <= 1e-6);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn conv_matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 8, 8], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let got = conv2d(&x, &w, stride, pad).unwrap();
            assert!(got.max_abs_diff(&naive_conv(&x, &w, stride, pad)) <= 1e-5);
        }
    }

    #[test]
    fn pointwise_conv_is_channel_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[4, 5, 6], &mut rng);
        let w = random(&[3, 4, 1, 1], &mut rng);
        let conv = conv2d(&x, &w, 1, 0).unwrap();
        let mat = naive_matmul(
            &w.clone().reshape(&[3, 4]).unwrap(),
            &x.clone().reshape(&[4, 30]).unwrap(),
        );
        assert!(conv.max_abs_diff(&mat.reshape(&[3, 5, 6]).unwrap()) <= 1e-6);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[1, 7, 7], &mut rng);
        let mut w = Tensor::zeros(&[1, 1, 5, 5]);
        w.data_mut()[12] = 1.0;
        assert_eq!(conv2d(&x, &w, 1, 2).unwrap(), x);
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::zeros(&[1, 2, 2]);
        assert!(matches!(
            conv2d(&x, &Tensor::zeros(&[1, 1, 5, 5]), 1, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            conv2d(&x, &Tensor::zeros(&[1, 1, 2, 2]), 1, 0),
            Err(Error::Config(_))
        ));
    }
}
