//! Rank-4 activation tensors and the differentiable kernels the network is built from.
//!
//! Layout is `(t, h, w, c)` row-major, so the channel vector of one voxel is contiguous.
//! Convolutions use SAME zero padding; pooling uses ceil-mode windows clipped at the borders.

use thiserror::Error;

#[cfg(target_arch = "x86_64")]
mod avx;

/// Sets flush-to-zero and denormals-are-zero for the calling thread. Subnormal floats are
/// orders of magnitude slower on x86 and arise once attention probabilities saturate.
pub fn flush_denormals() {
    #[cfg(target_arch = "x86_64")]
    {
        let mut csr: u32 = 0;
        // SAFETY: stmxcsr/ldmxcsr only read and write the SSE control register; setting the
        // FTZ (bit 15) and DAZ (bit 6) flags changes rounding of subnormals only.
        unsafe {
            std::arch::asm!("stmxcsr [{p}]", p = in(reg) &mut csr as *mut u32, options(nostack));
            csr |= 0x8040;
            std::arch::asm!("ldmxcsr [{p}]", p = in(reg) &csr as *const u32, options(nostack, readonly));
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{0}: zero-sized dimension")]
    ZeroSized(&'static str),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("internal consistency: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// `(t, h, w, c)` extents of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(t: usize, h: usize, w: usize, c: usize) -> Self {
        Self { t, h, w, c }
    }

    pub const fn len(&self) -> usize {
        self.t * self.h * self.w * self.c
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of `(t, h, w)` voxels.
    pub const fn voxels(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.t, self.h, self.w, self.c]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.t, self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(TensorError::ZeroSized("Tensor::new"));
        }
        if data.len() != shape.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::new",
                expected: format!("{} values", shape.len()),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Panics on a zero-sized shape.
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        assert!(!shape.is_empty(), "tensor dimensions must be >= 1");
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut out = Self::zeros(shape);
        let mut i = 0;
        for t in 0..shape.t {
            for h in 0..shape.h {
                for w in 0..shape.w {
                    for c in 0..shape.c {
                        out.data[i] = f(t, h, w, c);
                        i += 1;
                    }
                }
            }
        }
        out
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    #[inline]
    pub fn index(&self, t: usize, h: usize, w: usize, c: usize) -> usize {
        ((t * self.shape.h + h) * self.shape.w + w) * self.shape.c + c
    }

    #[inline]
    pub fn at(&self, t: usize, h: usize, w: usize, c: usize) -> f32 {
        self.data[self.index(t, h, w, c)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}

/// `(kt, kh, kw, c_in, c_out)` extents of a convolution kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KernelShape {
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl KernelShape {
    pub const fn new(kt: usize, kh: usize, kw: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            kt,
            kh,
            kw,
            c_in,
            c_out,
        }
    }

    pub const fn cube(k: usize, c_in: usize, c_out: usize) -> Self {
        Self::new(k, k, k, c_in, c_out)
    }

    /// Length of one filter's receptive field, `kt * kh * kw * c_in`.
    pub const fn patch_len(&self) -> usize {
        self.kt * self.kh * self.kw * self.c_in
    }

    pub const fn weight_len(&self) -> usize {
        self.patch_len() * self.c_out
    }

    pub const fn param_len(&self) -> usize {
        self.weight_len() + self.c_out
    }
}

/// Weights are stored `(kt, kh, kw, c_in, c_out)` row-major, i.e. a `[patch_len, c_out]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    shape: KernelShape,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvKernel {
    pub fn new(shape: KernelShape, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if [shape.kt, shape.kh, shape.kw]
            .iter()
            .any(|&k| k == 0 || k % 2 == 0)
        {
            return Err(TensorError::InvalidKernel(format!(
                "spatial/temporal extents must be odd, got {}x{}x{}",
                shape.kt, shape.kh, shape.kw
            )));
        }
        if shape.c_in == 0 || shape.c_out == 0 {
            return Err(TensorError::InvalidKernel("zero channels".into()));
        }
        if weights.len() != shape.weight_len() || bias.len() != shape.c_out {
            return Err(TensorError::InvalidKernel(format!(
                "expected {} weights and {} biases, got {} and {}",
                shape.weight_len(),
                shape.c_out,
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            shape,
            weights,
            bias,
        })
    }

    pub fn zeros(shape: KernelShape) -> Result<Self> {
        Self::new(shape, vec![0.0; shape.weight_len()], vec![0.0; shape.c_out])
    }

    pub fn shape(&self) -> KernelShape {
        self.shape
    }

    #[inline]
    pub fn weight_index(&self, dt: usize, dh: usize, dw: usize, ci: usize, co: usize) -> usize {
        let s = self.shape;
        (((dt * s.kh + dh) * s.kw + dw) * s.c_in + ci) * s.c_out + co
    }

    pub fn param_len(&self) -> usize {
        self.shape.param_len()
    }

    /// Iterates weights then bias, the order used by serialization and the optimizer.
    pub fn params(&self) -> impl Iterator<Item = &f32> {
        self.weights.iter().chain(self.bias.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f32> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Max-pooling window and stride, each `(t, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: [usize; 3],
    pub stride: [usize; 3],
}

impl PoolSpec {
    pub const fn new(window: [usize; 3], stride: [usize; 3]) -> Self {
        Self { window, stride }
    }

    /// Spatial-only 1x2x2 pooling.
    pub const SPATIAL: PoolSpec = PoolSpec::new([1, 2, 2], [1, 2, 2]);
    /// Temporal-only 2x1x1 pooling.
    pub const TEMPORAL: PoolSpec = PoolSpec::new([2, 1, 1], [2, 1, 1]);
    /// Joint 2x2x2 pooling.
    pub const JOINT: PoolSpec = PoolSpec::new([2, 2, 2], [2, 2, 2]);

    pub fn output_shape(&self, input: Shape) -> Shape {
        Shape::new(
            input.t.div_ceil(self.stride[0]),
            input.h.div_ceil(self.stride[1]),
            input.w.div_ceil(self.stride[2]),
            input.c,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.window.iter().chain(self.stride.iter()).any(|&v| v == 0) {
            return Err(TensorError::InvalidKernel(format!(
                "pool window/stride components must be >= 1, got {:?}/{:?}",
                self.window, self.stride
            )));
        }
        Ok(())
    }
}

/// SAME padding for one axis: `(output extent, padding before)`.
fn same_axis(dim: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = dim.div_ceil(stride);
    let needed = ((out - 1) * stride + k).saturating_sub(dim);
    (out, needed / 2)
}

pub fn conv_output_shape(input: Shape, kernel: KernelShape, stride: [usize; 3]) -> Shape {
    Shape::new(
        same_axis(input.t, kernel.kt, stride[0]).0,
        same_axis(input.h, kernel.kh, stride[1]).0,
        same_axis(input.w, kernel.kw, stride[2]).0,
        kernel.c_out,
    )
}

/// Precomputed geometry shared by the forward and backward convolution passes.
struct ConvGeometry {
    input: Shape,
    kernel: KernelShape,
    stride: [usize; 3],
    out: Shape,
    pad: [usize; 3],
}

impl ConvGeometry {
    fn new(op: &'static str, input: Shape, kernel: KernelShape, stride: [usize; 3]) -> Result<Self> {
        if input.is_empty() {
            return Err(TensorError::ZeroSized(op));
        }
        if stride.contains(&0) {
            return Err(TensorError::InvalidKernel(format!("{op}: zero stride")));
        }
        if input.c != kernel.c_in {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: format!("{} input channels", kernel.c_in),
                got: format!("{} channels", input.c),
            });
        }
        let (ot, pt) = same_axis(input.t, kernel.kt, stride[0]);
        let (oh, ph) = same_axis(input.h, kernel.kh, stride[1]);
        let (ow, pw) = same_axis(input.w, kernel.kw, stride[2]);
        Ok(Self {
            input,
            kernel,
            stride,
            out: Shape::new(ot, oh, ow, kernel.c_out),
            pad: [pt, ph, pw],
        })
    }

    /// Rows of the patch matrix for one output frame.
    fn frame_rows(&self) -> usize {
        self.out.h * self.out.w
    }

    /// Fills `col` (`frame_rows x patch_len`) with the receptive fields of output frame `ot`.
    fn im2col_frame(&self, input: &[f32], ot: usize, col: &mut [f32]) {
        let k = self.kernel;
        let cin = k.c_in;
        let plen = k.patch_len();
        let mut row = 0;
        for oh in 0..self.out.h {
            for ow in 0..self.out.w {
                let dst = &mut col[row * plen..(row + 1) * plen];
                let mut off = 0;
                for dt in 0..k.kt {
                    let it = (ot * self.stride[0] + dt) as isize - self.pad[0] as isize;
                    for dh in 0..k.kh {
                        let ih = (oh * self.stride[1] + dh) as isize - self.pad[1] as isize;
                        for dw in 0..k.kw {
                            let iw = (ow * self.stride[2] + dw) as isize - self.pad[2] as isize;
                            let seg = &mut dst[off..off + cin];
                            if self.in_bounds(it, ih, iw) {
                                let base = self.input_offset(it as usize, ih as usize, iw as usize);
                                seg.copy_from_slice(&input[base..base + cin]);
                            } else {
                                seg.fill(0.0);
                            }
                            off += cin;
                        }
                    }
                }
                row += 1;
            }
        }
    }

    /// Accumulates patch-matrix gradients of output frame `ot` back onto `grad_input`.
    fn col2im_frame(&self, col: &[f32], ot: usize, grad_input: &mut [f32]) {
        let k = self.kernel;
        let cin = k.c_in;
        let plen = k.patch_len();
        let mut row = 0;
        for oh in 0..self.out.h {
            for ow in 0..self.out.w {
                let src = &col[row * plen..(row + 1) * plen];
                let mut off = 0;
                for dt in 0..k.kt {
                    let it = (ot * self.stride[0] + dt) as isize - self.pad[0] as isize;
                    for dh in 0..k.kh {
                        let ih = (oh * self.stride[1] + dh) as isize - self.pad[1] as isize;
                        for dw in 0..k.kw {
                            let iw = (ow * self.stride[2] + dw) as isize - self.pad[2] as isize;
                            if self.in_bounds(it, ih, iw) {
                                let base = self.input_offset(it as usize, ih as usize, iw as usize);
                                for (g, s) in grad_input[base..base + cin]
                                    .iter_mut()
                                    .zip(&src[off..off + cin])
                                {
                                    *g += *s;
                                }
                            }
                            off += cin;
                        }
                    }
                }
                row += 1;
            }
        }
    }

    #[inline]
    fn in_bounds(&self, t: isize, h: isize, w: isize) -> bool {
        t >= 0
            && h >= 0
            && w >= 0
            && (t as usize) < self.input.t
            && (h as usize) < self.input.h
            && (w as usize) < self.input.w
    }

    #[inline]
    fn input_offset(&self, t: usize, h: usize, w: usize) -> usize {
        ((t * self.input.h + h) * self.input.w + w) * self.input.c
    }
}

/// Row-major `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with explicit element strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every slice covers the full extent addressed by its strides; checked by the callers'
    // shape arithmetic and the debug assertion above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Which implementation a convolution call runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Route {
    /// Patch matrix + GEMM; handles every stride and channel count.
    Gemm,
    /// Register-blocked direct convolution (x86_64 AVX2/FMA, stride 1, `c_out % 8 == 0`).
    Direct,
}

fn direct_ok(c_out: usize, stride: [usize; 3]) -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        stride == [1, 1, 1] && c_out.is_multiple_of(8) && avx::available()
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        let _ = (c_out, stride);
        false
    }
}

fn pick_route(c_out: usize, stride: [usize; 3]) -> Route {
    if direct_ok(c_out, stride) {
        Route::Direct
    } else {
        Route::Gemm
    }
}

/// 3D correlation with SAME zero padding. Output extent per axis is `ceil(dim / stride)`.
pub fn conv3d(input: &Tensor, kernel: &ConvKernel, stride: [usize; 3]) -> Result<Tensor> {
    conv3d_routed(input, kernel, stride, pick_route(kernel.shape.c_out, stride))
}

pub(crate) fn conv3d_routed(
    input: &Tensor,
    kernel: &ConvKernel,
    stride: [usize; 3],
    route: Route,
) -> Result<Tensor> {
    let geo = ConvGeometry::new("conv3d", input.shape, kernel.shape, stride)?;
    #[cfg(target_arch = "x86_64")]
    if route == Route::Direct && direct_ok(kernel.shape.c_out, stride) {
        let (xp, padded) = avx::pad(&input.data, input.shape, geo.pad);
        let mut out = Tensor::zeros(geo.out);
        // SAFETY: direct_ok checked the CPU features, stride and channel count; stride-1 SAME
        // padding of an odd kernel pads (k - 1) / 2 per side.
        unsafe {
            avx::forward(
                &xp,
                padded,
                kernel.shape,
                &kernel.weights,
                &kernel.bias,
                geo.out,
                &mut out.data,
            )
        };
        return Ok(out);
    }
    let _ = route;
    let plen = kernel.shape.patch_len();
    let cout = kernel.shape.c_out;
    let rows = geo.frame_rows();
    let mut out = Tensor::zeros(geo.out);
    let mut col = vec![0.0f32; rows * plen];
    for ot in 0..geo.out.t {
        geo.im2col_frame(&input.data, ot, &mut col);
        let dst = &mut out.data[ot * rows * cout..(ot + 1) * rows * cout];
        for chunk in dst.chunks_exact_mut(cout) {
            chunk.copy_from_slice(&kernel.bias);
        }
        gemm(
            rows,
            plen,
            cout,
            &col,
            (plen as isize, 1),
            &kernel.weights,
            (cout as isize, 1),
            1.0,
            dst,
        );
    }
    Ok(out)
}

/// Gradients of `sum(grad_out * conv3d(input, kernel))` with respect to every operand.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    /// Absent when the caller asked for parameter gradients only.
    pub grad_input: Option<Tensor>,
    pub grad_weights: Vec<f32>,
    pub grad_bias: Vec<f32>,
}

pub fn conv3d_backward(
    input: &Tensor,
    kernel: &ConvKernel,
    stride: [usize; 3],
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let route = pick_route(kernel.shape.c_out, stride);
    conv3d_backward_impl(input, kernel, stride, grad_out, true, route)
}

/// As [`conv3d_backward`] but skips the input gradient (first layer of a network).
pub fn conv3d_backward_params(
    input: &Tensor,
    kernel: &ConvKernel,
    stride: [usize; 3],
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let route = pick_route(kernel.shape.c_out, stride);
    conv3d_backward_impl(input, kernel, stride, grad_out, false, route)
}

pub(crate) fn conv3d_backward_impl(
    input: &Tensor,
    kernel: &ConvKernel,
    stride: [usize; 3],
    grad_out: &Tensor,
    want_input: bool,
    route: Route,
) -> Result<ConvGrads> {
    let geo = ConvGeometry::new("conv3d_backward", input.shape, kernel.shape, stride)?;
    if grad_out.shape != geo.out {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d_backward",
            expected: geo.out.to_string(),
            got: grad_out.shape.to_string(),
        });
    }
    let plen = kernel.shape.patch_len();
    let cout = kernel.shape.c_out;
    let rows = geo.frame_rows();

    let mut grad_bias = vec![0.0f32; cout];
    for chunk in grad_out.data.chunks_exact(cout) {
        for (b, g) in grad_bias.iter_mut().zip(chunk) {
            *b += *g;
        }
    }

    #[cfg(target_arch = "x86_64")]
    if route == Route::Direct && direct_ok(kernel.shape.c_out, stride) {
        let (xp, padded) = avx::pad(&input.data, input.shape, geo.pad);
        let mut grad_weights = vec![0.0f32; kernel.shape.weight_len()];
        // SAFETY: as in conv3d_routed.
        unsafe {
            avx::grad_weights(
                &xp,
                padded,
                kernel.shape,
                &grad_out.data,
                geo.out,
                &mut grad_weights,
            )
        };
        let grad_input = if !want_input {
            None
        } else if direct_ok(kernel.shape.c_in, stride) {
            // The input gradient of a stride-1 SAME correlation is a SAME correlation of the
            // output gradient with the mirrored, channel-transposed kernel.
            let (fw, fk) = avx::flipped_transposed(&kernel.weights, kernel.shape);
            let (gp, gpadded) = avx::pad(&grad_out.data, grad_out.shape, geo.pad);
            let mut gi = Tensor::zeros(input.shape);
            let zero_bias = vec![0.0f32; fk.c_out];
            // SAFETY: fk.c_out == c_in, checked by direct_ok above.
            unsafe { avx::forward(&gp, gpadded, fk, &fw, &zero_bias, input.shape, &mut gi.data) };
            Some(gi)
        } else {
            Some(conv_input_grad_gemm(&geo, kernel, grad_out))
        };
        return Ok(ConvGrads {
            grad_input,
            grad_weights,
            grad_bias,
        });
    }
    let _ = route;

    let mut grad_weights = vec![0.0f32; kernel.shape.weight_len()];
    let mut grad_input = want_input.then(|| Tensor::zeros(input.shape));
    let mut col = vec![0.0f32; rows * plen];
    let mut grad_col = if want_input {
        vec![0.0f32; rows * plen]
    } else {
        Vec::new()
    };
    for ot in 0..geo.out.t {
        let gout = &grad_out.data[ot * rows * cout..(ot + 1) * rows * cout];
        geo.im2col_frame(&input.data, ot, &mut col);
        // grad_w[plen x cout] += col^T[plen x rows] * gout[rows x cout]
        gemm(
            plen,
            rows,
            cout,
            &col,
            (1, plen as isize),
            gout,
            (cout as isize, 1),
            1.0,
            &mut grad_weights,
        );
        if let Some(gi) = grad_input.as_mut() {
            // grad_col[rows x plen] = gout[rows x cout] * W^T[cout x plen]
            gemm(
                rows,
                cout,
                plen,
                gout,
                (cout as isize, 1),
                &kernel.weights,
                (1, cout as isize),
                0.0,
                &mut grad_col,
            );
            geo.col2im_frame(&grad_col, ot, &mut gi.data);
        }
    }
    Ok(ConvGrads {
        grad_input,
        grad_weights,
        grad_bias,
    })
}

fn conv_input_grad_gemm(geo: &ConvGeometry, kernel: &ConvKernel, grad_out: &Tensor) -> Tensor {
    let plen = kernel.shape.patch_len();
    let cout = kernel.shape.c_out;
    let rows = geo.frame_rows();
    let mut gi = Tensor::zeros(geo.input);
    let mut grad_col = vec![0.0f32; rows * plen];
    for ot in 0..geo.out.t {
        let gout = &grad_out.data[ot * rows * cout..(ot + 1) * rows * cout];
        gemm(
            rows,
            cout,
            plen,
            gout,
            (cout as isize, 1),
            &kernel.weights,
            (1, cout as isize),
            0.0,
            &mut grad_col,
        );
        geo.col2im_frame(&grad_col, ot, &mut gi.data);
    }
    gi
}

/// Max pooling over ceil-mode windows; returns the pooled tensor and the flat input index of
/// each output's winner (lowest index on ties).
pub fn max_pool3d(input: &Tensor, spec: PoolSpec) -> Result<(Tensor, Vec<usize>)> {
    spec.validate()?;
    let s = input.shape;
    let os = spec.output_shape(s);
    let c = s.c;
    let mut out = Tensor::zeros(os);
    let mut argmax = vec![0usize; os.len()];
    let mut best = vec![0.0f32; c];
    let mut best_idx = vec![0usize; c];
    let mut o = 0;
    for ot in 0..os.t {
        let t0 = ot * spec.stride[0];
        let t1 = (t0 + spec.window[0]).min(s.t);
        for oh in 0..os.h {
            let h0 = oh * spec.stride[1];
            let h1 = (h0 + spec.window[1]).min(s.h);
            for ow in 0..os.w {
                let w0 = ow * spec.stride[2];
                let w1 = (w0 + spec.window[2]).min(s.w);
                let mut first = true;
                for t in t0..t1 {
                    for h in h0..h1 {
                        for w in w0..w1 {
                            let base = input.index(t, h, w, 0);
                            let vals = &input.data[base..base + c];
                            if first {
                                best.copy_from_slice(vals);
                                for (ch, bi) in best_idx.iter_mut().enumerate() {
                                    *bi = base + ch;
                                }
                                first = false;
                            } else {
                                for ch in 0..c {
                                    if vals[ch] > best[ch] {
                                        best[ch] = vals[ch];
                                        best_idx[ch] = base + ch;
                                    }
                                }
                            }
                        }
                    }
                }
                out.data[o..o + c].copy_from_slice(&best);
                argmax[o..o + c].copy_from_slice(&best_idx);
                o += c;
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool3d_backward(argmax: &[usize], grad_out: &Tensor, input_shape: Shape) -> Result<Tensor> {
    if argmax.len() != grad_out.shape.len() {
        return Err(TensorError::Internal(format!(
            "argmax has {} entries for a gradient of {} values",
            argmax.len(),
            grad_out.shape.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    let n = grad.data.len();
    for (&idx, &g) in argmax.iter().zip(&grad_out.data) {
        if idx >= n {
            return Err(TensorError::Internal(format!(
                "argmax index {idx} outside input of {n} values"
            )));
        }
        grad.data[idx] += g;
    }
    Ok(grad)
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape,
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Masks `grad_out` by `input > 0`; the gradient at exactly zero is zero.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape("relu_backward", input.shape, grad_out.shape)?;
    Ok(Tensor {
        shape: input.shape,
        data: input
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

/// Softmax over the channel axis at every voxel, stabilized by max subtraction.
pub fn channel_softmax(input: &Tensor) -> Tensor {
    let c = input.shape.c;
    let mut data = input.data.clone();
    for v in data.chunks_exact_mut(c) {
        let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for x in v.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in v.iter_mut() {
            *x /= sum;
        }
    }
    Tensor {
        shape: input.shape,
        data,
    }
}

/// Backward of [`channel_softmax`] given its output `probs`.
pub fn channel_softmax_backward(probs: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape("channel_softmax_backward", probs.shape, grad_out.shape)?;
    let c = probs.shape.c;
    let mut data = vec![0.0f32; probs.data.len()];
    for ((d, p), g) in data
        .chunks_exact_mut(c)
        .zip(probs.data.chunks_exact(c))
        .zip(grad_out.data.chunks_exact(c))
    {
        let dot: f32 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for i in 0..c {
            d[i] = p[i] * (g[i] - dot);
        }
    }
    Ok(Tensor {
        shape: probs.shape,
        data,
    })
}

/// Mean over `h` and `w` for each `(t, c)`; output shape `(t, 1, 1, c)`.
pub fn global_avg_pool_spatial(input: &Tensor) -> Tensor {
    let s = input.shape;
    let plane = s.h * s.w;
    let mut out = Tensor::zeros(Shape::new(s.t, 1, 1, s.c));
    for t in 0..s.t {
        let acc = &mut out.data[t * s.c..(t + 1) * s.c];
        let frame = &input.data[t * plane * s.c..(t + 1) * plane * s.c];
        for v in frame.chunks_exact(s.c) {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += *x;
            }
        }
        let inv = 1.0 / plane as f32;
        for a in acc.iter_mut() {
            *a *= inv;
        }
    }
    out
}

pub fn global_avg_pool_spatial_backward(grad_out: &Tensor, input_shape: Shape) -> Result<Tensor> {
    let expected = Shape::new(input_shape.t, 1, 1, input_shape.c);
    same_shape("global_avg_pool_spatial_backward", expected, grad_out.shape)?;
    let plane = input_shape.h * input_shape.w;
    let inv = 1.0 / plane as f32;
    let c = input_shape.c;
    let mut grad = Tensor::zeros(input_shape);
    for t in 0..input_shape.t {
        let g = &grad_out.data[t * c..(t + 1) * c];
        for v in grad.data[t * plane * c..(t + 1) * plane * c].chunks_exact_mut(c) {
            for (x, gv) in v.iter_mut().zip(g) {
                *x = gv * inv;
            }
        }
    }
    Ok(grad)
}

fn check_mask(op: &'static str, features: Shape, mask: Shape) -> Result<()> {
    if mask.c != 1 || mask.t != features.t || mask.h != features.h || mask.w != features.w {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: format!("{}x{}x{}x1", features.t, features.h, features.w),
            got: mask.to_string(),
        });
    }
    Ok(())
}

/// Scales every channel of `features` by the single-channel `mask` at the same voxel.
pub fn broadcast_mul(features: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_mask("broadcast_mul", features.shape, mask.shape)?;
    let c = features.shape.c;
    let mut data = features.data.clone();
    for (v, &m) in data.chunks_exact_mut(c).zip(&mask.data) {
        for x in v.iter_mut() {
            *x *= m;
        }
    }
    Ok(Tensor {
        shape: features.shape,
        data,
    })
}

/// Returns `(grad_features, grad_mask)`.
pub fn broadcast_mul_backward(
    features: &Tensor,
    mask: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_mask("broadcast_mul_backward", features.shape, mask.shape)?;
    same_shape("broadcast_mul_backward", features.shape, grad_out.shape)?;
    let c = features.shape.c;
    let mut grad_features = grad_out.data.clone();
    let mut grad_mask = vec![0.0f32; mask.data.len()];
    for (((gf, gm), f), &m) in grad_features
        .chunks_exact_mut(c)
        .zip(grad_mask.iter_mut())
        .zip(features.data.chunks_exact(c))
        .zip(&mask.data)
    {
        let mut acc = 0.0f32;
        for (g, x) in gf.iter_mut().zip(f) {
            acc += *g * *x;
            *g *= m;
        }
        *gm = acc;
    }
    Ok((
        Tensor {
            shape: features.shape,
            data: grad_features,
        },
        Tensor {
            shape: mask.shape,
            data: grad_mask,
        },
    ))
}

fn same_shape(op: &'static str, expected: Shape, got: Shape) -> Result<()> {
    if expected != got {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        });
    }
    Ok(())
}
