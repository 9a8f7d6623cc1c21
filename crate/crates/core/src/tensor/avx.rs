//! AVX2/FMA direct convolution for stride-1 SAME kernels whose output channel count is a
//! multiple of 8. Each output row is processed in blocks of adjacent voxels held in registers.

#![allow(clippy::needless_range_loop)]

use std::arch::x86_64::*;

use super::{KernelShape, Shape};

pub(super) fn available() -> bool {
    is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
}

/// Padded `(t, h, w)` extents of a zero-padded copy.
#[derive(Debug, Clone, Copy)]
pub(super) struct Padded {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Padded {
    fn row_stride(&self) -> usize {
        self.w * self.c
    }
    fn frame_stride(&self) -> usize {
        self.h * self.w * self.c
    }
}

/// Copies `(t, h, w, c)` data into a buffer with `pad` zeros on both sides of each axis.
pub(super) fn pad(data: &[f32], s: Shape, pad: [usize; 3]) -> (Vec<f32>, Padded) {
    let p = Padded {
        t: s.t + 2 * pad[0],
        h: s.h + 2 * pad[1],
        w: s.w + 2 * pad[2],
        c: s.c,
    };
    let mut out = vec![0.0f32; p.t * p.h * p.w * p.c];
    let row = s.w * s.c;
    for t in 0..s.t {
        for h in 0..s.h {
            let src = (t * s.h + h) * row;
            let dst = ((t + pad[0]) * p.h + h + pad[1]) * p.w * p.c + pad[2] * p.c;
            out[dst..dst + row].copy_from_slice(&data[src..src + row]);
        }
    }
    (out, p)
}

/// Weights for the input-gradient pass: taps mirrored, channel roles swapped.
pub(super) fn flipped_transposed(weights: &[f32], k: KernelShape) -> (Vec<f32>, KernelShape) {
    let fk = KernelShape::new(k.kt, k.kh, k.kw, k.c_out, k.c_in);
    let mut out = vec![0.0f32; weights.len()];
    for dt in 0..k.kt {
        for dh in 0..k.kh {
            for dw in 0..k.kw {
                let src_tap = (dt * k.kh + dh) * k.kw + dw;
                let dst_tap = ((k.kt - 1 - dt) * k.kh + (k.kh - 1 - dh)) * k.kw + (k.kw - 1 - dw);
                for ci in 0..k.c_in {
                    for co in 0..k.c_out {
                        out[(dst_tap * k.c_out + co) * k.c_in + ci] =
                            weights[(src_tap * k.c_in + ci) * k.c_out + co];
                    }
                }
            }
        }
    }
    (out, fk)
}

#[allow(clippy::too_many_arguments)]
#[target_feature(enable = "avx2,fma")]
unsafe fn forward_block<const P: usize, const NV: usize>(
    x: *const f32,
    padded: Padded,
    k: KernelShape,
    w: *const f32,
    bias: *const f32,
    out: *mut f32,
) {
    let cin = k.c_in;
    let cout = k.c_out;
    let mut acc = [[_mm256_setzero_ps(); NV]; P];
    for p in 0..P {
        for v in 0..NV {
            acc[p][v] = _mm256_loadu_ps(bias.add(v * 8));
        }
    }
    let jn = k.kw * cin;
    for dt in 0..k.kt {
        for dh in 0..k.kh {
            let xrow = x.add(dt * padded.frame_stride() + dh * padded.row_stride());
            let wrow = w.add((dt * k.kh + dh) * jn * cout);
            for j in 0..jn {
                let mut wv = [_mm256_setzero_ps(); NV];
                for v in 0..NV {
                    wv[v] = _mm256_loadu_ps(wrow.add(j * cout + v * 8));
                }
                for p in 0..P {
                    let xv = _mm256_broadcast_ss(&*xrow.add(p * cin + j));
                    for v in 0..NV {
                        acc[p][v] = _mm256_fmadd_ps(xv, wv[v], acc[p][v]);
                    }
                }
            }
        }
    }
    for p in 0..P {
        for v in 0..NV {
            _mm256_storeu_ps(out.add(p * cout + v * 8), acc[p][v]);
        }
    }
}

#[target_feature(enable = "avx2,fma")]
unsafe fn forward_rows<const P: usize, const NV: usize>(
    xp: &[f32],
    padded: Padded,
    k: KernelShape,
    weights: &[f32],
    bias: &[f32],
    out_shape: Shape,
    out: &mut [f32],
) {
    let cin = k.c_in;
    let cout = k.c_out;
    let group = NV * 8;
    for ot in 0..out_shape.t {
        for oh in 0..out_shape.h {
            let xbase = ot * padded.frame_stride() + oh * padded.row_stride();
            let obase = (ot * out_shape.h + oh) * out_shape.w * cout;
            for co0 in (0..cout).step_by(group) {
                let w = weights.as_ptr().add(co0);
                let b = bias.as_ptr().add(co0);
                let mut ow = 0;
                while ow + P <= out_shape.w {
                    forward_block::<P, NV>(
                        xp.as_ptr().add(xbase + ow * cin),
                        padded,
                        k,
                        w,
                        b,
                        out.as_mut_ptr().add(obase + ow * cout + co0),
                    );
                    ow += P;
                }
                while ow < out_shape.w {
                    forward_block::<1, NV>(
                        xp.as_ptr().add(xbase + ow * cin),
                        padded,
                        k,
                        w,
                        b,
                        out.as_mut_ptr().add(obase + ow * cout + co0),
                    );
                    ow += 1;
                }
            }
        }
    }
}

/// Stride-1 correlation over an already padded input. `out` must hold `out_shape.len()` values.
///
/// # Safety
/// Caller must have checked [`available`], `k.c_out % 8 == 0`, and that `xp`/`padded` describe
/// an input padded by `(k - 1) / 2` per axis so that every tap of `out_shape` is in range.
pub(super) unsafe fn forward(
    xp: &[f32],
    padded: Padded,
    k: KernelShape,
    weights: &[f32],
    bias: &[f32],
    out_shape: Shape,
    out: &mut [f32],
) {
    debug_assert_eq!(k.c_out % 8, 0);
    debug_assert_eq!(out.len(), out_shape.len());
    if k.c_out.is_multiple_of(16) {
        forward_rows::<6, 2>(xp, padded, k, weights, bias, out_shape, out);
    } else {
        forward_rows::<8, 1>(xp, padded, k, weights, bias, out_shape, out);
    }
}

#[target_feature(enable = "avx2,fma")]
unsafe fn grad_weight_block<const J: usize, const NV: usize>(
    xrow: *const f32,
    cin: usize,
    grow: *const f32,
    cout: usize,
    width: usize,
    gw: *mut f32,
) {
    let mut acc = [[_mm256_setzero_ps(); NV]; J];
    for j in 0..J {
        for v in 0..NV {
            acc[j][v] = _mm256_loadu_ps(gw.add(j * cout + v * 8));
        }
    }
    for ow in 0..width {
        let mut g = [_mm256_setzero_ps(); NV];
        for v in 0..NV {
            g[v] = _mm256_loadu_ps(grow.add(ow * cout + v * 8));
        }
        for j in 0..J {
            let xv = _mm256_broadcast_ss(&*xrow.add(ow * cin + j));
            for v in 0..NV {
                acc[j][v] = _mm256_fmadd_ps(xv, g[v], acc[j][v]);
            }
        }
    }
    for j in 0..J {
        for v in 0..NV {
            _mm256_storeu_ps(gw.add(j * cout + v * 8), acc[j][v]);
        }
    }
}

#[target_feature(enable = "avx2,fma")]
unsafe fn grad_weights_rows<const J: usize, const NV: usize>(
    xp: &[f32],
    padded: Padded,
    k: KernelShape,
    grad_out: &[f32],
    out_shape: Shape,
    grad_w: &mut [f32],
) {
    let cin = k.c_in;
    let cout = k.c_out;
    let jn = k.kw * cin;
    let group = NV * 8;
    for ot in 0..out_shape.t {
        for oh in 0..out_shape.h {
            let grow_base = (ot * out_shape.h + oh) * out_shape.w * cout;
            for dt in 0..k.kt {
                for dh in 0..k.kh {
                    let xrow = (ot + dt) * padded.frame_stride() + (oh + dh) * padded.row_stride();
                    let wrow = (dt * k.kh + dh) * jn * cout;
                    for co0 in (0..cout).step_by(group) {
                        let grow = grad_out.as_ptr().add(grow_base + co0);
                        let mut j = 0;
                        while j + J <= jn {
                            grad_weight_block::<J, NV>(
                                xp.as_ptr().add(xrow + j),
                                cin,
                                grow,
                                cout,
                                out_shape.w,
                                grad_w.as_mut_ptr().add(wrow + j * cout + co0),
                            );
                            j += J;
                        }
                        while j < jn {
                            grad_weight_block::<1, NV>(
                                xp.as_ptr().add(xrow + j),
                                cin,
                                grow,
                                cout,
                                out_shape.w,
                                grad_w.as_mut_ptr().add(wrow + j * cout + co0),
                            );
                            j += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates `sum_pos x[pos + tap] * grad_out[pos]` into `grad_w`.
///
/// # Safety
/// Same preconditions as [`forward`].
pub(super) unsafe fn grad_weights(
    xp: &[f32],
    padded: Padded,
    k: KernelShape,
    grad_out: &[f32],
    out_shape: Shape,
    grad_w: &mut [f32],
) {
    debug_assert_eq!(k.c_out % 8, 0);
    debug_assert_eq!(grad_w.len(), k.weight_len());
    if k.c_out.is_multiple_of(16) {
        grad_weights_rows::<6, 2>(xp, padded, k, grad_out, out_shape, grad_w);
    } else {
        grad_weights_rows::<6, 1>(xp, padded, k, grad_out, out_shape, grad_w);
    }
}
