//! Reference implementations shared by the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use remotenet::tensor::{ConvKernel, KernelShape, PoolSpec, Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Shape, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| r.gen_range(-1.0..1.0))
}

pub fn random_kernel(shape: KernelShape, r: &mut ChaCha8Rng) -> ConvKernel {
    ConvKernel::new(
        shape,
        (0..shape.weight_len()).map(|_| r.gen_range(-0.5..0.5)).collect(),
        (0..shape.c_out).map(|_| r.gen_range(-0.5..0.5)).collect(),
    )
    .unwrap()
}

/// Output extent and leading pad for SAME padding along one axis.
fn same(dim: usize, k: usize, s: usize) -> (usize, usize) {
    let out = dim.div_ceil(s);
    let needed = ((out - 1) * s + k).saturating_sub(dim);
    (out, needed / 2)
}

/// Direct seven-loop correlation over f64 data laid out `(t, h, w, c)`.
pub fn conv_f64(
    x: &[f64],
    s: Shape,
    weights: &[f64],
    bias: &[f64],
    ks: KernelShape,
    stride: [usize; 3],
) -> (Vec<f64>, Shape) {
    let (ot, pt) = same(s.t, ks.kt, stride[0]);
    let (oh, ph) = same(s.h, ks.kh, stride[1]);
    let (ow, pw) = same(s.w, ks.kw, stride[2]);
    let out = Shape::new(ot, oh, ow, ks.c_out);
    let mut data = vec![0.0f64; out.len()];
    for t in 0..ot {
        for h in 0..oh {
            for w in 0..ow {
                for co in 0..ks.c_out {
                    let mut acc = bias[co];
                    for dt in 0..ks.kt {
                        for dh in 0..ks.kh {
                            for dw in 0..ks.kw {
                                let it = (t * stride[0] + dt) as isize - pt as isize;
                                let ih = (h * stride[1] + dh) as isize - ph as isize;
                                let iw = (w * stride[2] + dw) as isize - pw as isize;
                                if it < 0
                                    || ih < 0
                                    || iw < 0
                                    || it as usize >= s.t
                                    || ih as usize >= s.h
                                    || iw as usize >= s.w
                                {
                                    continue;
                                }
                                let (it, ih, iw) = (it as usize, ih as usize, iw as usize);
                                for ci in 0..ks.c_in {
                                    let xi = ((it * s.h + ih) * s.w + iw) * s.c + ci;
                                    let wi = (((dt * ks.kh + dh) * ks.kw + dw) * ks.c_in + ci) * ks.c_out + co;
                                    acc += x[xi] * weights[wi];
                                }
                            }
                        }
                    }
                    data[((t * oh + h) * ow + w) * ks.c_out + co] = acc;
                }
            }
        }
    }
    (data, out)
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn naive_conv3d(x: &Tensor, k: &ConvKernel, stride: [usize; 3]) -> Tensor {
    let (out, shape) = conv_f64(
        &to_f64(x.data()),
        x.shape(),
        &to_f64(&k.weights),
        &to_f64(&k.bias),
        k.shape(),
        stride,
    );
    Tensor::new(shape, out.iter().map(|&v| v as f32).collect()).unwrap()
}

/// Window max with clipped border windows.
pub fn pool_f64(x: &[f64], s: Shape, spec: PoolSpec) -> (Vec<f64>, Shape) {
    let o = Shape::new(
        s.t.div_ceil(spec.stride[0]),
        s.h.div_ceil(spec.stride[1]),
        s.w.div_ceil(spec.stride[2]),
        s.c,
    );
    let mut out = Vec::with_capacity(o.len());
    for t in 0..o.t {
        for h in 0..o.h {
            for w in 0..o.w {
                for c in 0..s.c {
                    let mut best = f64::NEG_INFINITY;
                    for a in t * spec.stride[0]..(t * spec.stride[0] + spec.window[0]).min(s.t) {
                        for b in h * spec.stride[1]..(h * spec.stride[1] + spec.window[1]).min(s.h) {
                            for d in w * spec.stride[2]..(w * spec.stride[2] + spec.window[2]).min(s.w) {
                                best = best.max(x[((a * s.h + b) * s.w + d) * s.c + c]);
                            }
                        }
                    }
                    out.push(best);
                }
            }
        }
    }
    (out, o)
}

pub fn naive_max_pool(x: &Tensor, spec: PoolSpec) -> Tensor {
    let (out, shape) = pool_f64(&to_f64(x.data()), x.shape(), spec);
    Tensor::new(shape, out.iter().map(|&v| v as f32).collect()).unwrap()
}

pub fn gap_f64(x: &[f64], s: Shape) -> Vec<f64> {
    let mut out = vec![0.0; s.t * s.c];
    for t in 0..s.t {
        for h in 0..s.h {
            for w in 0..s.w {
                for c in 0..s.c {
                    out[t * s.c + c] += x[((t * s.h + h) * s.w + w) * s.c + c];
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= (s.h * s.w) as f64);
    out
}

pub fn softmax_f64(x: &[f64], c: usize) -> Vec<f64> {
    x.chunks_exact(c)
        .flat_map(|v| {
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = v.iter().map(|a| (a - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(move |a| a / z)
        })
        .collect()
}

pub fn naive_gap(x: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.t, 1, 1, s.c), |t, _, _, c| {
        let mut acc = 0.0f64;
        for h in 0..s.h {
            for w in 0..s.w {
                acc += x.at(t, h, w, c) as f64;
            }
        }
        (acc / (s.h * s.w) as f64) as f32
    })
}

/// `sum(weights * f(x))` in f64.
pub fn weighted_sum(out: &Tensor, weights: &Tensor) -> f64 {
    out.data()
        .iter()
        .zip(weights.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

/// Central difference of a scalar function of one perturbed value.
pub fn central_diff(mut f: impl FnMut(f32) -> f64, x0: f32, h: f32) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h as f64)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Area under the stair precision-recall curve by brute force: every distinct threshold,
/// precision after each recall increase.
pub fn brute_force_ap(scores: &[f32], labels: &[bool]) -> f64 {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        let tp = order[..=rank].iter().filter(|&&j| labels[j]).count();
        ap += tp as f64 / (rank + 1) as f64;
    }
    ap / positives as f64
}

use remotenet::data::StaGrid;
use remotenet::model::{ArchConfig, ModelParams};
use remotenet::train::{sample_loss, LossWeights, SampleLabels};

/// Pre-activation signs and pool winners of a forward pass; differing signatures between
/// the two sides of a central difference mean the step crossed a kink.
fn signature(params: &ModelParams, input: &Tensor) -> (Vec<bool>, Vec<usize>) {
    let out = params.forward(input).unwrap();
    let mut signs = Vec::new();
    let mut winners = Vec::new();
    let mut i = 1;
    while let Some(pre) = out.cache.pre_activation(i) {
        signs.extend(pre.data().iter().map(|&v| v > 0.0));
        winners.extend_from_slice(out.cache.pool_argmax(i).unwrap());
        i += 1;
    }
    (signs, winners)
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    /// Checks whose gradient exceeded the relative-error floor.
    pub nontrivial: usize,
    pub failures: Vec<String>,
}

/// Random input, labels and attention grid for a gradient check.
pub fn fd_problem(cfg: &ArchConfig, seed: u64) -> (ModelParams, Tensor, SampleLabels, LossWeights) {
    let mut r = rng(seed);
    let params = ModelParams::build(*cfg, seed).unwrap();
    let input = random_tensor(cfg.input_shape(), &mut r);
    let sta = cfg.sta_shape().map(|s| {
        let mut g = StaGrid::zeros(s.t, s.h, s.w);
        for c in g.cells.iter_mut() {
            *c = r.gen_bool(0.3);
        }
        g
    });
    let labels = SampleLabels {
        motion: (0..cfg.num_heads).map(|h| h % 2 == 0).collect(),
        sta,
    };
    let weights = LossWeights::new(1.0, 0.5, vec![(1.4, 0.6); cfg.num_heads]).unwrap();
    (params, input, labels, weights)
}

/// Central-difference steps tried largest first; the first step whose two sides cross no
/// ReLU or pooling kink is used.
pub const FD_STEPS: [f32; 9] = [3e-2, 2e-2, 1e-2, 5e-3, 3e-3, 2e-3, 1e-3, 5e-4, 3e-4];

/// Compares backprop against central differences at `samples` parameters spread round-robin
/// over every kernel. Parameters with no kink-free step are redrawn.
pub fn model_fd_check(cfg: &ArchConfig, seed: u64, samples: usize, tol: f64) -> FdReport {
    let (params, input, labels, weights) = fd_problem(cfg, seed);
    let loss = |p: &ModelParams| {
        let out = p.forward(&input).unwrap();
        sample_loss(p.config(), &out, &labels, &weights, 1).unwrap().0.total
    };
    let out = params.forward(&input).unwrap();
    let (_, g) = sample_loss(cfg, &out, &labels, &weights, 1).unwrap();
    let grads = params.backward(&out.cache, &g).unwrap();
    let scale = grads
        .iter()
        .flat_map(|k| k.params().map(|v| v.abs() as f64))
        .fold(0.0, f64::max);
    let floor = 1e-3 * scale;
    let base = signature(&params, &input);
    let mut r = rng(seed ^ 0xFD);
    let mut report = FdReport {
        checked: 0,
        skipped: 0,
        worst: 0.0,
        nontrivial: 0,
        failures: Vec::new(),
    };
    let nk = params.kernels().len();
    let mut attempts = 0;
    while report.checked < samples && attempts < samples * 20 {
        let ki = attempts % nk;
        attempts += 1;
        let len = params.kernels()[ki].param_len();
        let pi = r.gen_range(0..len);
        let wlen = params.kernels()[ki].weights.len();
        let shifted = |delta: f32| {
            let mut p = params.clone();
            let k = &mut p.kernels_mut()[ki];
            if pi < wlen {
                k.weights[pi] += delta;
            } else {
                k.bias[pi - wlen] += delta;
            }
            p
        };
        let step = FD_STEPS.iter().find_map(|&h| {
            let (plus, minus) = (shifted(h), shifted(-h));
            let smooth = signature(&plus, &input) == base && signature(&minus, &input) == base;
            smooth.then(|| (loss(&plus) - loss(&minus)) / (2.0 * h as f64))
        });
        let Some(numeric) = step else {
            report.skipped += 1;
            continue;
        };
        let k = &grads[ki];
        let analytic = if pi < wlen { k.weights[pi] } else { k.bias[pi - wlen] } as f64;
        let e = rel_err(analytic, numeric, floor);
        report.worst = report.worst.max(e);
        if analytic.abs().max(numeric.abs()) > floor {
            report.nontrivial += 1;
        }
        if e > tol {
            report
                .failures
                .push(format!("kernel {ki} param {pi}: analytic {analytic:e} numeric {numeric:e}"));
        }
        report.checked += 1;
    }
    report
}

use remotenet::tensor::{
    broadcast_mul, broadcast_mul_backward, channel_softmax, channel_softmax_backward, conv3d,
    conv3d_backward, global_avg_pool_spatial, global_avg_pool_spatial_backward, max_pool3d,
    max_pool3d_backward, relu, relu_backward,
};

fn odd(r: &mut ChaCha8Rng) -> usize {
    [1, 3, 3, 5][r.gen_range(0..4)]
}

pub fn conv_case(r: &mut ChaCha8Rng) -> (Tensor, ConvKernel, [usize; 3]) {
    let s = Shape::new(r.gen_range(1..6), r.gen_range(1..8), r.gen_range(1..10), r.gen_range(1..6));
    let c_out = [1, 2, 3, 5, 8, 16][r.gen_range(0..6)];
    let ks = KernelShape::new(odd(r), odd(r), odd(r), s.c, c_out);
    let stride = [r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4)];
    let stride = if r.gen_bool(0.5) { [1, 1, 1] } else { stride };
    (random_tensor(s, r), random_kernel(ks, r), stride)
}

pub fn pool_case(r: &mut ChaCha8Rng) -> (Tensor, PoolSpec) {
    let s = Shape::new(r.gen_range(1..7), r.gen_range(1..9), r.gen_range(1..11), r.gen_range(1..5));
    let window = [r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)];
    let stride = [
        r.gen_range(1..=window[0]),
        r.gen_range(1..=window[1]),
        r.gen_range(1..=window[2]),
    ];
    (random_tensor(s, r), PoolSpec::new(window, stride))
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

/// Worst absolute deviation of `conv3d` from the loop oracle over `n` random cases.
pub fn conv_oracle_error(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let (x, k, s) = conv_case(&mut r);
            max_abs_diff(&conv3d(&x, &k, s).unwrap(), &naive_conv3d(&x, &k, s))
        })
        .fold(0.0, f64::max)
}

/// Worst absolute deviation of `max_pool3d` from the loop oracle; argmax must point at the max.
pub fn pool_oracle_error(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let (x, spec) = pool_case(&mut r);
            let (out, arg) = max_pool3d(&x, spec).unwrap();
            for (v, &i) in out.data().iter().zip(&arg) {
                assert_eq!(*v, x.data()[i]);
            }
            max_abs_diff(&out, &naive_max_pool(&x, spec))
        })
        .fold(0.0, f64::max)
}

pub fn gap_oracle_error(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let s = Shape::new(r.gen_range(1..6), r.gen_range(1..9), r.gen_range(1..11), r.gen_range(1..17));
            let x = random_tensor(s, &mut r);
            max_abs_diff(&global_avg_pool_spatial(&x), &naive_gap(&x))
        })
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, &y)| x * y as f64).sum()
}

/// Central-difference error of `analytic` against the f64 function `f` along each coordinate.
fn fd_check(x: &[f32], analytic: &[f32], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let scale = analytic.iter().map(|v| v.abs() as f64).fold(0.0, f64::max);
    let floor = 1e-3 * scale.max(1e-6);
    let base = to_f64(x);
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut p = base.clone();
        p[i] += h;
        let mut m = base.clone();
        m[i] -= h;
        let numeric = (f(&p) - f(&m)) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i] as f64, numeric, floor));
    }
    worst
}

/// Values `-1, -1 + spacing, ...` in shuffled order, so pooling windows have no near ties.
pub fn spaced_tensor(shape: Shape, spacing: f32, r: &mut ChaCha8Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let mut v: Vec<f32> = (0..shape.len()).map(|i| i as f32 * spacing - 1.0).collect();
    v.shuffle(r);
    Tensor::new(shape, v).unwrap()
}

/// Largest relative error per backward kernel over `cases` random shapes up to 4x6x6x4.
/// Numeric derivatives use step 1e-3 on the double-precision loop oracles.
pub fn kernel_fd_errors(cases: usize, seed: u64) -> Vec<(&'static str, f64)> {
    const H: f64 = 1e-3;
    let mut r = rng(seed);
    let mut worst = vec![
        ("conv3d input", 0.0f64),
        ("conv3d weights", 0.0),
        ("conv3d bias", 0.0),
        ("max_pool3d", 0.0),
        ("relu", 0.0),
        ("channel_softmax", 0.0),
        ("global_avg_pool", 0.0),
        ("broadcast_mul features", 0.0),
        ("broadcast_mul mask", 0.0),
    ];
    let mut bump = |i: usize, e: f64| worst[i].1 = worst[i].1.max(e);
    for _ in 0..cases {
        let s = Shape::new(r.gen_range(1..5), r.gen_range(1..7), r.gen_range(1..7), r.gen_range(1..5));
        let x = random_tensor(s, &mut r);
        let ks = KernelShape::new(odd(&mut r).min(3), odd(&mut r).min(3), odd(&mut r).min(3), s.c, r.gen_range(1..5));
        let k = random_kernel(ks, &mut r);
        let stride = [r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..3)];
        let out = conv3d(&x, &k, stride).unwrap();
        let g = random_tensor(out.shape(), &mut r);
        let cg = conv3d_backward(&x, &k, stride, &g).unwrap();
        let (wf, bf) = (to_f64(&k.weights), to_f64(&k.bias));
        let xf = to_f64(x.data());
        bump(0, fd_check(x.data(), cg.grad_input.as_ref().unwrap().data(), H, |xx| {
            dot(&conv_f64(xx, s, &wf, &bf, ks, stride).0, g.data())
        }));
        bump(1, fd_check(&k.weights, &cg.grad_weights, H, |ww| {
            dot(&conv_f64(&xf, s, ww, &bf, ks, stride).0, g.data())
        }));
        bump(2, fd_check(&k.bias, &cg.grad_bias, H, |bb| {
            dot(&conv_f64(&xf, s, &wf, bb, ks, stride).0, g.data())
        }));

        let xs = spaced_tensor(s, 0.01, &mut r);
        let spec = PoolSpec::new(
            [r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..3)],
            [r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..3)],
        );
        let (po, arg) = max_pool3d(&xs, spec).unwrap();
        let gp = random_tensor(po.shape(), &mut r);
        let an = max_pool3d_backward(&arg, &gp, s).unwrap();
        bump(3, fd_check(xs.data(), an.data(), H, |xx| dot(&pool_f64(xx, s, spec).0, gp.data())));

        let xr = Tensor::from_fn(s, |_, _, _, _| {
            let v: f32 = r.gen_range(0.05..1.0);
            if r.gen_bool(0.5) {
                v
            } else {
                -v
            }
        });
        let gr = random_tensor(s, &mut r);
        let an = relu_backward(&xr, &gr).unwrap();
        bump(4, fd_check(xr.data(), an.data(), H, |xx| {
            let y: Vec<f64> = xx.iter().map(|v| v.max(0.0)).collect();
            dot(&y, gr.data())
        }));
        assert_eq!(relu(&xr).data().iter().filter(|&&v| v > 0.0).count(), xr.data().iter().filter(|&&v| v > 0.0).count());

        let probs = channel_softmax(&x);
        let gs = random_tensor(s, &mut r);
        let an = channel_softmax_backward(&probs, &gs).unwrap();
        bump(5, fd_check(x.data(), an.data(), H, |xx| dot(&softmax_f64(xx, s.c), gs.data())));

        let gg = random_tensor(Shape::new(s.t, 1, 1, s.c), &mut r);
        let an = global_avg_pool_spatial_backward(&gg, s).unwrap();
        bump(6, fd_check(x.data(), an.data(), H, |xx| dot(&gap_f64(xx, s), gg.data())));
        assert_eq!(global_avg_pool_spatial(&x).shape(), gg.shape());

        let mask = random_tensor(Shape::new(s.t, s.h, s.w, 1), &mut r);
        let gb = random_tensor(s, &mut r);
        let (gf, gm) = broadcast_mul_backward(&x, &mask, &gb).unwrap();
        let mf = to_f64(mask.data());
        let bmul = |f: &[f64], m: &[f64]| -> Vec<f64> {
            f.iter().enumerate().map(|(i, v)| v * m[i / s.c]).collect()
        };
        bump(7, fd_check(x.data(), gf.data(), H, |xx| dot(&bmul(xx, &mf), gb.data())));
        bump(8, fd_check(mask.data(), gm.data(), H, |mm| dot(&bmul(&xf, mm), gb.data())));
        assert_eq!(broadcast_mul(&x, &mask).unwrap().shape(), s);
    }
    worst
}
