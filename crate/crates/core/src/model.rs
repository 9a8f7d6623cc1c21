//! Network variants, parameters, the forward/backward passes and the model file format.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{
    broadcast_mul, broadcast_mul_backward, channel_softmax, channel_softmax_backward,
    conv3d, conv3d_backward, conv3d_backward_params, conv_output_shape, flush_denormals,
    global_avg_pool_spatial,
    global_avg_pool_spatial_backward, max_pool3d, max_pool3d_backward, relu, relu_backward,
    ConvKernel, KernelShape, PoolSpec, Shape, Tensor, TensorError,
};

pub const MODEL_MAGIC: &[u8; 4] = b"RMNT";
pub const MODEL_VERSION: u32 = 1;

/// Motion categories in head order.
pub const HEAD_NAMES: [&str; 3] = ["P+V", "People", "Vehicle"];

const UNIT_STRIDE: [usize; 3] = [1, 1, 1];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input shape {got} does not match the model's expected {expected}")]
    InputShape { expected: Shape, got: Shape },
    #[error("model file is not an RMNT file")]
    BadMagic,
    #[error("unsupported model file version {0}")]
    Version(u32),
    #[error("model file truncated: {0}")]
    Truncated(String),
    #[error("bad model header: {0}")]
    Header(String),
    #[error("architecture fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// The ablation path, from plain C3D to the full attention model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    C3d,
    FdC3d,
    FdD,
    FdDMt,
    FdDStaNt,
    FdDStaT,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::C3d,
        Variant::FdC3d,
        Variant::FdD,
        Variant::FdDMt,
        Variant::FdDStaNt,
        Variant::FdDStaT,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::C3d => "C3D",
            Variant::FdC3d => "FD-C3D",
            Variant::FdD => "FD-D",
            Variant::FdDMt => "FD-D-MT",
            Variant::FdDStaNt => "FD-D-STA-NT",
            Variant::FdDStaT => "FD-D-STA-T",
        }
    }
}

/// Flags and sizes describing one network variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ArchConfig {
    pub use_frame_diff: bool,
    /// Nine conv layers with decoupled spatial/temporal pooling, versus the five-layer C3D stack.
    pub deep: bool,
    pub use_sta_layer: bool,
    pub multiply_attention: bool,
    pub supervise_sta: bool,
    pub filters: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub input_frames: usize,
    pub num_heads: usize,
}

impl ArchConfig {
    /// The named variant at 90x160 input, 15 frames, 16 filters.
    pub fn variant(v: Variant) -> Self {
        let base = ArchConfig {
            use_frame_diff: false,
            deep: false,
            use_sta_layer: false,
            multiply_attention: false,
            supervise_sta: false,
            filters: 16,
            input_height: 90,
            input_width: 160,
            input_frames: 15,
            num_heads: 3,
        };
        match v {
            Variant::C3d => base,
            Variant::FdC3d => ArchConfig {
                use_frame_diff: true,
                ..base
            },
            Variant::FdD => ArchConfig {
                use_frame_diff: true,
                deep: true,
                ..base
            },
            Variant::FdDMt => ArchConfig {
                use_frame_diff: true,
                deep: true,
                use_sta_layer: true,
                supervise_sta: true,
                ..base
            },
            Variant::FdDStaNt => ArchConfig {
                use_frame_diff: true,
                deep: true,
                use_sta_layer: true,
                multiply_attention: true,
                ..base
            },
            Variant::FdDStaT => ArchConfig {
                use_frame_diff: true,
                deep: true,
                use_sta_layer: true,
                multiply_attention: true,
                supervise_sta: true,
                ..base
            },
        }
    }

    /// Parses names such as `FD-D-STA-T`, `FD-D-STA-T-H` or `FD-D-STA-T-H-32`.
    pub fn from_name(name: &str) -> Result<Self> {
        let mut rest = name.trim().to_ascii_uppercase();
        let mut filters = 16;
        let mut high = false;
        if let Some(stripped) = rest.strip_suffix("-32") {
            filters = 32;
            rest = stripped.to_string();
        }
        if let Some(stripped) = rest.strip_suffix("-H") {
            high = true;
            rest = stripped.to_string();
        }
        let v = Variant::ALL
            .iter()
            .find(|v| v.name() == rest)
            .ok_or_else(|| ModelError::InvalidConfig(format!("unknown variant name {name:?}")))?;
        let mut cfg = ArchConfig::variant(*v);
        cfg.filters = filters;
        if high {
            cfg.input_height = 180;
            cfg.input_width = 320;
        }
        Ok(cfg)
    }

    pub fn with_resolution(mut self, height: usize, width: usize) -> Self {
        self.input_height = height;
        self.input_width = width;
        self
    }

    pub fn with_frames(mut self, frames: usize) -> Self {
        self.input_frames = frames;
        self
    }

    pub fn with_filters(mut self, filters: usize) -> Self {
        self.filters = filters;
        self
    }

    /// The matching named variant, if the flags are one of the ablation rows.
    pub fn variant_of(&self) -> Option<Variant> {
        Variant::ALL.iter().copied().find(|v| {
            let c = ArchConfig::variant(*v);
            c.use_frame_diff == self.use_frame_diff
                && c.deep == self.deep
                && c.use_sta_layer == self.use_sta_layer
                && c.multiply_attention == self.multiply_attention
                && c.supervise_sta == self.supervise_sta
        })
    }

    pub fn input_shape(&self) -> Shape {
        Shape::new(self.input_frames, self.input_height, self.input_width, 3)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if (self.multiply_attention || self.supervise_sta) && !self.use_sta_layer {
            return bad("multiply_attention/supervise_sta require use_sta_layer");
        }
        if self.use_sta_layer && !self.deep {
            return bad("the attention layer sits between Pool5 and Conv6 and needs the deep stack");
        }
        if self.filters == 0 || self.num_heads == 0 {
            return bad("filters and num_heads must be >= 1");
        }
        if self.input_frames == 0 || self.input_height == 0 || self.input_width == 0 {
            return bad("input dimensions must be >= 1");
        }
        let trace = self.shape_trace();
        let last = trace.last().expect("non-empty trace").input;
        if last.t != 1 {
            return Err(ModelError::InvalidConfig(format!(
                "{} input frames leave {} frames after pooling; the heads need exactly 1",
                self.input_frames, last.t
            )));
        }
        Ok(())
    }

    /// Canonical `key=value` lines; also the fingerprint preimage.
    pub fn to_header(&self) -> String {
        let b = |v: bool| if v { 1 } else { 0 };
        format!(
            "use_frame_diff={}\ndeep={}\nuse_sta_layer={}\nmultiply_attention={}\nsupervise_sta={}\nfilters={}\ninput_height={}\ninput_width={}\ninput_frames={}\nnum_heads={}\n",
            b(self.use_frame_diff),
            b(self.deep),
            b(self.use_sta_layer),
            b(self.multiply_attention),
            b(self.supervise_sta),
            self.filters,
            self.input_height,
            self.input_width,
            self.input_frames,
            self.num_heads
        )
    }

    /// FNV-1a over [`ArchConfig::to_header`].
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in self.to_header().bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// Ordered kernel shapes: Conv1..Conv5, [STA], [Conv6..Conv9], heads.
    pub fn layer_plan(&self) -> Vec<(LayerRole, KernelShape)> {
        let f = self.filters;
        let mut plan = vec![(LayerRole::Conv(1), KernelShape::cube(3, 3, f))];
        for i in 2..=5 {
            plan.push((LayerRole::Conv(i), KernelShape::cube(3, f, f)));
        }
        if self.deep {
            if self.use_sta_layer {
                plan.push((LayerRole::Sta, KernelShape::cube(3, f, 2)));
            }
            for i in 6..=9 {
                plan.push((LayerRole::Conv(i), KernelShape::cube(3, f, f)));
            }
        }
        for i in 0..self.num_heads {
            plan.push((LayerRole::Head(i), KernelShape::cube(1, f, 2)));
        }
        plan
    }

    pub fn param_count(&self) -> usize {
        self.layer_plan().iter().map(|(_, k)| k.param_len()).sum()
    }

    fn pool_for(&self, conv_index: usize) -> PoolSpec {
        match (self.deep, conv_index) {
            (true, 1..=5) => PoolSpec::SPATIAL,
            (true, _) => PoolSpec::TEMPORAL,
            (false, 1) => PoolSpec::SPATIAL,
            (false, _) => PoolSpec::JOINT,
        }
    }

    /// Input shape of every layer in execution order, without allocating activations.
    pub fn shape_trace(&self) -> Vec<LayerTrace> {
        let mut out = Vec::new();
        let mut x = self.input_shape();
        let f = self.filters;
        let convs: Vec<usize> = if self.deep {
            (1..=9).collect()
        } else {
            (1..=5).collect()
        };
        for i in convs {
            if self.deep && i == 6 && self.use_sta_layer {
                out.push(LayerTrace::new("STA", x));
            }
            out.push(LayerTrace::new(format!("Conv{i}"), x));
            x = conv_output_shape(x, KernelShape::cube(3, x.c, f), UNIT_STRIDE);
            out.push(LayerTrace::new(format!("Pool{i}"), x));
            x = self.pool_for(i).output_shape(x);
        }
        out.push(LayerTrace::new("GAP", x));
        out.push(LayerTrace::new("Binary", Shape::new(x.t, 1, 1, x.c)));
        out
    }

    /// Output shape of the attention layer, `(t', h', w', 2)`.
    pub fn sta_shape(&self) -> Option<Shape> {
        if !self.use_sta_layer {
            return None;
        }
        self.shape_trace()
            .iter()
            .find(|l| l.layer == "STA")
            .map(|l| Shape::new(l.input.t, l.input.h, l.input.w, 2))
    }

    pub fn name(&self) -> String {
        let mut s = self
            .variant_of()
            .map(|v| v.name().to_string())
            .unwrap_or_else(|| "custom".into());
        if self.input_height == 180 && self.input_width == 320 {
            s.push_str("-H");
        }
        if self.filters == 32 {
            s.push_str("-32");
        }
        s
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({}x{}x{}, {} filters)",
            self.name(),
            self.input_frames,
            self.input_height,
            self.input_width,
            self.filters
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Conv(usize),
    Sta,
    Head(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerTrace {
    pub layer: String,
    pub input: Shape,
}

impl LayerTrace {
    fn new(layer: impl Into<String>, input: Shape) -> Self {
        Self {
            layer: layer.into(),
            input,
        }
    }
}

/// Learned weights for one [`ArchConfig`], kernels in [`ArchConfig::layer_plan`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ArchConfig,
    kernels: Vec<ConvKernel>,
    fingerprint: u64,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases. Each layer draws from its own ChaCha stream.
    pub fn build(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut kernels = Vec::new();
        for (i, (_, shape)) in config.layer_plan().into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let taps = shape.kt * shape.kh * shape.kw;
            let limit = (6.0 / ((taps * shape.c_in + taps * shape.c_out) as f64)).sqrt() as f32;
            let weights = (0..shape.weight_len())
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            kernels.push(ConvKernel::new(shape, weights, vec![0.0; shape.c_out])?);
        }
        Ok(Self {
            config,
            kernels,
            fingerprint: config.fingerprint(),
        })
    }

    pub fn from_kernels(config: ArchConfig, kernels: Vec<ConvKernel>) -> Result<Self> {
        config.validate()?;
        let plan = config.layer_plan();
        if plan.len() != kernels.len()
            || plan.iter().zip(&kernels).any(|((_, s), k)| *s != k.shape())
        {
            return Err(ModelError::InvalidConfig(
                "kernel list does not match the architecture".into(),
            ));
        }
        Ok(Self {
            config,
            kernels,
            fingerprint: config.fingerprint(),
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn kernels(&self) -> &[ConvKernel] {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut [ConvKernel] {
        &mut self.kernels
    }

    pub fn param_count(&self) -> usize {
        self.kernels.iter().map(ConvKernel::param_len).sum()
    }

    /// Kernel index of a layer role.
    pub fn layer_index(&self, role: LayerRole) -> Option<usize> {
        self.config.layer_plan().iter().position(|(r, _)| *r == role)
    }

    fn kernel(&self, role: LayerRole) -> &ConvKernel {
        &self.kernels[self.layer_index(role).expect("layer present in plan")]
    }

    /// Zero-valued gradient buffers shaped like the parameters.
    pub fn zeros_like(&self) -> Vec<ConvKernel> {
        self.kernels
            .iter()
            .map(|k| ConvKernel::zeros(k.shape()).expect("valid shape"))
            .collect()
    }

    pub fn forward(&self, input: &Tensor) -> Result<ForwardOutputs> {
        self.run(input, true)
    }

    /// Forward pass without keeping activations for backward.
    pub fn infer(&self, input: &Tensor) -> Result<ForwardOutputs> {
        self.run(input, false)
    }

    fn run(&self, input: &Tensor, keep: bool) -> Result<ForwardOutputs> {
        flush_denormals();
        let cfg = &self.config;
        if input.shape() != cfg.input_shape() {
            return Err(ModelError::InputShape {
                expected: cfg.input_shape(),
                got: input.shape(),
            });
        }
        let mut cache = ActivationCache {
            fingerprint: self.fingerprint,
            stages: Vec::new(),
            pool5: None,
            sta_probs: None,
            gap_input: None,
            gap: None,
            trace: Vec::new(),
        };
        let mut x = input.clone();
        let mut attention_logits = None;
        let mut attention_mask = None;
        let last_conv = if cfg.deep { 9 } else { 5 };
        for i in 1..=last_conv {
            if cfg.deep && i == 6 {
                let pool5 = x;
                let mut features = pool5.clone();
                if cfg.use_sta_layer {
                    cache.trace.push(LayerTrace::new("STA", pool5.shape()));
                    let logits = conv3d(&pool5, self.kernel(LayerRole::Sta), UNIT_STRIDE)?;
                    let probs = channel_softmax(&logits);
                    let mask = attend_channel(&probs);
                    if cfg.multiply_attention {
                        features = broadcast_mul(&pool5, &mask)?;
                    }
                    attention_logits = Some(logits);
                    attention_mask = Some(mask);
                    if keep {
                        cache.sta_probs = Some(probs);
                    }
                }
                if keep {
                    cache.pool5 = Some(pool5);
                }
                x = features;
            }
            cache.trace.push(LayerTrace::new(format!("Conv{i}"), x.shape()));
            let pre = conv3d(&x, self.kernel(LayerRole::Conv(i)), UNIT_STRIDE)?;
            let act = relu(&pre);
            cache.trace.push(LayerTrace::new(format!("Pool{i}"), act.shape()));
            let (pooled, argmax) = max_pool3d(&act, cfg.pool_for(i))?;
            if keep {
                cache.stages.push(ConvStage {
                    input: x,
                    pre_act: pre,
                    argmax,
                });
            }
            x = pooled;
        }
        cache.trace.push(LayerTrace::new("GAP", x.shape()));
        let gap = global_avg_pool_spatial(&x);
        cache.trace.push(LayerTrace::new("Binary", gap.shape()));
        let mut head_logits = Vec::with_capacity(cfg.num_heads);
        let mut head_probs = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let logits = conv3d(&gap, self.kernel(LayerRole::Head(h)), UNIT_STRIDE)?;
            let probs = channel_softmax(&logits);
            head_logits.push([logits.data()[0], logits.data()[1]]);
            head_probs.push([probs.data()[0], probs.data()[1]]);
        }
        if keep {
            cache.gap_input = Some(x);
            cache.gap = Some(gap);
        }
        Ok(ForwardOutputs {
            head_logits,
            head_probs,
            attention_logits,
            attention_mask,
            cache,
        })
    }

    /// Parameter gradients of a scalar loss, given its gradients with respect to the head logits
    /// and (optionally) the attention logits.
    pub fn backward(&self, cache: &ActivationCache, grads: &OutputGrads) -> Result<Vec<ConvKernel>> {
        flush_denormals();
        let cfg = &self.config;
        if cache.fingerprint != self.fingerprint {
            return Err(ModelError::Fingerprint {
                expected: self.fingerprint,
                found: cache.fingerprint,
            });
        }
        let gap = cache
            .gap
            .as_ref()
            .ok_or_else(|| ModelError::InvalidConfig("activation cache is empty".into()))?;
        let gap_input = cache.gap_input.as_ref().expect("kept with gap");
        if grads.heads.len() != cfg.num_heads {
            return Err(ModelError::InvalidConfig(format!(
                "{} head gradients for {} heads",
                grads.heads.len(),
                cfg.num_heads
            )));
        }
        let mut out = self.zeros_like();

        let mut g_gap = Tensor::zeros(gap.shape());
        for (h, g) in grads.heads.iter().enumerate() {
            let idx = self.layer_index(LayerRole::Head(h)).expect("head");
            let gl = Tensor::new(Shape::new(1, 1, 1, 2), g.to_vec())?;
            let cg = conv3d_backward(gap, &self.kernels[idx], UNIT_STRIDE, &gl)?;
            store(&mut out[idx], &cg.grad_weights, &cg.grad_bias);
            for (a, b) in g_gap.data_mut().iter_mut().zip(cg.grad_input.expect("input grad").data()) {
                *a += *b;
            }
        }
        let mut g = global_avg_pool_spatial_backward(&g_gap, gap_input.shape())?;

        for (si, stage) in cache.stages.iter().enumerate().rev() {
            let i = si + 1;
            let g_act = max_pool3d_backward(&stage.argmax, &g, stage.pre_act.shape())?;
            let g_pre = relu_backward(&stage.pre_act, &g_act)?;
            let idx = self.layer_index(LayerRole::Conv(i)).expect("conv");
            let cg = if i == 1 {
                conv3d_backward_params(&stage.input, &self.kernels[idx], UNIT_STRIDE, &g_pre)?
            } else {
                conv3d_backward(&stage.input, &self.kernels[idx], UNIT_STRIDE, &g_pre)?
            };
            store(&mut out[idx], &cg.grad_weights, &cg.grad_bias);
            if let Some(gi) = cg.grad_input {
                g = gi;
            }
            if cfg.deep && i == 6 {
                g = self.attention_backward(cache, grads, g, &mut out)?;
            }
        }
        Ok(out)
    }

    /// Routes the Conv6-input gradient back to Pool5 through the mask and attention layer.
    fn attention_backward(
        &self,
        cache: &ActivationCache,
        grads: &OutputGrads,
        g_features: Tensor,
        out: &mut [ConvKernel],
    ) -> Result<Tensor> {
        let cfg = &self.config;
        if !cfg.use_sta_layer {
            return Ok(g_features);
        }
        let pool5 = cache.pool5.as_ref().expect("pool5 cached");
        let probs = cache.sta_probs.as_ref().expect("attention cached");
        let mut g_pool5 = g_features.clone();
        let mut g_logits = Tensor::zeros(probs.shape());
        if cfg.multiply_attention {
            let mask = attend_channel(probs);
            let (gf, gm) = broadcast_mul_backward(pool5, &mask, &g_features)?;
            g_pool5 = gf;
            let mut g_probs = Tensor::zeros(probs.shape());
            for (pair, m) in g_probs.data_mut().chunks_exact_mut(2).zip(gm.data()) {
                pair[1] = *m;
            }
            g_logits = channel_softmax_backward(probs, &g_probs)?;
        }
        if let Some(sup) = &grads.attention {
            if sup.shape() != g_logits.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "attention gradient",
                    expected: g_logits.shape().to_string(),
                    got: sup.shape().to_string(),
                }
                .into());
            }
            for (a, b) in g_logits.data_mut().iter_mut().zip(sup.data()) {
                *a += *b;
            }
        }
        let idx = self.layer_index(LayerRole::Sta).expect("sta");
        let cg = conv3d_backward(pool5, &self.kernels[idx], UNIT_STRIDE, &g_logits)?;
        store(&mut out[idx], &cg.grad_weights, &cg.grad_bias);
        for (a, b) in g_pool5
            .data_mut()
            .iter_mut()
            .zip(cg.grad_input.expect("input grad").data())
        {
            *a += *b;
        }
        Ok(g_pool5)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.config.to_header();
        header.push_str(&format!("fingerprint={:016x}\n", self.fingerprint));
        let mut buf = Vec::with_capacity(12 + header.len() + self.param_count() * 4);
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        for k in &self.kernels {
            for v in k.params() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let word = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or_else(|| ModelError::Truncated("header".into()))
        };
        let version = word(4)?;
        if version != MODEL_VERSION {
            return Err(ModelError::Version(version));
        }
        let header_len = word(8)? as usize;
        let header = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| ModelError::Truncated("header text".into()))?;
        let header =
            std::str::from_utf8(header).map_err(|e| ModelError::Header(e.to_string()))?;
        let (config, found) = parse_header(header)?;
        let expected = config.fingerprint();
        if found != expected {
            return Err(ModelError::Fingerprint { expected, found });
        }
        config.validate()?;
        let mut at = 12 + header_len;
        let body = config.param_count() * 4;
        if bytes.len() < at + body {
            return Err(ModelError::Truncated(format!(
                "expected {} parameter bytes, found {}",
                body,
                bytes.len() - at
            )));
        }
        if bytes.len() > at + body {
            return Err(ModelError::Truncated(format!(
                "{} trailing bytes after parameters",
                bytes.len() - at - body
            )));
        }
        let mut read = |n: usize| -> Vec<f32> {
            let v = bytes[at..at + n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            at += n * 4;
            v
        };
        let mut kernels = Vec::new();
        for (_, shape) in config.layer_plan() {
            let w = read(shape.weight_len());
            let b = read(shape.c_out);
            kernels.push(ConvKernel::new(shape, w, b)?);
        }
        Self::from_kernels(config, kernels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        _ => Err(ModelError::Header(format!("{key}: expected 0/1, got {v:?}"))),
    }
}

fn parse_header(text: &str) -> Result<(ArchConfig, u64)> {
    let mut cfg = ArchConfig::variant(Variant::C3d);
    let mut seen = 0usize;
    let mut fingerprint = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ModelError::Header(format!("line without '=': {line:?}")))?;
        let num = || -> Result<usize> {
            v.parse()
                .map_err(|_| ModelError::Header(format!("{k}: not an integer: {v:?}")))
        };
        match k {
            "use_frame_diff" => cfg.use_frame_diff = parse_bool(k, v)?,
            "deep" => cfg.deep = parse_bool(k, v)?,
            "use_sta_layer" => cfg.use_sta_layer = parse_bool(k, v)?,
            "multiply_attention" => cfg.multiply_attention = parse_bool(k, v)?,
            "supervise_sta" => cfg.supervise_sta = parse_bool(k, v)?,
            "filters" => cfg.filters = num()?,
            "input_height" => cfg.input_height = num()?,
            "input_width" => cfg.input_width = num()?,
            "input_frames" => cfg.input_frames = num()?,
            "num_heads" => cfg.num_heads = num()?,
            "fingerprint" => {
                fingerprint = Some(
                    u64::from_str_radix(v, 16)
                        .map_err(|_| ModelError::Header(format!("bad fingerprint {v:?}")))?,
                );
                continue;
            }
            _ => return Err(ModelError::Header(format!("unknown key {k:?}"))),
        }
        seen += 1;
    }
    if seen != 10 {
        return Err(ModelError::Header(format!("expected 10 config keys, found {seen}")));
    }
    let fp = fingerprint.ok_or_else(|| ModelError::Header("missing fingerprint".into()))?;
    Ok((cfg, fp))
}

fn store(dst: &mut ConvKernel, w: &[f32], b: &[f32]) {
    dst.weights.copy_from_slice(w);
    dst.bias.copy_from_slice(b);
}

/// Probability of the "attend" channel (index 1), shaped `(t, h, w, 1)`.
fn attend_channel(probs: &Tensor) -> Tensor {
    let s = probs.shape();
    let data = probs.data().chunks_exact(2).map(|p| p[1]).collect();
    Tensor::new(Shape::new(s.t, s.h, s.w, 1), data).expect("mask shape")
}

#[derive(Debug, Clone)]
struct ConvStage {
    input: Tensor,
    pre_act: Tensor,
    argmax: Vec<usize>,
}

/// Intermediate tensors kept by [`ModelParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    fingerprint: u64,
    stages: Vec<ConvStage>,
    pool5: Option<Tensor>,
    sta_probs: Option<Tensor>,
    gap_input: Option<Tensor>,
    gap: Option<Tensor>,
    trace: Vec<LayerTrace>,
}

impl ActivationCache {
    /// Input shape seen by every layer during the pass.
    pub fn trace(&self) -> &[LayerTrace] {
        &self.trace
    }

    /// Pre-activation of conv layer `i` (1-based), for kink detection in gradient checks.
    pub fn pre_activation(&self, i: usize) -> Option<&Tensor> {
        self.stages.get(i.checked_sub(1)?).map(|s| &s.pre_act)
    }

    /// Pool winners of conv stage `i` (1-based).
    pub fn pool_argmax(&self, i: usize) -> Option<&[usize]> {
        self.stages.get(i.checked_sub(1)?).map(|s| s.argmax.as_slice())
    }

    /// Input to the first post-attention layer.
    pub fn conv6_input(&self) -> Option<&Tensor> {
        self.stages.get(5).map(|s| &s.input)
    }

    pub fn pool5(&self) -> Option<&Tensor> {
        self.pool5.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub head_logits: Vec<[f32; 2]>,
    /// `(no-motion, motion)` per head, heads ordered (P+V, People, Vehicle).
    pub head_probs: Vec<[f32; 2]>,
    pub attention_logits: Option<Tensor>,
    pub attention_mask: Option<Tensor>,
    pub cache: ActivationCache,
}

impl ForwardOutputs {
    /// Motion probability per head.
    pub fn motion_probs(&self) -> Vec<f32> {
        self.head_probs.iter().map(|p| p[1]).collect()
    }
}

/// Loss gradients with respect to the network outputs.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub heads: Vec<[f32; 2]>,
    /// Gradient on the `(t', h', w', 2)` attention logits from the supervision term.
    pub attention: Option<Tensor>,
}

impl OutputGrads {
    pub fn zeros(config: &ArchConfig) -> Self {
        Self {
            heads: vec![[0.0; 2]; config.num_heads],
            attention: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_input(cfg: &ArchConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(cfg.input_shape(), |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn param_counts() {
        assert_eq!(ArchConfig::variant(Variant::FdDStaT).param_count(), 57_704);
        assert_eq!(ArchConfig::variant(Variant::C3d).param_count(), 29_126);
        assert_eq!(ArchConfig::variant(Variant::FdC3d).param_count(), 29_126);
        assert_eq!(ArchConfig::variant(Variant::FdD).param_count(), 57_704 - 866);
    }

    #[test]
    fn doubling_filters_quadruples_middle_weights() {
        let a = ArchConfig::variant(Variant::FdD);
        let b = a.with_filters(32);
        let mid = |c: &ArchConfig| c.layer_plan()[1].1.weight_len();
        assert_eq!(mid(&b), 4 * mid(&a));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            let cfg = ArchConfig::from_name(v.name()).unwrap();
            assert_eq!(cfg, ArchConfig::variant(v));
            assert_eq!(cfg.name(), v.name());
        }
        let h32 = ArchConfig::from_name("FD-D-STA-T-H-32").unwrap();
        assert_eq!((h32.input_height, h32.input_width, h32.filters), (180, 320, 32));
        assert!(ArchConfig::from_name("FD-X").is_err());
    }

    #[test]
    fn inconsistent_flags_rejected() {
        let mut cfg = ArchConfig::variant(Variant::FdD);
        cfg.multiply_attention = true;
        assert!(matches!(ModelParams::build(cfg, 1), Err(ModelError::InvalidConfig(_))));
        let mut cfg = ArchConfig::variant(Variant::FdC3d);
        cfg.use_sta_layer = true;
        assert!(ModelParams::build(cfg, 1).is_err());
        let cfg = ArchConfig::variant(Variant::FdD).with_frames(20);
        assert!(ModelParams::build(cfg, 1).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ArchConfig::variant(Variant::FdDStaT);
        let a = ModelParams::build(cfg, 11).unwrap();
        let b = ModelParams::build(cfg, 11).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = ModelParams::build(cfg, 12).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn basic_stack_pre_gap_shape() {
        let trace = ArchConfig::variant(Variant::C3d).shape_trace();
        let gap = trace.iter().find(|l| l.layer == "GAP").unwrap();
        assert_eq!(gap.input, Shape::new(1, 3, 5, 16));
    }

    #[test]
    fn full_model_forward_shapes() {
        let cfg = ArchConfig::variant(Variant::FdDStaT);
        let p = ModelParams::build(cfg, 3).unwrap();
        let out = p.infer(&small_input(&cfg, 1)).unwrap();
        assert_eq!(out.attention_mask.as_ref().unwrap().shape(), Shape::new(15, 3, 5, 1));
        assert_eq!(out.head_probs.len(), 3);
        for pr in &out.head_probs {
            assert!((pr[0] + pr[1] - 1.0).abs() < 1e-6);
        }
        assert!(out
            .attention_mask
            .unwrap()
            .data()
            .iter()
            .all(|&m| m > 0.0 && m < 1.0));
    }

    fn mini(v: Variant) -> ArchConfig {
        ArchConfig::variant(v).with_frames(5).with_resolution(12, 20).with_filters(4)
    }

    #[test]
    fn mt_variant_feeds_pool5_unchanged() {
        let cfg = mini(Variant::FdDMt);
        let p = ModelParams::build(cfg, 5).unwrap();
        let out = p.forward(&small_input(&cfg, 2)).unwrap();
        assert_eq!(out.cache.conv6_input().unwrap(), out.cache.pool5().unwrap());
        assert!(out.attention_mask.is_some());
    }

    #[test]
    fn forced_unit_mask_matches_no_multiply() {
        let on = mini(Variant::FdDStaT);
        let mut off = on;
        off.multiply_attention = false;
        let mut p_on = ModelParams::build(on, 9).unwrap();
        let sta = p_on.layer_index(LayerRole::Sta).unwrap();
        let k = &mut p_on.kernels_mut()[sta];
        k.weights.iter_mut().for_each(|w| *w = 0.0);
        k.bias.copy_from_slice(&[-1000.0, 1000.0]);
        let p_off = ModelParams::from_kernels(off, p_on.kernels().to_vec()).unwrap();
        let x = small_input(&on, 4);
        let a = p_on.infer(&x).unwrap();
        let b = p_off.infer(&x).unwrap();
        assert!(a.attention_mask.unwrap().data().iter().all(|&m| m == 1.0));
        assert_eq!(a.head_probs, b.head_probs);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = mini(Variant::FdDStaT);
        let p = ModelParams::build(cfg, 1).unwrap();
        let x = small_input(&cfg, 8);
        let a = p.forward(&x).unwrap();
        let b = p.forward(&x).unwrap();
        assert_eq!(a.head_logits, b.head_logits);
        assert_eq!(a.attention_logits, b.attention_logits);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let cfg = mini(Variant::FdD);
        let p = ModelParams::build(cfg, 1).unwrap();
        let x = Tensor::zeros(Shape::new(5, 12, 21, 3));
        assert!(matches!(p.infer(&x), Err(ModelError::InputShape { .. })));
    }

    #[test]
    fn zero_output_grads_give_zero_param_grads() {
        let cfg = mini(Variant::FdDStaT);
        let p = ModelParams::build(cfg, 1).unwrap();
        let out = p.forward(&small_input(&cfg, 3)).unwrap();
        let g = p.backward(&out.cache, &OutputGrads::zeros(&cfg)).unwrap();
        assert!(g.iter().all(|k| k.params().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let a = ModelParams::build(mini(Variant::FdDStaT), 1).unwrap();
        let b = ModelParams::build(mini(Variant::FdD), 1).unwrap();
        let out = b.forward(&small_input(b.config(), 3)).unwrap();
        assert!(matches!(
            a.backward(&out.cache, &OutputGrads::zeros(a.config())),
            Err(ModelError::Fingerprint { .. })
        ));
    }

    #[test]
    fn sta_gradients_without_multiply_come_from_supervision_only() {
        let cfg = mini(Variant::FdDMt);
        let p = ModelParams::build(cfg, 2).unwrap();
        let out = p.forward(&small_input(&cfg, 6)).unwrap();
        let grads = OutputGrads {
            heads: vec![[0.3, -0.3], [-0.2, 0.2], [0.1, -0.1]],
            attention: None,
        };
        let g = p.backward(&out.cache, &grads).unwrap();
        let sta = p.layer_index(LayerRole::Sta).unwrap();
        assert!(g[sta].params().all(|&v| v == 0.0));
        let mut sup = OutputGrads::zeros(&cfg);
        sup.attention = Some(Tensor::filled(cfg.sta_shape().unwrap(), 0.1));
        let g = p.backward(&out.cache, &sup).unwrap();
        assert!(g[sta].params().any(|&v| v != 0.0));
    }

    #[test]
    fn serialization_round_trip_and_errors() {
        let p = ModelParams::build(ArchConfig::variant(Variant::FdDStaT), 4).unwrap();
        let bytes = p.to_bytes();
        let q = ModelParams::from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.to_bytes(), bytes);
        assert!(bytes.len() < 1 << 20);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelParams::from_bytes(&bad), Err(ModelError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(ModelParams::from_bytes(&bad), Err(ModelError::Version(2))));
        assert!(matches!(
            ModelParams::from_bytes(&bytes[..bytes.len() - 3]),
            Err(ModelError::Truncated(_))
        ));
    }

    #[test]
    fn fingerprint_mismatch_detected() {
        let p = ModelParams::build(ArchConfig::variant(Variant::FdD), 4).unwrap();
        let mut bytes = p.to_bytes();
        let header_end = 12 + u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        // last hex digit of the fingerprint line
        let digit = header_end - 2;
        bytes[digit] = if bytes[digit] == b'0' { b'1' } else { b'0' };
        assert!(matches!(
            ModelParams::from_bytes(&bytes),
            Err(ModelError::Fingerprint { .. })
        ));
    }
}
