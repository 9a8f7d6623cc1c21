//! Joint classification/attention loss, Adam, and the minibatch training loop.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::StaGrid;
use crate::model::{ArchConfig, ForwardOutputs, ModelError, ModelParams, OutputGrads};
use crate::tensor::{ConvKernel, Tensor};

pub const ADAM_MAGIC: &[u8; 4] = b"RMAD";
pub const ADAM_VERSION: u32 = 1;
/// Probability clamp applied inside the cross-entropy.
pub const CE_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss or gradient at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("empty batch or dataset")]
    Empty,
    #[error("{0}")]
    Labels(String),
    #[error("head {head} has only {kind} labels; pass explicit class weights")]
    SingleClass { head: usize, kind: &'static str },
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error("optimizer state does not mirror the parameters: {0}")]
    StateShape(String),
    #[error("not an RMAD optimizer file")]
    BadMagic,
    #[error("unsupported optimizer file version {0}")]
    Version(u32),
    #[error("optimizer file truncated")]
    Truncated,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Loss coefficients and per-head `(w_pos, w_neg)` class weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub c1: f64,
    pub c2: f64,
    pub class_weights: Vec<(f64, f64)>,
}

impl LossWeights {
    pub fn new(c1: f64, c2: f64, class_weights: Vec<(f64, f64)>) -> Result<Self> {
        let w = Self {
            c1,
            c2,
            class_weights,
        };
        w.validate()?;
        Ok(w)
    }

    /// `c1 = 1`, `c2 = 0.5`, unit class weights.
    pub fn standard(heads: usize) -> Self {
        Self {
            c1: 1.0,
            c2: 0.5,
            class_weights: vec![(1.0, 1.0); heads],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 >= 0.0 && self.c2 >= 0.0) {
            return Err(TrainError::Weights("c1 and c2 must be >= 0".into()));
        }
        if self
            .class_weights
            .iter()
            .any(|&(p, n)| !(p > 0.0 && n > 0.0 && p.is_finite() && n.is_finite()))
        {
            return Err(TrainError::Weights("class weights must be positive".into()));
        }
        Ok(())
    }
}

/// Labels for one clip: a motion flag per head and an optional attention grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleLabels {
    pub motion: Vec<bool>,
    pub sta: Option<StaGrid>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BatchLabels {
    pub samples: Vec<SampleLabels>,
}

/// `total = c1 * binary + c2 * sta`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub binary: f64,
    pub sta: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: LossBreakdown) {
        self.total += o.total;
        self.binary += o.binary;
        self.sta += o.sta;
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: LossBreakdown,
    pub grads: Vec<OutputGrads>,
}

/// Two-way softmax evaluated in double precision.
fn softmax2(a: f32, b: f32) -> [f64; 2] {
    let (a, b) = (a as f64, b as f64);
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    [ea / (ea + eb), eb / (ea + eb)]
}

fn ce(p_true: f64) -> f64 {
    -p_true.clamp(CE_CLAMP, 1.0 - CE_CLAMP).ln()
}

/// One sample's share of a batch loss of size `batch`, and the matching output gradients.
/// The clamp bounds the loss value only; gradients are the unclamped `p - onehot`.
pub fn sample_loss(
    config: &ArchConfig,
    out: &ForwardOutputs,
    labels: &SampleLabels,
    weights: &LossWeights,
    batch: usize,
) -> Result<(LossBreakdown, OutputGrads)> {
    if batch == 0 {
        return Err(TrainError::Empty);
    }
    let heads = out.head_probs.len();
    if labels.motion.len() != heads || weights.class_weights.len() != heads {
        return Err(TrainError::Labels(format!(
            "{} heads, {} labels, {} class weight pairs",
            heads,
            labels.motion.len(),
            weights.class_weights.len()
        )));
    }
    let n = batch as f64;
    let mut grads = OutputGrads {
        heads: Vec::with_capacity(heads),
        attention: None,
    };
    let mut binary = 0.0;
    for ((logits, &g), &(wp, wn)) in out.head_logits.iter().zip(&labels.motion).zip(&weights.class_weights) {
        let probs = softmax2(logits[0], logits[1]);
        let (w, target) = if g { (wp, 1) } else { (wn, 0) };
        binary += w * ce(probs[target]) / n;
        let scale = weights.c1 * w / n;
        let mut gh = [0.0f32; 2];
        for (k, v) in gh.iter_mut().enumerate() {
            let onehot = if k == target { 1.0 } else { 0.0 };
            *v = (scale * (probs[k] - onehot)) as f32;
        }
        grads.heads.push(gh);
    }
    let mut sta = 0.0;
    if config.supervise_sta {
        if let (Some(grid), Some(logits)) = (&labels.sta, &out.attention_logits) {
            let s = logits.shape();
            if (grid.t, grid.h, grid.w) != (s.t, s.h, s.w) {
                return Err(TrainError::Labels(format!(
                    "attention grid {}x{}x{} does not match output {}x{}x{}",
                    grid.t, grid.h, grid.w, s.t, s.h, s.w
                )));
            }
            let cells = grid.cells.len() as f64;
            let scale = weights.c2 / (n * cells);
            let mut g = Tensor::zeros(s);
            for ((pair, gp), &target) in logits
                .data()
                .chunks_exact(2)
                .zip(g.data_mut().chunks_exact_mut(2))
                .zip(&grid.cells)
            {
                let [p0, p1] = softmax2(pair[0], pair[1]);
                sta += ce(if target { p1 } else { p0 }) / (n * cells);
                let t = if target { 1.0 } else { 0.0 };
                gp[1] = (scale * (p1 - t)) as f32;
                gp[0] = -gp[1];
            }
            grads.attention = Some(g);
        }
    }
    let total = weights.c1 * binary + weights.c2 * sta;
    if !total.is_finite() {
        return Err(TrainError::NonFinite { iteration: 0 });
    }
    Ok((LossBreakdown { total, binary, sta }, grads))
}

/// Batch loss averaged over `outputs.len()` samples, with output gradients per sample.
pub fn compute_loss(
    config: &ArchConfig,
    outputs: &[ForwardOutputs],
    labels: &BatchLabels,
    weights: &LossWeights,
) -> Result<LossOutput> {
    if outputs.is_empty() {
        return Err(TrainError::Empty);
    }
    if outputs.len() != labels.samples.len() {
        return Err(TrainError::Labels(format!(
            "{} outputs for {} labels",
            outputs.len(),
            labels.samples.len()
        )));
    }
    let mut loss = LossBreakdown::default();
    let mut grads = Vec::with_capacity(outputs.len());
    for (o, l) in outputs.iter().zip(&labels.samples) {
        let (s, g) = sample_loss(config, o, l, weights, outputs.len())?;
        loss.add(s);
        grads.push(g);
    }
    Ok(LossOutput { loss, grads })
}

/// Balanced per-head weights: `w_pos = 2 N_neg / N`, `w_neg = 2 N_pos / N`.
pub fn estimate_class_weights(labels: &[Vec<bool>]) -> Result<Vec<(f64, f64)>> {
    let Some(first) = labels.first() else {
        return Err(TrainError::Empty);
    };
    let heads = first.len();
    let n = labels.len() as f64;
    (0..heads)
        .map(|h| {
            let pos = labels.iter().filter(|l| l[h]).count() as f64;
            let neg = n - pos;
            if pos == 0.0 {
                return Err(TrainError::SingleClass {
                    head: h,
                    kind: "negative",
                });
            }
            if neg == 0.0 {
                return Err(TrainError::SingleClass {
                    head: h,
                    kind: "positive",
                });
            }
            Ok((2.0 * neg / n, 2.0 * pos / n))
        })
        .collect()
}

/// Adam moments, one flat array per kernel (weights then bias).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ModelParams, lr: f32) -> Self {
        let sizes: Vec<usize> = params.kernels().iter().map(|k| k.shape().param_len()).collect();
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    fn check(&self, kernels: &[ConvKernel]) -> Result<()> {
        if self.m.len() != kernels.len() || self.v.len() != kernels.len() {
            return Err(TrainError::StateShape(format!(
                "{} moment arrays for {} kernels",
                self.m.len(),
                kernels.len()
            )));
        }
        for (i, k) in kernels.iter().enumerate() {
            let len = k.shape().param_len();
            if self.m[i].len() != len || self.v[i].len() != len {
                return Err(TrainError::StateShape(format!(
                    "kernel {i} has {len} parameters, moments have {}",
                    self.m[i].len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(ADAM_MAGIC);
        b.extend_from_slice(&ADAM_VERSION.to_le_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        for x in [self.lr, self.beta1, self.beta2, self.epsilon] {
            b.extend_from_slice(&x.to_le_bytes());
        }
        b.extend_from_slice(&(self.m.len() as u32).to_le_bytes());
        for (m, v) in self.m.iter().zip(&self.v) {
            b.extend_from_slice(&(m.len() as u32).to_le_bytes());
            for x in m.iter().chain(v) {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != ADAM_MAGIC {
            return Err(TrainError::BadMagic);
        }
        let version = r.u32()?;
        if version != ADAM_VERSION {
            return Err(TrainError::Version(version));
        }
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8"));
        let lr = r.f32()?;
        let beta1 = r.f32()?;
        let beta2 = r.f32()?;
        let epsilon = r.f32()?;
        let count = r.u32()? as usize;
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            m.push((0..len).map(|_| r.f32()).collect::<Result<Vec<_>>>()?);
            v.push((0..len).map(|_| r.f32()).collect::<Result<Vec<_>>>()?);
        }
        if r.pos != bytes.len() {
            return Err(TrainError::Truncated);
        }
        Ok(Self {
            step,
            lr,
            beta1,
            beta2,
            epsilon,
            m,
            v,
        })
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

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(TrainError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
}

/// One bias-corrected Adam update over every parameter.
pub fn adam_step(state: &mut AdamState, params: &mut ModelParams, grads: &[ConvKernel]) -> Result<()> {
    state.check(params.kernels())?;
    state.check(grads)?;
    state.step += 1;
    let t = state.step as f64;
    let bc1 = (1.0 - (state.beta1 as f64).powf(t)) as f32;
    let bc2 = (1.0 - (state.beta2 as f64).powf(t)) as f32;
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.epsilon);
    for (ki, (k, g)) in params.kernels_mut().iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[ki];
        let v = &mut state.v[ki];
        for ((p, &gi), (mi, vi)) in k
            .params_mut()
            .zip(g.params())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// A preprocessed training clip.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub input: Tensor,
    pub labels: SampleLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub lr: f32,
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub c1: f64,
    pub c2: f64,
    /// Estimated from the dataset when absent.
    pub class_weights: Option<Vec<(f64, f64)>>,
    /// Write `ckpt_<iter>.rmnt` / `.rmad` every this many iterations (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 40,
            max_iters: 5000,
            seed: 0,
            c1: 1.0,
            c2: 0.5,
            class_weights: None,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

/// Loss of one iteration's minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: LossBreakdown,
}

pub fn loss_csv(trace: &[LossRecord]) -> String {
    let mut s = String::from("iteration,total_loss,binary_loss,sta_loss\n");
    for r in trace {
        s.push_str(&format!(
            "{},{:.8},{:.8},{:.8}\n",
            r.iteration, r.loss.total, r.loss.binary, r.loss.sta
        ));
    }
    s
}

/// Trailing mean over `window` values ending at each position.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, &v) in values.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005E_ED0F_BA7C);
    rng.set_stream(epoch);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

/// Dataset indices for iteration `k`: positions `[k B, (k + 1) B)` of a stream made of
/// per-epoch seeded permutations.
pub fn batch_indices(seed: u64, n: usize, batch: usize, k: usize) -> Vec<usize> {
    let start = k * batch;
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for pos in start..start + batch {
        let epoch = pos / n;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            cached = Some((epoch, epoch_permutation(seed, epoch as u64, n)));
        }
        out.push(cached.as_ref().expect("just set").1[pos % n]);
    }
    out
}

/// Stateful optimizer driver; `step` runs one minibatch.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: ModelParams,
    pub adam: AdamState,
    pub weights: LossWeights,
    pub hyper: TrainHyper,
    pub iteration: usize,
}

impl Trainer {
    pub fn new(config: &ArchConfig, dataset: &[TrainSample], hyper: TrainHyper) -> Result<Self> {
        let params = ModelParams::build(*config, hyper.seed)?;
        Self::resume(params, None, 0, dataset, hyper)
    }

    /// Continues from saved parameters and optimizer state at `iteration`.
    pub fn resume(
        params: ModelParams,
        adam: Option<AdamState>,
        iteration: usize,
        dataset: &[TrainSample],
        hyper: TrainHyper,
    ) -> Result<Self> {
        if dataset.is_empty() || hyper.batch_size == 0 {
            return Err(TrainError::Empty);
        }
        let class_weights = match &hyper.class_weights {
            Some(w) => w.clone(),
            None => estimate_class_weights(
                &dataset.iter().map(|s| s.labels.motion.clone()).collect::<Vec<_>>(),
            )?,
        };
        let weights = LossWeights::new(hyper.c1, hyper.c2, class_weights)?;
        let adam = match adam {
            Some(a) => {
                a.check(params.kernels())?;
                a
            }
            None => AdamState::new(&params, hyper.lr),
        };
        Ok(Self {
            params,
            adam,
            weights,
            hyper,
            iteration,
        })
    }

    /// Gradients summed in batch order and the batch loss, without updating.
    pub fn batch_gradients(
        &self,
        dataset: &[TrainSample],
        indices: &[usize],
    ) -> Result<(LossBreakdown, Vec<ConvKernel>)> {
        let cfg = self.params.config();
        let mut total = self.params.zeros_like();
        let mut loss = LossBreakdown::default();
        for &i in indices {
            let s = &dataset[i];
            let out = self.params.forward(&s.input)?;
            let (l, g) = sample_loss(cfg, &out, &s.labels, &self.weights, indices.len())
                .map_err(|e| match e {
                    TrainError::NonFinite { .. } => TrainError::NonFinite {
                        iteration: self.iteration,
                    },
                    e => e,
                })?;
            loss.add(l);
            let pg = self.params.backward(&out.cache, &g)?;
            for (acc, k) in total.iter_mut().zip(&pg) {
                add_into(acc, k);
            }
        }
        Ok((loss, total))
    }

    pub fn step(&mut self, dataset: &[TrainSample]) -> Result<LossRecord> {
        let idx = batch_indices(self.hyper.seed, dataset.len(), self.hyper.batch_size, self.iteration);
        let (loss, grads) = self.batch_gradients(dataset, &idx)?;
        let finite = loss.total.is_finite() && grads.iter().all(|k| k.params().all(|v| v.is_finite()));
        if !finite {
            return Err(TrainError::NonFinite {
                iteration: self.iteration,
            });
        }
        adam_step(&mut self.adam, &mut self.params, &grads)?;
        let rec = LossRecord {
            iteration: self.iteration,
            loss,
        };
        self.iteration += 1;
        if self.hyper.checkpoint_every > 0 && self.iteration.is_multiple_of(self.hyper.checkpoint_every) {
            if let Some(dir) = &self.hyper.checkpoint_dir {
                self.checkpoint(dir)?;
            }
        }
        Ok(rec)
    }

    /// Writes `ckpt_<iteration>.rmnt` and `ckpt_<iteration>.rmad` into `dir`.
    pub fn checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let base = dir.join(format!("ckpt_{:06}", self.iteration));
        self.params.save(base.with_extension("rmnt"))?;
        self.adam.save(base.with_extension("rmad"))?;
        Ok(base)
    }
}

fn add_into(acc: &mut ConvKernel, k: &ConvKernel) {
    for (a, b) in acc.weights.iter_mut().zip(&k.weights) {
        *a += *b;
    }
    for (a, b) in acc.bias.iter_mut().zip(&k.bias) {
        *a += *b;
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub adam: AdamState,
    pub trace: Vec<LossRecord>,
}

/// Trains from a seeded initialization for `hyper.max_iters` iterations.
pub fn train_loop(config: &ArchConfig, dataset: &[TrainSample], hyper: &TrainHyper) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config, dataset, hyper.clone())?;
    let mut trace = Vec::with_capacity(hyper.max_iters);
    while t.iteration < hyper.max_iters {
        trace.push(t.step(dataset)?);
    }
    Ok(TrainOutcome {
        params: t.params,
        adam: t.adam,
        trace,
    })
}
