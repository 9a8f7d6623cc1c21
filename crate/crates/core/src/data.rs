//! Clip ingestion, preprocessing into network input, and the synthetic surveillance corpus.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::ArchConfig;
use crate::tensor::{Shape, Tensor};
use crate::weaklabel::{BBox, Detection};

pub const CLIP_MAGIC: &[u8; 4] = b"RMCL";
pub const CLIP_VERSION: u32 = 1;
const CLIP_HEADER_LEN: usize = 20;

/// Nominal clip duration. Raw clip files carry no frame rate, so it is inferred from this.
pub const CLIP_SECONDS: f64 = 15.0;
/// Frame rate the network input is sampled at.
pub const INPUT_FPS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("clip has no frames")]
    Empty,
    #[error("frame {index} is {got} bytes, expected {expected}")]
    FrameSize {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("not an RMCL clip file")]
    BadMagic,
    #[error("unsupported clip version {0}")]
    Version(u32),
    #[error("clip file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("cannot map a {src_w}x{src_h} clip onto a {dst_w}x{dst_h} input with an integer box filter; re-preprocess the clip")]
    Resolution {
        src_w: usize,
        src_h: usize,
        dst_w: usize,
        dst_h: usize,
    },
    #[error("bad PPM file {path}: {reason}")]
    Ppm { path: PathBuf, reason: String },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// A stack of interleaved-RGB 8-bit frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub width: usize,
    pub height: usize,
    pub frames: Vec<Vec<u8>>,
    pub fps: f64,
    pub source_id: String,
}

impl Clip {
    pub fn new(
        width: usize,
        height: usize,
        frames: Vec<Vec<u8>>,
        fps: f64,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if frames.is_empty() || width == 0 || height == 0 {
            return Err(DataError::Empty);
        }
        let expected = width * height * 3;
        for (index, f) in frames.iter().enumerate() {
            if f.len() != expected {
                return Err(DataError::FrameSize {
                    index,
                    expected,
                    got: f.len(),
                });
            }
        }
        Ok(Self {
            width,
            height,
            frames,
            fps,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn frame_bytes(&self) -> usize {
        self.width * self.height * 3
    }
}

/// Binary attention grid per sampled frame, `(t, h, w)` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaGrid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub cells: Vec<bool>,
}

impl StaGrid {
    pub fn zeros(t: usize, h: usize, w: usize) -> Self {
        Self {
            t,
            h,
            w,
            cells: vec![false; t * h * w],
        }
    }

    pub fn get(&self, t: usize, h: usize, w: usize) -> bool {
        self.cells[(t * self.h + h) * self.w + w]
    }

    pub fn set(&mut self, t: usize, h: usize, w: usize, v: bool) {
        self.cells[(t * self.h + h) * self.w + w] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Video-level motion flags (P+V, People, Vehicle) and optional attention targets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClipLabels {
    pub motion: [bool; 3],
    pub sta_grids: Option<StaGrid>,
}

/// Source frame indices picked for `target_count` frames at `target_fps`.
pub fn sample_indices(len: usize, fps: f64, target_fps: f64, target_count: usize) -> Vec<usize> {
    let step = if target_fps > 0.0 && fps > 0.0 {
        fps / target_fps
    } else {
        1.0
    };
    (0..target_count)
        .map(|i| ((i as f64 * step).floor() as usize).min(len.saturating_sub(1)))
        .collect()
}

/// Picks `target_count` frames spaced `fps / target_fps` apart; short clips repeat their last frame.
pub fn sample_frames(clip: &Clip, target_fps: f64, target_count: usize) -> Clip {
    let idx = sample_indices(clip.len(), clip.fps, target_fps, target_count);
    Clip {
        width: clip.width,
        height: clip.height,
        frames: idx.iter().map(|&i| clip.frames[i].clone()).collect(),
        fps: target_fps,
        source_id: clip.source_id.clone(),
    }
}

/// Box-filter mean over `factor x factor` blocks; partial edge blocks average what they cover.
pub fn downsample(clip: &Clip, factor: usize) -> Clip {
    assert!(factor >= 1, "downsample factor must be >= 1");
    if factor == 1 {
        return clip.clone();
    }
    let ow = clip.width.div_ceil(factor);
    let oh = clip.height.div_ceil(factor);
    let frames = clip
        .frames
        .iter()
        .map(|f| {
            let mut out = vec![0u8; ow * oh * 3];
            for oy in 0..oh {
                let y0 = oy * factor;
                let y1 = (y0 + factor).min(clip.height);
                for ox in 0..ow {
                    let x0 = ox * factor;
                    let x1 = (x0 + factor).min(clip.width);
                    let mut acc = [0u32; 3];
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let p = (y * clip.width + x) * 3;
                            for c in 0..3 {
                                acc[c] += f[p + c] as u32;
                            }
                        }
                    }
                    let n = ((y1 - y0) * (x1 - x0)) as u32;
                    for c in 0..3 {
                        // round half up
                        out[(oy * ow + ox) * 3 + c] = ((acc[c] * 2 + n) / (2 * n)) as u8;
                    }
                }
            }
            out
        })
        .collect();
    Clip {
        width: ow,
        height: oh,
        frames,
        fps: clip.fps,
        source_id: clip.source_id.clone(),
    }
}

/// Reference frame for differencing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefMode {
    /// Previous frame.
    Local,
    /// First frame.
    Global,
}

/// `(f_t - f_ref) / 255` per pixel, with the first output frame all zero.
pub fn frame_difference(clip: &Clip, mode: RefMode) -> Tensor {
    let shape = Shape::new(clip.len(), clip.height, clip.width, 3);
    let mut out = Tensor::zeros(shape);
    let n = clip.frame_bytes();
    let data = out.data_mut();
    for t in 1..clip.len() {
        let reference = match mode {
            RefMode::Local => &clip.frames[t - 1],
            RefMode::Global => &clip.frames[0],
        };
        let cur = &clip.frames[t];
        for (i, d) in data[t * n..(t + 1) * n].iter_mut().enumerate() {
            *d = (cur[i] as f32 - reference[i] as f32) / 255.0;
        }
    }
    out
}

/// Raw frames scaled to `[0, 1]`.
pub fn scale_frames(clip: &Clip) -> Tensor {
    let shape = Shape::new(clip.len(), clip.height, clip.width, 3);
    let data = clip
        .frames
        .iter()
        .flat_map(|f| f.iter().map(|&v| v as f32 / 255.0))
        .collect();
    Tensor::new(shape, data).expect("frame stack shape")
}

/// Integer box-filter factor mapping `(src_w, src_h)` to `(dst_w, dst_h)` under ceil division.
pub fn resize_factor(src_w: usize, src_h: usize, dst_w: usize, dst_h: usize) -> Option<usize> {
    if dst_w == 0 || dst_h == 0 {
        return None;
    }
    let guess = (src_w / dst_w).max(1);
    [guess, guess + 1, guess.saturating_sub(1)]
        .into_iter()
        .filter(|&f| f >= 1)
        .find(|&f| src_w.div_ceil(f) == dst_w && src_h.div_ceil(f) == dst_h)
}

/// Samples `config.input_frames` frames at [`INPUT_FPS`] and box-filters them to the input size.
pub fn prepare_frames(clip: &Clip, config: &ArchConfig) -> Result<Clip> {
    if clip.is_empty() {
        return Err(DataError::Empty);
    }
    let sampled = sample_frames(clip, INPUT_FPS, config.input_frames);
    let factor = resize_factor(
        clip.width,
        clip.height,
        config.input_width,
        config.input_height,
    )
    .ok_or(DataError::Resolution {
        src_w: clip.width,
        src_h: clip.height,
        dst_w: config.input_width,
        dst_h: config.input_height,
    })?;
    Ok(downsample(&sampled, factor))
}

/// Frame differencing (or plain scaling) of already prepared frames.
pub fn frames_to_input(frames: &Clip, config: &ArchConfig) -> Tensor {
    if config.use_frame_diff {
        frame_difference(frames, RefMode::Local)
    } else {
        scale_frames(frames)
    }
}

/// Sampling, downsampling and (optional) frame differencing into the network input tensor.
pub fn to_input(clip: &Clip, config: &ArchConfig) -> Result<Tensor> {
    Ok(frames_to_input(&prepare_frames(clip, config)?, config))
}

pub fn clip_to_bytes(clip: &Clip) -> Vec<u8> {
    let mut buf = Vec::with_capacity(CLIP_HEADER_LEN + clip.len() * clip.frame_bytes());
    buf.extend_from_slice(CLIP_MAGIC);
    for v in [
        CLIP_VERSION,
        clip.len() as u32,
        clip.height as u32,
        clip.width as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for f in &clip.frames {
        buf.extend_from_slice(f);
    }
    buf
}

/// Parses an RMCL container. The frame rate is inferred as `frames / CLIP_SECONDS`.
pub fn clip_from_bytes(bytes: &[u8], source_id: &str) -> Result<Clip> {
    if bytes.len() < 4 || &bytes[..4] != CLIP_MAGIC {
        return Err(DataError::BadMagic);
    }
    if bytes.len() < CLIP_HEADER_LEN {
        return Err(DataError::Truncated {
            expected: CLIP_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4"));
    let version = word(0);
    if version != CLIP_VERSION {
        return Err(DataError::Version(version));
    }
    let (count, height, width) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let fb = width * height * 3;
    let expected = CLIP_HEADER_LEN + count * fb;
    if bytes.len() != expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let frames = bytes[CLIP_HEADER_LEN..]
        .chunks_exact(fb.max(1))
        .map(<[u8]>::to_vec)
        .collect();
    Clip::new(width, height, frames, count as f64 / CLIP_SECONDS, source_id)
}

pub fn save_clip(clip: &Clip, path: impl AsRef<Path>) -> Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    f.write_all(&clip_to_bytes(clip))?;
    f.flush()?;
    Ok(())
}

pub fn load_clip(path: impl AsRef<Path>) -> Result<Clip> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    clip_from_bytes(&fs::read(path)?, &id)
}

fn ppm_err(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Ppm {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads a binary (P6, maxval 255) PPM image.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ppm_err(path, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if tokens[0] != "P6" {
        return Err(ppm_err(path, format!("magic {:?}, expected P6", tokens[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| ppm_err(path, format!("bad number {s:?}")));
    let (w, h, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval != 255 {
        return Err(ppm_err(path, format!("maxval {maxval}, expected 255")));
    }
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(ppm_err(path, "truncated pixel data"));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(rgb)?;
    f.flush()?;
    Ok(())
}

/// Loads a directory of numerically named PPM frames (`0.ppm`, `1.ppm`, ... or zero-padded).
pub fn load_ppm_dir(dir: &Path, fps: f64) -> Result<Clip> {
    let mut files: Vec<(u64, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
        .filter_map(|p| {
            let n = p.file_stem()?.to_str()?.parse::<u64>().ok()?;
            Some((n, p))
        })
        .collect();
    files.sort();
    let mut frames = Vec::with_capacity(files.len());
    let mut dims = None;
    for (_, p) in &files {
        let (w, h, rgb) = read_ppm(p)?;
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(ppm_err(
                    p,
                    format!("frame is {w}x{h}, earlier frames are {}x{}", d.0, d.1),
                ))
            }
            _ => {}
        }
        frames.push(rgb);
    }
    let (w, h) = dims.ok_or(DataError::Empty)?;
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Clip::new(w, h, frames, fps, id)
}

// ---------------------------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectClass {
    Person,
    Vehicle,
}

/// Size and speed priors for one object class. Sizes in pixels, speed in pixels per frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectScript {
    pub class: ObjectClass,
    pub width: (f64, f64),
    pub height: (f64, f64),
    pub speed: (f64, f64),
    /// Maximum angle of the path away from horizontal, radians.
    pub max_angle: f64,
}

impl ObjectScript {
    pub fn person() -> Self {
        Self {
            class: ObjectClass::Person,
            width: (8.0, 12.0),
            height: (18.0, 28.0),
            speed: (2.7, 3.8),
            max_angle: 0.35,
        }
    }

    pub fn vehicle() -> Self {
        Self {
            class: ObjectClass::Vehicle,
            width: (50.0, 72.0),
            height: (32.0, 44.0),
            speed: (4.0, 6.0),
            max_angle: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_clips: usize,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub fps: f64,
    pub person: ObjectScript,
    pub vehicle: ObjectScript,
    /// Probability that a clip contains a moving person (resp. vehicle); drawn independently.
    pub person_prob: f64,
    pub vehicle_prob: f64,
    /// Probability of a parked (stationary) person / vehicle.
    pub stationary_prob: f64,
    /// Peak per-frame global brightness offset, gray levels.
    pub flicker_amplitude: f64,
    /// Fraction of pixels replaced by noise in each frame.
    pub speckle_density: f64,
    pub max_static_distractors: usize,
    /// Fraction of clips in the training split.
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_clips: 200,
            width: 160,
            height: 90,
            frames: 15,
            fps: 1.0,
            person: ObjectScript::person(),
            vehicle: ObjectScript::vehicle(),
            person_prob: 0.45,
            vehicle_prob: 0.45,
            stationary_prob: 0.3,
            flicker_amplitude: 6.0,
            speckle_density: 0.002,
            max_static_distractors: 3,
            train_fraction: 0.75,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for s in [&self.person, &self.vehicle] {
            let pos = |r: (f64, f64)| r.0 > 0.0 && r.1 >= r.0;
            if !pos(s.width) || !pos(s.height) || !pos(s.speed) {
                return Err(format!("{:?}: sizes and speeds must be positive ranges", s.class));
            }
        }
        if self.person.height.0 <= self.person.width.1 {
            return Err("person-like objects must be taller than wide".into());
        }
        if self.vehicle.width.0 <= self.vehicle.height.1 {
            return Err("vehicle-like objects must be wider than tall".into());
        }
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err("scene dimensions must be >= 1".into());
        }
        let steps = (self.frames.max(2) - 1) as f64;
        for s in [&self.person, &self.vehicle] {
            let (w, h) = (self.width as f64, self.height as f64);
            if s.width.1 >= w || s.height.1 + 1.0 >= h || s.width.0 + s.speed.0 * steps + 1.0 >= w {
                return Err(format!("{:?}: objects or their paths do not fit a {}x{} scene", s.class, self.width, self.height));
            }
        }
        Ok(())
    }
}

/// One object in a scene: a rectangle translating at constant velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class: ObjectClass,
    /// Detector class name emitted for this object (`person`, `car`, `bus`, `truck`).
    pub class_name: String,
    pub size: (f64, f64),
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub color: [u8; 3],
}

impl SceneObject {
    pub fn bbox(&self, t: usize) -> BBox {
        let cx = self.start.0 + self.velocity.0 * t as f64;
        let cy = self.start.1 + self.velocity.1 * t as f64;
        BBox::new(
            (cx - self.size.0 / 2.0) as f32,
            (cy - self.size.1 / 2.0) as f32,
            (cx + self.size.0 / 2.0) as f32,
            (cy + self.size.1 / 2.0) as f32,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distractor {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub color: [u8; 3],
}

/// Everything needed to render one clip deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneScript {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub fps: f64,
    pub objects: Vec<SceneObject>,
    pub distractors: Vec<Distractor>,
    pub flicker_amplitude: f64,
    pub speckle_density: f64,
    /// Seeds background texture, flicker and speckle.
    pub noise_seed: u64,
}

/// A rendered clip with its labels and the true box of every object in every frame.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub clip: Clip,
    pub labels: ClipLabels,
    pub boxes: Vec<Vec<Detection>>,
    pub train: bool,
}

/// Relative displacement threshold for a class flag.
pub const MOTION_THRESHOLD: f64 = 0.2;

/// Max over box pairs of the center shift along width or height, relative to the frame.
pub fn max_relative_displacement(boxes: &[BBox], width: f64, height: f64) -> f64 {
    let centers: Vec<(f64, f64)> = boxes
        .iter()
        .map(|b| {
            let (x, y) = b.center();
            (x as f64, y as f64)
        })
        .collect();
    let mut best = 0.0f64;
    for (i, a) in centers.iter().enumerate() {
        for b in &centers[i + 1..] {
            best = best
                .max((a.0 - b.0).abs() / width)
                .max((a.1 - b.1).abs() / height);
        }
    }
    best
}

fn background(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let base = [
        rng.gen_range(70.0..150.0f32),
        rng.gen_range(70.0..150.0f32),
        rng.gen_range(70.0..150.0f32),
    ];
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.02..0.12f32),
                rng.gen_range(0.02..0.12f32),
                rng.gen_range(0.0..std::f32::consts::TAU),
                rng.gen_range(6.0..18.0f32),
            )
        })
        .collect();
    let mut out = vec![0.0f32; width * height * 3];
    for y in 0..height {
        for x in 0..width {
            let mut v = 0.0;
            for &(fx, fy, ph, amp) in &waves {
                v += amp * (fx * x as f32 + fy * y as f32 + ph).sin();
            }
            let grain = rng.gen_range(-6.0..6.0f32);
            for c in 0..3 {
                out[(y * width + x) * 3 + c] = base[c] + v + grain;
            }
        }
    }
    out
}

fn fill_rect(frame: &mut [f32], width: usize, height: usize, b: BBox, color: [u8; 3]) {
    let x0 = (b.x_min.round().max(0.0) as usize).min(width);
    let x1 = (b.x_max.round().max(0.0) as usize).min(width);
    let y0 = (b.y_min.round().max(0.0) as usize).min(height);
    let y1 = (b.y_max.round().max(0.0) as usize).min(height);
    for y in y0..y1 {
        for x in x0..x1 {
            for c in 0..3 {
                frame[(y * width + x) * 3 + c] = color[c] as f32;
            }
        }
    }
}

/// Renders a scene and derives its labels from the true object paths.
pub fn render_scene(scene: &SceneScript) -> (Clip, ClipLabels, Vec<Vec<Detection>>) {
    let (w, h) = (scene.width, scene.height);
    let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
    let bg = background(w, h, &mut rng);
    let mut frames = Vec::with_capacity(scene.frames);
    let mut boxes = Vec::with_capacity(scene.frames);
    for t in 0..scene.frames {
        let flicker = if scene.flicker_amplitude > 0.0 {
            rng.gen_range(-scene.flicker_amplitude..=scene.flicker_amplitude) as f32
        } else {
            0.0
        };
        let mut f: Vec<f32> = bg.clone();
        for d in &scene.distractors {
            let b = BBox::new(d.x0 as f32, d.y0 as f32, d.x1 as f32, d.y1 as f32);
            fill_rect(&mut f, w, h, b, d.color);
        }
        let mut dets = Vec::new();
        for o in &scene.objects {
            let b = o.bbox(t);
            fill_rect(&mut f, w, h, b, o.color);
            dets.push(Detection {
                frame_index: t,
                bbox: b,
                class_name: o.class_name.clone(),
                score: 1.0,
            });
        }
        let speckles = (scene.speckle_density * (w * h) as f64).round() as usize;
        for _ in 0..speckles {
            let p = rng.gen_range(0..w * h);
            let v = rng.gen_range(0.0..255.0f32);
            for c in 0..3 {
                f[p * 3 + c] = v;
            }
        }
        frames.push(
            f.iter()
                .map(|&v| (v + flicker).round().clamp(0.0, 255.0) as u8)
                .collect(),
        );
        boxes.push(dets);
    }
    let mut motion = [false; 3];
    for o in &scene.objects {
        let path: Vec<BBox> = (0..scene.frames).map(|t| o.bbox(t)).collect();
        if max_relative_displacement(&path, w as f64, h as f64) > MOTION_THRESHOLD {
            match o.class {
                ObjectClass::Person => motion[1] = true,
                ObjectClass::Vehicle => motion[2] = true,
            }
        }
    }
    motion[0] = motion[1] || motion[2];
    let clip = Clip::new(w, h, frames, scene.fps, "").expect("rendered frames are consistent");
    (
        clip,
        ClipLabels {
            motion,
            sta_grids: None,
        },
        boxes,
    )
}

fn rand_in(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn object_color(rng: &mut ChaCha8Rng, class: ObjectClass) -> [u8; 3] {
    // bright or dark, never close to the mid-gray background
    let dark = rng.gen_bool(0.5);
    let mut c = [0u8; 3];
    for v in c.iter_mut() {
        *v = if dark {
            rng.gen_range(0..45)
        } else {
            rng.gen_range(200..=255)
        };
    }
    if class == ObjectClass::Vehicle {
        c[rng.gen_range(0..3)] = rng.gen_range(0..=255);
    }
    c
}

fn vehicle_name(rng: &mut ChaCha8Rng) -> &'static str {
    ["car", "bus", "truck"][rng.gen_range(0..3)]
}

fn swept(o: &SceneObject, frames: usize) -> BBox {
    let a = o.bbox(0);
    let b = o.bbox(frames.saturating_sub(1));
    BBox::new(
        a.x_min.min(b.x_min),
        a.y_min.min(b.y_min),
        a.x_max.max(b.x_max),
        a.y_max.max(b.y_max),
    )
}

fn overlaps(a: BBox, b: BBox, margin: f32) -> bool {
    a.x_min - margin < b.x_max
        && b.x_min - margin < a.x_max
        && a.y_min - margin < b.y_max
        && b.y_min - margin < a.y_max
}

/// Draws a mover whose whole path stays inside the frame and whose consecutive boxes overlap.
fn draw_mover(cfg: &SynthConfig, script: &ObjectScript, rng: &mut ChaCha8Rng) -> SceneObject {
    let (fw, fh) = (cfg.width as f64, cfg.height as f64);
    let steps = (cfg.frames.max(2) - 1) as f64;
    loop {
        let w = rand_in(rng, script.width);
        let h = rand_in(rng, script.height);
        let speed = rand_in(rng, script.speed);
        let angle = rng.gen_range(-script.max_angle..=script.max_angle);
        let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let vx = dir * speed * angle.cos();
        let vy = speed * angle.sin();
        let (dx, dy) = (vx * steps, vy * steps);
        let span_x = fw - w - dx.abs();
        let span_y = fh - h - dy.abs();
        if span_x <= 1.0 || span_y <= 1.0 {
            continue;
        }
        let x_lo = w / 2.0 + if dx < 0.0 { -dx } else { 0.0 };
        let y_lo = h / 2.0 + if dy < 0.0 { -dy } else { 0.0 };
        let start = (x_lo + rng.gen_range(0.0..span_x), y_lo + rng.gen_range(0.0..span_y));
        let class_name = match script.class {
            ObjectClass::Person => "person".to_string(),
            ObjectClass::Vehicle => vehicle_name(rng).to_string(),
        };
        let o = SceneObject {
            class: script.class,
            class_name,
            size: (w, h),
            start,
            velocity: (vx, vy),
            color: object_color(rng, script.class),
        };
        if o.bbox(0).iou(&o.bbox(1)) < 0.35 {
            continue;
        }
        return o;
    }
}

fn draw_parked(
    cfg: &SynthConfig,
    script: &ObjectScript,
    avoid: &[BBox],
    rng: &mut ChaCha8Rng,
) -> Option<SceneObject> {
    for _ in 0..50 {
        let w = rand_in(rng, script.width);
        let h = rand_in(rng, script.height);
        let cx = rng.gen_range(w / 2.0..cfg.width as f64 - w / 2.0);
        let cy = rng.gen_range(h / 2.0..cfg.height as f64 - h / 2.0);
        let class_name = match script.class {
            ObjectClass::Person => "person".to_string(),
            ObjectClass::Vehicle => vehicle_name(rng).to_string(),
        };
        let o = SceneObject {
            class: script.class,
            class_name,
            size: (w, h),
            start: (cx, cy),
            velocity: (0.0, 0.0),
            color: object_color(rng, script.class),
        };
        if avoid.iter().all(|b| !overlaps(*b, o.bbox(0), 2.0)) {
            return Some(o);
        }
    }
    None
}

/// Draws the random scene for clip `index` of a corpus.
pub fn draw_scene(cfg: &SynthConfig, index: usize) -> SceneScript {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let mut objects = Vec::new();
    if rng.gen_bool(cfg.person_prob) {
        objects.push(draw_mover(cfg, &cfg.person, &mut rng));
    }
    if rng.gen_bool(cfg.vehicle_prob) {
        objects.push(draw_mover(cfg, &cfg.vehicle, &mut rng));
    }
    let mut taken: Vec<BBox> = objects.iter().map(|o| swept(o, cfg.frames)).collect();
    for script in [&cfg.person, &cfg.vehicle] {
        if rng.gen_bool(cfg.stationary_prob) {
            if let Some(o) = draw_parked(cfg, script, &taken, &mut rng) {
                taken.push(o.bbox(0));
                objects.push(o);
            }
        }
    }
    let n_distractors = rng.gen_range(0..=cfg.max_static_distractors);
    let distractors = (0..n_distractors)
        .map(|_| {
            let dw = rng.gen_range(4..20usize).min(cfg.width);
            let dh = rng.gen_range(4..20usize).min(cfg.height);
            let x0 = rng.gen_range(0..=cfg.width - dw);
            let y0 = rng.gen_range(0..=cfg.height - dh);
            Distractor {
                x0,
                y0,
                x1: x0 + dw,
                y1: y0 + dh,
                color: [rng.gen(), rng.gen(), rng.gen()],
            }
        })
        .collect();
    SceneScript {
        width: cfg.width,
        height: cfg.height,
        frames: cfg.frames,
        fps: cfg.fps,
        objects,
        distractors,
        flicker_amplitude: rng.gen_range(0.0..=cfg.flicker_amplitude),
        speckle_density: cfg.speckle_density,
        noise_seed: rng.gen(),
    }
}

pub fn clip_id(index: usize) -> String {
    format!("clip_{index:05}")
}

/// Deterministic corpus: clip `i` depends only on `(seed, i)`. The first
/// `round(train_fraction * num_clips)` clips form the training split.
/// Configs failing [`SynthConfig::validate`] may never finish drawing objects.
pub fn synth_generate(cfg: &SynthConfig) -> Vec<SynthClip> {
    let n_train = (cfg.train_fraction * cfg.num_clips as f64).round() as usize;
    (0..cfg.num_clips)
        .map(|i| {
            let scene = draw_scene(cfg, i);
            let (mut clip, labels, boxes) = render_scene(&scene);
            clip.source_id = clip_id(i);
            SynthClip {
                clip,
                labels,
                boxes,
                train: i < n_train,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn gray_clip(frames: usize, w: usize, h: usize, fps: f64, value: impl Fn(usize) -> u8) -> Clip {
        Clip::new(
            w,
            h,
            (0..frames).map(|t| vec![value(t); w * h * 3]).collect(),
            fps,
            "c",
        )
        .unwrap()
    }

    #[test]
    fn sampling_one_fps_from_ten() {
        assert_eq!(
            sample_indices(150, 10.0, 1.0, 15),
            (0..15).map(|i| i * 10).collect::<Vec<_>>()
        );
    }

    #[test]
    fn sampling_identity_and_padding() {
        let c = gray_clip(15, 2, 2, 1.0, |t| t as u8);
        assert_eq!(sample_frames(&c, 1.0, 15), c);
        let short = gray_clip(7, 2, 2, 1.0, |t| t as u8);
        let s = sample_frames(&short, 1.0, 15);
        assert_eq!(s.len(), 15);
        for (i, f) in s.frames.iter().enumerate() {
            assert_eq!(f[0] as usize, i.min(6));
        }
    }

    #[test]
    fn downsample_sizes_and_constants() {
        let c = gray_clip(1, 1280, 720, 10.0, |_| 91);
        let d = downsample(&c, 8);
        assert_eq!((d.width, d.height), (160, 90));
        assert!(d.frames[0].iter().all(|&v| v == 91));
        assert_eq!(downsample(&c, 1), c);
        // partial edge block averages only covered pixels
        let mut f = vec![0u8; 3 * 3];
        f[6..9].copy_from_slice(&[30, 30, 30]);
        let c = Clip::new(3, 1, vec![f], 1.0, "e").unwrap();
        let d = downsample(&c, 2);
        assert_eq!(d.width, 2);
        assert_eq!(&d.frames[0][3..6], &[30, 30, 30]);
    }

    #[test]
    fn frame_difference_cases() {
        let still = gray_clip(4, 3, 2, 1.0, |_| 100);
        assert!(frame_difference(&still, RefMode::Local).data().iter().all(|&v| v == 0.0));
        let two = gray_clip(2, 3, 2, 1.0, |t| 100 + 51 * t as u8);
        let d = frame_difference(&two, RefMode::Local);
        let n = 3 * 2 * 3;
        assert!(d.data()[..n].iter().all(|&v| v == 0.0));
        assert!(d.data()[n..].iter().all(|&v| (v - 0.2).abs() < 1e-7));
        assert_eq!(d, frame_difference(&two, RefMode::Global));
        let ramp = gray_clip(3, 1, 1, 1.0, |t| 10 * t as u8);
        let g = frame_difference(&ramp, RefMode::Global);
        assert!((g.data()[6] - 20.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn to_input_shapes() {
        let c = gray_clip(150, 1280, 720, 10.0, |t| t as u8);
        let t = to_input(&c, &ArchConfig::variant(Variant::FdDStaT)).unwrap();
        assert_eq!(t.shape(), Shape::new(15, 90, 160, 3));
        let raw = to_input(&c, &ArchConfig::variant(Variant::C3d)).unwrap();
        assert!(raw.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let h = to_input(&c, &ArchConfig::from_name("FD-D-STA-T-H").unwrap()).unwrap();
        assert_eq!(h.shape(), Shape::new(15, 180, 320, 3));
        let odd = gray_clip(3, 100, 77, 1.0, |_| 0);
        assert!(matches!(
            to_input(&odd, &ArchConfig::variant(Variant::FdD)),
            Err(DataError::Resolution { .. })
        ));
    }

    #[test]
    fn clip_file_round_trip_and_errors() {
        let c = gray_clip(15, 160, 90, 1.0, |t| t as u8 * 3);
        let bytes = clip_to_bytes(&c);
        assert_eq!(bytes.len(), 20 + 15 * 160 * 90 * 3);
        let back = clip_from_bytes(&bytes, "c").unwrap();
        assert_eq!(back, c);
        assert!(matches!(
            clip_from_bytes(&bytes[..20], "c"),
            Err(DataError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(clip_from_bytes(&bad, "c"), Err(DataError::BadMagic)));
    }

    #[test]
    fn synthetic_labels_by_construction() {
        let cfg = SynthConfig::default();
        let base = SceneScript {
            width: 160,
            height: 90,
            frames: 15,
            fps: 1.0,
            objects: vec![],
            distractors: vec![Distractor {
                x0: 3,
                y0: 3,
                x1: 20,
                y1: 9,
                color: [250, 0, 0],
            }],
            flicker_amplitude: 5.0,
            speckle_density: 0.01,
            noise_seed: 3,
        };
        let (_, l, _) = render_scene(&base);
        assert_eq!(l.motion, [false, false, false]);

        let walker = SceneObject {
            class: ObjectClass::Person,
            class_name: "person".into(),
            size: (10.0, 24.0),
            start: (30.0, 45.0),
            velocity: (80.0 / 14.0 * 0.7, 0.0),
            color: [255, 255, 255],
        };
        let mut s = base.clone();
        s.objects.push(walker.clone());
        let (_, l, _) = render_scene(&s);
        assert_eq!(l.motion, [true, true, false]);

        let mut parked = base.clone();
        parked.objects.push(SceneObject {
            velocity: (0.0, 0.0),
            ..walker
        });
        let (_, l, _) = render_scene(&parked);
        assert_eq!(l.motion, [false, false, false]);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn synth_is_reproducible_and_consistent() {
        let cfg = SynthConfig {
            num_clips: 12,
            ..SynthConfig::default()
        };
        let a = synth_generate(&cfg);
        let b = synth_generate(&cfg);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.clip, y.clip);
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.labels.motion[0], x.labels.motion[1] || x.labels.motion[2]);
        }
        assert_eq!(a.iter().filter(|c| c.train).count(), 9);
    }

    #[test]
    fn synth_config_rejects_bad_aspect() {
        let mut cfg = SynthConfig::default();
        cfg.person.height = (5.0, 6.0);
        assert!(cfg.validate().is_err());
    }
}
