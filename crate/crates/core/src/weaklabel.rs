//! Weak supervision from detections: greedy IoU tracking, valid-tracklet filtering into
//! video-level labels, attention-grid rasterization, and a running-average motion gate.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::data::{sample_indices, Clip, ClipLabels, StaGrid, INPUT_FPS};

pub const GRID_MAGIC: &[u8; 4] = b"RMGT";
pub const GRID_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeakLabelError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("not an RMGT grid file")]
    BadMagic,
    #[error("unsupported grid version {0}")]
    Version(u32),
    #[error("grid file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, WeakLabelError>;

/// Axis-aligned box in pixels, `x_min < x_max`, `y_min < y_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BBox {
    pub fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn area(&self) -> f32 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    pub fn center(&self) -> (f32, f32) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn iou(&self, other: &BBox) -> f32 {
        iou(self, other)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw as f64 * ih as f64;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() as f64 + b.area() as f64 - inter;
    (inter / union) as f32
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame_index: usize,
    pub bbox: BBox,
    pub class_name: String,
    pub score: f32,
}

/// Motion categories in head order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    PeopleOrVehicle,
    People,
    Vehicle,
}

/// Detector class names that count towards each category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevantClassMap {
    pub people: Vec<String>,
    pub vehicle: Vec<String>,
}

impl Default for RelevantClassMap {
    fn default() -> Self {
        Self {
            people: vec!["person".into()],
            vehicle: vec!["car".into(), "bus".into(), "truck".into()],
        }
    }
}

impl RelevantClassMap {
    pub fn is_people(&self, class: &str) -> bool {
        self.people.iter().any(|c| c == class)
    }

    pub fn is_vehicle(&self, class: &str) -> bool {
        self.vehicle.iter().any(|c| c == class)
    }

    pub fn is_relevant(&self, class: &str) -> bool {
        self.is_people(class) || self.is_vehicle(class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub frame_index: usize,
    pub bbox: BBox,
    pub score: f32,
    /// IoU between the tracklet box at this frame and the detection matched to it.
    pub match_iou: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: usize,
    pub class_name: String,
    pub points: Vec<TrackPoint>,
}

impl Tracklet {
    pub fn last_box(&self) -> BBox {
        self.points.last().expect("tracklets are nonempty").bbox
    }

    pub fn mean_score(&self) -> f64 {
        self.points.iter().map(|p| p.score as f64).sum::<f64>() / self.points.len() as f64
    }

    /// Max over box pairs of `|dx| / width` or `|dy| / height` between centers.
    pub fn max_relative_displacement(&self, frame_w: f32, frame_h: f32) -> f64 {
        let c: Vec<(f64, f64)> = self
            .points
            .iter()
            .map(|p| {
                let (x, y) = p.bbox.center();
                (x as f64, y as f64)
            })
            .collect();
        let mut best = 0.0f64;
        for (i, a) in c.iter().enumerate() {
            for b in &c[i + 1..] {
                best = best
                    .max((a.0 - b.0).abs() / frame_w as f64)
                    .max((a.1 - b.1).abs() / frame_h as f64);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    pub iou_threshold: f32,
    /// A tracklet unmatched for more than this many frames is closed.
    pub max_age: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.3,
            max_age: 3,
        }
    }
}

/// Greedy online association. Per frame, candidate (tracklet, detection) pairs of the same
/// class are taken in descending IoU against the tracklet's last box, ties broken by
/// (tracklet id, detection index); unmatched detections start new tracklets.
pub fn associate(detections: &[Detection], cfg: TrackerConfig) -> Vec<Tracklet> {
    let mut by_frame: BTreeMap<usize, Vec<&Detection>> = BTreeMap::new();
    for d in detections {
        by_frame.entry(d.frame_index).or_default().push(d);
    }
    let mut tracks: Vec<Tracklet> = Vec::new();
    let mut open: Vec<usize> = Vec::new();
    for (&frame, dets) in &by_frame {
        open.retain(|&ti| frame - tracks[ti].points.last().unwrap().frame_index <= cfg.max_age + 1);
        let mut pairs: Vec<(f32, usize, usize)> = Vec::new();
        for &ti in &open {
            let t = &tracks[ti];
            for (di, d) in dets.iter().enumerate() {
                if d.class_name != t.class_name {
                    continue;
                }
                let v = iou(&t.last_box(), &d.bbox);
                if v >= cfg.iou_threshold {
                    pairs.push((v, t.id, di));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_used = vec![false; tracks.len()];
        let mut det_used = vec![false; dets.len()];
        for (_, tid, di) in pairs {
            if track_used[tid] || det_used[di] {
                continue;
            }
            track_used[tid] = true;
            det_used[di] = true;
            let d = dets[di];
            tracks[tid].points.push(TrackPoint {
                frame_index: frame,
                bbox: d.bbox,
                score: d.score,
                match_iou: 1.0,
            });
        }
        for (di, d) in dets.iter().enumerate() {
            if det_used[di] {
                continue;
            }
            let id = tracks.len();
            tracks.push(Tracklet {
                id,
                class_name: d.class_name.clone(),
                points: vec![TrackPoint {
                    frame_index: frame,
                    bbox: d.bbox,
                    score: d.score,
                    match_iou: 1.0,
                }],
            });
            open.push(id);
        }
    }
    tracks
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackletRules {
    pub min_overlap_frames: usize,
    pub iou_min: f32,
    pub mean_score_min: f64,
    pub min_rel_displacement: f64,
}

impl Default for TrackletRules {
    fn default() -> Self {
        Self {
            min_overlap_frames: 2,
            iou_min: 0.9,
            mean_score_min: 0.8,
            min_rel_displacement: 0.2,
        }
    }
}

pub fn valid_tracklet(t: &Tracklet, rules: &TrackletRules, frame_w: f32, frame_h: f32) -> bool {
    let overlaps = t.points.iter().filter(|p| p.match_iou > rules.iou_min).count();
    overlaps >= rules.min_overlap_frames
        && t.mean_score() > rules.mean_score_min
        && t.max_relative_displacement(frame_w, frame_h) > rules.min_rel_displacement
}

/// (P+V, People, Vehicle) flags: a category is set iff one of its classes has a valid tracklet.
pub fn video_motion_labels(
    tracklets: &[Tracklet],
    classes: &RelevantClassMap,
    rules: &TrackletRules,
    frame_w: f32,
    frame_h: f32,
) -> [bool; 3] {
    let mut m = [false; 3];
    for t in tracklets {
        if !valid_tracklet(t, rules, frame_w, frame_h) {
            continue;
        }
        m[1] |= classes.is_people(&t.class_name);
        m[2] |= classes.is_vehicle(&t.class_name);
    }
    m[0] = m[1] || m[2];
    m
}

/// Attention targets for one clip with the frame size they were painted at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaTarget {
    pub grid: StaGrid,
    pub frame_size: (usize, usize),
}

/// Integer cell bounds along one axis; the last cell absorbs the remainder.
pub fn cell_bounds(len: usize, cells: usize) -> Vec<(usize, usize)> {
    let size = len / cells;
    (0..cells)
        .map(|i| {
            let end = if i + 1 == cells { len } else { (i + 1) * size };
            (i * size, end)
        })
        .collect()
}

/// Paints pixels whose centers lie inside a qualifying box and marks each cell with a strict
/// majority of painted pixels. `frames[t]` holds the boxes for sampled frame `t`.
pub fn rasterize_sta_target(
    frames: &[Vec<Detection>],
    frame_size: (usize, usize),
    grid_shape: (usize, usize),
    score_min: f32,
) -> StaTarget {
    let (fw, fh) = frame_size;
    let (gh, gw) = grid_shape;
    let xs = cell_bounds(fw, gw);
    let ys = cell_bounds(fh, gh);
    let mut grid = StaGrid::zeros(frames.len(), gh, gw);
    let mut mask = vec![false; fw * fh];
    for (t, dets) in frames.iter().enumerate() {
        mask.iter_mut().for_each(|m| *m = false);
        for d in dets.iter().filter(|d| d.score > score_min) {
            let b = d.bbox;
            let x0 = ((b.x_min - 0.5).ceil().max(0.0) as usize).min(fw);
            let x1 = ((b.x_max - 0.5).ceil().max(0.0) as usize).min(fw);
            let y0 = ((b.y_min - 0.5).ceil().max(0.0) as usize).min(fh);
            let y1 = ((b.y_max - 0.5).ceil().max(0.0) as usize).min(fh);
            for y in y0..y1 {
                mask[y * fw + x0..y * fw + x1].iter_mut().for_each(|m| *m = true);
            }
        }
        for (gy, &(ya, yb)) in ys.iter().enumerate() {
            for (gx, &(xa, xb)) in xs.iter().enumerate() {
                let painted: usize = (ya..yb)
                    .map(|y| mask[y * fw + xa..y * fw + xb].iter().filter(|&&m| m).count())
                    .sum();
                let area = (yb - ya) * (xb - xa);
                grid.set(t, gy, gx, painted * 2 > area);
            }
        }
    }
    StaTarget {
        grid,
        frame_size,
    }
}

/// Boxes of valid, relevant tracklets at the given source frame indices.
pub fn moving_boxes_at(
    tracklets: &[Tracklet],
    classes: &RelevantClassMap,
    rules: &TrackletRules,
    frame_size: (usize, usize),
    frame_indices: &[usize],
) -> Vec<Vec<Detection>> {
    let (fw, fh) = (frame_size.0 as f32, frame_size.1 as f32);
    let valid: Vec<&Tracklet> = tracklets
        .iter()
        .filter(|t| classes.is_relevant(&t.class_name) && valid_tracklet(t, rules, fw, fh))
        .collect();
    frame_indices
        .iter()
        .map(|&f| {
            valid
                .iter()
                .flat_map(|t| {
                    t.points.iter().filter(|p| p.frame_index == f).map(|p| Detection {
                        frame_index: f,
                        bbox: p.bbox,
                        class_name: t.class_name.clone(),
                        score: p.score,
                    })
                })
                .collect()
        })
        .collect()
}

/// Everything the detection-to-label pipeline is parameterized by.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeakLabelOptions {
    pub tracker: TrackerConfig,
    pub rules: TrackletRules,
    pub classes: RelevantClassMap,
}

/// Attention-grid box score threshold.
pub const STA_SCORE_MIN: f32 = 0.8;

/// Video labels and (when `sta_shape = Some((t', gh, gw))`) attention grids for one clip's
/// detections. Grid frame `i` uses the source frame sampled for network input frame `i`.
pub fn label_clip(
    detections: &[Detection],
    frame_size: (usize, usize),
    clip_len: usize,
    fps: f64,
    sta_shape: Option<(usize, usize, usize)>,
    opts: &WeakLabelOptions,
) -> ClipLabels {
    let tracklets = associate(detections, opts.tracker);
    let motion = video_motion_labels(
        &tracklets,
        &opts.classes,
        &opts.rules,
        frame_size.0 as f32,
        frame_size.1 as f32,
    );
    let sta_grids = sta_shape.map(|(t, gh, gw)| {
        let idx = sample_indices(clip_len, fps, INPUT_FPS, t);
        let boxes = moving_boxes_at(&tracklets, &opts.classes, &opts.rules, frame_size, &idx);
        rasterize_sta_target(&boxes, frame_size, (gh, gw), STA_SCORE_MIN).grid
    });
    ClipLabels { motion, sta_grids }
}

/// Flags frames whose mean absolute difference from the running average of earlier frames
/// (decay 0.9) exceeds `threshold`, in units of full scale. Frame 0 is never flagged.
pub fn motion_gate(clip: &Clip, threshold: f64) -> Vec<bool> {
    let mut flags = Vec::with_capacity(clip.len());
    let Some(first) = clip.frames.first() else {
        return flags;
    };
    let mut avg: Vec<f64> = first.iter().map(|&v| v as f64).collect();
    flags.push(false);
    for f in &clip.frames[1..] {
        let diff: f64 = f
            .iter()
            .zip(&avg)
            .map(|(&v, &a)| (v as f64 - a).abs())
            .sum::<f64>()
            / (f.len() as f64 * 255.0);
        flags.push(diff > threshold);
        for (a, &v) in avg.iter_mut().zip(f) {
            *a = 0.9 * *a + 0.1 * v as f64;
        }
    }
    flags
}

/// Parses `frame_index x_min y_min x_max y_max class_name score` records; blank lines and
/// lines starting with `#` are skipped.
pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| WeakLabelError::Parse {
            line: i + 1,
            reason,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f32>().map_err(|_| err(format!("bad number {s:?}")));
        let frame_index = f[0]
            .parse::<usize>()
            .map_err(|_| err(format!("bad frame index {:?}", f[0])))?;
        let bbox = BBox::new(num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?);
        if !bbox.is_valid() {
            return Err(err("box must have x_min < x_max and y_min < y_max".into()));
        }
        let score = num(f[6])?;
        if !(0.0..=1.0).contains(&score) {
            return Err(err(format!("score {score} outside [0, 1]")));
        }
        out.push(Detection {
            frame_index,
            bbox,
            class_name: f[5].to_string(),
            score,
        });
    }
    Ok(out)
}

pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        s.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            d.frame_index, d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max, d.class_name, d.score
        ));
    }
    s
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    parse_detections(&fs::read_to_string(path)?)
}

pub fn grid_to_bytes(g: &StaGrid) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(GRID_MAGIC);
    for v in [GRID_VERSION, g.t as u32, g.h as u32, g.w as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let per = g.h * g.w;
    for t in 0..g.t {
        let mut bytes = vec![0u8; per.div_ceil(8)];
        for (i, &c) in g.cells[t * per..(t + 1) * per].iter().enumerate() {
            if c {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        buf.extend_from_slice(&bytes);
    }
    buf
}

pub fn grid_from_bytes(bytes: &[u8]) -> Result<StaGrid> {
    if bytes.len() < 4 || &bytes[..4] != GRID_MAGIC {
        return Err(WeakLabelError::BadMagic);
    }
    if bytes.len() < 20 {
        return Err(WeakLabelError::Truncated {
            expected: 20,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4"));
    if word(0) != GRID_VERSION {
        return Err(WeakLabelError::Version(word(0)));
    }
    let (t, h, w) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let per = h * w;
    let row = per.div_ceil(8);
    let expected = 20 + t * row;
    if bytes.len() != expected {
        return Err(WeakLabelError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let mut g = StaGrid::zeros(t, h, w);
    for ti in 0..t {
        let frame = &bytes[20 + ti * row..20 + (ti + 1) * row];
        for i in 0..per {
            g.cells[ti * per + i] = frame[i / 8] >> (i % 8) & 1 == 1;
        }
    }
    Ok(g)
}

pub fn save_grid(g: &StaGrid, path: impl AsRef<Path>) -> Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    f.write_all(&grid_to_bytes(g))?;
    f.flush()?;
    Ok(())
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<StaGrid> {
    grid_from_bytes(&fs::read(path)?)
}
