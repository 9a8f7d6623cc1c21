//! Command-line surface: corpus synthesis, weak labelling, training, prediction, evaluation
//! and benchmarking, each driven by a flat `key=value` config with `--set` overrides.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::thread;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::data::{
    load_clip, load_ppm_dir, save_clip, CLIP_SECONDS, synth_generate, to_input, Clip, DataError, StaGrid,
    SynthConfig,
};
use crate::eval::{
    average_precision, benchmark, f_score, interpolated_ap_101, pr_csv, pr_curve,
    precision_recall_at, EvalError,
};
use crate::model::{ArchConfig, ModelError, ModelParams};
use crate::train::{
    loss_csv, AdamState, SampleLabels, TrainError, TrainHyper, TrainSample, Trainer,
};
use crate::weaklabel::{
    format_detections, label_clip, load_grid, parse_detections, save_grid, WeakLabelError,
    WeakLabelOptions,
};

pub const CONFIG_VERSION: u32 = 1;
pub const HEAD_NAMES: [&str; 3] = ["pv", "people", "vehicle"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Data { path: PathBuf, source: DataError },
    #[error("{path}: {source}")]
    WeakLabel {
        path: PathBuf,
        source: WeakLabelError,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("ids missing from {side}: {ids}")]
    Ids { side: &'static str, ids: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn data_err(path: &Path) -> impl FnOnce(DataError) -> CliError + '_ {
    move |source| CliError::Data {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

const KEYS: &[&str] = &[
    "version",
    "seed",
    "variant",
    "use_frame_diff",
    "deep",
    "use_sta_layer",
    "multiply_attention",
    "supervise_sta",
    "filters",
    "input_height",
    "input_width",
    "input_frames",
    "num_heads",
    "lr",
    "batch_size",
    "max_iters",
    "c1",
    "c2",
    "checkpoint_every",
    "clips_dir",
    "labels_file",
    "grids_dir",
    "detections_dir",
    "manifest",
    "out_dir",
    "threshold",
    "synth.num_clips",
    "synth.width",
    "synth.height",
    "synth.frames",
    "synth.fps",
    "synth.person_prob",
    "synth.vehicle_prob",
    "synth.stationary_prob",
    "synth.flicker_amplitude",
    "synth.speckle_density",
    "synth.max_static_distractors",
    "synth.train_fraction",
];

/// Flat `key=value` settings. Later assignments win; `#` starts a comment line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            cfg.set(line)
                .map_err(|e| CliError::Config(format!("line {}: {}", i + 1, e)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, assignment: &str) -> std::result::Result<(), String> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got {assignment:?}"))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(format!("unknown key {k:?}"));
        }
        if k == "version" && v != CONFIG_VERSION.to_string() {
            return Err(format!("unsupported config version {v}"));
        }
        self.values.insert(k.to_string(), v.to_string());
        Ok(())
    }

    /// The file at `path` (if any) followed by the `overrides`.
    pub fn from_sources(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => RunConfig::default(),
        };
        for o in overrides {
            cfg.set(o).map_err(CliError::Config)?;
        }
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn insert(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}")))
            })
            .transpose()
    }

    fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    fn flag(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some("1" | "true") => Ok(Some(true)),
            Some("0" | "false") => Ok(Some(false)),
            Some(v) => Err(CliError::Config(format!("{key}: expected 0/1, got {v:?}"))),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.parsed("seed")?
            .ok_or_else(|| CliError::Config("seed is required".into()))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.get(key)
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Config(format!("{key} is required")))
    }

    fn existing(&self, key: &str) -> Result<PathBuf> {
        let p = self.path(key)?;
        if !p.exists() {
            return Err(CliError::Config(format!("{key}: {} does not exist", p.display())));
        }
        Ok(p)
    }

    /// The named variant (default `FD-D-STA-T`) with any explicit field overrides.
    pub fn arch(&self) -> Result<ArchConfig> {
        let mut a = ArchConfig::from_name(self.get("variant").unwrap_or("FD-D-STA-T"))?;
        let flags: [(&str, &mut bool); 5] = [
            ("use_frame_diff", &mut a.use_frame_diff),
            ("deep", &mut a.deep),
            ("use_sta_layer", &mut a.use_sta_layer),
            ("multiply_attention", &mut a.multiply_attention),
            ("supervise_sta", &mut a.supervise_sta),
        ];
        for (k, slot) in flags {
            if let Some(v) = self.flag(k)? {
                *slot = v;
            }
        }
        a.filters = self.or("filters", a.filters)?;
        a.input_height = self.or("input_height", a.input_height)?;
        a.input_width = self.or("input_width", a.input_width)?;
        a.input_frames = self.or("input_frames", a.input_frames)?;
        a.num_heads = self.or("num_heads", a.num_heads)?;
        a.validate()?;
        Ok(a)
    }

    pub fn hyper(&self) -> Result<TrainHyper> {
        let d = TrainHyper::default();
        Ok(TrainHyper {
            lr: self.or("lr", d.lr)?,
            batch_size: self.or("batch_size", d.batch_size)?,
            max_iters: self.or("max_iters", d.max_iters)?,
            seed: self.seed()?,
            c1: self.or("c1", d.c1)?,
            c2: self.or("c2", d.c2)?,
            class_weights: None,
            checkpoint_every: self.or("checkpoint_every", d.checkpoint_every)?,
            checkpoint_dir: None,
        })
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let d = SynthConfig::default();
        let s = SynthConfig {
            seed: self.seed()?,
            num_clips: self.or("synth.num_clips", d.num_clips)?,
            width: self.or("synth.width", d.width)?,
            height: self.or("synth.height", d.height)?,
            frames: self.or("synth.frames", d.frames)?,
            fps: self.or("synth.fps", d.fps)?,
            person_prob: self.or("synth.person_prob", d.person_prob)?,
            vehicle_prob: self.or("synth.vehicle_prob", d.vehicle_prob)?,
            stationary_prob: self.or("synth.stationary_prob", d.stationary_prob)?,
            flicker_amplitude: self.or("synth.flicker_amplitude", d.flicker_amplitude)?,
            speckle_density: self.or("synth.speckle_density", d.speckle_density)?,
            max_static_distractors: self
                .or("synth.max_static_distractors", d.max_static_distractors)?,
            train_fraction: self.or("synth.train_fraction", d.train_fraction)?,
            ..d
        };
        s.validate().map_err(CliError::Config)?;
        Ok(s)
    }
}

/// `id flag flag flag` lines, one per clip.
pub fn format_labels(rows: &[(String, Vec<bool>)]) -> String {
    let mut s = String::new();
    for (id, flags) in rows {
        s.push_str(id);
        for &f in flags {
            s.push_str(if f { " 1" } else { " 0" });
        }
        s.push('\n');
    }
    s
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i, l.split_whitespace().collect()))
}

pub fn parse_labels(path: &Path) -> Result<Vec<(String, Vec<bool>)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let fmt = |line: usize, reason: String| CliError::Format {
        path: path.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    };
    data_lines(&text)
        .map(|(line, f)| {
            if f.len() < 2 {
                return Err(fmt(line, "expected an id and label flags".into()));
            }
            let flags = f[1..]
                .iter()
                .map(|v| match *v {
                    "1" => Ok(true),
                    "0" => Ok(false),
                    _ => Err(fmt(line, format!("bad flag {v:?}"))),
                })
                .collect::<Result<Vec<bool>>>()?;
            Ok((f[0].to_string(), flags))
        })
        .collect()
}

/// `id p p p` prediction lines.
pub fn parse_predictions(path: &Path) -> Result<Vec<(String, Vec<f32>)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    data_lines(&text)
        .map(|(line, f)| {
            let probs = f
                .get(1..)
                .unwrap_or(&[])
                .iter()
                .map(|v| v.parse::<f32>())
                .collect::<std::result::Result<Vec<f32>, _>>()
                .ok()
                .filter(|p| !p.is_empty())
                .ok_or_else(|| CliError::Format {
                    path: path.to_path_buf(),
                    reason: format!("line {line}: expected an id and probabilities"),
                })?;
            Ok((f[0].to_string(), probs))
        })
        .collect()
}

/// `id split` lines; returns the ids whose split is `train`.
pub fn train_ids(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(data_lines(&text)
        .filter(|(_, f)| f.get(1) == Some(&"train"))
        .map(|(_, f)| f[0].to_string())
        .collect())
}

fn sorted_entries(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// A clip file, a directory of clip files, or a directory of PPM frames.
pub fn load_clips(path: &Path) -> Result<Vec<Clip>> {
    if path.is_file() {
        return Ok(vec![load_clip(path).map_err(data_err(path))?]);
    }
    let files = sorted_entries(path, "rmcl")?;
    if files.is_empty() && !sorted_entries(path, "ppm")?.is_empty() {
        let mut clip = load_ppm_dir(path, 0.0).map_err(data_err(path))?;
        clip.source_id = stem(path);
        clip.fps = clip.len() as f64 / CLIP_SECONDS;
        return Ok(vec![clip]);
    }
    files
        .iter()
        .map(|f| load_clip(f).map_err(data_err(f)))
        .collect()
}

#[derive(Debug, Parser)]
#[command(name = "remotenet", version, about = "Relevant-motion detection for surveillance clips")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides a config value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::from_sources(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic corpus: clips, labels, manifest and oracle detections.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turns per-clip detection files into motion labels and attention grids.
    WeakLabel {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        clips: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains a model and writes it with its optimizer state and loss trace.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to continue from (`.rmnt` path or its stem).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Prints `id p(P+V) p(People) p(Vehicle)` per clip.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        clips: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Average precision, PR curves and F-scores of predictions against labels.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
    },
    /// Times single-clip inference and writes a key=value report.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        clips: PathBuf,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { cfg, out } => {
            let mut c = cfg.load()?;
            if let Some(o) = out {
                c.insert("out_dir", o.to_string_lossy());
            }
            cmd_synth(&c)
        }
        Command::WeakLabel {
            cfg,
            detections,
            clips,
            out,
        } => {
            let mut c = cfg.load()?;
            for (k, v) in [("detections_dir", detections), ("clips_dir", clips), ("out_dir", out)] {
                if let Some(v) = v {
                    c.insert(k, v.to_string_lossy());
                }
            }
            cmd_weak_label(&c)
        }
        Command::Train { cfg, resume } => cmd_train(&cfg.load()?, resume.as_deref()),
        Command::Predict {
            model,
            clips,
            out,
            threads,
        } => {
            let text = cmd_predict(&model, &clips, threads)?;
            emit(out.as_deref(), &text)
        }
        Command::Eval {
            predictions,
            labels,
            out,
            threshold,
        } => {
            let summary = cmd_eval(&predictions, &labels, &out, threshold)?;
            emit(None, &summary)
        }
        Command::Bench {
            model,
            clips,
            reps,
            warmup,
            out,
        } => {
            let report = cmd_bench(&model, &clips, reps, warmup)?;
            emit(out.as_deref(), &report)
        }
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, text),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(io_err(Path::new("<stdout>")))
        }
    }
}

/// Writes `clips/<id>.rmcl`, `detections/<id>.txt`, `labels.txt` and `manifest.txt`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let s = cfg.synth()?;
    let out = cfg.path("out_dir")?;
    let (clips_dir, det_dir) = (out.join("clips"), out.join("detections"));
    create_dir(&clips_dir)?;
    create_dir(&det_dir)?;
    let corpus = synth_generate(&s);
    let mut manifest = String::new();
    let mut labels = Vec::new();
    let mut positives = [0usize; 3];
    for c in &corpus {
        let id = &c.clip.source_id;
        let path = clips_dir.join(format!("{id}.rmcl"));
        save_clip(&c.clip, &path).map_err(data_err(&path))?;
        let dets: Vec<_> = c.boxes.iter().flatten().cloned().collect();
        write_file(&det_dir.join(format!("{id}.txt")), format_detections(&dets))?;
        manifest.push_str(&format!("{id} {}\n", if c.train { "train" } else { "test" }));
        for (p, &m) in positives.iter_mut().zip(&c.labels.motion) {
            *p += m as usize;
        }
        labels.push((id.clone(), c.labels.motion.to_vec()));
    }
    write_file(&out.join("manifest.txt"), manifest)?;
    write_file(&out.join("labels.txt"), format_labels(&labels))?;
    let train = corpus.iter().filter(|c| c.train).count();
    println!(
        "clips={} train={} test={} positives_pv={} positives_people={} positives_vehicle={}",
        corpus.len(),
        train,
        corpus.len() - train,
        positives[0],
        positives[1],
        positives[2]
    );
    Ok(())
}

/// Labels every `<id>.txt` detection file whose clip exists; grids go to `grids/<id>.rmgt`
/// when the configured architecture has an attention layer.
pub fn cmd_weak_label(cfg: &RunConfig) -> Result<()> {
    let det_dir = cfg.existing("detections_dir")?;
    let clips_dir = cfg.existing("clips_dir")?;
    let out = cfg.path("out_dir")?;
    let arch = cfg.arch()?;
    let sta = arch.sta_shape().map(|s| (s.t, s.h, s.w));
    let opts = WeakLabelOptions::default();
    let mut rows = Vec::new();
    let mut skipped = 0;
    for file in sorted_entries(&det_dir, "txt")? {
        let id = stem(&file);
        let clip_path = clips_dir.join(format!("{id}.rmcl"));
        if !clip_path.exists() {
            eprintln!("warning: no clip for {}, skipped", file.display());
            skipped += 1;
            continue;
        }
        let text = fs::read_to_string(&file).map_err(io_err(&file))?;
        let dets = parse_detections(&text).map_err(|source| CliError::WeakLabel {
            path: file.clone(),
            source,
        })?;
        let clip = load_clip(&clip_path).map_err(data_err(&clip_path))?;
        let l = label_clip(&dets, (clip.width, clip.height), clip.len(), clip.fps, sta, &opts);
        if let Some(g) = &l.sta_grids {
            let path = out.join("grids").join(format!("{id}.rmgt"));
            create_dir(&out.join("grids"))?;
            save_grid(g, &path).map_err(|source| CliError::WeakLabel {
                path: path.clone(),
                source,
            })?;
        }
        rows.push((id, l.motion.to_vec()));
    }
    write_file(&out.join("labels.txt"), format_labels(&rows))?;
    println!("labelled={} skipped={}", rows.len(), skipped);
    Ok(())
}

fn load_samples(cfg: &RunConfig, arch: &ArchConfig) -> Result<Vec<TrainSample>> {
    let clips_dir = cfg.existing("clips_dir")?;
    let labels_path = cfg.existing("labels_file")?;
    let grids_dir = cfg.get("grids_dir").map(PathBuf::from);
    let keep = match cfg.get("manifest") {
        Some(_) => Some(train_ids(&cfg.existing("manifest")?)?),
        None => None,
    };
    let mut samples = Vec::new();
    let mut missing_grids = 0;
    for (id, motion) in parse_labels(&labels_path)? {
        if keep.as_ref().is_some_and(|k| !k.contains(&id)) {
            continue;
        }
        if motion.len() != arch.num_heads {
            return Err(CliError::Format {
                path: labels_path.clone(),
                reason: format!("{id}: {} flags for {} heads", motion.len(), arch.num_heads),
            });
        }
        let path = clips_dir.join(format!("{id}.rmcl"));
        let clip = load_clip(&path).map_err(data_err(&path))?;
        let input = to_input(&clip, arch).map_err(data_err(&path))?;
        let sta: Option<StaGrid> = match &grids_dir {
            Some(dir) if arch.use_sta_layer => {
                let g = dir.join(format!("{id}.rmgt"));
                if g.exists() {
                    Some(load_grid(&g).map_err(|source| CliError::WeakLabel { path: g, source })?)
                } else {
                    None
                }
            }
            _ => None,
        };
        if arch.supervise_sta && sta.is_none() {
            missing_grids += 1;
        }
        samples.push(TrainSample {
            id,
            input,
            labels: SampleLabels { motion, sta },
        });
    }
    if missing_grids > 0 {
        eprintln!("warning: {missing_grids} samples have no attention grid; their attention term is skipped");
    }
    Ok(samples)
}

fn checkpoint_paths(resume: &Path) -> (PathBuf, PathBuf) {
    (resume.with_extension("rmnt"), resume.with_extension("rmad"))
}

/// Trains to `max_iters`, writing `model.rmnt`, `optimizer.rmad` and `loss.csv` to `out_dir`
/// and checkpoints to `out_dir/checkpoints`.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let arch = cfg.arch()?;
    let out = cfg.path("out_dir")?;
    let mut hyper = cfg.hyper()?;
    hyper.checkpoint_dir = Some(out.join("checkpoints"));
    let samples = load_samples(cfg, &arch)?;
    let mut trainer = match resume {
        Some(base) => {
            let (m, a) = checkpoint_paths(base);
            let params = ModelParams::load(&m)?;
            if params.fingerprint() != arch.fingerprint() {
                return Err(CliError::Config(format!(
                    "{} was trained with a different architecture",
                    m.display()
                )));
            }
            let adam = AdamState::load(&a)?;
            let iteration = adam.step as usize;
            Trainer::resume(params, Some(adam), iteration, &samples, hyper.clone())?
        }
        None => Trainer::new(&arch, &samples, hyper.clone())?,
    };
    let mut trace = Vec::new();
    while trainer.iteration < hyper.max_iters {
        trace.push(trainer.step(&samples)?);
    }
    create_dir(&out)?;
    trainer.params.save(out.join("model.rmnt"))?;
    trainer.adam.save(out.join("optimizer.rmad"))?;
    write_file(&out.join("loss.csv"), loss_csv(&trace))?;
    println!(
        "samples={} iterations={} final_loss={}",
        samples.len(),
        trainer.iteration,
        trace.last().map(|r| format!("{:.6}", r.loss.total)).unwrap_or_else(|| "none".into())
    );
    Ok(())
}

fn predict_one(params: &ModelParams, clip: &Clip) -> Result<Vec<f32>> {
    let path = PathBuf::from(&clip.source_id);
    let input = to_input(clip, params.config()).map_err(data_err(&path))?;
    Ok(params.infer(&input)?.motion_probs())
}

/// One `id p p p` line per clip, in clip order; `threads` workers split the clips.
pub fn cmd_predict(model: &Path, clips: &Path, threads: usize) -> Result<String> {
    let params = ModelParams::load(model)?;
    let clips = load_clips(clips)?;
    let workers = threads.max(1).min(clips.len().max(1));
    let chunk = clips.len().div_ceil(workers).max(1);
    let probs: Vec<Vec<f32>> = thread::scope(|s| {
        let handles: Vec<_> = clips
            .chunks(chunk)
            .map(|part| {
                let params = &params;
                s.spawn(move || part.iter().map(|c| predict_one(params, c)).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("prediction worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    eprintln!("predicted {} clips with {} threads", clips.len(), workers);
    let mut s = String::new();
    for (c, p) in clips.iter().zip(&probs) {
        s.push_str(&c.source_id);
        for v in p {
            s.push_str(&format!(" {v:.6}"));
        }
        s.push('\n');
    }
    Ok(s)
}

/// Writes `metrics.csv` and `pr_<head>.csv` into `out`; returns the metrics table.
pub fn cmd_eval(predictions: &Path, labels: &Path, out: &Path, threshold: f32) -> Result<String> {
    let preds: BTreeMap<String, Vec<f32>> = parse_predictions(predictions)?.into_iter().collect();
    let truth = parse_labels(labels)?;
    let truth_ids: BTreeSet<&str> = truth.iter().map(|(id, _)| id.as_str()).collect();
    let missing: Vec<&str> = truth_ids
        .iter()
        .copied()
        .filter(|id| !preds.contains_key(*id))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Ids {
            side: "predictions",
            ids: missing.join(" "),
        });
    }
    let extra: Vec<&str> = preds
        .keys()
        .map(String::as_str)
        .filter(|id| !truth_ids.contains(id))
        .collect();
    if !extra.is_empty() {
        return Err(CliError::Ids {
            side: "labels",
            ids: extra.join(" "),
        });
    }
    let heads = truth.first().map(|t| t.1.len()).unwrap_or(0);
    create_dir(out)?;
    let mut table = String::from("head,ap,ap_101,threshold,precision,recall,f_score\n");
    for h in 0..heads {
        let mut scores = Vec::with_capacity(truth.len());
        let mut flags = Vec::with_capacity(truth.len());
        for (id, l) in &truth {
            let p = &preds[id];
            let (Some(&s), Some(&f)) = (p.get(h), l.get(h)) else {
                return Err(CliError::Format {
                    path: predictions.to_path_buf(),
                    reason: format!("{id}: no value for head {h}"),
                });
            };
            scores.push(s);
            flags.push(f);
        }
        let name = HEAD_NAMES.get(h).map(|s| s.to_string()).unwrap_or(format!("head{h}"));
        let (ap, ap101) = match average_precision(&scores, &flags) {
            Ok(ap) => (
                format!("{ap:.6}"),
                format!("{:.6}", interpolated_ap_101(&scores, &flags)?),
            ),
            Err(EvalError::NoPositives) => {
                eprintln!("warning: head {name} has no positive labels; AP is undefined");
                ("nan".into(), "nan".into())
            }
            Err(e) => return Err(e.into()),
        };
        if flags.iter().any(|&f| f) {
            write_file(&out.join(format!("pr_{name}.csv")), pr_csv(&pr_curve(&scores, &flags)?))?;
        }
        let (p, r) = precision_recall_at(&scores, &flags, threshold);
        table.push_str(&format!(
            "{name},{ap},{ap101},{threshold},{p:.6},{r:.6},{:.6}\n",
            f_score(p, r)
        ));
    }
    write_file(&out.join("metrics.csv"), &table)?;
    Ok(table)
}

pub fn cmd_bench(model: &Path, clips: &Path, reps: usize, warmup: usize) -> Result<String> {
    let params = ModelParams::load(model)?;
    let clips = load_clips(clips)?;
    let report = benchmark(&params, &clips, reps, warmup)?;
    Ok(report.to_kv())
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main() -> std::process::ExitCode {
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}
