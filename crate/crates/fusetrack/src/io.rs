//! On-disk formats: detection files, ground-truth files, track files, noise
//! suites, run configuration, checkpoints, telemetry, and metrics reports.
//!
//! The data files are line-oriented text with explicit headers. Floats are
//! written with the shortest representation that parses back to the same
//! bits, so write -> read round-trips are exact. Writes go through a
//! temporary file in the target directory followed by a rename.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::filter::{ClassNoise, NoiseSuite};
use crate::lifecycle::{InitMode, LifecyclePolicy};
use crate::nn::{ParamStore, Tensor};
use crate::types::{
    ClassId, Detection, FeatureDims, GtBox, Observation, ObsVec, StateVec, TrackRecord, OBS_DIM,
    STATE_DIM,
};
use crate::{Error, Result};

const DET_MAGIC: &str = "fusetrack-detections v1";
const GT_MAGIC: &str = "fusetrack-groundtruth v1";
const TRK_MAGIC: &str = "fusetrack-tracks v1";
const CKPT_MAGIC: &str = "fusetrack-checkpoint v1";
const TELEMETRY_MAGIC: &str = "fusetrack-telemetry v1";
const METRICS_MAGIC: &str = "fusetrack-metrics v1";

/// Write `content` atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp~");
    std::fs::write(&tmp, content).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn push_f64(out: &mut String, v: f64) {
    // `{}` prints the shortest decimal that round-trips to the same f64
    let _ = write!(out, " {v}");
}

struct LineParser<'a> {
    path: String,
    line_no: usize,
    fields: std::str::SplitAsciiWhitespace<'a>,
    raw: &'a str,
}

impl<'a> LineParser<'a> {
    fn new(path: &str, line_no: usize, raw: &'a str) -> Self {
        LineParser {
            path: path.to_string(),
            line_no,
            fields: raw.split_ascii_whitespace(),
            raw,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(&self.path, self.line_no, msg.into())
    }

    fn next<T: FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self
            .fields
            .next()
            .ok_or_else(|| self.err(format!("missing field `{what}`")))?;
        tok.parse()
            .map_err(|_| self.err(format!("cannot parse `{tok}` as {what}")))
    }

    fn take_f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            out.push(self.next::<f64>(&format!("{what}[{i}]"))?);
        }
        Ok(out)
    }

    fn finish(mut self) -> Result<()> {
        if self.fields.next().is_some() {
            let n = self.raw.split_ascii_whitespace().count();
            return Err(self.err(format!("{n} fields, more than expected")));
        }
        Ok(())
    }
}

fn data_lines(content: &str) -> impl Iterator<Item = (usize, &str)> {
    content
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

fn expect_magic(path: &str, lines: &mut dyn Iterator<Item = (usize, &str)>, magic: &str) -> Result<()> {
    match lines.next() {
        Some((_, l)) if l.trim() == magic => Ok(()),
        Some((n, l)) => Err(Error::format(
            path,
            n,
            format!("expected header `{magic}`, found `{l}`"),
        )),
        None => Err(Error::format(path, 1, "empty file")),
    }
}

fn header_value<'a>(
    path: &str,
    lines: &mut dyn Iterator<Item = (usize, &'a str)>,
    key: &str,
) -> Result<&'a str> {
    match lines.next() {
        Some((n, l)) => {
            let mut parts = l.split_ascii_whitespace();
            match (parts.next(), parts.next()) {
                (Some(k), Some(v)) if k == key => Ok(v),
                _ => Err(Error::format(
                    path,
                    n,
                    format!("expected `{key} <value>`, found `{l}`"),
                )),
            }
        }
        None => Err(Error::format(path, 0, format!("missing header `{key}`"))),
    }
}

// ---------------------------------------------------------------------------
// Detection files
// ---------------------------------------------------------------------------

/// Parsed detection file: feature dims, frame interval, detections grouped
/// by frame index (index 0 through the maximum frame present).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub frame_interval: f64,
    pub dims: FeatureDims,
    pub frames: Vec<Vec<Detection>>,
}

impl DetectionSet {
    pub fn all(&self) -> impl Iterator<Item = &Detection> {
        self.frames.iter().flatten()
    }
}

pub fn write_detections(path: &Path, set: &DetectionSet) -> Result<()> {
    let mut out = String::new();
    out.push_str(DET_MAGIC);
    out.push('\n');
    let _ = writeln!(out, "frame_interval {}", set.frame_interval);
    let _ = writeln!(out, "feat2d_dim {}", set.dims.feat2d);
    let _ = writeln!(out, "feat3d_channels {}", set.dims.feat3d_channels);
    out.push_str("# frame class x y z a l w h d_x d_y confidence feat2d.. feat3d..\n");
    for (frame, dets) in set.frames.iter().enumerate() {
        for d in dets {
            let _ = write!(out, "{frame} {}", d.class_id);
            let o = d.obs.to_vector();
            for v in o.iter() {
                push_f64(&mut out, *v);
            }
            push_f64(&mut out, d.confidence);
            for v in &d.feat2d {
                push_f64(&mut out, *v);
            }
            for v in &d.feat3d {
                push_f64(&mut out, *v);
            }
            out.push('\n');
        }
    }
    write_atomic(path, &out)
}

pub fn read_detections(path: &Path) -> Result<DetectionSet> {
    let content = read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut lines = data_lines(&content);
    expect_magic(&pstr, &mut lines, DET_MAGIC)?;
    let frame_interval: f64 = header_value(&pstr, &mut lines, "frame_interval")?
        .parse()
        .map_err(|_| Error::format(&pstr, 2, "bad frame_interval"))?;
    let feat2d: usize = header_value(&pstr, &mut lines, "feat2d_dim")?
        .parse()
        .map_err(|_| Error::format(&pstr, 3, "bad feat2d_dim"))?;
    let feat3d_channels: usize = header_value(&pstr, &mut lines, "feat3d_channels")?
        .parse()
        .map_err(|_| Error::format(&pstr, 4, "bad feat3d_channels"))?;
    let dims = FeatureDims {
        feat2d,
        feat3d_channels,
    };

    let mut frames: Vec<Vec<Detection>> = Vec::new();
    let mut last_frame: Option<usize> = None;
    for (line_no, raw) in lines {
        let mut p = LineParser::new(&pstr, line_no, raw);
        let frame: usize = p.next("frame")?;
        if let Some(prev) = last_frame {
            if frame < prev {
                return Err(p.err(format!("frame {frame} after frame {prev}: not nondecreasing")));
            }
        }
        last_frame = Some(frame);
        let class_id: ClassId = p.next("class")?;
        let ov = p.take_f64s(OBS_DIM, "observation")?;
        let confidence: f64 = p.next("confidence")?;
        let feat2d = p.take_f64s(dims.feat2d, "feat2d")?;
        let feat3d = p.take_f64s(dims.feat3d_len(), "feat3d")?;
        p.finish()?;
        let obs = Observation::new(ObsVec::from_column_slice(&ov))
            .map_err(|e| Error::format(&pstr, line_no, e.to_string()))?;
        let det = Detection {
            obs,
            class_id,
            confidence,
            feat2d,
            feat3d,
            frame,
        };
        det.validate(&dims)
            .map_err(|e| Error::format(&pstr, line_no, e.to_string()))?;
        while frames.len() <= frame {
            frames.push(Vec::new());
        }
        frames[frame].push(det);
    }
    Ok(DetectionSet {
        frame_interval,
        dims,
        frames,
    })
}

// ---------------------------------------------------------------------------
// Ground-truth files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GtSet {
    pub frame_interval: f64,
    pub frames: Vec<Vec<GtBox>>,
}

pub fn write_gt(path: &Path, set: &GtSet) -> Result<()> {
    let mut out = String::new();
    out.push_str(GT_MAGIC);
    out.push('\n');
    let _ = writeln!(out, "frame_interval {}", set.frame_interval);
    out.push_str("# frame identity class x y z a l w h d_x d_y d_z d_a\n");
    for (frame, boxes) in set.frames.iter().enumerate() {
        for g in boxes {
            let _ = write!(out, "{frame} {} {}", g.identity, g.class_id);
            for v in g.state.iter() {
                push_f64(&mut out, *v);
            }
            out.push('\n');
        }
    }
    write_atomic(path, &out)
}

pub fn read_gt(path: &Path) -> Result<GtSet> {
    let content = read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut lines = data_lines(&content);
    expect_magic(&pstr, &mut lines, GT_MAGIC)?;
    let frame_interval: f64 = header_value(&pstr, &mut lines, "frame_interval")?
        .parse()
        .map_err(|_| Error::format(&pstr, 2, "bad frame_interval"))?;
    let mut frames: Vec<Vec<GtBox>> = Vec::new();
    let mut last_frame: Option<usize> = None;
    for (line_no, raw) in lines {
        let mut p = LineParser::new(&pstr, line_no, raw);
        let frame: usize = p.next("frame")?;
        if let Some(prev) = last_frame {
            if frame < prev {
                return Err(p.err(format!("frame {frame} after frame {prev}: not nondecreasing")));
            }
        }
        last_frame = Some(frame);
        let identity: u64 = p.next("identity")?;
        let class_id: ClassId = p.next("class")?;
        let sv = p.take_f64s(STATE_DIM, "state")?;
        p.finish()?;
        while frames.len() <= frame {
            frames.push(Vec::new());
        }
        frames[frame].push(GtBox {
            identity,
            class_id,
            state: StateVec::from_column_slice(&sv),
        });
    }
    Ok(GtSet {
        frame_interval,
        frames,
    })
}

// ---------------------------------------------------------------------------
// Track files
// ---------------------------------------------------------------------------

pub fn write_tracks(path: &Path, records: &[TrackRecord]) -> Result<()> {
    let mut out = String::new();
    out.push_str(TRK_MAGIC);
    out.push('\n');
    out.push_str("# frame id class x y z a l w h d_x d_y d_z d_a score\n");
    let mut seen = std::collections::BTreeSet::new();
    for r in records {
        if !seen.insert((r.frame, r.id)) {
            return Err(Error::Config(format!(
                "duplicate track record for frame {} id {}",
                r.frame, r.id
            )));
        }
        let _ = write!(out, "{} {} {}", r.frame, r.id, r.class_id);
        for v in r.state.iter() {
            push_f64(&mut out, *v);
        }
        push_f64(&mut out, r.score);
        out.push('\n');
    }
    write_atomic(path, &out)
}

pub fn read_tracks(path: &Path) -> Result<Vec<TrackRecord>> {
    let content = read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut lines = data_lines(&content);
    expect_magic(&pstr, &mut lines, TRK_MAGIC)?;
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (line_no, raw) in lines {
        let mut p = LineParser::new(&pstr, line_no, raw);
        let frame: usize = p.next("frame")?;
        let id: u64 = p.next("id")?;
        let class_id: ClassId = p.next("class")?;
        let sv = p.take_f64s(STATE_DIM, "state")?;
        let score: f64 = p.next("score")?;
        p.finish()?;
        if !seen.insert((frame, id)) {
            return Err(p.err(format!("duplicate (frame {frame}, id {id})")));
        }
        out.push(TrackRecord {
            frame,
            id,
            class_id,
            state: StateVec::from_column_slice(&sv),
            score,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Noise suite (TOML)
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct NoiseFileEntry {
    id: ClassId,
    q: Vec<f64>,
    r: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NoiseFile {
    class: Vec<NoiseFileEntry>,
}

pub fn write_noise(path: &Path, suite: &NoiseSuite) -> Result<()> {
    let file = NoiseFile {
        class: suite
            .classes
            .iter()
            .map(|(&id, cn)| NoiseFileEntry {
                id,
                q: cn.q_diag.to_vec(),
                r: cn.r_diag.to_vec(),
            })
            .collect(),
    };
    let text = toml::to_string_pretty(&file)
        .map_err(|e| Error::Config(format!("serializing noise suite: {e}")))?;
    write_atomic(path, &text)
}

pub fn read_noise(path: &Path) -> Result<NoiseSuite> {
    let content = read_to_string(path)?;
    let file: NoiseFile = toml::from_str(&content)
        .map_err(|e| Error::format(path.display().to_string(), 0, e.to_string()))?;
    let mut suite = NoiseSuite::default();
    for entry in file.class {
        if entry.q.len() != STATE_DIM || entry.r.len() != OBS_DIM {
            return Err(Error::Config(format!(
                "noise class {}: q has {} values (need {STATE_DIM}), r has {} (need {OBS_DIM})",
                entry.id,
                entry.q.len(),
                entry.r.len()
            )));
        }
        suite.classes.insert(
            entry.id,
            ClassNoise {
                q_diag: entry.q.try_into().unwrap(),
                r_diag: entry.r.try_into().unwrap(),
            },
        );
    }
    Ok(suite)
}

// ---------------------------------------------------------------------------
// Run configuration (TOML)
// ---------------------------------------------------------------------------

/// Loss constants of the distance-combination training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConstants {
    /// Gate threshold the losses are trained against.
    pub t: f64,
    pub c_contr: f64,
    pub c_pos: f64,
    pub c_neg: f64,
}

impl Default for LossConstants {
    fn default() -> Self {
        LossConstants {
            t: 11.0,
            c_contr: 6.0,
            c_pos: 3.0,
            c_neg: 3.0,
        }
    }
}

/// Optimizer and architecture settings for training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub lr: f64,
    pub epochs: usize,
    pub g1_hidden: usize,
    pub conv_channels: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            lr: 1e-3,
            epochs: 10,
            g1_hidden: 1536,
            conv_channels: 256,
            mlp_hidden: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifecycleConfig {
    /// `always`, `learned`, or `count:<k>`.
    pub init: String,
    pub init_threshold: f64,
    pub max_misses: u32,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        LifecycleConfig {
            init: "always".to_string(),
            init_threshold: 0.5,
            max_misses: 3,
        }
    }
}

impl LifecycleConfig {
    pub fn to_policy(&self) -> Result<LifecyclePolicy> {
        let init_mode = parse_init_mode(&self.init, self.init_threshold)?;
        let policy = LifecyclePolicy {
            init_mode,
            max_consecutive_misses: self.max_misses,
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// Parse an init-policy string: `always`, `learned`, or `count:<k>`.
pub fn parse_init_mode(s: &str, threshold: f64) -> Result<InitMode> {
    match s {
        "always" => Ok(InitMode::Always),
        "learned" => Ok(InitMode::Learned { threshold }),
        other => {
            if let Some(k) = other.strip_prefix("count:") {
                let k: u32 = k
                    .parse()
                    .map_err(|_| Error::Config(format!("bad count policy `{other}`")))?;
                Ok(InitMode::CountBased { k })
            } else {
                Err(Error::Config(format!(
                    "unknown init policy `{other}` (expected always, learned, or count:<k>)"
                )))
            }
        }
    }
}

/// Top-level run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Association gate on the combined distance.
    pub gate: f64,
    pub frame_interval: f64,
    /// Detections with confidence below this are dropped before tracking.
    pub confidence_floor: f64,
    /// Restrict tracking/evaluation to these classes (default: all present).
    pub classes: Option<Vec<ClassId>>,
    pub features: FeatureDims,
    pub lifecycle: LifecycleConfig,
    /// Path to a noise-suite TOML, resolved relative to the config file.
    pub noise: Option<PathBuf>,
    /// Directory holding g1..g4 checkpoints, resolved like `noise`.
    pub checkpoints: Option<PathBuf>,
    pub loss: LossConstants,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gate: crate::assoc::DEFAULT_GATE,
            frame_interval: 0.5,
            confidence_floor: 0.0,
            classes: None,
            features: FeatureDims::default(),
            lifecycle: LifecycleConfig::default(),
            noise: None,
            checkpoints: None,
            loss: LossConstants::default(),
            train: TrainSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gate", self.gate),
            ("loss.t", self.loss.t),
            ("loss.c_contr", self.loss.c_contr),
            ("loss.c_pos", self.loss.c_pos),
            ("loss.c_neg", self.loss.c_neg),
        ] {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        self.lifecycle.to_policy()?;
        Ok(())
    }

    /// Resolve a configured path relative to the config file location.
    pub fn resolve(&self, config_path: Option<&Path>, p: &Path) -> PathBuf {
        if p.is_absolute() {
            return p.to_path_buf();
        }
        match config_path.and_then(|c| c.parent()) {
            Some(dir) => dir.join(p),
            None => p.to_path_buf(),
        }
    }
}

pub fn read_run_config(path: &Path) -> Result<RunConfig> {
    let content = read_to_string(path)?;
    let config: RunConfig = toml::from_str(&content)
        .map_err(|e| Error::format(path.display().to_string(), 0, e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn write_run_config(path: &Path, config: &RunConfig) -> Result<()> {
    let text = toml::to_string_pretty(config)
        .map_err(|e| Error::Config(format!("serializing run config: {e}")))?;
    write_atomic(path, &text)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Write one net's parameters: named tensors with shapes and row-major
/// values, plus the feature dims the net was built for.
pub fn write_checkpoint(
    path: &Path,
    net_name: &str,
    dims: &FeatureDims,
    params: &ParamStore,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(CKPT_MAGIC);
    out.push('\n');
    let _ = writeln!(out, "net {net_name}");
    let _ = writeln!(out, "feat2d_dim {}", dims.feat2d);
    let _ = writeln!(out, "feat3d_channels {}", dims.feat3d_channels);
    for (name, p) in params.iter() {
        let _ = write!(out, "tensor {name}");
        for s in p.value.shape() {
            let _ = write!(out, " {s}");
        }
        out.push('\n');
        let mut first = true;
        for v in p.value.data() {
            if !first {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
            first = false;
        }
        out.push('\n');
    }
    write_atomic(path, &out)
}

pub fn read_checkpoint(path: &Path) -> Result<(String, FeatureDims, ParamStore)> {
    let content = read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut lines = data_lines(&content);
    expect_magic(&pstr, &mut lines, CKPT_MAGIC)?;
    let net_name = header_value(&pstr, &mut lines, "net")?.to_string();
    let feat2d: usize = header_value(&pstr, &mut lines, "feat2d_dim")?
        .parse()
        .map_err(|_| Error::format(&pstr, 3, "bad feat2d_dim"))?;
    let feat3d_channels: usize = header_value(&pstr, &mut lines, "feat3d_channels")?
        .parse()
        .map_err(|_| Error::format(&pstr, 4, "bad feat3d_channels"))?;
    let mut params = ParamStore::default();
    let mut pending: Option<(String, Vec<usize>, usize)> = None;
    for (line_no, raw) in lines {
        match pending.take() {
            None => {
                let mut fields = raw.split_ascii_whitespace();
                match fields.next() {
                    Some("tensor") => {}
                    _ => {
                        return Err(Error::format(
                            &pstr,
                            line_no,
                            format!("expected `tensor <name> <shape..>`, found `{raw}`"),
                        ))
                    }
                }
                let name = fields
                    .next()
                    .ok_or_else(|| Error::format(&pstr, line_no, "tensor line missing name"))?
                    .to_string();
                let shape: Vec<usize> = fields
                    .map(|t| {
                        t.parse().map_err(|_| {
                            Error::format(&pstr, line_no, format!("bad shape value `{t}`"))
                        })
                    })
                    .collect::<Result<_>>()?;
                if shape.is_empty() {
                    return Err(Error::format(&pstr, line_no, "tensor line missing shape"));
                }
                pending = Some((name, shape, line_no));
            }
            Some((name, shape, _)) => {
                let mut p = LineParser::new(&pstr, line_no, raw);
                let n: usize = shape.iter().product();
                let values = p.take_f64s(n, &name)?;
                p.finish()?;
                params.insert(&name, Tensor::from_vec(&shape, values).unwrap());
            }
        }
    }
    if let Some((name, _, line_no)) = pending {
        return Err(Error::format(
            &pstr,
            line_no,
            format!("tensor `{name}` has no value line"),
        ));
    }
    Ok((
        net_name,
        FeatureDims {
            feat2d,
            feat3d_channels,
        },
        params,
    ))
}

// ---------------------------------------------------------------------------
// Training telemetry
// ---------------------------------------------------------------------------

/// One telemetry record per epoch. `metric` is the stage-1 pair AUC, the
/// stage-2 contrastive-margin satisfaction fraction, or the init-classifier
/// accuracy, depending on `stage`.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRecord {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub metric: f64,
}

pub fn write_telemetry(path: &Path, records: &[TelemetryRecord]) -> Result<()> {
    let mut out = String::new();
    out.push_str(TELEMETRY_MAGIC);
    out.push('\n');
    out.push_str("# stage epoch loss metric\n");
    for r in records {
        let _ = writeln!(out, "{} {} {} {}", r.stage, r.epoch, r.loss, r.metric);
    }
    write_atomic(path, &out)
}

pub fn read_telemetry(path: &Path) -> Result<Vec<TelemetryRecord>> {
    let content = read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut lines = data_lines(&content);
    expect_magic(&pstr, &mut lines, TELEMETRY_MAGIC)?;
    let mut out = Vec::new();
    for (line_no, raw) in lines {
        let mut p = LineParser::new(&pstr, line_no, raw);
        let stage: String = p.next("stage")?;
        let epoch: usize = p.next("epoch")?;
        let loss: f64 = p.next("loss")?;
        let metric: f64 = p.next("metric")?;
        p.finish()?;
        out.push(TelemetryRecord {
            stage,
            epoch,
            loss,
            metric,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Metrics report
// ---------------------------------------------------------------------------

pub use crate::metrics::{ClassReport, MetricsReport};

pub fn write_metrics_report(path: &Path, report: &MetricsReport) -> Result<()> {
    write_atomic(path, &render_metrics_report(report))
}

pub fn render_metrics_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(METRICS_MAGIC);
    out.push('\n');
    for (class_id, cr) in &report.per_class {
        let _ = writeln!(
            out,
            "class {class_id} amota {} mota {} gt {} tp {} fp {} fn {} ids {}",
            cr.amota,
            cr.mota,
            cr.counts.gt_positives,
            cr.counts.true_positives,
            cr.counts.false_positives,
            cr.counts.false_negatives,
            cr.counts.id_switches
        );
        for pt in &cr.recall_points {
            let _ = writeln!(
                out,
                "class {class_id} recall {} threshold {} motar {}",
                pt.recall, pt.threshold, pt.motar
            );
        }
    }
    let _ = writeln!(
        out,
        "overall amota {} mota {}",
        report.overall_amota, report.overall_mota
    );
    out
}

/// Pull the `overall ...` summary line out of a metrics report file.
pub fn read_metrics_summary(path: &Path) -> Result<String> {
    let content = read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut lines = data_lines(&content);
    expect_magic(&pstr, &mut lines, METRICS_MAGIC)?;
    for (_, raw) in lines {
        if raw.starts_with("overall ") {
            return Ok(raw.to_string());
        }
    }
    Err(Error::format(&pstr, 0, "no overall line in metrics report"))
}

// ---------------------------------------------------------------------------
// Scenario convenience wrappers
// ---------------------------------------------------------------------------

/// Write a simulated scenario as a detection file and a ground-truth file
/// sharing one stem: `<stem>.det` and `<stem>.gt`.
pub fn write_scenario(dir: &Path, stem: &str, scenario: &crate::simlab::Scenario) -> Result<()> {
    let det = DetectionSet {
        frame_interval: scenario.frame_interval,
        dims: scenario.dims,
        frames: scenario.detections_per_frame(),
    };
    let gt = GtSet {
        frame_interval: scenario.frame_interval,
        frames: scenario.gt_per_frame(),
    };
    write_detections(&dir.join(format!("{stem}.det")), &det)?;
    write_gt(&dir.join(format!("{stem}.gt")), &gt)?;
    Ok(())
}

/// All `<stem>.det` / `<stem>.gt` pairs in a directory, sorted by stem.
pub fn scenario_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("det") {
            let gt = path.with_extension("gt");
            if gt.exists() {
                stems.push((path, gt));
            }
        }
    }
    stems.sort();
    Ok(stems)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simlab::{self, ScenarioConfig};
    use crate::types::BoxState;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("fusetrack-io-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn detection_round_trip_is_exact() {
        let dir = tmp_dir("det");
        let sc = simlab::generate(&ScenarioConfig {
            clutter_rate: 1.0,
            ..Default::default()
        })
        .unwrap();
        let set = DetectionSet {
            frame_interval: sc.frame_interval,
            dims: sc.dims,
            frames: sc.detections_per_frame(),
        };
        let path = dir.join("round.det");
        write_detections(&path, &set).unwrap();
        let back = read_detections(&path).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn gt_round_trip_is_exact() {
        let dir = tmp_dir("gt");
        let sc = simlab::generate(&ScenarioConfig::default()).unwrap();
        let set = GtSet {
            frame_interval: sc.frame_interval,
            frames: sc.gt_per_frame(),
        };
        let path = dir.join("round.gt");
        write_gt(&path, &set).unwrap();
        assert_eq!(read_gt(&path).unwrap(), set);
    }

    #[test]
    fn box_state_round_trips_bit_exact_through_gt_file() {
        // random states with awkward decimals survive the text format
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let states: Vec<StateVec> = (0..20)
            .map(|_| {
                let mut v = StateVec::from_fn(|_, _| {
                    rand::Rng::random_range(&mut rng, -100.0..100.0) / 7.0
                });
                v[3] = crate::linalg::wrap(v[3]);
                for i in 4..7 {
                    v[i] = v[i].abs().max(0.1);
                }
                v
            })
            .collect();
        let set = GtSet {
            frame_interval: 0.5,
            frames: vec![states
                .iter()
                .enumerate()
                .map(|(i, s)| GtBox {
                    identity: i as u64,
                    class_id: 0,
                    state: *s,
                })
                .collect()],
        };
        let dir = tmp_dir("bitexact");
        let path = dir.join("states.gt");
        write_gt(&path, &set).unwrap();
        let back = read_gt(&path).unwrap();
        for (orig, read) in set.frames[0].iter().zip(&back.frames[0]) {
            let a = BoxState::from_vector_clamped(orig.state);
            let b = BoxState::from_vector_clamped(read.state);
            assert_eq!(a, b);
            assert_eq!(orig.state, read.state);
        }
    }

    #[test]
    fn empty_body_with_header_is_empty_collection() {
        let dir = tmp_dir("empty");
        let path = dir.join("empty.trk");
        write_tracks(&path, &[]).unwrap();
        assert!(read_tracks(&path).unwrap().is_empty());
    }

    #[test]
    fn short_state_line_is_error_with_line_number() {
        let dir = tmp_dir("badline");
        let path = dir.join("bad.trk");
        let content = format!(
            "{TRK_MAGIC}\n0 1 0 1.0 2.0 3.0 0.1 4.0 2.0 1.5 0.0 0.0 0.0\n" // 10 state values
        );
        std::fs::write(&path, content).unwrap();
        let err = read_tracks(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:"), "{msg}");
    }

    #[test]
    fn duplicate_frame_id_rejected() {
        let dir = tmp_dir("dup");
        let path = dir.join("dup.trk");
        let row = "0 1 0 1 2 3 0.1 4 2 1.5 0 0 0 0 0.9";
        std::fs::write(&path, format!("{TRK_MAGIC}\n{row}\n{row}\n")).unwrap();
        assert!(read_tracks(&path).is_err());
    }

    #[test]
    fn nonmonotone_frames_rejected() {
        let dir = tmp_dir("order");
        let path = dir.join("order.gt");
        let content = format!(
            "{GT_MAGIC}\nframe_interval 0.5\n1 1 0 0 0 0 0 1 1 1 0 0 0 0\n0 1 0 0 0 0 0 1 1 1 0 0 0 0\n"
        );
        std::fs::write(&path, content).unwrap();
        assert!(read_gt(&path).is_err());
    }

    #[test]
    fn noise_round_trip_is_exact() {
        let dir = tmp_dir("noise");
        let mut suite = NoiseSuite::default();
        suite.classes.insert(
            0,
            ClassNoise {
                q_diag: [0.1, 0.2, 0.3, 0.04, 0.0, 1e-9, 0.25, 0.5, 0.5, 0.01, 0.02],
                r_diag: [0.25; OBS_DIM],
            },
        );
        suite.classes.insert(
            3,
            ClassNoise {
                q_diag: [1.0 / 3.0; STATE_DIM],
                r_diag: [2.0 / 7.0; OBS_DIM],
            },
        );
        let path = dir.join("noise.toml");
        write_noise(&path, &suite).unwrap();
        assert_eq!(read_noise(&path).unwrap(), suite);
    }

    #[test]
    fn run_config_defaults_round_trip() {
        let dir = tmp_dir("cfg");
        let path = dir.join("run.toml");
        let config = RunConfig::default();
        write_run_config(&path, &config).unwrap();
        let back = read_run_config(&path).unwrap();
        assert_eq!(back, config);
        assert_eq!(back.gate, 11.0);
        assert_eq!(back.loss.t, 11.0);
        assert_eq!(back.loss.c_contr, 6.0);
        assert_eq!(back.loss.c_pos, 3.0);
        assert_eq!(back.loss.c_neg, 3.0);
        assert_eq!(back.train.lr, 1e-3);
        assert_eq!(back.train.epochs, 10);
    }

    #[test]
    fn empty_config_uses_defaults() {
        let dir = tmp_dir("cfg-empty");
        let path = dir.join("empty.toml");
        std::fs::write(&path, "").unwrap();
        let config = read_run_config(&path).unwrap();
        assert_eq!(config, RunConfig::default());
    }

    #[test]
    fn init_policy_strings_parse() {
        assert_eq!(parse_init_mode("always", 0.5).unwrap(), InitMode::Always);
        assert_eq!(
            parse_init_mode("learned", 0.5).unwrap(),
            InitMode::Learned { threshold: 0.5 }
        );
        assert_eq!(
            parse_init_mode("count:2", 0.5).unwrap(),
            InitMode::CountBased { k: 2 }
        );
        assert!(parse_init_mode("sometimes", 0.5).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tmp_dir("ckpt");
        let net = crate::nn::Network::new(vec![
            crate::nn::LayerSpec::conv3x3("conv", 4, 8),
            crate::nn::LayerSpec::Relu,
            crate::nn::LayerSpec::dense("head", 8, 2),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let params = net.init_params(&mut rng);
        let dims = FeatureDims {
            feat2d: 16,
            feat3d_channels: 2,
        };
        let path = dir.join("g3.ckpt");
        write_checkpoint(&path, "g3", &dims, &params).unwrap();
        let (name, rdims, rparams) = read_checkpoint(&path).unwrap();
        assert_eq!(name, "g3");
        assert_eq!(rdims, dims);
        assert_eq!(rparams.len(), params.len());
        for (pname, p) in params.iter() {
            let rp = rparams.get(pname).unwrap();
            assert_eq!(rp.value, p.value);
        }
    }

    #[test]
    fn telemetry_round_trip() {
        let dir = tmp_dir("tele");
        let records = vec![
            TelemetryRecord {
                stage: "1".into(),
                epoch: 0,
                loss: 0.6931,
                metric: 0.5,
            },
            TelemetryRecord {
                stage: "init".into(),
                epoch: 9,
                loss: 0.01,
                metric: 0.99,
            },
        ];
        let path = dir.join("telemetry.txt");
        write_telemetry(&path, &records).unwrap();
        assert_eq!(read_telemetry(&path).unwrap(), records);
    }
}
