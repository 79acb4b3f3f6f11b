//! Data pipeline: CSV recordings in, labeled fixed-length windows out.
//!
//! A recording is a time-ordered sequence of tri-axial accelerometer samples,
//! each point-labeled fall / non-fall. The pipeline slices recordings into
//! overlapping windows, labels a window as a fall when enough of its points
//! are fall-labeled, rebalances the (heavily skewed) class distribution by
//! downsampling the majority class, and carves out a stratified validation
//! split. Prepared splits are saved to a compact binary artifact plus a JSON
//! manifest so training never has to re-run ingestion.
//!
//! Windows never cross recording boundaries, and every random choice flows
//! from a caller-provided seeded [`Rng`], so the same inputs and seed always
//! produce byte-identical artifacts.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{source_id}:{line}: {msg}")]
    Csv {
        source_id: String,
        line: u64,
        msg: String,
    },
    #[error("{source_id}: column {column:?} not found in header")]
    ColumnNotFound { source_id: String, column: String },
    #[error("csv schema invalid: {reason}")]
    Schema { reason: String },
    #[error("window config invalid: {reason}")]
    WindowConfig { reason: String },
    #[error("segment {segment}, sample {index}: no point label; windowing requires labeled samples")]
    UnlabeledSample { segment: String, index: usize },
    #[error("class balancing requires both classes, but {label} is absent")]
    MissingClass { label: Label },
    #[error("cannot split {len} instances into nonempty train and validation parts")]
    SplitTooSmall { len: usize },
    #[error("validation fraction must be in (0, 1), got {fraction}")]
    InvalidFraction { fraction: f64 },
    #[error("cannot compute normalization statistics from an empty instance set")]
    EmptyInstanceSet,
    #[error("dataset artifact {path}: {reason}")]
    Artifact { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Core data types
// ---------------------------------------------------------------------------

/// Window / point class. Class index 0 is non-fall, 1 is fall; the fall
/// class is the positive class everywhere (metrics, alerts, probabilities).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NonFall,
    Fall,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::NonFall => 0,
            Label::Fall => 1,
        }
    }

    pub fn from_class_index(index: usize) -> Option<Label> {
        match index {
            0 => Some(Label::NonFall),
            1 => Some(Label::Fall),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::NonFall => "non_fall",
            Label::Fall => "fall",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One accelerometer reading. `t` is seconds and optional (some corpora ship
/// no clock column; the replay tool synthesizes one from the sample rate).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: Option<f64>,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
    pub point_label: Option<Label>,
}

impl Sample {
    pub fn values(&self) -> [f64; 3] {
        [self.ax, self.ay, self.az]
    }
}

/// A contiguous recording. Windows are cut inside a segment only.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub segment_id: String,
    pub samples: Vec<Sample>,
}

/// One classifier input: `window_size` consecutive samples plus the derived
/// window label and enough provenance to trace it back to its recording.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowInstance {
    pub values: Vec<[f64; 3]>,
    pub label: Label,
    pub source_segment: String,
    pub start: usize,
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// A column reference: by header name or by zero-based position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CsvColumn {
    Name(String),
    Index(usize),
}

impl CsvColumn {
    fn describe(&self) -> String {
        match self {
            CsvColumn::Name(n) => n.clone(),
            CsvColumn::Index(i) => format!("#{i}"),
        }
    }
}

/// How to read one CSV flavor. Datasets differ in delimiters, header
/// presence, column names, and label token spellings, so all of that is
/// data, not code.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub delimiter: u8,
    pub has_header: bool,
    pub t: Option<CsvColumn>,
    pub ax: CsvColumn,
    pub ay: CsvColumn,
    pub az: CsvColumn,
    pub label: Option<CsvColumn>,
    /// Optional column whose value change marks a new segment.
    pub segment: Option<CsvColumn>,
    /// Ordered token -> label map, compared after trimming whitespace.
    pub label_tokens: Vec<(String, Label)>,
}

impl Default for CsvSchema {
    fn default() -> CsvSchema {
        CsvSchema {
            delimiter: b',',
            has_header: true,
            t: Some(CsvColumn::Name("t".into())),
            ax: CsvColumn::Name("ax".into()),
            ay: CsvColumn::Name("ay".into()),
            az: CsvColumn::Name("az".into()),
            label: Some(CsvColumn::Name("label".into())),
            segment: None,
            label_tokens: vec![("0".into(), Label::NonFall), ("1".into(), Label::Fall)],
        }
    }
}

impl CsvSchema {
    pub fn validate(&self) -> Result<(), DataError> {
        let mut named = vec![&self.ax, &self.ay, &self.az];
        named.extend(self.t.iter());
        named.extend(self.label.iter());
        named.extend(self.segment.iter());
        if !self.has_header && named.iter().any(|c| matches!(c, CsvColumn::Name(_))) {
            return Err(DataError::Schema {
                reason: "name-based columns require a header row".into(),
            });
        }
        let axes = [&self.ax, &self.ay, &self.az];
        for i in 0..axes.len() {
            for j in i + 1..axes.len() {
                if axes[i] == axes[j] {
                    return Err(DataError::Schema {
                        reason: format!(
                            "acceleration columns must be distinct, {} appears twice",
                            axes[i].describe()
                        ),
                    });
                }
            }
        }
        if self.label.is_some() && self.label_tokens.is_empty() {
            return Err(DataError::Schema {
                reason: "a label column needs at least one label token mapping".into(),
            });
        }
        Ok(())
    }

    fn lookup_label(&self, token: &str) -> Option<Label> {
        self.label_tokens
            .iter()
            .find(|(t, _)| t == token)
            .map(|(_, l)| *l)
    }
}

fn resolve_column(
    col: &CsvColumn,
    headers: Option<&csv::StringRecord>,
    source_id: &str,
) -> Result<usize, DataError> {
    match col {
        CsvColumn::Index(i) => Ok(*i),
        CsvColumn::Name(name) => headers
            .and_then(|h| h.iter().position(|field| field.trim() == name))
            .ok_or_else(|| DataError::ColumnNotFound {
                source_id: source_id.to_string(),
                column: name.clone(),
            }),
    }
}

fn field<'r>(
    record: &'r csv::StringRecord,
    idx: usize,
    what: &str,
    source_id: &str,
    line: u64,
) -> Result<&'r str, DataError> {
    record.get(idx).map(str::trim).ok_or_else(|| DataError::Csv {
        source_id: source_id.to_string(),
        line,
        msg: format!("row has {} fields, {what} column #{idx} is missing", record.len()),
    })
}

fn parse_float(cell: &str, what: &str, source_id: &str, line: u64) -> Result<f64, DataError> {
    let v: f64 = cell.parse().map_err(|_| DataError::Csv {
        source_id: source_id.to_string(),
        line,
        msg: format!("{what} value {cell:?} is not a number"),
    })?;
    if !v.is_finite() {
        return Err(DataError::Csv {
            source_id: source_id.to_string(),
            line,
            msg: format!("{what} value {cell:?} is not finite"),
        });
    }
    Ok(v)
}

/// Parse one CSV source into segments.
///
/// Without a segment-marker column the whole file is one segment named
/// `source_id`. With one, a change in the marker value starts a new segment
/// named `source_id#<n>`. Errors carry the source id and 1-based line number.
pub fn parse_csv<R: Read>(
    reader: R,
    source_id: &str,
    schema: &CsvSchema,
) -> Result<Vec<Segment>, DataError> {
    schema.validate()?;
    let mut csv_reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(schema.has_header)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = if schema.has_header {
        Some(csv_reader.headers().map_err(|e| DataError::Csv {
            source_id: source_id.to_string(),
            line: 1,
            msg: e.to_string(),
        })?.clone())
    } else {
        None
    };
    let h = headers.as_ref();

    let col_ax = resolve_column(&schema.ax, h, source_id)?;
    let col_ay = resolve_column(&schema.ay, h, source_id)?;
    let col_az = resolve_column(&schema.az, h, source_id)?;
    let col_t = schema.t.as_ref().map(|c| resolve_column(c, h, source_id)).transpose()?;
    let col_label = schema.label.as_ref().map(|c| resolve_column(c, h, source_id)).transpose()?;
    let col_segment = schema.segment.as_ref().map(|c| resolve_column(c, h, source_id)).transpose()?;

    let mut segments: Vec<Segment> = Vec::new();
    let mut current: Vec<Sample> = Vec::new();
    let mut current_marker: Option<String> = None;
    let mut seq = 0usize;

    let mut flush = |samples: &mut Vec<Sample>, seq: &mut usize| {
        if !samples.is_empty() {
            let segment_id = if col_segment.is_some() {
                format!("{source_id}#{seq}")
            } else {
                source_id.to_string()
            };
            segments.push(Segment {
                segment_id,
                samples: std::mem::take(samples),
            });
            *seq += 1;
        }
    };

    for result in csv_reader.records() {
        let record = result.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            DataError::Csv {
                source_id: source_id.to_string(),
                line,
                msg: e.to_string(),
            }
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);

        if let Some(ci) = col_segment {
            let marker = field(&record, ci, "segment", source_id, line)?.to_string();
            if current_marker.as_deref() != Some(marker.as_str()) {
                flush(&mut current, &mut seq);
                current_marker = Some(marker);
            }
        }

        let ax = parse_float(field(&record, col_ax, "ax", source_id, line)?, "ax", source_id, line)?;
        let ay = parse_float(field(&record, col_ay, "ay", source_id, line)?, "ay", source_id, line)?;
        let az = parse_float(field(&record, col_az, "az", source_id, line)?, "az", source_id, line)?;
        let t = match col_t {
            Some(ci) => Some(parse_float(
                field(&record, ci, "t", source_id, line)?,
                "t",
                source_id,
                line,
            )?),
            None => None,
        };
        let point_label = match col_label {
            Some(ci) => {
                let token = field(&record, ci, "label", source_id, line)?;
                Some(schema.lookup_label(token).ok_or_else(|| DataError::Csv {
                    source_id: source_id.to_string(),
                    line,
                    msg: format!("unknown label token {token:?}"),
                })?)
            }
            None => None,
        };

        current.push(Sample { t, ax, ay, az, point_label });
    }
    flush(&mut current, &mut seq);

    Ok(segments)
}

// ---------------------------------------------------------------------------
// Windowing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window_size: usize,
    /// A window is labeled fall when at least this many of its points are.
    pub fall_point_threshold: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> WindowConfig {
        WindowConfig {
            window_size: 40,
            fall_point_threshold: 25,
            stride: 1,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.window_size == 0 {
            return Err(DataError::WindowConfig {
                reason: "window_size must be at least 1".into(),
            });
        }
        if self.stride == 0 {
            return Err(DataError::WindowConfig {
                reason: "stride must be at least 1".into(),
            });
        }
        if self.fall_point_threshold == 0 || self.fall_point_threshold > self.window_size {
            return Err(DataError::WindowConfig {
                reason: format!(
                    "fall_point_threshold must be in 1..={}, got {}",
                    self.window_size, self.fall_point_threshold
                ),
            });
        }
        Ok(())
    }
}

/// Slide a window across one segment.
///
/// Start indices are 0, stride, 2*stride, ... up to and including
/// `len - window_size - 1`; a segment shorter than `window_size + 1` yields
/// no windows. Every sample must carry a point label.
pub fn make_windows(segment: &Segment, cfg: &WindowConfig) -> Result<Vec<WindowInstance>, DataError> {
    cfg.validate()?;
    if let Some(idx) = segment.samples.iter().position(|s| s.point_label.is_none()) {
        return Err(DataError::UnlabeledSample {
            segment: segment.segment_id.clone(),
            index: idx,
        });
    }
    let n = segment.samples.len();
    if n < cfg.window_size + 1 {
        return Ok(Vec::new());
    }
    let last_start = n - cfg.window_size - 1;
    let mut out = Vec::with_capacity(last_start / cfg.stride + 1);
    let mut start = 0;
    while start <= last_start {
        let window = &segment.samples[start..start + cfg.window_size];
        let fall_points = window
            .iter()
            .filter(|s| s.point_label == Some(Label::Fall))
            .count();
        let label = if fall_points >= cfg.fall_point_threshold {
            Label::Fall
        } else {
            Label::NonFall
        };
        out.push(WindowInstance {
            values: window.iter().map(Sample::values).collect(),
            label,
            source_segment: segment.segment_id.clone(),
            start,
        });
        start += cfg.stride;
    }
    Ok(out)
}

/// Windows for a batch of segments, in segment order then start order.
pub fn make_windows_all(
    segments: &[Segment],
    cfg: &WindowConfig,
) -> Result<Vec<WindowInstance>, DataError> {
    let mut out = Vec::new();
    for segment in segments {
        out.extend(make_windows(segment, cfg)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Balancing and splitting
// ---------------------------------------------------------------------------

pub fn count_labels(instances: &[WindowInstance]) -> (usize, usize) {
    let fall = instances.iter().filter(|i| i.label == Label::Fall).count();
    (fall, instances.len() - fall)
}

/// Downsample the majority class to the minority count, uniformly at random
/// without replacement, then shuffle the result. Both classes must be
/// present. Deterministic for a given input order and seed.
pub fn balance_downsample(
    instances: Vec<WindowInstance>,
    rng: &mut Rng,
) -> Result<Vec<WindowInstance>, DataError> {
    let (fall, non_fall) = count_labels(&instances);
    if fall == 0 {
        return Err(DataError::MissingClass { label: Label::Fall });
    }
    if non_fall == 0 {
        return Err(DataError::MissingClass { label: Label::NonFall });
    }

    let minority_label = if fall <= non_fall { Label::Fall } else { Label::NonFall };
    let keep_count = fall.min(non_fall);

    let mut majority_idx: Vec<usize> = Vec::new();
    let mut selected: Vec<usize> = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        if inst.label == minority_label {
            selected.push(i);
        } else {
            majority_idx.push(i);
        }
    }
    rng.shuffle(&mut majority_idx);
    selected.extend(majority_idx.into_iter().take(keep_count));
    rng.shuffle(&mut selected);

    let mut out = Vec::with_capacity(selected.len());
    for i in selected {
        out.push(instances[i].clone());
    }
    Ok(out)
}

/// Split instances into (train, validation) with |validation| =
/// round(fraction * n), allocated across classes by largest remainder so the
/// split is stratified. Whenever a class has at least two members, both
/// sides get at least one of them. Deterministic for a given seed.
pub fn split_validation(
    instances: Vec<WindowInstance>,
    fraction: f64,
    rng: &mut Rng,
) -> Result<(Vec<WindowInstance>, Vec<WindowInstance>), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidFraction { fraction });
    }
    let n = instances.len();
    if n < 2 {
        return Err(DataError::SplitTooSmall { len: n });
    }
    let total_val = ((fraction * n as f64).round() as usize).clamp(1, n - 1);

    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, inst) in instances.iter().enumerate() {
        by_class[inst.label.class_index()].push(i);
    }

    // Largest-remainder allocation of total_val across the two classes.
    let mut take = [0usize; 2];
    let mut remainder = [0f64; 2];
    for c in 0..2 {
        let ideal = fraction * by_class[c].len() as f64;
        take[c] = (ideal.floor() as usize).min(by_class[c].len());
        remainder[c] = ideal - ideal.floor();
    }
    let mut assigned: usize = take.iter().sum();
    while assigned < total_val {
        let order = if remainder[1] > remainder[0] { [1, 0] } else { [0, 1] };
        for c in order {
            if take[c] < by_class[c].len() {
                take[c] += 1;
                remainder[c] = -1.0; // spent; prefer the other class next round
                assigned += 1;
                break;
            }
        }
    }

    // Stratification repair: a class with >= 2 members should appear on both
    // sides. Shift one item between classes where the rounding left a side
    // empty; the donor checks keep the repair from re-creating the problem.
    for c in 0..2 {
        let o = 1 - c;
        let nc = by_class[c].len();
        if nc < 2 {
            continue;
        }
        if take[c] == 0 && (take[o] >= 2 || by_class[o].len() < 2) && take[o] >= 1 {
            take[o] -= 1;
            take[c] += 1;
        } else if take[c] == nc && take[o] < by_class[o].len() {
            take[c] -= 1;
            take[o] += 1;
        }
    }
    debug_assert_eq!(take[0] + take[1], total_val);

    let mut is_val = vec![false; n];
    for c in 0..2 {
        let mut idx = by_class[c].clone();
        rng.shuffle(&mut idx);
        for &i in idx.iter().take(take[c]) {
            is_val[i] = true;
        }
    }

    let mut train = Vec::with_capacity(n - total_val);
    let mut val = Vec::with_capacity(total_val);
    for (i, inst) in instances.into_iter().enumerate() {
        if is_val[i] {
            val.push(inst);
        } else {
            train.push(inst);
        }
    }
    Ok((train, val))
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-channel standardization parameters, learned on training data only and
/// stored with the model so the serving path applies the identical transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub enabled: bool,
}

impl NormStats {
    /// No-op stats for models trained without normalization.
    pub fn identity() -> NormStats {
        NormStats {
            mean: [0.0; 3],
            std: [1.0; 3],
            enabled: false,
        }
    }

    pub fn normalize(&self, v: [f64; 3]) -> [f64; 3] {
        if !self.enabled {
            return v;
        }
        [
            (v[0] - self.mean[0]) / self.std[0],
            (v[1] - self.mean[1]) / self.std[1],
            (v[2] - self.mean[2]) / self.std[2],
        ]
    }
}

/// Per-channel mean and population standard deviation over every sample of
/// every instance.
///
/// A channel whose spread is indistinguishable from rounding noise gets
/// std = 1 so normalization maps it near zero instead of exploding. The
/// comparison is relative to the mean because a constant channel rarely has
/// exactly zero variance in f64: three samples of 0.1 average to
/// 0.10000000000000002, leaving a variance of ~1e-34.
pub fn compute_norm_stats(instances: &[WindowInstance]) -> Result<NormStats, DataError> {
    if instances.is_empty() {
        return Err(DataError::EmptyInstanceSet);
    }
    let mut count = 0usize;
    let mut sum = [0f64; 3];
    for inst in instances {
        for v in &inst.values {
            for c in 0..3 {
                sum[c] += v[c];
            }
        }
        count += inst.values.len();
    }
    let n = count as f64;
    let mean = [sum[0] / n, sum[1] / n, sum[2] / n];

    let mut sq = [0f64; 3];
    for inst in instances {
        for v in &inst.values {
            for c in 0..3 {
                let d = v[c] - mean[c];
                sq[c] += d * d;
            }
        }
    }
    let mut std = [0f64; 3];
    for c in 0..3 {
        let s = (sq[c] / n).sqrt();
        std[c] = if s <= 1e-12 * mean[c].abs().max(1.0) { 1.0 } else { s };
    }
    Ok(NormStats {
        mean,
        std,
        enabled: true,
    })
}

// ---------------------------------------------------------------------------
// Dataset artifact
// ---------------------------------------------------------------------------

pub const DATASET_FORMAT_VERSION: u32 = 1;
const ARTIFACT_MAGIC: &[u8; 4] = b"FDWS";

/// A split loaded back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub window_size: usize,
    pub instances: Vec<WindowInstance>,
}

/// Write one split as a little-endian binary artifact. Raw (unnormalized)
/// values go to disk; normalization is the model's job so that offline and
/// streaming inference share one code path.
pub fn save_windows(
    path: &Path,
    instances: &[WindowInstance],
    window_size: usize,
) -> Result<(), DataError> {
    for inst in instances {
        if inst.values.len() != window_size {
            return Err(DataError::Artifact {
                path: path.display().to_string(),
                reason: format!(
                    "instance from {} has {} samples, expected {window_size}",
                    inst.source_segment,
                    inst.values.len()
                ),
            });
        }
    }

    // Segment-id string table, in first-appearance order.
    let mut seg_ids: Vec<&str> = Vec::new();
    let mut seg_index: BTreeMap<&str, u32> = BTreeMap::new();
    for inst in instances {
        let id = inst.source_segment.as_str();
        if !seg_index.contains_key(id) {
            seg_index.insert(id, seg_ids.len() as u32);
            seg_ids.push(id);
        }
    }

    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| io_err(path, e);

    w.write_all(ARTIFACT_MAGIC).map_err(io)?;
    w.write_all(&DATASET_FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(window_size as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(seg_ids.len() as u32).to_le_bytes()).map_err(io)?;
    for id in &seg_ids {
        let bytes = id.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
    }
    w.write_all(&(instances.len() as u64).to_le_bytes()).map_err(io)?;
    for inst in instances {
        w.write_all(&seg_index[inst.source_segment.as_str()].to_le_bytes()).map_err(io)?;
        w.write_all(&(inst.start as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&[inst.label.class_index() as u8]).map_err(io)?;
        for v in &inst.values {
            for c in 0..3 {
                w.write_all(&v[c].to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

struct ArtifactReader<'a, R: Read> {
    inner: R,
    path: &'a Path,
}

impl<'a, R: Read> ArtifactReader<'a, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], DataError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                DataError::Artifact {
                    path: self.path.display().to_string(),
                    reason: "file is truncated".into(),
                }
            } else {
                io_err(self.path, e)
            }
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn bad(&self, reason: impl Into<String>) -> DataError {
        DataError::Artifact {
            path: self.path.display().to_string(),
            reason: reason.into(),
        }
    }
}

pub fn load_windows(path: &Path) -> Result<WindowSet, DataError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = ArtifactReader {
        inner: BufReader::new(file),
        path,
    };

    let magic: [u8; 4] = r.bytes()?;
    if &magic != ARTIFACT_MAGIC {
        return Err(r.bad("bad magic; not a falldef dataset artifact"));
    }
    let version = r.u32()?;
    if version != DATASET_FORMAT_VERSION {
        return Err(r.bad(format!(
            "unsupported format version {version} (supported: {DATASET_FORMAT_VERSION})"
        )));
    }
    let window_size = r.u32()? as usize;
    if window_size == 0 {
        return Err(r.bad("window_size of zero"));
    }
    let seg_count = r.u32()? as usize;
    let mut seg_ids = Vec::with_capacity(seg_count.min(1 << 16));
    for _ in 0..seg_count {
        let len = r.u32()? as usize;
        if len > 1 << 20 {
            return Err(r.bad(format!("segment id length {len} is implausible")));
        }
        let mut buf = vec![0u8; len];
        r.inner.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
        let id = String::from_utf8(buf)
            .map_err(|_| r.bad("segment id is not valid UTF-8"))?;
        seg_ids.push(id);
    }

    let count = r.u64()? as usize;
    let mut instances = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        let seg = r.u32()? as usize;
        if seg >= seg_ids.len() {
            return Err(r.bad(format!(
                "segment index {seg} out of range ({} segments)",
                seg_ids.len()
            )));
        }
        let start = r.u64()? as usize;
        let label_byte = r.bytes::<1>()?[0];
        let label = Label::from_class_index(label_byte as usize)
            .ok_or_else(|| r.bad(format!("invalid label byte {label_byte}")))?;
        let mut values = Vec::with_capacity(window_size);
        for _ in 0..window_size {
            values.push([r.f64()?, r.f64()?, r.f64()?]);
        }
        instances.push(WindowInstance {
            values,
            label,
            source_segment: seg_ids[seg].clone(),
            start,
        });
    }

    Ok(WindowSet {
        window_size,
        instances,
    })
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub fall: usize,
    pub non_fall: usize,
}

impl SplitCounts {
    pub fn of(instances: &[WindowInstance]) -> SplitCounts {
        let (fall, non_fall) = count_labels(instances);
        SplitCounts { fall, non_fall }
    }

    pub fn total(&self) -> usize {
        self.fall + self.non_fall
    }
}

/// Sidecar JSON describing how a prepared dataset was produced: the full
/// resolved configuration, seed, sources, and per-split class counts.
/// Contains no timestamps, so identical runs produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub window: WindowConfig,
    pub seed: u64,
    pub validation_fraction: f64,
    pub balanced: bool,
    pub train_sources: Vec<String>,
    pub test_sources: Vec<String>,
    pub splits: BTreeMap<String, SplitCounts>,
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), DataError> {
    let mut json = serde_json::to_string_pretty(manifest).map_err(|e| DataError::Artifact {
        path: path.display().to_string(),
        reason: format!("manifest serialization failed: {e}"),
    })?;
    json.push('\n');
    std::fs::write(path, json).map_err(|e| io_err(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| DataError::Artifact {
        path: path.display().to_string(),
        reason: format!("manifest parse failed: {e}"),
    })
}
