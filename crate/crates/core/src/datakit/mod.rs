//! Clip records, the JSON Lines manifest, and the dataset pipelines that
//! produce them.

mod assemble;
mod caption;
mod synth;

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, VlaadError};

pub use assemble::{assemble_clips, augment_collision_position, AssemblyReport, FrameStream, SkippedInfraction};
pub use caption::{
    contains_drive, Captioner, ClientError, HttpSummarizer, NormalCaption, StubSummarizer, SummarizerClient,
    DEFAULT_MODELS, PARAPHRASE_TEMPLATE, SUMMARIZE_TEMPLATE,
};
pub use synth::{generate_synthetic_dataset, SynthConfig, COLLISION_CAPTIONS, NORMAL_CAPTIONS};

/// Sampling rate of recorded clips.
pub const FRAME_RATE_HZ: f64 = 4.0;
/// Frames per assembled clip (10 s at 4 Hz).
pub const CLIP_FRAMES: usize = 40;
/// Allowed collision frames within an assembled clip: 2.5 s to 7.5 s.
pub const ASSEMBLY_WINDOW: (usize, usize) = (10, 30);
/// Allowed collision frames after augmentation: 0.1 to 0.9 of the clip.
pub const AUGMENT_WINDOW: (usize, usize) = (4, 36);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfractionType {
    Vehicle,
    Pedestrian,
    Layout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfractionLog {
    pub frame_number: u64,
    #[serde(rename = "type")]
    pub infraction_type: InfractionType,
    pub message: String,
    #[serde(rename = "scenario")]
    pub scenario_type: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipSource {
    Assembled,
    Augmented,
    Synthetic,
    External,
}

/// Row-major `rows x cols` matrix of per-frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if cols == 0 || rows == 0 {
            return Err(VlaadError::Empty("feature matrix"));
        }
        if data.len() != rows * cols {
            return Err(VlaadError::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(VlaadError::NonFinite("frame features"));
        }
        Ok(Self { cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(VlaadError::DimensionMismatch {
                expected: cols,
                actual: bad.len(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_f64(&self, r: usize) -> Vec<f64> {
        self.row(r).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.write_f32::<LittleEndian>(*v).expect("vec write");
        }
        out
    }

    fn from_le_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != rows * cols * 4 {
            return Err(VlaadError::Format(format!(
                "frame data has {} bytes, expected {}",
                bytes.len(),
                rows * cols * 4
            )));
        }
        let mut data = vec![0f32; rows * cols];
        bytes
            .as_ref()
            .read_f32_into::<LittleEndian>(&mut data)
            .map_err(|e| VlaadError::Format(e.to_string()))?;
        Self::new(rows, cols, data)
    }

    /// Frame file layout: rows u32, cols u32, then f32 values, little-endian.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.write_u32::<LittleEndian>(self.rows() as u32)?;
        buf.write_u32::<LittleEndian>(self.cols as u32)?;
        buf.extend(self.to_le_bytes());
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path)?;
        let rows = f.read_u32::<LittleEndian>()? as usize;
        let cols = f.read_u32::<LittleEndian>()? as usize;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::from_le_bytes(rows, cols, &bytes)
    }
}

/// Frame features either stored inline or referenced by path.
#[derive(Debug, Clone, PartialEq)]
pub enum Frames {
    Inline(FeatureMatrix),
    Path(String),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FramesRepr {
    Path(String),
    Inline { rows: usize, cols: usize, f32le: String },
}

impl Serialize for Frames {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Frames::Path(p) => FramesRepr::Path(p.clone()),
            Frames::Inline(m) => FramesRepr::Inline {
                rows: m.rows(),
                cols: m.cols(),
                f32le: B64.encode(m.to_le_bytes()),
            },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Frames {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        match FramesRepr::deserialize(d)? {
            FramesRepr::Path(p) => Ok(Frames::Path(p)),
            FramesRepr::Inline { rows, cols, f32le } => {
                let bytes = B64.decode(f32le).map_err(D::Error::custom)?;
                FeatureMatrix::from_le_bytes(rows, cols, &bytes)
                    .map(Frames::Inline)
                    .map_err(D::Error::custom)
            }
        }
    }
}

mod label01 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub clip_id: String,
    pub frames: Frames,
    pub caption: String,
    #[serde(with = "label01")]
    pub label: bool,
    pub collision_frame: Option<usize>,
    pub infraction: Option<InfractionLog>,
    pub split: Split,
    pub source: ClipSource,
    /// Ground-truth event snippets `[start, end)`, known for synthetic clips.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_window: Option<[usize; 2]>,
}

impl ClipRecord {
    pub fn feature_matrix(&self) -> Result<&FeatureMatrix> {
        match &self.frames {
            Frames::Inline(m) => Ok(m),
            Frames::Path(p) => Err(VlaadError::invalid(format!(
                "clip {} references frames at '{p}' that were not loaded",
                self.clip_id
            ))),
        }
    }

    /// Loads path-referenced frames, relative paths resolved against `base`.
    pub fn resolve_frames(&mut self, base: &Path) -> Result<()> {
        if let Frames::Path(p) = &self.frames {
            let m = FeatureMatrix::read_file(&base.join(p))?;
            self.frames = Frames::Inline(m);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(VlaadError::invalid(format!("clip {}: {msg}", self.clip_id)));
        if self.clip_id.is_empty() {
            return Err(VlaadError::invalid("clip_id must be non-empty"));
        }
        if self.label != self.collision_frame.is_some() {
            return bad("label must be 1 exactly when collision_frame is present".into());
        }
        let rows = match &self.frames {
            Frames::Inline(m) => Some(m.rows()),
            Frames::Path(_) => None,
        };
        if let (Some(rows), Some(k)) = (rows, self.collision_frame) {
            if k >= rows {
                return bad(format!("collision_frame {k} outside {rows} frames"));
            }
        }
        match self.source {
            ClipSource::Assembled | ClipSource::Augmented => {
                if let Some(r) = rows {
                    if r != CLIP_FRAMES {
                        return bad(format!("assembled clips have {CLIP_FRAMES} frames, found {r}"));
                    }
                }
                let (lo, hi) = if self.source == ClipSource::Assembled {
                    ASSEMBLY_WINDOW
                } else {
                    AUGMENT_WINDOW
                };
                if let Some(k) = self.collision_frame {
                    if k < lo || k > hi {
                        return bad(format!("collision_frame {k} outside [{lo}, {hi}]"));
                    }
                }
            }
            ClipSource::Synthetic | ClipSource::External => {}
        }
        if let Some([a, b]) = self.event_window {
            if a >= b {
                return bad("empty event window".into());
            }
        }
        Ok(())
    }

    pub fn duration_s(&self) -> Result<f64> {
        Ok(self.feature_matrix()?.rows() as f64 / FRAME_RATE_HZ)
    }
}

/// Writes records as JSON Lines, validating each one and rejecting
/// duplicate ids.
pub fn write_manifest<W: Write>(mut w: W, records: &[ClipRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        r.validate()?;
        if !seen.insert(r.clip_id.as_str()) {
            return Err(VlaadError::invalid(format!("duplicate clip_id {}", r.clip_id)));
        }
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<ClipRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClipRecord = serde_json::from_str(&line)
            .map_err(|e| VlaadError::Format(format!("manifest line {}: {e}", i + 1)))?;
        rec.validate()
            .map_err(|e| VlaadError::Format(format!("manifest line {}: {e}", i + 1)))?;
        if !seen.insert(rec.clip_id.clone()) {
            return Err(VlaadError::Format(format!(
                "manifest line {}: duplicate clip_id {}",
                i + 1,
                rec.clip_id
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    let f = fs::File::open(path)?;
    let mut records = read_manifest(std::io::BufReader::new(f))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for r in &mut records {
        r.resolve_frames(base)?;
        r.validate()?;
    }
    Ok(records)
}
