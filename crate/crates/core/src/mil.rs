//! Multiple-instance bags and log-sum-exp pooling.

use crate::datakit::{ClipRecord, FRAME_RATE_HZ};
use crate::embeddings::{encode_video_snippet, Embedding, Encoder, FrameWindow};
use crate::error::{Result, VlaadError};

pub const DEFAULT_GAMMA: f64 = 10.0;
pub const DEFAULT_SNIPPET_LEN: usize = 8;
pub const DEFAULT_STRIDE: usize = 8;

/// One clip as an ordered sequence of snippet embeddings with a
/// clip-level label only.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub clip_id: String,
    pub snippets: Vec<Embedding>,
    pub start_times: Vec<f64>,
    pub label: bool,
}

impl Bag {
    pub fn new(
        clip_id: impl Into<String>,
        snippets: Vec<Embedding>,
        start_times: Vec<f64>,
        label: bool,
    ) -> Result<Self> {
        if snippets.is_empty() {
            return Err(VlaadError::Empty("bag"));
        }
        if snippets.len() != start_times.len() {
            return Err(VlaadError::invalid("one start time per snippet required"));
        }
        if start_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(VlaadError::invalid("snippet start times must increase"));
        }
        let d = snippets[0].dim();
        if let Some(bad) = snippets.iter().find(|e| e.dim() != d) {
            return Err(VlaadError::DimensionMismatch {
                expected: d,
                actual: bad.dim(),
            });
        }
        Ok(Self {
            clip_id: clip_id.into(),
            snippets,
            start_times,
            label,
        })
    }

    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }
}

/// Per-snippet logits for one clip together with their pooled value.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskTrace {
    pub clip_id: String,
    pub logits: Vec<f64>,
    pub pooled: f64,
    pub probability: f64,
    pub gamma: f64,
}

impl RiskTrace {
    pub fn attention(&self) -> Vec<f64> {
        pooling_attention(&self.logits, self.gamma).expect("trace was pooled with valid inputs")
    }
}

/// Number of snippets produced by a sliding layout over `frames` frames.
pub fn snippet_count(frames: usize, snippet_len: usize, stride: usize) -> Result<usize> {
    if snippet_len == 0 || stride == 0 {
        return Err(VlaadError::invalid("snippet length and stride must be >= 1"));
    }
    if frames < snippet_len {
        return Err(VlaadError::invalid(format!(
            "clip has {frames} frames, shorter than snippet length {snippet_len}"
        )));
    }
    Ok((frames - snippet_len) / stride + 1)
}

/// Splits a clip into snippets and encodes each one.
pub fn segment_clip(
    clip: &ClipRecord,
    snippet_len: usize,
    stride: usize,
    encoder: &dyn Encoder,
) -> Result<Bag> {
    let frames = clip.feature_matrix()?;
    let t = snippet_count(frames.rows(), snippet_len, stride)?;
    let mut snippets = Vec::with_capacity(t);
    let mut starts = Vec::with_capacity(t);
    for s in 0..t {
        let first = s * stride;
        let rows: Vec<Vec<f64>> = (first..first + snippet_len).map(|r| frames.row_f64(r)).collect();
        let ts: Vec<f64> = (first..first + snippet_len)
            .map(|r| r as f64 / FRAME_RATE_HZ)
            .collect();
        let window = FrameWindow::new(rows, ts)?.with_key(format!("{}:{s}", clip.clip_id));
        snippets.push(encode_video_snippet(&window, encoder)?);
        starts.push(first as f64 / FRAME_RATE_HZ);
    }
    Bag::new(clip.clip_id.clone(), snippets, starts, clip.label)
}

/// Encodes a whole clip as a single-snippet bag (clip-level mode).
pub fn clip_level_bag(clip: &ClipRecord, encoder: &dyn Encoder) -> Result<Bag> {
    let frames = clip.feature_matrix()?;
    segment_clip(clip, frames.rows(), frames.rows().max(1), encoder)
}

fn check_pool_inputs(z: &[f64], gamma: f64) -> Result<()> {
    if z.is_empty() {
        return Err(VlaadError::Empty("logit sequence"));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(VlaadError::invalid(format!("gamma must be positive, got {gamma}")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(VlaadError::NonFinite("logits"));
    }
    Ok(())
}

/// Temperature-controlled log-sum-exp pooling,
/// `(1/gamma) * (log sum_t exp(gamma z_t) - log T)`, evaluated with a max shift.
pub fn lse_pool(z: &[f64], gamma: f64) -> Result<f64> {
    check_pool_inputs(z, gamma)?;
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|&v| (gamma * (v - m)).exp()).sum();
    let pooled = m + (s.ln() - (z.len() as f64).ln()) / gamma;
    // Rounding can push the result a hair outside [mean, max].
    Ok(pooled.min(m))
}

/// Softmax of `gamma * z`: the exact gradient of [`lse_pool`] with respect to `z`.
pub fn pooling_attention(z: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_pool_inputs(z, gamma)?;
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = z.iter().map(|&v| (gamma * (v - m)).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / s).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
