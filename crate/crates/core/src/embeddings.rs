//! Video-snippet and caption encoders.
//!
//! The math core never links a pretrained backbone. Encoders are anything
//! implementing [`Encoder`]; the crate ships a seeded [`StubEncoder`] for
//! desk-scale work and a [`CachedEncoder`] that serves vectors produced by an
//! external model through the binary embedding cache.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::{Arc, RwLock};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VlaadError};

pub const DEFAULT_DIM: usize = 768;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Video,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub source: Source,
}

impl Embedding {
    pub fn new(values: Vec<f64>, source: Source) -> Result<Self> {
        if values.is_empty() {
            return Err(VlaadError::Empty("embedding"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VlaadError::NonFinite("embedding"));
        }
        Ok(Self { values, source })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

/// Ordered per-frame feature vectors with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWindow {
    frames: Vec<Vec<f64>>,
    timestamps: Vec<f64>,
    /// Lookup id used by cache-backed encoders.
    pub key: Option<String>,
}

impl FrameWindow {
    pub fn new(frames: Vec<Vec<f64>>, timestamps: Vec<f64>) -> Result<Self> {
        if frames.is_empty() {
            return Err(VlaadError::Empty("frame window"));
        }
        if frames.len() != timestamps.len() {
            return Err(VlaadError::invalid(format!(
                "{} frames but {} timestamps",
                frames.len(),
                timestamps.len()
            )));
        }
        let width = frames[0].len();
        if width == 0 {
            return Err(VlaadError::Empty("frame features"));
        }
        for f in &frames {
            if f.len() != width {
                return Err(VlaadError::DimensionMismatch {
                    expected: width,
                    actual: f.len(),
                });
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(VlaadError::NonFinite("frame features"));
            }
        }
        if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(VlaadError::invalid("timestamps must be strictly increasing"));
        }
        Ok(Self {
            frames,
            timestamps,
            key: None,
        })
    }

    pub fn with_key(mut self, key: impl Into<String>) -> Self {
        self.key = Some(key.into());
        self
    }

    pub fn check_capacity(&self, max_len: usize) -> Result<()> {
        if self.frames.len() > max_len {
            return Err(VlaadError::invalid(format!(
                "window holds {} frames, capacity is {max_len}",
                self.frames.len()
            )));
        }
        Ok(())
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames[0].len()
    }

    pub fn mean_frame(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.feature_dim()];
        for f in &self.frames {
            for (a, v) in acc.iter_mut().zip(f) {
                *a += v;
            }
        }
        let n = self.frames.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Anything that maps frame windows and captions to fixed-size vectors.
///
/// Implementations are immutable after construction and may be shared
/// across threads.
pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_video(&self, window: &FrameWindow) -> Result<Embedding>;
    fn encode_text(&self, caption: &str) -> Result<Embedding>;
    /// Hash of the encoder's internal state.
    fn fingerprint(&self) -> u64;
}

pub fn encode_video_snippet(window: &FrameWindow, encoder: &dyn Encoder) -> Result<Embedding> {
    let e = encoder.encode_video(window)?;
    check_dim(encoder.dim(), e.dim())?;
    Ok(e)
}

pub fn encode_text(caption: &str, encoder: &dyn Encoder) -> Result<Embedding> {
    if caption.trim().is_empty() {
        return Err(VlaadError::Empty("caption"));
    }
    let e = encoder.encode_text(caption)?;
    check_dim(encoder.dim(), e.dim())?;
    Ok(e)
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(VlaadError::DimensionMismatch { expected, actual });
    }
    Ok(())
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unit_normalize(mut v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let n = l2_norm(&v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(VlaadError::Degenerate(format!("{what} has zero norm")));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

// Hashing primitives for the stub encoders. These are part of the stub's
// observable contract: the projection is fully determined by (seed, row, col).

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub(crate) fn mix3(seed: u64, a: u64, b: u64) -> u64 {
    let x = splitmix64(seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    splitmix64(x ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
}

/// Maps a 64-bit hash to a uniform value in [-1, 1).
pub(crate) fn hash_to_unit(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64) * 2.0 - 1.0
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const TEXT_PROBES: u64 = 4;

/// Deterministic stand-in for a frozen video/text backbone.
///
/// Video: mean-pool the window's frames, apply a dense D x F projection,
/// then unit-normalize. The projection starts from raw entries
/// `u(seed, i, j)` uniform in [-1, 1) and is orthonormalized with modified
/// Gram-Schmidt (over its F columns when D >= F, over its D rows otherwise)
/// so that pooled features keep their geometry up to the final scaling.
/// Text: lowercase, split on non-alphanumerics, hash each token into
/// `TEXT_PROBES` signed buckets, then unit-normalize.
#[derive(Clone)]
pub struct StubEncoder {
    dim: usize,
    seed: u64,
    projections: Arc<RwLock<HashMap<usize, Arc<Vec<f64>>>>>,
}

impl std::fmt::Debug for StubEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StubEncoder")
            .field("dim", &self.dim)
            .field("seed", &self.seed)
            .finish()
    }
}

impl PartialEq for StubEncoder {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.seed == other.seed
    }
}

impl StubEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(VlaadError::invalid("encoder dimension must be positive"));
        }
        Ok(Self {
            dim,
            seed,
            projections: Arc::default(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Raw entry before orthonormalization.
    pub fn projection_entry(&self, row: usize, col: usize) -> f64 {
        hash_to_unit(mix3(self.seed, row as u64, col as u64))
    }

    /// Orthonormalized D x F projection, row-major.
    pub fn projection(&self, feature_dim: usize) -> Result<Arc<Vec<f64>>> {
        if let Some(p) = self.projections.read().expect("projection lock").get(&feature_dim) {
            return Ok(Arc::clone(p));
        }
        let p = Arc::new(self.build_projection(feature_dim)?);
        self.projections
            .write()
            .expect("projection lock")
            .insert(feature_dim, Arc::clone(&p));
        Ok(p)
    }

    fn build_projection(&self, f: usize) -> Result<Vec<f64>> {
        let d = self.dim;
        // Vectors to orthonormalize: columns when d >= f, rows otherwise.
        let (count, len) = if d >= f { (f, d) } else { (d, f) };
        let entry = |v: usize, k: usize| {
            if d >= f {
                self.projection_entry(k, v)
            } else {
                self.projection_entry(v, k)
            }
        };
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
        for v in 0..count {
            let mut x: Vec<f64> = (0..len).map(|k| entry(v, k)).collect();
            for q in &basis {
                let dot: f64 = x.iter().zip(q).map(|(a, b)| a * b).sum();
                x.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
            basis.push(unit_normalize(x, "projection vector")?);
        }
        let mut out = vec![0.0; d * f];
        for (v, q) in basis.iter().enumerate() {
            for (k, &x) in q.iter().enumerate() {
                let (i, j) = if d >= f { (k, v) } else { (v, k) };
                out[i * f + j] = x;
            }
        }
        Ok(out)
    }

    pub fn tokenize(caption: &str) -> Vec<String> {
        caption
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_lowercase())
            .collect()
    }
}

impl Encoder for StubEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_video(&self, window: &FrameWindow) -> Result<Embedding> {
        let pooled = window.mean_frame();
        let f = pooled.len();
        let p = self.projection(f)?;
        let projected: Vec<f64> = p
            .chunks(f)
            .map(|row| row.iter().zip(&pooled).map(|(a, x)| a * x).sum())
            .collect();
        let values = unit_normalize(projected, "video projection")?;
        Embedding::new(values, Source::Video)
    }

    fn encode_text(&self, caption: &str) -> Result<Embedding> {
        let tokens = Self::tokenize(caption);
        if tokens.is_empty() {
            return Err(VlaadError::Empty("caption"));
        }
        let mut acc = vec![0.0; self.dim];
        let text_seed = self.seed ^ 0x7465_7874; // "text"
        for tok in &tokens {
            let th = fnv1a(tok.as_bytes());
            for p in 0..TEXT_PROBES {
                let h = mix3(text_seed, th, p);
                let bucket = (h % self.dim as u64) as usize;
                acc[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
            }
        }
        let values = unit_normalize(acc, "text embedding")?;
        Embedding::new(values, Source::Text)
    }

    fn fingerprint(&self) -> u64 {
        mix3(self.seed, self.dim as u64, 0x5354_5542)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"VLEC";
const CACHE_VERSION: u32 = 1;

/// In-memory view of the binary embedding cache.
///
/// Layout (little-endian): magic `VLEC`, version u32, dim u32, count u64,
/// then per record: id length u16, UTF-8 id, dim x f32.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingCache {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
}

impl EmbeddingCache {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let id = id.into();
        check_dim(self.dim, vector.len())?;
        if id.len() > u16::MAX as usize {
            return Err(VlaadError::invalid("cache id longer than 65535 bytes"));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(VlaadError::NonFinite("cached embedding"));
        }
        match self.index.get(&id) {
            Some(&i) => self.vectors[i] = vector,
            None => {
                self.index.insert(id.clone(), self.ids.len());
                self.ids.push(id);
                self.vectors.push(vector);
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| (id.as_str(), v.as_slice()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_u32::<LittleEndian>(CACHE_VERSION)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u64::<LittleEndian>(self.ids.len() as u64)?;
        for (id, v) in self.iter() {
            w.write_u16::<LittleEndian>(id.len() as u16)?;
            w.write_all(id.as_bytes())?;
            for x in v {
                w.write_f32::<LittleEndian>(*x)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(VlaadError::Format("embedding cache: bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CACHE_VERSION {
            return Err(VlaadError::Format(format!(
                "embedding cache: unsupported version {version}"
            )));
        }
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let count = r.read_u64::<LittleEndian>()?;
        let mut cache = Self::new(dim);
        for _ in 0..count {
            let len = r.read_u16::<LittleEndian>()? as usize;
            let mut id = vec![0u8; len];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id)
                .map_err(|_| VlaadError::Format("embedding cache: id is not UTF-8".into()))?;
            let mut v = vec![0f32; dim];
            r.read_f32_into::<LittleEndian>(&mut v)?;
            cache.insert(id, v)?;
        }
        Ok(cache)
    }
}

/// Serves embeddings computed offline by an external backbone.
///
/// Video windows are looked up as `video:<window key>`, captions as
/// `text:<trimmed caption>`. Vectors are used as stored, without
/// re-normalization.
#[derive(Debug, Clone)]
pub struct CachedEncoder {
    cache: EmbeddingCache,
}

impl CachedEncoder {
    pub fn new(cache: EmbeddingCache) -> Self {
        Self { cache }
    }

    pub fn video_key(window_key: &str) -> String {
        format!("video:{window_key}")
    }

    pub fn text_key(caption: &str) -> String {
        format!("text:{}", caption.trim())
    }

    fn lookup(&self, id: &str, source: Source) -> Result<Embedding> {
        let v = self
            .cache
            .get(id)
            .ok_or_else(|| VlaadError::invalid(format!("embedding cache has no entry '{id}'")))?;
        Embedding::new(v.iter().map(|&x| f64::from(x)).collect(), source)
    }
}

impl Encoder for CachedEncoder {
    fn dim(&self) -> usize {
        self.cache.dim()
    }

    fn encode_video(&self, window: &FrameWindow) -> Result<Embedding> {
        let key = window
            .key
            .as_deref()
            .ok_or_else(|| VlaadError::invalid("cached encoder needs a keyed frame window"))?;
        self.lookup(&Self::video_key(key), Source::Video)
    }

    fn encode_text(&self, caption: &str) -> Result<Embedding> {
        self.lookup(&Self::text_key(caption), Source::Text)
    }

    fn fingerprint(&self) -> u64 {
        let mut h = self.cache.dim() as u64;
        for (id, v) in self.cache.iter() {
            h = mix3(h, fnv1a(id.as_bytes()), 0);
            for x in v {
                h = mix3(h, u64::from(x.to_bits()), 1);
            }
        }
        h
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if !(na > 0.0 && nb > 0.0) {
        return Err(VlaadError::Degenerate("cosine of a zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}
