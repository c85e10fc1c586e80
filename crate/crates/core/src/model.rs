//! Trainable heads on top of a frozen encoder: a residual bottleneck adapter
//! and a linear collision-logit detector.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embeddings::{Embedding, Source};
use crate::error::{Result, VlaadError};
use crate::mil::{lse_pool, sigmoid, Bag, RiskTrace};

pub const DEFAULT_HIDDEN: usize = 256;

/// `e + W2 tanh(W1 e + b1) + b2`, with `W1: H x D` and `W2: D x H`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub dim: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl AdapterParams {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            dim,
            hidden,
            w1: vec![0.0; hidden * dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; dim * hidden],
            b2: vec![0.0; dim],
        }
    }

    fn validate(&self) -> Result<()> {
        let (d, h) = (self.dim, self.hidden);
        let shapes = [
            (self.w1.len(), h * d),
            (self.b1.len(), h),
            (self.w2.len(), d * h),
            (self.b2.len(), d),
        ];
        for (actual, expected) in shapes {
            if actual != expected {
                return Err(VlaadError::DimensionMismatch { expected, actual });
            }
        }
        Ok(())
    }

    /// Forward pass returning `(tanh activations, adapted output)`.
    pub(crate) fn forward_cached(&self, e: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d, h) = (self.dim, self.hidden);
        let act: Vec<f64> = (0..h)
            .map(|j| {
                let row = &self.w1[j * d..(j + 1) * d];
                let pre = self.b1[j] + row.iter().zip(e).map(|(w, x)| w * x).sum::<f64>();
                pre.tanh()
            })
            .collect();
        let out: Vec<f64> = (0..d)
            .map(|i| {
                let row = &self.w2[i * h..(i + 1) * h];
                e[i] + self.b2[i] + row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>()
            })
            .collect();
        (act, out)
    }

    /// Accumulates parameter gradients given the gradient `g_out` at the
    /// adapter output. Returns nothing: the input embedding is frozen.
    pub(crate) fn backward(&self, e: &[f64], act: &[f64], g_out: &[f64], grads: &mut AdapterParams) {
        let (d, h) = (self.dim, self.hidden);
        let mut g_act = vec![0.0; h];
        for i in 0..d {
            let g = g_out[i];
            grads.b2[i] += g;
            if g == 0.0 {
                continue;
            }
            let w_row = &self.w2[i * h..(i + 1) * h];
            let gw_row = &mut grads.w2[i * h..(i + 1) * h];
            for j in 0..h {
                gw_row[j] += g * act[j];
                g_act[j] += w_row[j] * g;
            }
        }
        for j in 0..h {
            let g_pre = g_act[j] * (1.0 - act[j] * act[j]);
            grads.b1[j] += g_pre;
            if g_pre == 0.0 {
                continue;
            }
            let gw_row = &mut grads.w1[j * d..(j + 1) * d];
            for (gw, x) in gw_row.iter_mut().zip(e) {
                *gw += g_pre * x;
            }
        }
    }
}

/// Linear map `D -> 1` producing a pre-sigmoid collision logit.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl DetectorParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub(crate) fn logit(&self, e: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(e).map(|(w, x)| w * x).sum::<f64>()
    }
}

/// Everything needed to score clips and resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub adapter: AdapterParams,
    pub detector: DetectorParams,
    /// Log-variance weight of the alignment loss.
    pub s_sim: f64,
    /// Log-variance weight of the classification loss.
    pub s_cls: f64,
    pub gamma: f64,
    pub seed: u64,
    pub epoch: u32,
}

impl ModelCheckpoint {
    /// Seeded initialization: uniform in `±1/sqrt(fan_in)` for every weight
    /// matrix, zero biases and zero log-variances. With `residual_identity`
    /// the first adapter layer starts at zero, so the adapter is the identity.
    pub fn init(dim: usize, hidden: usize, gamma: f64, seed: u64, residual_identity: bool) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(VlaadError::invalid("model dimensions must be positive"));
        }
        if !(gamma > 0.0) {
            return Err(VlaadError::invalid("gamma must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let b = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-b..b)).collect()
        };
        let w1 = if residual_identity {
            vec![0.0; hidden * dim]
        } else {
            uniform(hidden * dim, dim)
        };
        let w2 = uniform(dim * hidden, hidden);
        let wd = uniform(dim, dim);
        Ok(Self {
            adapter: AdapterParams {
                dim,
                hidden,
                w1,
                b1: vec![0.0; hidden],
                w2,
                b2: vec![0.0; dim],
            },
            detector: DetectorParams {
                weights: wd,
                bias: 0.0,
            },
            s_sim: 0.0,
            s_cls: 0.0,
            gamma,
            seed,
            epoch: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.adapter.dim
    }

    pub fn hidden(&self) -> usize {
        self.adapter.hidden
    }

    pub fn validate(&self) -> Result<()> {
        self.adapter.validate()?;
        if self.detector.weights.len() != self.dim() {
            return Err(VlaadError::DimensionMismatch {
                expected: self.dim(),
                actual: self.detector.weights.len(),
            });
        }
        if self.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(VlaadError::NonFinite("model parameters"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, h) = (self.dim(), self.hidden());
        2 * d * h + h + 2 * d + 1 + 2
    }

    /// All trainable values in declaration order:
    /// `w1, b1, w2, b2, detector weights, detector bias, s_sim, s_cls`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(&self.adapter.w1);
        v.extend_from_slice(&self.adapter.b1);
        v.extend_from_slice(&self.adapter.w2);
        v.extend_from_slice(&self.adapter.b2);
        v.extend_from_slice(&self.detector.weights);
        v.push(self.detector.bias);
        v.push(self.s_sim);
        v.push(self.s_cls);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(VlaadError::DimensionMismatch {
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut rest = flat;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        take(&mut self.adapter.w1);
        take(&mut self.adapter.b1);
        take(&mut self.adapter.w2);
        take(&mut self.adapter.b2);
        take(&mut self.detector.weights);
        let mut tail = [0.0; 3];
        take(&mut tail);
        self.detector.bias = tail[0];
        self.s_sim = tail[1];
        self.s_cls = tail[2];
        Ok(())
    }

    /// Flat mask selecting weight matrices (decayed) as opposed to biases
    /// and log-variances (not decayed).
    pub fn decay_mask(&self) -> Vec<bool> {
        let (d, h) = (self.dim(), self.hidden());
        let mut m = Vec::with_capacity(self.param_count());
        m.extend(std::iter::repeat_n(true, h * d));
        m.extend(std::iter::repeat_n(false, h));
        m.extend(std::iter::repeat_n(true, d * h));
        m.extend(std::iter::repeat_n(false, d));
        m.extend(std::iter::repeat_n(true, d));
        m.extend(std::iter::repeat_n(false, 3));
        m
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_u32::<LittleEndian>(CKPT_VERSION)?;
        w.write_u32::<LittleEndian>(self.dim() as u32)?;
        w.write_u32::<LittleEndian>(self.hidden() as u32)?;
        w.write_f64::<LittleEndian>(self.gamma)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u32::<LittleEndian>(self.epoch)?;
        for v in self.to_flat() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(VlaadError::Format("checkpoint: bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CKPT_VERSION {
            return Err(VlaadError::Format(format!("checkpoint: unsupported version {version}")));
        }
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let hidden = r.read_u32::<LittleEndian>()? as usize;
        let gamma = r.read_f64::<LittleEndian>()?;
        let seed = r.read_u64::<LittleEndian>()?;
        let epoch = r.read_u32::<LittleEndian>()?;
        if dim == 0 || hidden == 0 {
            return Err(VlaadError::Format("checkpoint: zero dimension".into()));
        }
        let mut ckpt = Self {
            adapter: AdapterParams::zeros(dim, hidden),
            detector: DetectorParams::zeros(dim),
            s_sim: 0.0,
            s_cls: 0.0,
            gamma,
            seed,
            epoch,
        };
        let mut raw = vec![0f32; ckpt.param_count()];
        r.read_f32_into::<LittleEndian>(&mut raw)?;
        let flat: Vec<f64> = raw.into_iter().map(f64::from).collect();
        ckpt.set_flat(&flat)?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Rounds every parameter through f32, matching what a save/load cycle
    /// produces.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        let flat: Vec<f64> = self.to_flat().into_iter().map(|v| f64::from(v as f32)).collect();
        out.set_flat(&flat).expect("same layout");
        out
    }
}

const CKPT_MAGIC: &[u8; 4] = b"VLAD";
const CKPT_VERSION: u32 = 1;

pub fn adapt(e_v: &Embedding, params: &AdapterParams) -> Result<Embedding> {
    if e_v.dim() != params.dim {
        return Err(VlaadError::DimensionMismatch {
            expected: params.dim,
            actual: e_v.dim(),
        });
    }
    params.validate()?;
    let (_, out) = params.forward_cached(&e_v.values);
    Embedding::new(out, Source::Video)
}

pub fn detect_logit(e_adapted: &Embedding, params: &DetectorParams) -> Result<f64> {
    if e_adapted.dim() != params.weights.len() {
        return Err(VlaadError::DimensionMismatch {
            expected: params.weights.len(),
            actual: e_adapted.dim(),
        });
    }
    if !params.bias.is_finite() || params.weights.iter().any(|w| !w.is_finite()) {
        return Err(VlaadError::NonFinite("detector parameters"));
    }
    let z = params.logit(&e_adapted.values);
    if !z.is_finite() {
        return Err(VlaadError::NonFinite("logit"));
    }
    Ok(z)
}

/// Scores every snippet with shared parameters and pools the logits.
pub fn forward_bag(bag: &Bag, ckpt: &ModelCheckpoint) -> Result<RiskTrace> {
    if bag.is_empty() {
        return Err(VlaadError::Empty("bag"));
    }
    let logits = bag
        .snippets
        .iter()
        .map(|e| detect_logit(&adapt(e, &ckpt.adapter)?, &ckpt.detector))
        .collect::<Result<Vec<_>>>()?;
    let pooled = lse_pool(&logits, ckpt.gamma)?;
    Ok(RiskTrace {
        clip_id: bag.clip_id.clone(),
        logits,
        pooled,
        probability: sigmoid(pooled),
        gamma: ckpt.gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: Vec<f64>) -> Embedding {
        Embedding::new(v, Source::Video).unwrap()
    }

    #[test]
    fn zero_second_layer_is_identity() {
        let mut p = AdapterParams::zeros(3, 2);
        p.w1 = vec![0.3, -0.2, 0.1, 0.5, 0.4, -0.6];
        let e = emb(vec![0.2, -0.7, 1.1]);
        assert_eq!(adapt(&e, &p).unwrap().values, e.values);
    }

    #[test]
    fn adapter_matches_hand_computation() {
        let p = AdapterParams {
            dim: 2,
            hidden: 1,
            w1: vec![0.5, -1.0],
            b1: vec![0.1],
            w2: vec![2.0, -0.5],
            b2: vec![0.01, 0.02],
        };
        let e = emb(vec![1.0, 0.25]);
        let h = (0.1f64 + 0.5 - 0.25).tanh();
        let want = [1.0 + 0.01 + 2.0 * h, 0.25 + 0.02 - 0.5 * h];
        let got = adapt(&e, &p).unwrap().values;
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn detector_zero_and_constructed() {
        let e = emb(vec![3.0, 4.0]);
        assert_eq!(detect_logit(&e, &DetectorParams::zeros(2)).unwrap(), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        let w = DetectorParams {
            weights: vec![3.0 / 25.0, 4.0 / 25.0],
            bias: 0.0,
        };
        assert!((detect_logit(&e, &w).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_errors() {
        let p = AdapterParams::zeros(3, 2);
        assert!(matches!(
            adapt(&emb(vec![1.0, 2.0]), &p),
            Err(VlaadError::DimensionMismatch { .. })
        ));
        let d = DetectorParams {
            weights: vec![f64::NAN, 0.0],
            bias: 0.0,
        };
        assert!(matches!(
            detect_logit(&emb(vec![1.0, 2.0]), &d),
            Err(VlaadError::NonFinite(_))
        ));
    }

    #[test]
    fn flat_layout_round_trip() {
        let ckpt = ModelCheckpoint::init(5, 3, 10.0, 9, false).unwrap();
        let flat = ckpt.to_flat();
        assert_eq!(flat.len(), ckpt.param_count());
        assert_eq!(ckpt.decay_mask().len(), flat.len());
        let mut other = ModelCheckpoint::init(5, 3, 10.0, 1, false).unwrap();
        other.set_flat(&flat).unwrap();
        assert_eq!(other.to_flat(), flat);
    }

    #[test]
    fn residual_init_zeroes_first_layer() {
        let ckpt = ModelCheckpoint::init(6, 4, 10.0, 3, true).unwrap();
        assert!(ckpt.adapter.w1.iter().all(|&w| w == 0.0));
        assert!(ckpt.adapter.w2.iter().any(|&w| w != 0.0));
        let bound = 1.0 / 6f64.sqrt();
        assert!(ckpt.detector.weights.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let mut ckpt = ModelCheckpoint::init(4, 3, 10.0, 11, false).unwrap();
        ckpt.epoch = 7;
        ckpt.s_sim = -0.25;
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"VLAD");
        assert_eq!(buf.len(), 4 + 4 * 3 + 8 + 8 + 4 + 4 * ckpt.param_count());
        let back = ModelCheckpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ckpt.quantized());
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn truncated_checkpoint_is_an_error() {
        let ckpt = ModelCheckpoint::init(4, 3, 10.0, 11, false).unwrap();
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(ModelCheckpoint::read_from(buf.as_slice()).is_err());
    }
}
