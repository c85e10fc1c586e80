//! Training loop over frozen-encoder embeddings.

mod gradcheck;
mod objective;
mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datakit::ClipRecord;
use crate::embeddings::{encode_text, Encoder, DEFAULT_DIM};
use crate::error::{Result, VlaadError};
use crate::evalkit::{roc_auc, ScoredSet};
use crate::mil::{clip_level_bag, segment_clip, DEFAULT_GAMMA, DEFAULT_SNIPPET_LEN, DEFAULT_STRIDE};
use crate::model::{forward_bag, ModelCheckpoint, DEFAULT_HIDDEN};

pub use gradcheck::{gradient_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use objective::{batch_objective, EncodedClip, UnmatchedPairs};
pub use optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Snippet bags pooled with log-sum-exp.
    Mil,
    /// One embedding per clip.
    Clip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub train_batch: usize,
    pub eval_batch: usize,
    pub seed: u64,
    pub gamma: f64,
    pub mode: TrainMode,
    pub split_fraction: f64,
    /// `None` uses negatives/positives on the training split.
    pub pos_weight: Option<f64>,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub snippet_len: usize,
    pub stride: usize,
    /// Start the adapter as the identity map.
    pub residual_init: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            epochs: 50,
            train_batch: 256,
            eval_batch: 64,
            seed: 0,
            gamma: DEFAULT_GAMMA,
            mode: TrainMode::Mil,
            split_fraction: 0.8,
            pos_weight: None,
            embedding_dim: DEFAULT_DIM,
            hidden_dim: DEFAULT_HIDDEN,
            snippet_len: DEFAULT_SNIPPET_LEN,
            stride: DEFAULT_STRIDE,
            residual_init: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(VlaadError::invalid("learning_rate must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(VlaadError::invalid("weight_decay must be >= 0"));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(VlaadError::invalid("split_fraction must lie in (0, 1)"));
        }
        if self.train_batch == 0 || self.eval_batch == 0 {
            return Err(VlaadError::invalid("batch sizes must be >= 1"));
        }
        if !(self.gamma > 0.0) {
            return Err(VlaadError::invalid("gamma must be > 0"));
        }
        if let Some(w) = self.pos_weight {
            if !(w > 0.0) {
                return Err(VlaadError::invalid("pos_weight must be > 0"));
            }
        }
        if self.embedding_dim == 0 || self.hidden_dim == 0 || self.snippet_len == 0 || self.stride == 0 {
            return Err(VlaadError::invalid("dimensions and snippet layout must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    /// A class is missing from one side of the split.
    pub class_warning: bool,
}

/// Stratified, seeded partition: each class contributes
/// `round(count * fraction)` members to the training side.
pub fn split_dataset(labels: &[bool], fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if labels.len() < 2 {
        return Err(VlaadError::invalid("need at least 2 records to split"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(VlaadError::invalid("split fraction must lie in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut class_warning = false;
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_train = (idx.len() as f64 * fraction).round() as usize;
        if !idx.is_empty() && (n_train == 0 || n_train == idx.len()) {
            class_warning = true;
        }
        if idx.is_empty() {
            class_warning = true;
        }
        train.extend_from_slice(&idx[..n_train]);
        validation.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    validation.sort_unstable();
    Ok(DatasetSplit {
        train,
        validation,
        class_warning,
    })
}

/// Runs the frozen encoder over every record.
pub fn encode_records(
    records: &[ClipRecord],
    encoder: &dyn Encoder,
    mode: TrainMode,
    snippet_len: usize,
    stride: usize,
) -> Result<Vec<EncodedClip>> {
    records
        .par_iter()
        .map(|r| {
            let bag = match mode {
                TrainMode::Mil => segment_clip(r, snippet_len, stride, encoder)?,
                TrainMode::Clip => clip_level_bag(r, encoder)?,
            };
            let text = encode_text(&r.caption, encoder)?;
            Ok(EncodedClip {
                bag,
                text,
                event_window: r.event_window,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_sim")]
    pub l_sim: f64,
    #[serde(rename = "L_cls")]
    pub l_cls: f64,
    pub s_sim: f64,
    pub s_cls: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub val_auc: f64,
}

pub fn write_history_csv<W: Write>(mut w: W, history: &[EpochRecord]) -> Result<()> {
    writeln!(w, "epoch,L_sim,L_cls,s_sim,s_cls,L_total,val_auc")?;
    for h in history {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            h.epoch, h.l_sim, h.l_cls, h.s_sim, h.s_cls, h.l_total, h.val_auc
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<EpochRecord>,
    pub split: DatasetSplit,
    pub pos_weight: f64,
    /// Validation bag probabilities after the final epoch.
    pub validation: Option<ScoredSet>,
}

/// Bag probabilities for `clips`, evaluated `eval_batch` at a time.
pub fn predict(ckpt: &ModelCheckpoint, clips: &[&EncodedClip], eval_batch: usize) -> Result<Vec<f64>> {
    let per_chunk = clips
        .par_chunks(eval_batch.max(1))
        .map(|chunk| {
            chunk
                .iter()
                .map(|c| forward_bag(&c.bag, ckpt).map(|t| t.probability))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_chunk.concat())
}

fn scored(ckpt: &ModelCheckpoint, clips: &[&EncodedClip], eval_batch: usize) -> Result<Option<ScoredSet>> {
    if clips.is_empty() {
        return Ok(None);
    }
    let scores = predict(ckpt, clips, eval_batch)?;
    Ok(Some(ScoredSet::new(scores, clips.iter().map(|c| c.label()).collect())?))
}

/// Trains adapter, detector and log-variance weights with Adam. The
/// encoder only runs once up front; its outputs are never updated.
pub fn train(config: &TrainConfig, records: &[ClipRecord], encoder: &dyn Encoder) -> Result<TrainOutcome> {
    config.validate()?;
    if encoder.dim() != config.embedding_dim {
        return Err(VlaadError::DimensionMismatch {
            expected: config.embedding_dim,
            actual: encoder.dim(),
        });
    }
    let labels: Vec<bool> = records.iter().map(|r| r.label).collect();
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(VlaadError::invalid("training data must contain both classes"));
    }
    let split = split_dataset(&labels, config.split_fraction, config.seed)?;
    let clips = encode_records(records, encoder, config.mode, config.snippet_len, config.stride)?;
    train_encoded(config, &clips, split)
}

/// Training on pre-encoded clips with an explicit split.
pub fn train_encoded(config: &TrainConfig, clips: &[EncodedClip], split: DatasetSplit) -> Result<TrainOutcome> {
    config.validate()?;
    let n_pos = split.train.iter().filter(|&&i| clips[i].label()).count();
    let n_neg = split.train.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(VlaadError::invalid("training split must contain both classes"));
    }
    let pos_weight = config.pos_weight.unwrap_or(n_neg as f64 / n_pos as f64);
    let dim = clips[0].bag.snippets[0].dim();
    let mut ckpt = ModelCheckpoint::init(dim, config.hidden_dim, config.gamma, config.seed, config.residual_init)?;
    let mut opt = Adam::new(config.learning_rate, config.weight_decay, ckpt.decay_mask());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_BA7C);
    let val_refs: Vec<&EncodedClip> = split.validation.iter().map(|&i| &clips[i]).collect();

    let mut history = Vec::with_capacity(config.epochs);
    let mut order = split.train.clone();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        for (bi, batch) in order.chunks(config.train_batch).enumerate() {
            let unmatched = match config.mode {
                TrainMode::Clip => Some(resolve_pairs(batch, &sample_unmatched(batch.len(), &mut rng))),
                TrainMode::Mil => None,
            };
            let (b, grad) = batch_objective(&ckpt, clips, batch, unmatched.as_ref(), config.mode, pos_weight)
                .map_err(|e| match e {
                    VlaadError::NonFinite(_) => VlaadError::Diverged { epoch, batch: bi },
                    other => other,
                })?;
            if !b.l_total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(VlaadError::Diverged { epoch, batch: bi });
            }
            let w = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([b.l_sim, b.l_cls, b.s_sim, b.s_cls, b.l_total]) {
                *s += w * v;
            }
            let mut flat = ckpt.to_flat();
            opt.step(&mut flat, &grad);
            ckpt.set_flat(&flat)?;
        }
        ckpt.epoch += 1;
        let val_auc = match scored(&ckpt, &val_refs, config.eval_batch)? {
            Some(s) => roc_auc(&s).unwrap_or(f64::NAN),
            None => f64::NAN,
        };
        let n = order.len() as f64;
        history.push(EpochRecord {
            epoch: epoch + 1,
            l_sim: sums[0] / n,
            l_cls: sums[1] / n,
            s_sim: sums[2] / n,
            s_cls: sums[3] / n,
            l_total: sums[4] / n,
            val_auc,
        });
    }
    let validation = scored(&ckpt, &val_refs, config.eval_batch)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        history,
        split,
        pos_weight,
        validation,
    })
}

/// For each batch position, a uniformly drawn different position whose
/// caption serves as the unmatched pair.
fn sample_unmatched(n: usize, rng: &mut ChaCha8Rng) -> UnmatchedPairs {
    (0..n)
        .map(|i| {
            if n < 2 {
                return None;
            }
            let j = rng.random_range(0..n - 1);
            Some(if j >= i { j + 1 } else { j })
        })
        .collect()
}

/// Maps batch-relative partner positions to clip indices.
fn resolve_pairs(batch: &[usize], pairs: &UnmatchedPairs) -> UnmatchedPairs {
    pairs.iter().map(|p| p.map(|j| batch[j])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratified_split_counts() {
        let labels: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let s = split_dataset(&labels, 0.8, 0).unwrap();
        assert_eq!(s.train.len(), 8);
        assert_eq!(s.validation.len(), 2);
        assert_eq!(s.train.iter().filter(|&&i| labels[i]).count(), 4);
        assert_eq!(s.validation.iter().filter(|&&i| labels[i]).count(), 1);
        assert!(!s.class_warning);
        assert_eq!(s, split_dataset(&labels, 0.8, 0).unwrap());
    }

    #[test]
    fn split_is_a_partition() {
        let labels = [true, false, true, false];
        let s = split_dataset(&labels, 0.5, 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len()), (2, 2));
        for i in 0..4 {
            let in_train = s.train.contains(&i);
            let in_val = s.validation.contains(&i);
            assert!(in_train ^ in_val);
        }
    }

    #[test]
    fn split_errors_and_warnings() {
        assert!(split_dataset(&[true], 0.5, 0).is_err());
        assert!(split_dataset(&[true, false], 1.0, 0).is_err());
        let s = split_dataset(&[true, false, false, false, false], 0.8, 0).unwrap();
        assert!(s.class_warning);
    }

    #[test]
    fn unmatched_partners_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_unmatched(5, &mut rng);
        for (i, j) in p.iter().enumerate() {
            assert_ne!(Some(i), *j);
        }
        assert_eq!(sample_unmatched(1, &mut rng), vec![None]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            split_fraction: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
