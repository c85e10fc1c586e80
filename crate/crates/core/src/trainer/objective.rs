//! Batch objective with analytic gradients over the flat parameter vector.

use rayon::prelude::*;

use crate::embeddings::Embedding;
use crate::error::{Result, VlaadError};
use crate::losses::{
    alignment_cosine_grad, alignment_from_cosine, bce_logit_grad, binary_cross_entropy_from_logit,
    cosine_with_grad, uncertainty_weighted_total, LossBreakdown,
};
use crate::mil::{lse_pool, pooling_attention, Bag};
use crate::model::{AdapterParams, DetectorParams, ModelCheckpoint};

use super::TrainMode;

/// A clip after the frozen encoder has run: snippet embeddings plus the
/// caption embedding.
#[derive(Debug, Clone)]
pub struct EncodedClip {
    pub bag: Bag,
    pub text: Embedding,
    pub event_window: Option<[usize; 2]>,
}

impl EncodedClip {
    pub fn label(&self) -> bool {
        self.bag.label
    }
}

/// Per batch position, the index into `clips` whose caption serves as the
/// unmatched pair in clip mode.
pub type UnmatchedPairs = Vec<Option<usize>>;

const CHUNK: usize = 8;

struct Partial {
    grads: ModelCheckpoint,
    l_sim: f64,
    l_cls: f64,
}

fn zero_grads(like: &ModelCheckpoint) -> ModelCheckpoint {
    ModelCheckpoint {
        adapter: AdapterParams::zeros(like.dim(), like.hidden()),
        detector: DetectorParams::zeros(like.dim()),
        s_sim: 0.0,
        s_cls: 0.0,
        ..like.clone()
    }
}

/// Neumaier-compensated running sum of flat vectors.
struct CompensatedSum {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl CompensatedSum {
    fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            comp: vec![0.0; n],
        }
    }

    fn add(&mut self, v: &[f64]) {
        for ((s, c), &x) in self.sum.iter_mut().zip(&mut self.comp).zip(v) {
            let t = *s + x;
            if s.abs() >= x.abs() {
                *c += (*s - t) + x;
            } else {
                *c += (x - t) + *s;
            }
            *s = t;
        }
    }

    fn finish(self) -> Vec<f64> {
        self.sum.iter().zip(&self.comp).map(|(s, c)| s + c).collect()
    }
}

/// Evaluates the uncertainty-weighted objective on `batch` (indices into
/// `clips`) and returns its gradient in [`ModelCheckpoint::to_flat`] order.
pub fn batch_objective(
    ckpt: &ModelCheckpoint,
    clips: &[EncodedClip],
    batch: &[usize],
    unmatched: Option<&UnmatchedPairs>,
    mode: TrainMode,
    pos_weight: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if batch.is_empty() {
        return Err(VlaadError::Empty("batch"));
    }
    let b = batch.len() as f64;
    let w_sim = 0.5 * (-ckpt.s_sim).exp() / b;
    let w_cls = 0.5 * (-ckpt.s_cls).exp() / b;

    let partials = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut p = Partial {
                grads: zero_grads(ckpt),
                l_sim: 0.0,
                l_cls: 0.0,
            };
            for (k, &idx) in chunk.iter().enumerate() {
                let partner = unmatched.and_then(|u| u[ci * CHUNK + k]);
                let (ls, lc) = match mode {
                    TrainMode::Mil => clip_mil(ckpt, &clips[idx], pos_weight, w_sim, w_cls, &mut p.grads)?,
                    TrainMode::Clip => clip_level(
                        ckpt,
                        &clips[idx],
                        partner.map(|j| &clips[j].text),
                        pos_weight,
                        w_sim,
                        w_cls,
                        &mut p.grads,
                    )?,
                };
                p.l_sim += ls;
                p.l_cls += lc;
            }
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = ckpt.param_count();
    let mut acc = CompensatedSum::new(n + 2);
    for p in &partials {
        let mut flat = p.grads.to_flat();
        flat.push(p.l_sim);
        flat.push(p.l_cls);
        acc.add(&flat);
    }
    let mut flat = acc.finish();
    let l_cls = flat.pop().expect("loss slot") / b;
    let l_sim = flat.pop().expect("loss slot") / b;
    let breakdown = uncertainty_weighted_total(l_sim, l_cls, ckpt.s_sim, ckpt.s_cls)?;
    flat[n - 2] = -0.5 * (-ckpt.s_sim).exp() * l_sim + 1.0;
    flat[n - 1] = -0.5 * (-ckpt.s_cls).exp() * l_cls + 1.0;
    Ok((breakdown, flat))
}

struct SnippetPass {
    act: Vec<f64>,
    out: Vec<f64>,
    logit: f64,
}

fn run_snippets(ckpt: &ModelCheckpoint, bag: &Bag) -> Vec<SnippetPass> {
    bag.snippets
        .iter()
        .map(|e| {
            let (act, out) = ckpt.adapter.forward_cached(&e.values);
            let logit = ckpt.detector.logit(&out);
            SnippetPass { act, out, logit }
        })
        .collect()
}

fn backprop_snippet(
    ckpt: &ModelCheckpoint,
    input: &[f64],
    pass: &SnippetPass,
    g_logit: f64,
    g_cos: f64,
    cos_grad: &[f64],
    grads: &mut ModelCheckpoint,
) {
    let g_out: Vec<f64> = ckpt
        .detector
        .weights
        .iter()
        .zip(cos_grad)
        .map(|(w, c)| g_logit * w + g_cos * c)
        .collect();
    for (gw, x) in grads.detector.weights.iter_mut().zip(&pass.out) {
        *gw += g_logit * x;
    }
    grads.detector.bias += g_logit;
    ckpt.adapter.backward(input, &pass.act, &g_out, &mut grads.adapter);
}

/// MIL bag: BCE on the pooled logit plus attention-weighted (positives) or
/// uniformly averaged (negatives) snippet alignment. Gradients flow through
/// the attention weights as well.
fn clip_mil(
    ckpt: &ModelCheckpoint,
    clip: &EncodedClip,
    pos_weight: f64,
    w_sim: f64,
    w_cls: f64,
    grads: &mut ModelCheckpoint,
) -> Result<(f64, f64)> {
    let y = clip.label();
    let passes = run_snippets(ckpt, &clip.bag);
    let z: Vec<f64> = passes.iter().map(|p| p.logit).collect();
    if z.iter().any(|v| !v.is_finite()) {
        return Err(VlaadError::NonFinite("logits"));
    }
    let gamma = ckpt.gamma;
    let pooled = lse_pool(&z, gamma)?;
    let att = pooling_attention(&z, gamma)?;
    let l_cls = binary_cross_entropy_from_logit(pooled, y, pos_weight)?;
    let g_pooled = bce_logit_grad(pooled, y, pos_weight);

    let cos: Vec<(f64, Vec<f64>)> = passes
        .iter()
        .map(|p| cosine_with_grad(&p.out, &clip.text.values))
        .collect::<Result<_>>()?;
    let t = z.len() as f64;
    let l_sim = if y {
        att.iter()
            .zip(&cos)
            .map(|(a, (c, _))| a * alignment_from_cosine(*c, true))
            .sum()
    } else {
        cos.iter().map(|(c, _)| alignment_from_cosine(*c, false)).sum::<f64>() / t
    };

    for (i, (pass, (c, cgrad))) in passes.iter().zip(&cos).enumerate() {
        let mut g_z = w_cls * g_pooled * att[i];
        let g_c;
        if y {
            let term = alignment_from_cosine(*c, true);
            g_z += w_sim * gamma * att[i] * (term - l_sim);
            g_c = w_sim * att[i] * alignment_cosine_grad(*c, true);
        } else {
            g_c = w_sim * alignment_cosine_grad(*c, false) / t;
        }
        backprop_snippet(ckpt, &clip.bag.snippets[i].values, pass, g_z, g_c, cgrad, grads);
    }
    Ok((l_sim, l_cls))
}

/// Single-embedding clip: BCE plus the matched/unmatched cosine pair.
fn clip_level(
    ckpt: &ModelCheckpoint,
    clip: &EncodedClip,
    unmatched_text: Option<&Embedding>,
    pos_weight: f64,
    w_sim: f64,
    w_cls: f64,
    grads: &mut ModelCheckpoint,
) -> Result<(f64, f64)> {
    if clip.bag.len() != 1 {
        return Err(VlaadError::invalid("clip mode expects single-snippet bags"));
    }
    let y = clip.label();
    let pass = &run_snippets(ckpt, &clip.bag)[0];
    if !pass.logit.is_finite() {
        return Err(VlaadError::NonFinite("logit"));
    }
    let l_cls = binary_cross_entropy_from_logit(pass.logit, y, pos_weight)?;
    let g_z = w_cls * bce_logit_grad(pass.logit, y, pos_weight);

    let (c_m, g_m) = cosine_with_grad(&pass.out, &clip.text.values)?;
    let mut l_sim = alignment_from_cosine(c_m, true);
    let mut g_c_m = alignment_cosine_grad(c_m, true);
    let mut cos_grad = g_m;
    if let Some(other) = unmatched_text {
        let (c_u, g_u) = cosine_with_grad(&pass.out, &other.values)?;
        l_sim = (l_sim + alignment_from_cosine(c_u, false)) / 2.0;
        let g_c_u = alignment_cosine_grad(c_u, false) / 2.0;
        g_c_m /= 2.0;
        // Fold both cosine gradients into one direction with unit coefficient.
        cos_grad = cos_grad
            .iter()
            .zip(&g_u)
            .map(|(m, u)| g_c_m * m + g_c_u * u)
            .collect();
        g_c_m = 1.0;
    }
    backprop_snippet(
        ckpt,
        &clip.bag.snippets[0].values,
        pass,
        g_z,
        w_sim * g_c_m,
        &cos_grad,
        grads,
    );
    Ok((l_sim, l_cls))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut acc = CompensatedSum::new(1);
        acc.add(&[1e16]);
        for _ in 0..10 {
            acc.add(&[1.0]);
        }
        acc.add(&[-1e16]);
        assert_eq!(acc.finish()[0], 10.0);
    }
}
