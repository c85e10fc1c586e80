//! Values recomputed outside the crate and frozen here.

use vlaad_core::embeddings::{cosine, encode_text, encode_video_snippet, FrameWindow, StubEncoder};
use vlaad_core::mil::{lse_pool, sigmoid, Bag};
use vlaad_core::model::{forward_bag, ModelCheckpoint};
use vlaad_core::{Embedding, Source};

fn window(frames: Vec<Vec<f64>>) -> FrameWindow {
    let ts = (0..frames.len()).map(|i| i as f64 * 0.25).collect();
    FrameWindow::new(frames, ts).unwrap()
}

// Independent Python re-implementation of the hash projection and
// Gram-Schmidt step.
#[test]
fn stub_video_matches_standalone_projection() {
    let enc = StubEncoder::new(16, 7).unwrap();
    let a = encode_video_snippet(&window(vec![vec![0.5, -1.0, 2.0], vec![1.0, 0.0, 0.25]]), &enc).unwrap();
    let b = encode_video_snippet(&window(vec![vec![0.5, -1.0, 2.0], vec![1.0, 0.75, 0.25]]), &enc).unwrap();
    let expected = [0.2193284101321374, 0.2506688843339167, -0.4088622546404161];
    for (x, e) in a.values.iter().zip(expected) {
        assert!((x - e).abs() < 1e-12, "{x} vs {e}");
    }
    let c = cosine(&a.values, &b.values).unwrap();
    assert!(c < 1.0);
    assert!((c - 0.9658697089332975).abs() < 1e-12);
}

#[test]
fn stub_video_projection_narrower_than_features() {
    let enc = StubEncoder::new(3, 7).unwrap();
    let e = encode_video_snippet(&window(vec![vec![0.3, -0.2, 0.9, 1.1, -0.4]]), &enc).unwrap();
    let expected = [0.5964691695092953, -0.6184310845476265, -0.5116322150628693];
    for (x, e) in e.values.iter().zip(expected) {
        assert!((x - e).abs() < 1e-12, "{x} vs {e}");
    }
}

#[test]
fn stub_projection_is_orthonormal() {
    let enc = StubEncoder::new(12, 1).unwrap();
    let p = enc.projection(5).unwrap();
    for a in 0..5 {
        for b in 0..5 {
            let dot: f64 = (0..12).map(|i| p[i * 5 + a] * p[i * 5 + b]).sum();
            let want = if a == b { 1.0 } else { 0.0 };
            assert!((dot - want).abs() < 1e-12);
        }
    }
}

#[test]
fn stub_text_matches_standalone_hashing() {
    let enc = StubEncoder::new(32, 7).unwrap();
    let a = encode_text("a car turning left", &enc).unwrap();
    let b = encode_text("a car turning right", &enc).unwrap();
    let c = cosine(&a.values, &b.values).unwrap();
    assert!(c > -1.0 && c < 1.0);
    assert!((c - 0.75).abs() < 1e-12);
    assert!((a.norm() - 1.0).abs() < 1e-12);
}

#[test]
fn forward_bag_matches_composed_oracle() {
    let mut ckpt = ModelCheckpoint::init(4, 3, 10.0, 9, false).unwrap();
    ckpt.adapter.b1 = vec![0.1, -0.2, 0.05];
    ckpt.adapter.b2 = vec![0.0, 0.1, -0.1, 0.2];
    ckpt.detector.bias = -0.3;
    let raw = [
        vec![0.5, -0.5, 0.5, 0.5],
        vec![0.1, 0.9, -0.3, 0.2],
        vec![-0.7, 0.1, 0.1, 0.7],
    ];
    let snippets: Vec<Embedding> = raw.iter().map(|v| Embedding::new(v.clone(), Source::Video).unwrap()).collect();
    let bag = Bag::new("c", snippets, vec![0.0, 2.0, 4.0], true).unwrap();
    let trace = forward_bag(&bag, &ckpt).unwrap();

    let a = &ckpt.adapter;
    let mut logits = Vec::new();
    for e in &raw {
        let mut h = vec![0.0; 3];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut s = a.b1[j];
            for k in 0..4 {
                s += a.w1[j * 4 + k] * e[k];
            }
            *hj = s.tanh();
        }
        let mut z = ckpt.detector.bias;
        for i in 0..4 {
            let mut out = e[i] + a.b2[i];
            for j in 0..3 {
                out += a.w2[i * 3 + j] * h[j];
            }
            z += ckpt.detector.weights[i] * out;
        }
        logits.push(z);
    }
    for (x, y) in trace.logits.iter().zip(&logits) {
        assert!((x - y).abs() < 1e-6);
    }
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let pooled = m + ((logits.iter().map(|z| (10.0 * (z - m)).exp()).sum::<f64>()).ln() - 3f64.ln()) / 10.0;
    assert!((trace.pooled - pooled).abs() < 1e-6);
    assert!((trace.probability - sigmoid(pooled)).abs() < 1e-6);
    assert_eq!(trace.pooled, lse_pool(&trace.logits, 10.0).unwrap());
}

#[test]
fn residual_init_logits_are_detector_on_raw_embeddings() {
    let mut ckpt = ModelCheckpoint::init(4, 2, 10.0, 3, true).unwrap();
    ckpt.adapter.w2.iter_mut().for_each(|w| *w = 0.0);
    let v = vec![0.2, -0.4, 0.6, 0.1];
    let bag = Bag::new("c", vec![Embedding::new(v.clone(), Source::Video).unwrap()], vec![0.0], false).unwrap();
    let z = forward_bag(&bag, &ckpt).unwrap().logits[0];
    let want: f64 = ckpt.detector.bias + ckpt.detector.weights.iter().zip(&v).map(|(w, x)| w * x).sum::<f64>();
    assert!((z - want).abs() < 1e-15);
}
