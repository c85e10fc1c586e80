use proptest::prelude::*;

use vlaad_core::datakit::{read_manifest, write_manifest, ClipRecord, ClipSource, FeatureMatrix, Frames, Split};
use vlaad_core::evalkit::{exact_upper_tail, roc_auc, wilcoxon_signed_rank, ScoredSet};
use vlaad_core::inference::{make_global_state, CausalBuffer, GlobalState};
use vlaad_core::mil::{lse_pool, pooling_attention};
use vlaad_core::model::ModelCheckpoint;
use vlaad_core::trainer::split_dataset;
use vlaad_core::StubEncoder;

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, 1..24)
}

proptest! {
    #[test]
    fn pool_lies_between_mean_and_max(z in logits(), gamma in 0.01f64..50.0) {
        let p = lse_pool(&z, gamma).unwrap();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let max = z.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(p >= mean - 1e-9 && p <= max + 1e-12);
    }

    #[test]
    fn pool_is_permutation_invariant(z in logits(), gamma in 0.01f64..50.0, shift in 0usize..24) {
        let mut r = z.clone();
        r.rotate_left(shift % z.len());
        r.reverse();
        prop_assert!((lse_pool(&z, gamma).unwrap() - lse_pool(&r, gamma).unwrap()).abs() < 1e-12);
        let a = pooling_attention(&z, gamma).unwrap();
        let b = pooling_attention(&r, gamma).unwrap();
        let n = z.len();
        let k = shift % n;
        for i in 0..n {
            // r[i] = z[(k + n - 1 - i) % n]
            prop_assert!((b[i] - a[(k + n - 1 - i) % n]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_a_distribution(z in logits(), gamma in 0.01f64..50.0) {
        let a = pooling_attention(&z, gamma).unwrap();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(a.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn pool_shifts_with_constant(z in logits(), gamma in 0.01f64..50.0, c in -100.0f64..100.0) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let d = lse_pool(&shifted, gamma).unwrap() - lse_pool(&z, gamma).unwrap();
        prop_assert!((d - c).abs() < 1e-9);
    }

    #[test]
    fn auc_invariant_under_monotone_maps(
        pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..60),
        scale in 0.1f64..10.0,
        offset in -5.0f64..5.0,
    ) {
        let mut labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let base = roc_auc(&ScoredSet::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (scale * s + offset).exp()).collect();
        let after = roc_auc(&ScoredSet::new(mapped, labels.clone()).unwrap()).unwrap();
        prop_assert!((base - after).abs() < 1e-12);
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let inv = roc_auc(&ScoredSet::new(scores, flipped).unwrap()).unwrap();
        prop_assert!((base + inv - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_sign_flip_is_complementary(
        signs in prop::collection::vec(any::<bool>(), 1..=12),
    ) {
        // Distinct magnitudes 1..=n: negating every difference sends W to
        // n(n+1)/2 - W, and the two upper tails overlap exactly at P(W = w).
        let n = signs.len() as u64;
        let d: Vec<f64> = signs.iter().enumerate()
            .map(|(i, &s)| if s { (i + 1) as f64 } else { -((i + 1) as f64) })
            .collect();
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        let a = wilcoxon_signed_rank(&d).unwrap();
        let b = wilcoxon_signed_rank(&neg).unwrap();
        prop_assert_eq!(a.w + b.w, (n * (n + 1) / 2) as f64);
        let doubled: Vec<u64> = (1..=n).map(|r| 2 * r).collect();
        let w2 = (2.0 * a.w) as u64;
        let point = exact_upper_tail(&doubled, w2) - exact_upper_tail(&doubled, w2 + 1);
        prop_assert!((a.p_one_sided + b.p_one_sided - 1.0 - point).abs() < 1e-12);
    }

    #[test]
    fn future_frames_never_change_past_tokens(
        seed in any::<u64>(),
        cut in 0usize..60,
        start in 0u64..20,
        noise in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let enc = StubEncoder::new(8, seed).unwrap();
        let ckpt = ModelCheckpoint::init(8, 4, 10.0, seed, false).unwrap();
        let frames: Vec<Vec<f64>> = (0..60u64)
            .map(|t| (0..4).map(|j| ((seed % 97 + t * 5 + j) as f64 * 0.31).sin()).collect())
            .collect();
        let mut other = frames.clone();
        for f in &mut other[cut + 1..] {
            f.clone_from(&noise);
        }
        let mut a = CausalBuffer::default();
        let mut b = CausalBuffer::default();
        for t in 0..=cut {
            let ta = a.push_tick(&frames[t], start + t as u64, &enc, &ckpt, true).unwrap();
            let tb = b.push_tick(&other[t], start + t as u64, &enc, &ckpt, false).unwrap();
            prop_assert_eq!(ta.to_bits(), tb.to_bits());
            prop_assert!((0.0..=1.0).contains(&ta));
        }
        prop_assert!(a.buffered_ticks().iter().all(|&t| t <= start + cut as u64 && t % 5 == 0));
    }

    #[test]
    fn global_state_round_trips(risk in 0.0f64..=1.0, v in 0.0f64..40.0, c in 1usize..10, k in 0usize..10) {
        let k = k % c;
        let s = make_global_state(risk, v, k, c).unwrap();
        let v2 = s.to_vec();
        prop_assert_eq!(v2.len(), 2 + c);
        prop_assert_eq!(v2[2..].iter().sum::<f64>(), 1.0);
        let back: GlobalState = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), d in 1usize..12, h in 1usize..8, epoch in 0u32..100) {
        let mut c = ModelCheckpoint::init(d, h, 7.5, seed, seed % 2 == 0).unwrap();
        c.epoch = epoch;
        c.s_sim = 0.25;
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = ModelCheckpoint::read_from(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &c.quantized());
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        prop_assert_eq!(again, buf);
    }

    #[test]
    fn manifest_round_trips(
        rows in prop::collection::vec(prop::collection::vec(-1e3f32..1e3, 3), 8..20),
        label in any::<bool>(),
        caption in "[a-z ]{1,30}",
    ) {
        let n = rows.len();
        let rec = ClipRecord {
            clip_id: "ext-1".into(),
            frames: Frames::Inline(FeatureMatrix::from_rows(&rows).unwrap()),
            caption,
            label,
            collision_frame: label.then_some(n / 2),
            infraction: None,
            split: Split::Test,
            source: ClipSource::External,
            event_window: None,
        };
        let mut buf = Vec::new();
        write_manifest(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let back = read_manifest(buf.as_slice()).unwrap();
        prop_assert_eq!(&back[0], &rec);
    }

    #[test]
    fn split_is_stratified_partition(labels in prop::collection::vec(any::<bool>(), 2..80), f in 0.1f64..0.9, seed in any::<u64>()) {
        let s = split_dataset(&labels, f, seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for class in [false, true] {
            let n = labels.iter().filter(|&&l| l == class).count();
            let nt = s.train.iter().filter(|&&i| labels[i] == class).count();
            prop_assert_eq!(nt, (n as f64 * f).round() as usize);
        }
    }
}
