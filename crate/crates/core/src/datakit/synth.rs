use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClipRecord, ClipSource, FeatureMatrix, Frames, Split};
use crate::error::{Result, VlaadError};

pub const COLLISION_CAPTIONS: &[&str] = &[
    "the ego vehicle crashes into a car that cuts in from the right",
    "a pedestrian steps onto the road and is hit by the ego car",
    "the ego car collides with a stopped truck at the intersection",
    "the ego car rear-ends the vehicle ahead in dense traffic",
    "the vehicle loses control and strikes a roadside barrier",
    "a cyclist is struck while crossing in front of the ego car",
];

pub const NORMAL_CAPTIONS: &[&str] = &[
    "the car drives steadily along an empty highway",
    "the ego vehicle waits at a red light and then proceeds",
    "the car follows its lane through light suburban traffic",
    "the vehicle turns left at a clear junction",
    "the car slows for a crosswalk with nobody on it",
    "the ego vehicle merges smoothly onto the main road",
];

/// Desk-scale stand-in for a recorded collision dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_normal: usize,
    pub n_collision: usize,
    pub feature_dim: usize,
    /// Mean shift of event-window snippet features along a fixed direction.
    pub separation: f64,
    /// Event length in snippets.
    pub event_window: usize,
    pub snippets: usize,
    pub snippet_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_normal: 100,
            n_collision: 100,
            feature_dim: 32,
            separation: 4.0,
            event_window: 1,
            snippets: 5,
            snippet_len: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return Err(VlaadError::invalid("separation must be a finite value >= 0"));
        }
        if self.feature_dim == 0 || self.snippets == 0 || self.snippet_len == 0 {
            return Err(VlaadError::invalid("feature_dim, snippets and snippet_len must be >= 1"));
        }
        if self.n_normal + self.n_collision == 0 {
            return Err(VlaadError::Empty("synthetic dataset"));
        }
        if self.event_window == 0 || self.event_window > self.snippets {
            return Err(VlaadError::invalid("event_window must lie in 1..=snippets"));
        }
        Ok(())
    }

    /// Unit direction of the event mean shift.
    pub fn event_direction(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xD1EC_7100);
        let v: Vec<f64> = (0..self.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }
}

/// Negatives first, then positives. Each snippet draws one standard-normal
/// feature vector that is repeated for all of its frames; positives add
/// `separation * direction` to the snippets of one randomly placed event
/// window, whose snippet range is recorded on the clip.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<Vec<ClipRecord>> {
    cfg.validate()?;
    let dir = cfg.event_direction();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.n_normal + cfg.n_collision;
    let mut out = Vec::with_capacity(total);
    for i in 0..total {
        let positive = i >= cfg.n_normal;
        let mut snippets: Vec<Vec<f64>> = (0..cfg.snippets)
            .map(|_| (0..cfg.feature_dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let event = if positive {
            let start = rng.random_range(0..=cfg.snippets - cfg.event_window);
            for s in &mut snippets[start..start + cfg.event_window] {
                for (x, u) in s.iter_mut().zip(&dir) {
                    *x += cfg.separation * u;
                }
            }
            Some([start, start + cfg.event_window])
        } else {
            None
        };
        let pool = if positive { COLLISION_CAPTIONS } else { NORMAL_CAPTIONS };
        let caption = pool[rng.random_range(0..pool.len())].to_string();

        let mut data = Vec::with_capacity(cfg.snippets * cfg.snippet_len * cfg.feature_dim);
        for s in &snippets {
            for _ in 0..cfg.snippet_len {
                data.extend(s.iter().map(|&x| x as f32));
            }
        }
        let frames = FeatureMatrix::new(cfg.snippets * cfg.snippet_len, cfg.feature_dim, data)?;
        out.push(ClipRecord {
            clip_id: format!("synth-{i:05}"),
            frames: Frames::Inline(frames),
            caption,
            label: positive,
            collision_frame: event.map(|[s, _]| s * cfg.snippet_len + cfg.snippet_len / 2),
            infraction: None,
            split: Split::Train,
            source: ClipSource::Synthetic,
            event_window: event,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::write_manifest;

    #[test]
    fn balanced_counts_and_windows() {
        let cfg = SynthConfig {
            n_normal: 10,
            n_collision: 10,
            ..Default::default()
        };
        let recs = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(recs.len(), 20);
        assert_eq!(recs.iter().filter(|r| r.label).count(), 10);
        for r in &recs {
            r.validate().unwrap();
            assert_eq!(r.label, r.event_window.is_some());
            assert_eq!(r.feature_matrix().unwrap().rows(), 40);
        }
    }

    #[test]
    fn manifest_bytes_are_seed_determined() {
        let cfg = SynthConfig {
            n_normal: 4,
            n_collision: 4,
            seed: 3,
            ..Default::default()
        };
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_manifest(&mut a, &generate_synthetic_dataset(&cfg).unwrap()).unwrap();
        write_manifest(&mut b, &generate_synthetic_dataset(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        let other = SynthConfig { seed: 4, ..cfg };
        write_manifest(&mut c, &generate_synthetic_dataset(&other).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn caption_pools_disjoint() {
        for c in COLLISION_CAPTIONS {
            assert!(!NORMAL_CAPTIONS.contains(c));
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = SynthConfig {
            separation: -1.0,
            ..Default::default()
        };
        assert!(generate_synthetic_dataset(&bad).is_err());
        let bad = SynthConfig {
            event_window: 6,
            ..Default::default()
        };
        assert!(generate_synthetic_dataset(&bad).is_err());
    }
}
