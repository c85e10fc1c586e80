use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    ClipRecord, ClipSource, FeatureMatrix, Frames, InfractionLog, Split, ASSEMBLY_WINDOW, AUGMENT_WINDOW,
    CLIP_FRAMES,
};
use crate::error::{Result, VlaadError};

/// Negatives keep this many frames away from any infraction.
const GUARD_FRAMES: usize = 40;

/// A continuous 4 Hz recording of per-frame features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameStream {
    pub stream_id: String,
    pub frames: Vec<Vec<f32>>,
}

impl FrameStream {
    fn crop(&self, start: i64) -> Result<FeatureMatrix> {
        // Indices outside the stream repeat the edge frame.
        let last = self.frames.len() as i64 - 1;
        let rows: Vec<Vec<f32>> = (start..start + CLIP_FRAMES as i64)
            .map(|i| self.frames[i.clamp(0, last) as usize].clone())
            .collect();
        FeatureMatrix::from_rows(&rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedInfraction {
    pub frame_number: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct AssemblyReport {
    pub clips: Vec<ClipRecord>,
    pub skipped: Vec<SkippedInfraction>,
}

/// Cuts a stream into 40-frame clips: one positive per infraction with the
/// collision placed uniformly in frames 10..=30 of the clip, and negatives
/// tiled over whatever lies outside the guard band around every infraction.
pub fn assemble_clips(stream: &FrameStream, logs: &[InfractionLog], seed: u64) -> Result<AssemblyReport> {
    let n = stream.frames.len();
    if let Some(w) = stream.frames.first().map(Vec::len) {
        if stream.frames.iter().any(|f| f.len() != w) {
            return Err(VlaadError::invalid("stream frames have inconsistent widths"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = AssemblyReport::default();
    let (lo, hi) = ASSEMBLY_WINDOW;
    let mut blocked = vec![false; n];

    for (i, log) in logs.iter().enumerate() {
        let f = log.frame_number as usize;
        if f >= n {
            return Err(VlaadError::invalid(format!(
                "infraction at frame {f} beyond stream of {n} frames"
            )));
        }
        for b in blocked
            .iter_mut()
            .take((f + GUARD_FRAMES + 1).min(n))
            .skip(f.saturating_sub(GUARD_FRAMES))
        {
            *b = true;
        }
        // Every placement in [lo, hi] must fit inside the stream.
        if f < hi || f + (CLIP_FRAMES - lo) > n {
            report.skipped.push(SkippedInfraction {
                frame_number: log.frame_number,
                reason: format!("too close to stream bounds for a {lo}..={hi} placement"),
            });
            continue;
        }
        let k = rng.random_range(lo..=hi);
        let start = f - k;
        let frames = stream.crop(start as i64)?;
        report.clips.push(ClipRecord {
            clip_id: format!("{}-pos-{i:04}", stream.stream_id),
            frames: Frames::Inline(frames),
            caption: log.message.clone(),
            label: true,
            collision_frame: Some(k),
            infraction: Some(log.clone()),
            split: Split::Train,
            source: ClipSource::Assembled,
            event_window: None,
        });
    }

    let mut neg = 0usize;
    let mut run_start = None;
    for idx in 0..=n {
        let free = idx < n && !blocked[idx];
        match (free, run_start) {
            (true, None) => run_start = Some(idx),
            (false, Some(s)) => {
                let mut start = s;
                while start + CLIP_FRAMES <= idx {
                    report.clips.push(ClipRecord {
                        clip_id: format!("{}-neg-{neg:04}", stream.stream_id),
                        frames: Frames::Inline(stream.crop(start as i64)?),
                        caption: String::new(),
                        label: false,
                        collision_frame: None,
                        infraction: None,
                        split: Split::Train,
                        source: ClipSource::Assembled,
                        event_window: None,
                    });
                    neg += 1;
                    start += CLIP_FRAMES;
                }
                run_start = None;
            }
            _ => {}
        }
    }
    Ok(report)
}

/// Re-crops a positive clip `copies` times with the collision frame drawn
/// uniformly from 0.1 to 0.9 of the clip length.
///
/// With a source stream the crop uses the infraction's absolute frame;
/// without one the clip's own frames serve as the stream. Either way,
/// frames past the available data repeat the edge frame.
pub fn augment_collision_position(
    clip: &ClipRecord,
    stream: Option<&FrameStream>,
    copies: usize,
    seed: u64,
) -> Result<Vec<ClipRecord>> {
    let k0 = match (clip.label, clip.collision_frame) {
        (true, Some(k)) => k,
        _ => {
            return Err(VlaadError::invalid(format!(
                "clip {} is not a positive clip",
                clip.clip_id
            )))
        }
    };
    let own;
    let (source, collision_abs) = match (stream, &clip.infraction) {
        (Some(s), Some(log)) => (s, log.frame_number as i64),
        _ => {
            let m = clip.feature_matrix()?;
            own = FrameStream {
                stream_id: clip.clip_id.clone(),
                frames: (0..m.rows()).map(|r| m.row(r).to_vec()).collect(),
            };
            (&own, k0 as i64)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = AUGMENT_WINDOW;
    (0..copies)
        .map(|c| {
            let k = rng.random_range(lo..=hi);
            Ok(ClipRecord {
                clip_id: format!("{}-aug{c}", clip.clip_id),
                frames: Frames::Inline(source.crop(collision_abs - k as i64)?),
                collision_frame: Some(k),
                source: ClipSource::Augmented,
                ..clip.clone()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::InfractionType;

    fn stream(n: usize) -> FrameStream {
        FrameStream {
            stream_id: "s".into(),
            frames: (0..n).map(|i| vec![i as f32, 1.0]).collect(),
        }
    }

    fn log(frame: u64) -> InfractionLog {
        InfractionLog {
            frame_number: frame,
            infraction_type: InfractionType::Pedestrian,
            message: "Agent collided against object with type=walker.pedestrian.0001".into(),
            scenario_type: "PedestrianCrossing".into(),
        }
    }

    #[test]
    fn single_infraction_placement() {
        let r = assemble_clips(&stream(400), &[log(200)], 5).unwrap();
        let pos: Vec<_> = r.clips.iter().filter(|c| c.label).collect();
        assert_eq!(pos.len(), 1);
        let k = pos[0].collision_frame.unwrap();
        assert!((10..=30).contains(&k));
        // The collision frame in the clip is frame 200 of the stream.
        let m = pos[0].feature_matrix().unwrap();
        assert_eq!(m.row(k)[0], 200.0);
        for c in &r.clips {
            assert_eq!(c.feature_matrix().unwrap().rows(), 40);
            c.validate().unwrap();
        }
    }

    #[test]
    fn negatives_respect_guard_band() {
        let r = assemble_clips(&stream(400), &[log(200)], 5).unwrap();
        for c in r.clips.iter().filter(|c| !c.label) {
            let m = c.feature_matrix().unwrap();
            let first = m.row(0)[0] as usize;
            let last = m.row(39)[0] as usize;
            assert!(last < 160 || first > 240, "{first}..{last}");
        }
        // [0,160) holds 4 clips, (240,400) holds 3.
        assert_eq!(r.clips.iter().filter(|c| !c.label).count(), 7);
    }

    #[test]
    fn no_infractions_tiles_stream() {
        let r = assemble_clips(&stream(415), &[], 0).unwrap();
        assert_eq!(r.clips.len(), 415 / 40);
        assert!(r.clips.iter().all(|c| !c.label));
    }

    #[test]
    fn infractions_near_edges_skipped() {
        let r = assemble_clips(&stream(400), &[log(20), log(385)], 1).unwrap();
        assert_eq!(r.skipped.len(), 2);
        assert!(r.clips.iter().all(|c| !c.label));
    }

    #[test]
    fn augmentation_copies_and_range() {
        let base = assemble_clips(&stream(400), &[log(200)], 5).unwrap();
        let pos = base.clips.iter().find(|c| c.label).unwrap();
        let s = stream(400);
        let out = augment_collision_position(pos, Some(&s), 5, 9).unwrap();
        assert_eq!(out.len(), 5);
        for (i, c) in out.iter().enumerate() {
            let k = c.collision_frame.unwrap();
            assert!((4..=36).contains(&k));
            assert_eq!(c.feature_matrix().unwrap().row(k)[0], 200.0);
            assert_eq!(c.clip_id, format!("{}-aug{i}", pos.clip_id));
            assert!(c.label);
            c.validate().unwrap();
        }
        assert!(augment_collision_position(pos, None, 0, 9).unwrap().is_empty());
    }

    #[test]
    fn augmentation_without_stream_recrops_clip() {
        let base = assemble_clips(&stream(400), &[log(200)], 5).unwrap();
        let pos = base.clips.iter().find(|c| c.label).unwrap();
        for c in augment_collision_position(pos, None, 8, 2).unwrap() {
            let k = c.collision_frame.unwrap();
            assert_eq!(c.feature_matrix().unwrap().row(k)[0], 200.0);
        }
    }

    #[test]
    fn augmentation_rejects_negatives() {
        let r = assemble_clips(&stream(80), &[], 0).unwrap();
        assert!(augment_collision_position(&r.clips[0], None, 5, 0).is_err());
    }
}
