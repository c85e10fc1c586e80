//! Causal streaming inference and the risk token handed to a driving policy.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datakit::ClipRecord;
use crate::embeddings::{encode_video_snippet, Encoder, FrameWindow};
use crate::error::{Result, VlaadError};
use crate::mil::{segment_clip, sigmoid, RiskTrace};
use crate::model::{adapt, detect_logit, forward_bag, ModelCheckpoint};

pub const DEFAULT_BUFFER_FRAMES: usize = 8;
pub const DEFAULT_SUBSAMPLE_PERIOD: u64 = 5;
pub const DEFAULT_TICK_RATE_HZ: f64 = 20.0;

/// Ring of the most recent subsampled frames. Frames enter only on ticks
/// divisible by the subsample period, so the token at tick `t` depends on
/// frames from ticks `<= t` alone.
#[derive(Debug, Clone)]
pub struct CausalBuffer {
    capacity: usize,
    subsample_period: u64,
    tick_rate: f64,
    frames: VecDeque<(u64, Vec<f64>)>,
    last_tick: Option<u64>,
    last_update_tick: Option<u64>,
    cached: f64,
    encoder_calls: u64,
}

impl Default for CausalBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_BUFFER_FRAMES, DEFAULT_SUBSAMPLE_PERIOD, DEFAULT_TICK_RATE_HZ)
            .expect("default layout is valid")
    }
}

impl CausalBuffer {
    pub fn new(capacity: usize, subsample_period: u64, tick_rate: f64) -> Result<Self> {
        if capacity == 0 || subsample_period == 0 {
            return Err(VlaadError::invalid("buffer capacity and subsample period must be >= 1"));
        }
        if !(tick_rate > 0.0) || !tick_rate.is_finite() {
            return Err(VlaadError::invalid("tick rate must be positive"));
        }
        Ok(Self {
            capacity,
            subsample_period,
            tick_rate,
            frames: VecDeque::with_capacity(capacity),
            last_tick: None,
            last_update_tick: None,
            cached: 0.5,
            encoder_calls: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn subsample_period(&self) -> u64 {
        self.subsample_period
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn encoder_calls(&self) -> u64 {
        self.encoder_calls
    }

    pub fn last_update_tick(&self) -> Option<u64> {
        self.last_update_tick
    }

    /// Ticks of the buffered frames, oldest first.
    pub fn buffered_ticks(&self) -> Vec<u64> {
        self.frames.iter().map(|(t, _)| *t).collect()
    }

    pub fn cached_token(&self) -> f64 {
        self.cached
    }

    fn compute(&mut self, encoder: &dyn Encoder, ckpt: &ModelCheckpoint) -> Result<f64> {
        if self.frames.is_empty() {
            return Ok(0.5);
        }
        let rows: Vec<Vec<f64>> = self.frames.iter().map(|(_, f)| f.clone()).collect();
        let ts: Vec<f64> = self.frames.iter().map(|(t, _)| *t as f64 / self.tick_rate).collect();
        let window = FrameWindow::new(rows, ts)?;
        self.encoder_calls += 1;
        let e = encode_video_snippet(&window, encoder)?;
        Ok(sigmoid(detect_logit(&adapt(&e, &ckpt.adapter)?, &ckpt.detector)?))
    }

    /// Feeds one simulator tick. Update ticks admit `frame` and recompute the
    /// token; other ticks return the cached token, or recompute it over the
    /// unchanged buffer when `caching` is off.
    pub fn push_tick(
        &mut self,
        frame: &[f64],
        tick: u64,
        encoder: &dyn Encoder,
        ckpt: &ModelCheckpoint,
        caching: bool,
    ) -> Result<f64> {
        if let Some(last) = self.last_tick {
            if tick <= last {
                return Err(VlaadError::OutOfOrderTick { tick, last });
            }
        }
        if let Some((_, f)) = self.frames.front() {
            if f.len() != frame.len() {
                return Err(VlaadError::DimensionMismatch {
                    expected: f.len(),
                    actual: frame.len(),
                });
            }
        }
        self.last_tick = Some(tick);
        if tick % self.subsample_period == 0 {
            if frame.iter().any(|v| !v.is_finite()) {
                return Err(VlaadError::NonFinite("frame features"));
            }
            if self.frames.len() == self.capacity {
                self.frames.pop_front();
            }
            self.frames.push_back((tick, frame.to_vec()));
            self.last_update_tick = Some(tick);
            self.cached = self.compute(encoder, ckpt)?;
            return Ok(self.cached);
        }
        if caching {
            Ok(self.cached)
        } else {
            self.compute(encoder, ckpt)
        }
    }
}

/// Per-snippet risk over a whole clip, with snippet start times in seconds.
pub fn score_clip_trace(
    clip: &ClipRecord,
    ckpt: &ModelCheckpoint,
    snippet_len: usize,
    stride: usize,
    encoder: &dyn Encoder,
) -> Result<(RiskTrace, Vec<f64>)> {
    let bag = segment_clip(clip, snippet_len, stride, encoder)?;
    let trace = forward_bag(&bag, ckpt)?;
    Ok((trace, bag.start_times))
}

pub fn write_trace_csv<W: Write>(mut w: W, trace: &RiskTrace, starts: &[f64], header: bool) -> Result<()> {
    if header {
        writeln!(w, "clip_id,snippet_index,t_start_s,logit,prob,attention")?;
    }
    let att = trace.attention();
    for (i, (z, a)) in trace.logits.iter().zip(&att).enumerate() {
        writeln!(w, "{},{},{},{},{},{}", trace.clip_id, i, starts[i], z, sigmoid(*z), a)?;
    }
    Ok(())
}

/// Policy-side state: `[risk, ego_velocity, onehot(command)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub risk: f64,
    pub ego_velocity: f64,
    pub command: Vec<f64>,
}

impl GlobalState {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 + self.command.len());
        v.push(self.risk);
        v.push(self.ego_velocity);
        v.extend_from_slice(&self.command);
        v
    }

    pub fn len(&self) -> usize {
        2 + self.command.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.risk) {
            return Err(VlaadError::invalid(format!("risk {} outside [0, 1]", self.risk)));
        }
        if !(self.ego_velocity >= 0.0) || !self.ego_velocity.is_finite() {
            return Err(VlaadError::invalid("ego velocity must be finite and >= 0"));
        }
        let ones = self.command.iter().filter(|&&c| c == 1.0).count();
        let zeros = self.command.iter().filter(|&&c| c == 0.0).count();
        if ones != 1 || ones + zeros != self.command.len() {
            return Err(VlaadError::invalid("command must be one-hot"));
        }
        Ok(())
    }
}

pub fn make_global_state(risk: f64, velocity: f64, command_index: usize, n_commands: usize) -> Result<GlobalState> {
    if command_index >= n_commands {
        return Err(VlaadError::invalid(format!(
            "command index {command_index} out of range for {n_commands} commands"
        )));
    }
    let mut command = vec![0.0; n_commands];
    command[command_index] = 1.0;
    let s = GlobalState {
        risk,
        ego_velocity: velocity,
        command,
    };
    s.validate()?;
    Ok(s)
}

/// Affine stand-in for a waypoint decoder: two (x, y) offsets from the
/// state vector. `weights` is 4 x state_len, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub state_len: usize,
    pub weights: Vec<f64>,
    pub bias: [f64; 4],
}

impl ToyPolicy {
    pub fn zeros(state_len: usize) -> Self {
        Self {
            state_len,
            weights: vec![0.0; 4 * state_len],
            bias: [0.0; 4],
        }
    }
}

pub fn toy_policy_step(state: &GlobalState, policy: &ToyPolicy) -> Result<[f64; 4]> {
    state.validate()?;
    if policy.weights.len() != 4 * policy.state_len {
        return Err(VlaadError::DimensionMismatch {
            expected: 4 * policy.state_len,
            actual: policy.weights.len(),
        });
    }
    if state.len() != policy.state_len {
        return Err(VlaadError::DimensionMismatch {
            expected: policy.state_len,
            actual: state.len(),
        });
    }
    let x = state.to_vec();
    let mut out = policy.bias;
    for (r, o) in out.iter_mut().enumerate() {
        let row = &policy.weights[r * policy.state_len..(r + 1) * policy.state_len];
        *o += row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
    }
    Ok(out)
}
