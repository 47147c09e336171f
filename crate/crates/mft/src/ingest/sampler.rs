//! Fixed-length observation windows with time-to-event filtering.

use serde::{Deserialize, Serialize};

use super::annotation::{FrameAnnotation, PedestrianTrack};
use crate::error::{MftError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_frames: usize,
    pub overlap: f64,
    /// Inclusive TTE range in frames between the window's last frame and the event.
    pub tte_min: i64,
    pub tte_max: i64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_frames: 16,
            overlap: 0.8,
            tte_min: 30,
            tte_max: 60,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 {
            return Err(MftError::Config(format!(
                "n_frames must be at least 2, got {}",
                self.n_frames
            )));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(MftError::Config(format!(
                "overlap must lie in [0, 1), got {}",
                self.overlap
            )));
        }
        if self.tte_min < 0 || self.tte_min > self.tte_max {
            return Err(MftError::Config(format!(
                "invalid TTE range [{}, {}]",
                self.tte_min, self.tte_max
            )));
        }
        Ok(())
    }

    /// Window stride: 16 frames at 80% overlap share 13 frames, so stride 3.
    pub fn stride(&self) -> i64 {
        ((self.n_frames as f64 * (1.0 - self.overlap)).round() as i64).max(1)
    }
}

/// A window of consecutive raw frames cut from one track.
#[derive(Clone, Debug, PartialEq)]
pub struct RawClip {
    pub pedestrian_id: String,
    pub frames: Vec<FrameAnnotation>,
    pub label: u8,
    pub tte_frames: i64,
}

impl RawClip {
    pub fn end_frame(&self) -> i64 {
        self.frames.last().expect("clips are non-empty").frame_index
    }
}

/// Last-frame indices of every window emitted for `track`.
///
/// A window ending at `t` is admissible when frames `t-n+1..=t` are all
/// annotated and `tte_min <= event - t <= tte_max`. Admissible windows are
/// kept on a stride lattice anchored at the earliest one.
pub fn window_ends(track: &PedestrianTrack, config: &SamplerConfig) -> Vec<i64> {
    let n = config.n_frames as i64;
    let frames = &track.frames;
    let stride = config.stride();
    let (Some(first), Some(last)) = (frames.first(), frames.last()) else {
        return Vec::new();
    };
    let lo = (track.event_frame - config.tte_max).max(first.frame_index + n - 1);
    let hi = (track.event_frame - config.tte_min).min(last.frame_index);
    let mut ends = Vec::new();
    let mut anchor = None;
    for t in lo..=hi {
        if let Some(a) = anchor {
            if (t - a) % stride != 0 {
                continue;
            }
        }
        let Ok(pos) = frames.binary_search_by_key(&t, |f| f.frame_index) else {
            continue;
        };
        let contiguous = pos as i64 >= n - 1
            && frames[pos + 1 - n as usize].frame_index == t - n + 1;
        if contiguous {
            anchor.get_or_insert(t);
            ends.push(t);
        }
    }
    ends
}

/// Cuts every admissible window out of `track`. Tracks too short for any
/// window yield an empty list.
pub fn sample_clips(track: &PedestrianTrack, config: &SamplerConfig) -> Vec<RawClip> {
    let n = config.n_frames;
    window_ends(track, config)
        .into_iter()
        .map(|t| {
            let pos = track
                .frames
                .binary_search_by_key(&t, |f| f.frame_index)
                .expect("window end is annotated");
            RawClip {
                pedestrian_id: track.pedestrian_id.clone(),
                frames: track.frames[pos + 1 - n..=pos].to_vec(),
                label: track.label,
                tte_frames: track.event_frame - t,
            }
        })
        .collect()
}
