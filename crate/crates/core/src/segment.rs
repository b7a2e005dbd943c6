//! Scene partitioning into overlapping windows, range filtering, automatic
//! "stopped" labels and frame sub-sampling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Quaternion};
use crate::motion::{self, ActionLabel, MotionError, Thresholds};
use crate::scene::{EgoPose, SceneBundle};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SegmentError {
    #[error("invalid segmentation parameter {name}: {reason}")]
    InvalidParam { name: &'static str, reason: String },
    #[error("scene has {frames} frames but the window needs {window}")]
    SceneTooShort { frames: usize, window: usize },
    #[error("segment is empty")]
    EmptySegment,
    #[error("track {0} not found in scene")]
    UnknownTrack(String),
    #[error("track {track_id} has {states} state(s) inside the segment, need at least 2")]
    InsufficientStates { track_id: String, states: usize },
    #[error(transparent)]
    Motion(#[from] MotionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationParams {
    pub num_segments: usize,
    /// Seconds.
    pub window: f64,
    /// Meters.
    pub range_limit: f64,
    /// Meters.
    pub still_displacement: f64,
    /// Frames sampled per segment for chain-of-thought descriptions.
    pub frames_per_segment_cot: usize,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self { num_segments: 10, window: 5.0, range_limit: 50.0, still_displacement: 1.0, frames_per_segment_cot: 4 }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<(), SegmentError> {
        let bad = |name, reason: &str| Err(SegmentError::InvalidParam { name, reason: reason.into() });
        if self.num_segments < 1 {
            return bad("num_segments", "must be >= 1");
        }
        if !(self.window > 0.0) {
            return bad("window", "must be > 0");
        }
        if !(self.range_limit > 0.0) {
            return bad("range_limit", "must be > 0");
        }
        if !(self.still_displacement > 0.0) {
            return bad("still_displacement", "must be > 0");
        }
        if self.frames_per_segment_cot < 1 {
            return bad("frames_per_segment_cot", "must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_index: usize,
    /// Contiguous, ascending.
    pub frame_indices: Vec<u32>,
    pub tracks_in_range: Vec<String>,
    /// Labels assigned without human input (currently only `Stopped`).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub auto_labels: BTreeMap<String, ActionLabel>,
}

impl Segment {
    pub fn first_frame(&self) -> u32 {
        self.frame_indices[0]
    }

    pub fn last_frame(&self) -> u32 {
        *self.frame_indices.last().expect("segments are non-empty")
    }

    pub fn contains(&self, frame: u32) -> bool {
        !self.frame_indices.is_empty() && frame >= self.first_frame() && frame <= self.last_frame()
    }

    /// Midpoint of the window in frame units.
    pub fn center(&self) -> f64 {
        (self.first_frame() as f64 + self.last_frame() as f64) / 2.0
    }
}

/// Window length in frames for a given rate.
pub fn window_frames(params: &SegmentationParams, rate_hz: f64) -> usize {
    (params.window * rate_hz).round() as usize
}

/// Start frame of each window: uniform coverage so the first window starts at 0
/// and the last one ends at the final frame.
pub fn window_starts(num_frames: usize, window: usize, num_segments: usize) -> Vec<usize> {
    if num_segments == 1 {
        return vec![0];
    }
    let span = (num_frames - window) as f64;
    let stride = span / (num_segments - 1) as f64;
    (0..num_segments).map(|i| (i as f64 * stride).round() as usize).collect()
}

/// Splits a scene into `num_segments` overlapping windows and fills the in-range
/// track list and automatic labels of each.
pub fn partition_scene(bundle: &SceneBundle, p: &SegmentationParams) -> Result<Vec<Segment>, SegmentError> {
    p.validate()?;
    let n = bundle.num_frames();
    let w = window_frames(p, bundle.nominal_rate);
    if w == 0 {
        return Err(SegmentError::InvalidParam { name: "window", reason: "rounds to zero frames".into() });
    }
    if n < w {
        return Err(SegmentError::SceneTooShort { frames: n, window: w });
    }
    let segments = window_starts(n, w, p.num_segments)
        .into_iter()
        .enumerate()
        .map(|(segment_index, start)| {
            let mut seg = Segment {
                segment_index,
                frame_indices: (start as u32..(start + w) as u32).collect(),
                tracks_in_range: Vec::new(),
                auto_labels: BTreeMap::new(),
            };
            seg.tracks_in_range = filter_vehicles(bundle, &seg, p.range_limit);
            for track_id in &seg.tracks_in_range {
                if let Some(label) = auto_label_stopped(bundle, &seg, track_id, p.still_displacement) {
                    seg.auto_labels.insert(track_id.clone(), label);
                }
            }
            seg
        })
        .collect();
    Ok(segments)
}

/// Tracks that come within `range_limit` (x-y distance to the ego at the same frame)
/// at some segment frame and are front-camera visible at some segment frame.
pub fn filter_vehicles(bundle: &SceneBundle, seg: &Segment, range_limit: f64) -> Vec<String> {
    bundle
        .tracks
        .iter()
        .filter(|track| {
            let mut near = false;
            let mut seen = false;
            for s in track.states.iter().filter(|s| seg.contains(s.frame_index)) {
                if let Some(ego) = bundle.ego_poses.get(s.frame_index as usize) {
                    near |= geom::planar_distance(s.center, ego.translation) <= range_limit;
                }
                seen |= s.visible_in_front_camera;
            }
            near && seen
        })
        .map(|t| t.track_id.clone())
        .collect()
}

/// `Stopped` when the track's centers never move `still_displacement` or more
/// (max pairwise planar distance) inside the segment.
pub fn auto_label_stopped(
    bundle: &SceneBundle,
    seg: &Segment,
    track_id: &str,
    still_displacement: f64,
) -> Option<ActionLabel> {
    let track = bundle.track(track_id)?;
    let centers: Vec<_> = track.states.iter().filter(|s| seg.contains(s.frame_index)).map(|s| s.center).collect();
    if centers.len() < 2 {
        return None;
    }
    let mut max_disp: f64 = 0.0;
    for (i, a) in centers.iter().enumerate() {
        for b in &centers[i + 1..] {
            max_disp = max_disp.max(geom::planar_distance(*a, *b));
        }
    }
    (max_disp < still_displacement).then_some(ActionLabel::Stopped)
}

/// `k` frames spread uniformly over the segment, always including both ends when
/// `k >= 2`; `k == 1` picks the middle frame.
pub fn sample_frames(seg: &Segment, k: usize) -> Result<Vec<u32>, SegmentError> {
    let n = seg.frame_indices.len();
    if n == 0 {
        return Err(SegmentError::EmptySegment);
    }
    if k == 0 {
        return Err(SegmentError::InvalidParam { name: "k", reason: "must be >= 1".into() });
    }
    if k == 1 {
        return Ok(vec![seg.frame_indices[(n - 1) / 2]]);
    }
    let mut out: Vec<u32> = Vec::with_capacity(k);
    for j in 0..k {
        let pos = (j as f64 * (n - 1) as f64 / (k - 1) as f64).round() as usize;
        let frame = seg.frame_indices[pos];
        if out.last() != Some(&frame) {
            out.push(frame);
        }
    }
    Ok(out)
}

/// Pseudo ego-pose sequence built from a track's in-segment states.
pub fn track_pseudo_poses(bundle: &SceneBundle, seg: &Segment, track_id: &str) -> Result<Vec<EgoPose>, SegmentError> {
    let track = bundle.track(track_id).ok_or_else(|| SegmentError::UnknownTrack(track_id.to_string()))?;
    let poses: Vec<EgoPose> = track
        .states
        .iter()
        .filter(|s| seg.contains(s.frame_index))
        .filter_map(|s| {
            bundle
                .frames
                .get(s.frame_index as usize)
                .map(|f| EgoPose::new(f.t, s.center, Quaternion::from_yaw(s.yaw)))
        })
        .collect();
    if poses.len() < 2 {
        return Err(SegmentError::InsufficientStates { track_id: track_id.to_string(), states: poses.len() });
    }
    Ok(poses)
}

/// Classifier output for a non-ego track; a pre-annotation hint only.
pub fn suggest_track_label(
    bundle: &SceneBundle,
    seg: &Segment,
    track_id: &str,
    thr: &Thresholds,
) -> Result<ActionLabel, SegmentError> {
    let poses = track_pseudo_poses(bundle, seg, track_id)?;
    Ok(motion::classify_motion(&poses, thr)?)
}

/// Ego poses restricted to the segment's frames.
pub fn segment_ego_poses<'a>(bundle: &'a SceneBundle, seg: &Segment) -> &'a [EgoPose] {
    let lo = seg.first_frame() as usize;
    let hi = (seg.last_frame() as usize + 1).min(bundle.ego_poses.len());
    &bundle.ego_poses[lo.min(hi)..hi]
}
