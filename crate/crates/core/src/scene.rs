//! Neutral scene data model: keyframes, ego poses and vehicle tracks.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geom::{Quaternion, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    /// Seconds.
    #[serde(rename = "t")]
    pub timestamp: f64,
    /// Meters, global frame.
    pub translation: Vec3,
    /// Global-from-local rotation.
    pub rotation: Quaternion,
}

impl EgoPose {
    pub fn new(timestamp: f64, translation: Vec3, rotation: Quaternion) -> Self {
        Self { timestamp, translation, rotation }
    }
}

/// The closed set of vehicle classes questions may refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VehicleCategory {
    #[serde(rename = "car")]
    Car,
    #[serde(rename = "bus")]
    Bus,
    #[serde(rename = "bicycle")]
    Bicycle,
    #[serde(rename = "construction vehicle")]
    ConstructionVehicle,
    #[serde(rename = "motorcycle")]
    Motorcycle,
    #[serde(rename = "trailer")]
    Trailer,
    #[serde(rename = "truck")]
    Truck,
    #[serde(rename = "emergency vehicle")]
    EmergencyVehicle,
}

impl VehicleCategory {
    pub const ALL: [VehicleCategory; 8] = [
        VehicleCategory::Car,
        VehicleCategory::Bus,
        VehicleCategory::Bicycle,
        VehicleCategory::ConstructionVehicle,
        VehicleCategory::Motorcycle,
        VehicleCategory::Trailer,
        VehicleCategory::Truck,
        VehicleCategory::EmergencyVehicle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            VehicleCategory::Car => "car",
            VehicleCategory::Bus => "bus",
            VehicleCategory::Bicycle => "bicycle",
            VehicleCategory::ConstructionVehicle => "construction vehicle",
            VehicleCategory::Motorcycle => "motorcycle",
            VehicleCategory::Trailer => "trailer",
            VehicleCategory::Truck => "truck",
            VehicleCategory::EmergencyVehicle => "emergency vehicle",
        }
    }

    pub fn plural(&self) -> &'static str {
        match self {
            VehicleCategory::Car => "cars",
            VehicleCategory::Bus => "buses",
            VehicleCategory::Bicycle => "bicycles",
            VehicleCategory::ConstructionVehicle => "construction vehicles",
            VehicleCategory::Motorcycle => "motorcycles",
            VehicleCategory::Trailer => "trailers",
            VehicleCategory::Truck => "trucks",
            VehicleCategory::EmergencyVehicle => "emergency vehicles",
        }
    }
}

impl fmt::Display for VehicleCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VehicleCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase().replace(['_', '-'], " ");
        VehicleCategory::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown vehicle category {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    #[serde(rename = "idx")]
    pub frame_index: u32,
    pub center: Vec3,
    /// Radians, about global z.
    pub yaw: f64,
    #[serde(rename = "visible")]
    pub visible_in_front_camera: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub track_id: String,
    pub category: VehicleCategory,
    pub states: Vec<TrackState>,
}

impl ObjectTrack {
    pub fn state_at(&self, frame_index: u32) -> Option<&TrackState> {
        self.states
            .binary_search_by_key(&frame_index, |s| s.frame_index)
            .ok()
            .map(|i| &self.states[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub idx: u32,
    /// Seconds.
    pub t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

/// One scene: keyframes, one ego pose per keyframe, and vehicle tracks.
///
/// Frame indices are positions: `frames[i].idx == i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneBundle {
    pub scene_id: String,
    #[serde(rename = "nominal_rate_hz")]
    pub nominal_rate: f64,
    pub frames: Vec<Frame>,
    pub ego_poses: Vec<EgoPose>,
    pub tracks: Vec<ObjectTrack>,
}

impl SceneBundle {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn track(&self, track_id: &str) -> Option<&ObjectTrack> {
        self.tracks.iter().find(|t| t.track_id == track_id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene bundle serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }
}

/// Machine-readable violation codes reported by [`validate_bundle`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    QuatNotUnit,
    NonMonotoneTime,
    PoseCountMismatch,
    FrameIndexOrder,
    DanglingFrame,
    NonMonotoneTrack,
    DuplicateTrackId,
    NonPositiveRate,
    NonFiniteValue,
}

impl ViolationCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViolationCode::QuatNotUnit => "QUAT_NOT_UNIT",
            ViolationCode::NonMonotoneTime => "NON_MONOTONE_TIME",
            ViolationCode::PoseCountMismatch => "POSE_COUNT_MISMATCH",
            ViolationCode::FrameIndexOrder => "FRAME_INDEX_ORDER",
            ViolationCode::DanglingFrame => "DANGLING_FRAME",
            ViolationCode::NonMonotoneTrack => "NON_MONOTONE_TRACK",
            ViolationCode::DuplicateTrackId => "DUPLICATE_TRACK_ID",
            ViolationCode::NonPositiveRate => "NON_POSITIVE_RATE",
            ViolationCode::NonFiniteValue => "NON_FINITE_VALUE",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn codes(&self) -> Vec<ViolationCode> {
        self.violations.iter().map(|v| v.code).collect()
    }

    fn push(&mut self, code: ViolationCode, message: impl Into<String>) {
        self.violations.push(Violation { code, message: message.into() });
    }
}

/// Checks every structural invariant of a bundle. Violations are data, never errors.
pub fn validate_bundle(bundle: &SceneBundle) -> ValidationReport {
    let mut report = ValidationReport::default();

    if !(bundle.nominal_rate > 0.0 && bundle.nominal_rate.is_finite()) {
        report.push(ViolationCode::NonPositiveRate, format!("nominal rate {} Hz", bundle.nominal_rate));
    }
    if bundle.ego_poses.len() != bundle.frames.len() {
        report.push(
            ViolationCode::PoseCountMismatch,
            format!("{} poses for {} frames", bundle.ego_poses.len(), bundle.frames.len()),
        );
    }
    for (i, frame) in bundle.frames.iter().enumerate() {
        if frame.idx as usize != i {
            report.push(ViolationCode::FrameIndexOrder, format!("frame at position {i} has idx {}", frame.idx));
        }
        if !frame.t.is_finite() {
            report.push(ViolationCode::NonFiniteValue, format!("frame {i} timestamp"));
        }
    }
    for (i, w) in bundle.frames.windows(2).enumerate() {
        if !(w[1].t > w[0].t) {
            report.push(ViolationCode::NonMonotoneTime, format!("frame {} t={} after t={}", i + 1, w[1].t, w[0].t));
        }
    }
    for (i, pose) in bundle.ego_poses.iter().enumerate() {
        if !pose.rotation.is_unit() {
            report.push(
                ViolationCode::QuatNotUnit,
                format!("ego pose {i} quaternion norm {}", pose.rotation.norm()),
            );
        }
        if !pose.translation.iter().all(|c| c.is_finite()) || !pose.timestamp.is_finite() {
            report.push(ViolationCode::NonFiniteValue, format!("ego pose {i}"));
        }
    }
    for (i, w) in bundle.ego_poses.windows(2).enumerate() {
        if !(w[1].timestamp > w[0].timestamp) {
            report.push(
                ViolationCode::NonMonotoneTime,
                format!("ego pose {} t={} after t={}", i + 1, w[1].timestamp, w[0].timestamp),
            );
        }
    }

    let mut seen = HashSet::new();
    let n = bundle.frames.len() as u32;
    for track in &bundle.tracks {
        if !seen.insert(track.track_id.as_str()) {
            report.push(ViolationCode::DuplicateTrackId, format!("track {}", track.track_id));
        }
        for s in &track.states {
            if s.frame_index >= n {
                report.push(
                    ViolationCode::DanglingFrame,
                    format!("track {} references frame {} of {n}", track.track_id, s.frame_index),
                );
            }
            if !s.center.iter().all(|c| c.is_finite()) || !s.yaw.is_finite() {
                report.push(ViolationCode::NonFiniteValue, format!("track {} frame {}", track.track_id, s.frame_index));
            }
        }
        for w in track.states.windows(2) {
            if w[1].frame_index <= w[0].frame_index {
                report.push(
                    ViolationCode::NonMonotoneTrack,
                    format!("track {} frame {} after {}", track.track_id, w[1].frame_index, w[0].frame_index),
                );
            }
        }
    }
    report
}
