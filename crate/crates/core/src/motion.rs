//! Rule-based maneuver classification from a pose sequence.
//!
//! Finite-difference velocities are rotated into the vehicle frame and summarized
//! into a handful of features (yaw change, start/end speed, mean forward and lateral
//! velocity). A fixed decision order then maps the features onto one of eight labels:
//! stopped, turn, lane change, starting, stopping, and straight as the fallback.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Quaternion, Vec3};
use crate::scene::EgoPose;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MotionError {
    #[error("quaternion is not unit (norm {0})")]
    NonUnitQuaternion(f64),
    #[error("need at least 2 poses, got {0}")]
    TooFewPoses(usize),
    #[error("timestamps not strictly increasing at pose {index} (dt = {dt})")]
    NonIncreasingTime { index: usize, dt: f64 },
    #[error("invalid threshold {name} = {value}: must be strictly positive")]
    InvalidThreshold { name: &'static str, value: f64 },
}

/// Decision thresholds. Defaults are the standard empirical values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// m/s
    pub v_stat: f64,
    /// m/s
    pub v_stopping: f64,
    /// degrees
    pub psi_turn: f64,
    /// m/s
    pub v_y_lc: f64,
    /// m/s
    pub v_x_lc: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { v_stat: 0.2, v_stopping: 1.0, psi_turn: 10.0, v_y_lc: 0.4, v_x_lc: 1.0 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), MotionError> {
        for (name, value) in [
            ("v_stat", self.v_stat),
            ("v_stopping", self.v_stopping),
            ("psi_turn", self.psi_turn),
            ("v_y_lc", self.v_y_lc),
            ("v_x_lc", self.v_x_lc),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(MotionError::InvalidThreshold { name, value });
            }
        }
        Ok(())
    }
}

/// Factor applied to `v_stopping` for the "clearly moving" side of starting/stopping.
pub const MOVING_FACTOR: f64 = 1.5;

/// Fraction of near-zero speeds above which a sequence counts as stopped.
pub const STATIONARY_MAJORITY: f64 = 0.5;

/// The eight-maneuver taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionLabel {
    Starting,
    Stopping,
    TurnLeft,
    TurnRight,
    ChangeLaneLeft,
    ChangeLaneRight,
    StraightConstantSpeed,
    Stopped,
}

impl ActionLabel {
    /// Canonical order used when listing every phrase in a prompt.
    pub const ALL: [ActionLabel; 8] = [
        ActionLabel::Starting,
        ActionLabel::Stopping,
        ActionLabel::TurnLeft,
        ActionLabel::TurnRight,
        ActionLabel::ChangeLaneLeft,
        ActionLabel::ChangeLaneRight,
        ActionLabel::StraightConstantSpeed,
        ActionLabel::Stopped,
    ];

    pub fn phrase(&self) -> &'static str {
        match self {
            ActionLabel::Starting => "Starting",
            ActionLabel::Stopping => "Stopping",
            ActionLabel::TurnLeft => "Turn left",
            ActionLabel::TurnRight => "Turn right",
            ActionLabel::ChangeLaneLeft => "Change lane to the left",
            ActionLabel::ChangeLaneRight => "Change lane to the right",
            ActionLabel::StraightConstantSpeed => "Straight, constant speed",
            ActionLabel::Stopped => "Stopped",
        }
    }

    /// Left/right swapped; the other four labels are fixed.
    pub fn mirrored(&self) -> ActionLabel {
        match self {
            ActionLabel::TurnLeft => ActionLabel::TurnRight,
            ActionLabel::TurnRight => ActionLabel::TurnLeft,
            ActionLabel::ChangeLaneLeft => ActionLabel::ChangeLaneRight,
            ActionLabel::ChangeLaneRight => ActionLabel::ChangeLaneLeft,
            other => *other,
        }
    }

    /// Looks a label up by its canonicalized phrase.
    pub fn from_phrase(s: &str) -> Option<ActionLabel> {
        let key = canonicalize_phrase(s);
        ActionLabel::ALL.into_iter().find(|a| canonicalize_phrase(a.phrase()) == key)
    }
}

impl fmt::Display for ActionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.phrase())
    }
}

impl FromStr for ActionLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionLabel::from_phrase(s).ok_or_else(|| format!("unknown action {s:?}"))
    }
}

impl Serialize for ActionLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.phrase())
    }
}

impl<'de> Deserialize<'de> for ActionLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Lowercase, punctuation stripped, whitespace collapsed.
///
/// "Straight, constant speed" and "straight constant speed" map to the same key.
pub fn canonicalize_phrase(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Yaw of the rotated body-x axis, radians in `(-pi, pi]`.
pub fn yaw_from_quaternion(q: &Quaternion) -> Result<f64, MotionError> {
    if !q.is_unit() {
        return Err(MotionError::NonUnitQuaternion(q.norm()));
    }
    let r = q.rotation_matrix();
    let yaw = r[1][0].atan2(r[0][0]);
    Ok(if yaw <= -std::f64::consts::PI { std::f64::consts::PI } else { yaw })
}

/// One finite-difference step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityStep {
    pub velocity: Vec3,
    /// Planar speed: norm of the x-y components only.
    pub speed: f64,
}

pub fn compute_velocities(poses: &[EgoPose]) -> Result<Vec<VelocityStep>, MotionError> {
    if poses.len() < 2 {
        return Err(MotionError::TooFewPoses(poses.len()));
    }
    poses
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let dt = w[1].timestamp - w[0].timestamp;
            if !(dt > 0.0) {
                return Err(MotionError::NonIncreasingTime { index: i + 1, dt });
            }
            let velocity = geom::scale(geom::sub(w[1].translation, w[0].translation), 1.0 / dt);
            Ok(VelocityStep { velocity, speed: velocity[0].hypot(velocity[1]) })
        })
        .collect()
}

/// `R^T v`: global vector into the body frame as (forward, lateral, vertical).
pub fn to_local_frame(v: Vec3, q: &Quaternion) -> Result<Vec3, MotionError> {
    if !q.is_unit() {
        return Err(MotionError::NonUnitQuaternion(q.norm()));
    }
    Ok(q.inverse_rotate(v))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MotionFeatures {
    /// Planar speed per step; `N - 1` entries.
    pub speeds: Vec<f64>,
    /// Degrees in `(-180, 180]`, positive counter-clockwise.
    pub delta_yaw: f64,
    pub omega_start: f64,
    pub omega_end: f64,
    pub mean_local_forward: f64,
    pub mean_local_lateral: f64,
}

pub fn extract_features(poses: &[EgoPose]) -> Result<MotionFeatures, MotionError> {
    let steps = compute_velocities(poses)?;
    let first = yaw_from_quaternion(&poses[0].rotation)?;
    let last = yaw_from_quaternion(&poses[poses.len() - 1].rotation)?;
    let delta_yaw = geom::wrap_degrees((last - first).to_degrees());

    // step i spans poses (i-1, i) and is rotated by pose i
    let mut sum_fwd = 0.0;
    let mut sum_lat = 0.0;
    for (step, pose) in steps.iter().zip(&poses[1..]) {
        let local = to_local_frame(step.velocity, &pose.rotation)?;
        sum_fwd += local[0];
        sum_lat += local[1];
    }
    let m = steps.len() as f64;
    let speeds: Vec<f64> = steps.iter().map(|s| s.speed).collect();
    Ok(MotionFeatures {
        omega_start: speeds[0],
        omega_end: speeds[speeds.len() - 1],
        speeds,
        delta_yaw,
        mean_local_forward: sum_fwd / m,
        mean_local_lateral: sum_lat / m,
    })
}

/// Applies the decision order to already extracted features.
pub fn classify_features(f: &MotionFeatures, thr: &Thresholds) -> ActionLabel {
    let slow = f.speeds.iter().filter(|&&w| w < thr.v_stat).count();
    if slow as f64 / f.speeds.len() as f64 > STATIONARY_MAJORITY {
        return ActionLabel::Stopped;
    }
    if f.delta_yaw.abs() > thr.psi_turn {
        return if f.delta_yaw > 0.0 { ActionLabel::TurnLeft } else { ActionLabel::TurnRight };
    }
    if f.mean_local_lateral.abs() > thr.v_y_lc && f.mean_local_forward.abs() > thr.v_x_lc {
        return if f.mean_local_lateral > 0.0 {
            ActionLabel::ChangeLaneLeft
        } else {
            ActionLabel::ChangeLaneRight
        };
    }
    let moving = MOVING_FACTOR * thr.v_stopping;
    if f.omega_start < thr.v_stopping && f.omega_end > moving {
        return ActionLabel::Starting;
    }
    if f.omega_start > moving && f.omega_end < thr.v_stopping {
        return ActionLabel::Stopping;
    }
    ActionLabel::StraightConstantSpeed
}

pub fn classify_motion(poses: &[EgoPose], thr: &Thresholds) -> Result<ActionLabel, MotionError> {
    thr.validate()?;
    let features = extract_features(poses)?;
    Ok(classify_features(&features, thr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};

    fn pose(t: f64, p: Vec3, yaw_deg: f64) -> EgoPose {
        EgoPose::new(t, p, Quaternion::from_yaw(yaw_deg.to_radians()))
    }

    /// Independent rotation-matrix oracle: yaw about z from axis-angle, applied to body x.
    fn oracle_yaw_of_z_rotation(angle: f64) -> f64 {
        let (s, c) = angle.sin_cos();
        let body_x_global = [c, s];
        body_x_global[1].atan2(body_x_global[0])
    }

    #[test]
    fn yaw_identity_is_zero() {
        assert_eq!(yaw_from_quaternion(&Quaternion::IDENTITY).unwrap(), 0.0);
    }

    #[test]
    fn yaw_quarter_turn() {
        let q = Quaternion::new(FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2);
        let expected = oracle_yaw_of_z_rotation(FRAC_PI_2);
        assert_abs_diff_eq!(expected, FRAC_PI_2, epsilon = 1e-15);
        assert_abs_diff_eq!(yaw_from_quaternion(&q).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn yaw_half_turn_is_positive_pi() {
        let q = Quaternion::new(0.0, 0.0, 0.0, 1.0);
        assert_eq!(yaw_from_quaternion(&q).unwrap(), PI);
        // -z axis form of the same rotation
        let q = Quaternion::new(0.0, 0.0, 0.0, -1.0);
        assert_eq!(yaw_from_quaternion(&q).unwrap(), PI);
    }

    #[test]
    fn yaw_rejects_non_unit() {
        assert!(matches!(
            yaw_from_quaternion(&Quaternion::new(2.0, 0.0, 0.0, 0.0)),
            Err(MotionError::NonUnitQuaternion(_))
        ));
    }

    #[test]
    fn velocity_finite_difference() {
        let v = compute_velocities(&[pose(0.0, [0.0; 3], 0.0), pose(0.5, [1.0, 0.0, 0.0], 0.0)]).unwrap();
        assert_eq!(v[0].velocity, [2.0, 0.0, 0.0]);
        assert_eq!(v[0].speed, 2.0);
    }

    #[test]
    fn velocity_zero_for_identical_translations() {
        let v = compute_velocities(&[pose(0.0, [3.0; 3], 0.0), pose(1.0, [3.0; 3], 0.0)]).unwrap();
        assert_eq!(v[0].velocity, [0.0; 3]);
        assert_eq!(v[0].speed, 0.0);
    }

    #[test]
    fn vertical_motion_has_zero_planar_speed() {
        let v = compute_velocities(&[pose(0.0, [0.0; 3], 0.0), pose(1.0, [0.0, 0.0, 3.0], 0.0)]).unwrap();
        assert_eq!(v[0].velocity, [0.0, 0.0, 3.0]);
        assert_eq!(v[0].speed, 0.0);
    }

    #[test]
    fn velocity_domain_errors() {
        assert_eq!(compute_velocities(&[pose(0.0, [0.0; 3], 0.0)]), Err(MotionError::TooFewPoses(1)));
        let r = compute_velocities(&[pose(1.0, [0.0; 3], 0.0), pose(1.0, [1.0, 0.0, 0.0], 0.0)]);
        assert!(matches!(r, Err(MotionError::NonIncreasingTime { index: 1, .. })));
    }

    #[test]
    fn local_frame_identity_and_zero() {
        let v = [1.5, -2.0, 0.25];
        assert_eq!(to_local_frame(v, &Quaternion::IDENTITY).unwrap(), v);
        let q = Quaternion::from_yaw(0.7);
        assert_eq!(to_local_frame([0.0; 3], &q).unwrap(), [0.0; 3]);
    }

    #[test]
    fn local_frame_quarter_turn() {
        // explicit R^T for a +90 deg yaw: [[0,1,0],[-1,0,0],[0,0,1]]
        let rt = [[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let expected = geom::mat_vec(&rt, [1.0, 0.0, 0.0]);
        let got = to_local_frame([1.0, 0.0, 0.0], &Quaternion::new(FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2)).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(got[k], expected[k], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(got[1], -1.0, epsilon = 1e-12);
    }

    fn straight(n: usize, speed: f64) -> Vec<EgoPose> {
        (0..n).map(|i| pose(i as f64 * 0.5, [speed * 0.5 * i as f64, 0.0, 0.0], 0.0)).collect()
    }

    #[test]
    fn features_constant_forward_motion() {
        let f = extract_features(&straight(11, 5.0)).unwrap();
        assert_eq!(f.delta_yaw, 0.0);
        assert_abs_diff_eq!(f.omega_start, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.omega_end, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.mean_local_forward, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.mean_local_lateral, 0.0, epsilon = 1e-12);
        assert_eq!(f.speeds.len(), 10);
    }

    #[test]
    fn features_yaw_endpoint_difference() {
        let f = extract_features(&[pose(0.0, [0.0; 3], 0.0), pose(0.5, [1.0, 0.0, 0.0], 20.0)]).unwrap();
        assert_abs_diff_eq!(f.delta_yaw, 20.0, epsilon = 1e-9);
    }

    #[test]
    fn features_yaw_wraps_across_pi() {
        // oracle: 170 -> -170 is a +20 deg counter-clockwise turn
        let oracle = {
            let d = -170.0f64 - 170.0;
            ((d + 180.0).rem_euclid(360.0)) - 180.0
        };
        assert_abs_diff_eq!(oracle, 20.0, epsilon = 1e-12);
        let f = extract_features(&[pose(0.0, [0.0; 3], 170.0), pose(0.5, [1.0, 0.0, 0.0], -170.0)]).unwrap();
        assert_abs_diff_eq!(f.delta_yaw, oracle, epsilon = 1e-9);
    }

    #[test]
    fn classify_all_stationary() {
        let poses: Vec<_> = (0..11).map(|i| pose(i as f64 * 0.5, [4.0, 2.0, 0.0], 30.0)).collect();
        assert_eq!(classify_motion(&poses, &Thresholds::default()).unwrap(), ActionLabel::Stopped);
    }

    #[test]
    fn classify_straight() {
        assert_eq!(
            classify_motion(&straight(11, 5.0), &Thresholds::default()).unwrap(),
            ActionLabel::StraightConstantSpeed
        );
    }

    #[test]
    fn classify_left_arc() {
        // 4 m/s along an arc whose heading sweeps 0 -> 20 deg over 10 steps
        let n = 11;
        let mut p = [0.0; 3];
        let mut poses = vec![pose(0.0, p, 0.0)];
        for i in 1..n {
            let heading = 20.0 * i as f64 / (n - 1) as f64;
            let h = f64::to_radians(heading);
            p = [p[0] + 4.0 * 0.5 * h.cos(), p[1] + 4.0 * 0.5 * h.sin(), 0.0];
            poses.push(pose(i as f64 * 0.5, p, heading));
        }
        assert_eq!(classify_motion(&poses, &Thresholds::default()).unwrap(), ActionLabel::TurnLeft);
    }

    #[test]
    fn classify_lane_change_left() {
        let poses: Vec<_> = (0..11)
            .map(|i| {
                let t = i as f64 * 0.5;
                pose(t, [5.0 * t, 0.6 * t, 0.0], 0.0)
            })
            .collect();
        assert_eq!(classify_motion(&poses, &Thresholds::default()).unwrap(), ActionLabel::ChangeLaneLeft);
    }

    #[test]
    fn classify_starting_ramp() {
        // speeds ramp 0.5 -> 2.5 m/s over 5 steps
        let speeds = [0.5, 1.0, 1.5, 2.0, 2.5];
        let mut x = 0.0;
        let mut poses = vec![pose(0.0, [0.0; 3], 0.0)];
        for (i, s) in speeds.iter().enumerate() {
            x += s * 0.5;
            poses.push(pose((i + 1) as f64 * 0.5, [x, 0.0, 0.0], 0.0));
        }
        assert_eq!(classify_motion(&poses, &Thresholds::default()).unwrap(), ActionLabel::Starting);
    }

    #[test]
    fn classify_stopping_ramp() {
        let speeds = [3.0, 2.5, 2.0, 1.5, 1.0, 0.5];
        let mut x = 0.0;
        let mut poses = vec![pose(0.0, [0.0; 3], 0.0)];
        for (i, s) in speeds.iter().enumerate() {
            x += s * 0.5;
            poses.push(pose((i + 1) as f64 * 0.5, [x, 0.0, 0.0], 0.0));
        }
        assert_eq!(classify_motion(&poses, &Thresholds::default()).unwrap(), ActionLabel::Stopping);
    }

    #[test]
    fn stationary_check_is_strict_majority() {
        // exactly half of the steps slow: not stopped
        let f = MotionFeatures {
            speeds: vec![0.0, 0.0, 5.0, 5.0],
            delta_yaw: 0.0,
            omega_start: 0.0,
            omega_end: 5.0,
            mean_local_forward: 2.5,
            mean_local_lateral: 0.0,
        };
        assert_eq!(classify_features(&f, &Thresholds::default()), ActionLabel::Starting);
    }

    #[test]
    fn invalid_thresholds_rejected() {
        let thr = Thresholds { psi_turn: 0.0, ..Thresholds::default() };
        assert!(matches!(
            classify_motion(&straight(3, 1.0), &thr),
            Err(MotionError::InvalidThreshold { name: "psi_turn", .. })
        ));
    }

    #[test]
    fn phrases_roundtrip_and_canonicalize() {
        for a in ActionLabel::ALL {
            assert_eq!(ActionLabel::from_phrase(a.phrase()), Some(a));
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{}\"", a.phrase()));
        }
        assert_eq!(ActionLabel::from_phrase("straight constant speed"), Some(ActionLabel::StraightConstantSpeed));
        assert_eq!(ActionLabel::from_phrase("TURN LEFT."), Some(ActionLabel::TurnLeft));
    }
}
