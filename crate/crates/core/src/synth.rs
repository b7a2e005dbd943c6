//! Parametric trajectory generators and a small synthetic scene suite.
//!
//! Every generated maneuver sits well inside the classifier's decision margins
//! under default thresholds, so its intended label is the oracle answer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::{self, Quaternion, Vec3};
use crate::motion::ActionLabel;
use crate::scene::{EgoPose, Frame, ObjectTrack, SceneBundle, TrackState, VehicleCategory};

pub const SYNTH_RATE_HZ: f64 = 2.0;
const SYNTH_DT: f64 = 1.0 / SYNTH_RATE_HZ;

/// One integration step expressed in the body frame of the pose it ends on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub forward: f64,
    pub lateral: f64,
    /// Heading of the pose this step ends on, radians.
    pub heading: f64,
    pub dt: f64,
}

/// Integrates body-frame steps into poses starting at `origin` with `heading0`.
pub fn integrate(origin: Vec3, heading0: f64, t0: f64, steps: &[Step]) -> Vec<EgoPose> {
    let mut poses = vec![EgoPose::new(t0, origin, Quaternion::from_yaw(heading0))];
    for s in steps {
        let prev = poses.last().expect("non-empty");
        let q = Quaternion::from_yaw(s.heading);
        let v = q.rotate([s.forward, s.lateral, 0.0]);
        let p = geom::add(prev.translation, geom::scale(v, s.dt));
        poses.push(EgoPose::new(prev.timestamp + s.dt, p, q));
    }
    poses
}

fn jittered_dt(rng: &mut ChaCha8Rng) -> f64 {
    SYNTH_DT * rng.random_range(0.9..1.1)
}

/// Body-frame step plan for one maneuver with zero initial heading.
fn maneuver_steps(label: ActionLabel, n_steps: usize, rng: &mut ChaCha8Rng) -> Vec<Step> {
    let frac = |i: usize| if n_steps > 1 { i as f64 / (n_steps - 1) as f64 } else { 1.0 };
    let mut steps = Vec::with_capacity(n_steps);
    match label {
        ActionLabel::Stopped => {
            for _ in 0..n_steps {
                let speed = rng.random_range(0.0..0.08);
                let dir = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let heading = rng.random_range(-1.0f64..1.0).to_radians();
                steps.push(Step { forward: speed * dir.cos(), lateral: speed * dir.sin(), heading, dt: jittered_dt(rng) });
            }
        }
        ActionLabel::StraightConstantSpeed => {
            let speed = rng.random_range(3.0..15.0);
            let drift = rng.random_range(-4.0f64..4.0).to_radians();
            for i in 0..n_steps {
                let s = speed * rng.random_range(0.95..1.05);
                steps.push(Step { forward: s, lateral: 0.0, heading: drift * (i + 1) as f64 / n_steps as f64, dt: jittered_dt(rng) });
            }
        }
        ActionLabel::TurnLeft | ActionLabel::TurnRight => {
            let sign = if label == ActionLabel::TurnLeft { 1.0 } else { -1.0 };
            let total = sign * rng.random_range(25.0f64..90.0).to_radians();
            let speed = rng.random_range(3.0..10.0);
            for i in 0..n_steps {
                let h = total * (i + 1) as f64 / n_steps as f64;
                steps.push(Step { forward: speed, lateral: 0.0, heading: h, dt: jittered_dt(rng) });
            }
        }
        ActionLabel::ChangeLaneLeft | ActionLabel::ChangeLaneRight => {
            let sign = if label == ActionLabel::ChangeLaneLeft { 1.0 } else { -1.0 };
            let vx = rng.random_range(3.0..12.0);
            let vy = sign * rng.random_range(0.9..1.5);
            for _ in 0..n_steps {
                steps.push(Step { forward: vx, lateral: vy, heading: 0.0, dt: jittered_dt(rng) });
            }
        }
        ActionLabel::Starting | ActionLabel::Stopping => {
            let v0 = rng.random_range(0.0..0.4);
            let v1 = rng.random_range(3.0..8.0);
            for i in 0..n_steps {
                let ramp = v0 + (v1 - v0) * frac(i);
                steps.push(Step { forward: ramp, lateral: 0.0, heading: 0.0, dt: jittered_dt(rng) });
            }
            if label == ActionLabel::Stopping {
                let speeds: Vec<f64> = steps.iter().rev().map(|s| s.forward).collect();
                for (s, v) in steps.iter_mut().zip(speeds) {
                    s.forward = v;
                }
            }
        }
    }
    steps
}

/// A random trajectory of `n_poses` (>= 5) poses performing `label`, placed with a
/// random heading, origin and start time.
pub fn generate_maneuver(label: ActionLabel, n_poses: usize, rng: &mut ChaCha8Rng) -> Vec<EgoPose> {
    let n_poses = n_poses.max(5);
    let steps = maneuver_steps(label, n_poses - 1, rng);
    let local = integrate([0.0; 3], 0.0, 0.0, &steps);
    let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let offset = [rng.random_range(-2000.0..2000.0), rng.random_range(-2000.0..2000.0), rng.random_range(-5.0..5.0)];
    let t0 = rng.random_range(0.0..1.0e6);
    time_shift(&rigid_transform(&local, yaw, offset), t0)
}

/// Labeled random cases, `per_label` per action, deterministic in `seed`.
pub fn maneuver_suite(seed: u64, per_label: usize) -> Vec<(ActionLabel, Vec<EgoPose>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_label * ActionLabel::ALL.len());
    for label in ActionLabel::ALL {
        for _ in 0..per_label {
            let n = rng.random_range(5..=20);
            out.push((label, generate_maneuver(label, n, &mut rng)));
        }
    }
    out
}

/// Rotates the whole trajectory by `yaw` about the z axis, then translates it.
pub fn rigid_transform(poses: &[EgoPose], yaw: f64, offset: Vec3) -> Vec<EgoPose> {
    let r = Quaternion::from_yaw(yaw);
    poses
        .iter()
        .map(|p| EgoPose::new(p.timestamp, geom::add(r.rotate(p.translation), offset), r.mul(&p.rotation).normalized()))
        .collect()
}

pub fn time_shift(poses: &[EgoPose], dt: f64) -> Vec<EgoPose> {
    poses.iter().map(|p| EgoPose::new(p.timestamp + dt, p.translation, p.rotation)).collect()
}

/// Reflection across the x-z plane: left and right maneuvers swap.
pub fn mirror(poses: &[EgoPose]) -> Vec<EgoPose> {
    poses
        .iter()
        .map(|p| {
            let q = p.rotation;
            EgoPose::new(
                p.timestamp,
                [p.translation[0], -p.translation[1], p.translation[2]],
                Quaternion::new(q.w, -q.x, q.y, -q.z),
            )
        })
        .collect()
}

/// m/s sideways during a scene lane change; chosen so no segment window averages
/// close to the lateral threshold.
const LANE_CHANGE_LATERAL: f64 = 1.5;

/// Scene-level ego plan: consecutive (label, steps) phases at a shared cruise speed.
fn phase_steps(phases: &[(ActionLabel, usize, f64)]) -> Vec<Step> {
    let mut steps = Vec::new();
    let mut heading = 0.0;
    for &(label, n, speed) in phases {
        for i in 0..n {
            let f = (i + 1) as f64 / n as f64;
            let (fwd, lat, dh) = match label {
                ActionLabel::Stopped => (0.0, 0.0, 0.0),
                ActionLabel::StraightConstantSpeed => (speed, 0.0, 0.0),
                ActionLabel::TurnLeft => (speed, 0.0, 90f64.to_radians() / n as f64),
                ActionLabel::TurnRight => (speed, 0.0, -90f64.to_radians() / n as f64),
                ActionLabel::ChangeLaneLeft => (speed, LANE_CHANGE_LATERAL, 0.0),
                ActionLabel::ChangeLaneRight => (speed, -LANE_CHANGE_LATERAL, 0.0),
                ActionLabel::Starting => (speed * f, 0.0, 0.0),
                ActionLabel::Stopping => (speed * (1.0 - f), 0.0, 0.0),
            };
            heading += dh;
            steps.push(Step { forward: fwd, lateral: lat, heading, dt: SYNTH_DT });
        }
    }
    steps
}

fn in_front_view(ego: &EgoPose, p: Vec3) -> bool {
    let local = ego.rotation.inverse_rotate(geom::sub(p, ego.translation));
    local[0] > 1.0 && local[1].atan2(local[0]).abs() < 35f64.to_radians()
}

/// Track following a world-position function, states kept while within 80 m.
fn make_track(
    id: &str,
    category: VehicleCategory,
    ego: &[EgoPose],
    place: impl Fn(usize) -> (Vec3, f64),
) -> ObjectTrack {
    let states = ego
        .iter()
        .enumerate()
        .filter_map(|(i, e)| {
            let (center, yaw) = place(i);
            (geom::planar_distance(center, e.translation) <= 80.0).then(|| TrackState {
                frame_index: i as u32,
                center,
                yaw,
                visible_in_front_camera: in_front_view(e, center),
            })
        })
        .collect();
    ObjectTrack { track_id: id.to_string(), category, states }
}

fn ahead_of(ego: &EgoPose, forward: f64, left: f64) -> Vec3 {
    geom::add(ego.translation, ego.rotation.rotate([forward, left, 0.0]))
}

fn build_scene(scene_id: &str, phases: &[(ActionLabel, usize, f64)], with_tracks: impl Fn(&[EgoPose]) -> Vec<ObjectTrack>) -> SceneBundle {
    let ego = integrate([100.0, 200.0, 0.0], 0.0, 1_600_000_000.0, &phase_steps(phases));
    let frames = ego
        .iter()
        .enumerate()
        .map(|(i, p)| Frame { idx: i as u32, t: p.timestamp, image: Some(format!("frames/{scene_id}/{i:03}.jpg")) })
        .collect();
    let tracks = with_tracks(&ego);
    SceneBundle { scene_id: scene_id.to_string(), nominal_rate: SYNTH_RATE_HZ, frames, ego_poses: ego, tracks }
}

/// Three 40-frame scenes with mixed ego maneuvers and a few tracked vehicles.
pub fn synthetic_suite() -> Vec<SceneBundle> {
    use ActionLabel::*;
    let a = build_scene(
        "synth-0001",
        &[(Stopped, 12, 0.0), (Starting, 6, 6.0), (StraightConstantSpeed, 12, 6.0), (Stopping, 9, 6.0)],
        |ego| {
            let parked = ahead_of(&ego[20], 15.0, 4.0);
            let leader = |i: usize| (ahead_of(&ego[i], 14.0, 0.0), 0.0);
            vec![
                make_track("truck-parked", VehicleCategory::Truck, ego, move |_| (parked, 0.0)),
                make_track("car-leader", VehicleCategory::Car, ego, leader),
            ]
        },
    );
    let b = build_scene(
        "synth-0002",
        &[(StraightConstantSpeed, 12, 8.0), (TurnLeft, 8, 8.0), (StraightConstantSpeed, 9, 8.0), (ChangeLaneRight, 10, 8.0)],
        |ego| {
            let far = ahead_of(&ego[0], 60.0, 45.0);
            let stop_spot = ahead_of(&ego[0], 30.0, -3.0);
            vec![
                make_track("bus-far", VehicleCategory::Bus, ego, move |_| (far, 0.0)),
                make_track("car-waiting", VehicleCategory::Car, ego, move |_| (stop_spot, 0.5)),
            ]
        },
    );
    let c = build_scene(
        "synth-0003",
        &[(StraightConstantSpeed, 8, 5.0), (TurnRight, 10, 5.0), (Stopping, 8, 5.0), (Stopped, 13, 0.0)],
        |ego| {
            let lead = |i: usize| (ahead_of(&ego[i], 10.0, 0.0), 0.0);
            let moto = ahead_of(&ego[30], 12.0, 2.0);
            vec![
                make_track("truck-lead", VehicleCategory::Truck, ego, lead),
                make_track("moto-parked", VehicleCategory::Motorcycle, ego, move |_| (moto, 1.0)),
            ]
        },
    );
    vec![a, b, c]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{classify_motion, Thresholds};
    use crate::scene::validate_bundle;

    #[test]
    fn every_generated_maneuver_classifies_as_intended() {
        let thr = Thresholds::default();
        for (label, poses) in maneuver_suite(11, 40) {
            assert_eq!(classify_motion(&poses, &thr).unwrap(), label);
        }
    }

    #[test]
    fn mirror_swaps_turn_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let poses = generate_maneuver(ActionLabel::TurnLeft, 8, &mut rng);
        let thr = Thresholds::default();
        assert_eq!(classify_motion(&mirror(&poses), &thr).unwrap(), ActionLabel::TurnRight);
    }

    /// Every segment's features sit clearly on one side of each threshold, so
    /// transforms that only add rounding error cannot flip a label.
    #[test]
    fn suite_segments_keep_clear_of_thresholds() {
        use crate::motion::{extract_features, MOVING_FACTOR};
        use crate::segment::{partition_scene, segment_ego_poses, SegmentationParams};
        let thr = Thresholds::default();
        let away = |value: f64, edge: f64, margin: f64| (value - edge).abs() > margin;
        for b in synthetic_suite() {
            for seg in partition_scene(&b, &SegmentationParams::default()).unwrap() {
                let f = extract_features(segment_ego_poses(&b, &seg)).unwrap();
                let ctx = format!("{} segment {}: {f:?}", b.scene_id, seg.segment_index);
                assert!(f.speeds.iter().all(|&s| away(s, thr.v_stat, 0.02)), "{ctx}");
                let slow = f.speeds.iter().filter(|&&s| s < thr.v_stat).count();
                assert_ne!(2 * slow, f.speeds.len(), "{ctx}");
                assert!(away(f.delta_yaw.abs(), thr.psi_turn, 0.5), "{ctx}");
                assert!(away(f.mean_local_lateral.abs(), thr.v_y_lc, 0.04), "{ctx}");
                if f.mean_local_lateral.abs() > thr.v_y_lc {
                    assert!(away(f.mean_local_forward.abs(), thr.v_x_lc, 0.1), "{ctx}");
                }
                for w in [f.omega_start, f.omega_end] {
                    assert!(away(w, thr.v_stopping, 0.05) && away(w, MOVING_FACTOR * thr.v_stopping, 0.05), "{ctx}");
                }
            }
        }
    }

    #[test]
    fn suite_bundles_are_valid() {
        for b in synthetic_suite() {
            let report = validate_bundle(&b);
            assert!(report.is_valid(), "{}: {:?}", b.scene_id, report);
            assert_eq!(b.num_frames(), 40);
        }
    }
}
