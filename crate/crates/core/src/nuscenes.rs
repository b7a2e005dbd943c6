//! Adapter from NuScenes-v1.0 style relational JSON tables to [`SceneBundle`].
//!
//! Only keyframes are used. The ego pose and image of each keyframe come from the
//! front camera's keyframe sample_data record. Non-vehicle annotations are dropped.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;
use thiserror::Error;

use crate::geom::{self, Quaternion, Vec3};
use crate::motion;
use crate::scene::{EgoPose, Frame, ObjectTrack, SceneBundle, TrackState, VehicleCategory};

/// NuScenes keyframes are annotated at 2 Hz.
pub const KEYFRAME_RATE_HZ: f64 = 2.0;

const FRONT_CAMERA_DIR: &str = "CAM_FRONT/";
/// Visibility bin "0-40%".
const LOWEST_VISIBILITY_TOKEN: &str = "1";
const MIN_CAMERA_DEPTH: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing table {table}: {path}")]
    MissingTable { table: &'static str, path: PathBuf },
    #[error("malformed table {table}: {source}")]
    MalformedTable {
        table: &'static str,
        #[source]
        source: serde_json::Error,
    },
    #[error("dangling reference in table {table}: {key}")]
    DanglingKey { table: &'static str, key: String },
    #[error("scene not found: {0}")]
    SceneNotFound(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Deserialize)]
struct SceneRow {
    token: String,
    name: String,
    first_sample_token: String,
}

#[derive(Debug, Deserialize)]
struct SampleRow {
    token: String,
    timestamp: i64,
    #[serde(default)]
    next: String,
}

#[derive(Debug, Deserialize)]
struct SampleDataRow {
    sample_token: String,
    ego_pose_token: String,
    calibrated_sensor_token: String,
    #[serde(default)]
    is_key_frame: bool,
    #[serde(default)]
    filename: String,
    #[serde(default)]
    width: u32,
    #[serde(default)]
    height: u32,
}

#[derive(Debug, Deserialize)]
struct EgoPoseRow {
    token: String,
    translation: Vec3,
    rotation: [f64; 4],
}

#[derive(Debug, Deserialize)]
struct CalibratedSensorRow {
    token: String,
    translation: Vec3,
    rotation: [f64; 4],
    #[serde(default)]
    camera_intrinsic: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct AnnotationRow {
    sample_token: String,
    instance_token: String,
    #[serde(default)]
    visibility_token: Option<String>,
    translation: Vec3,
    rotation: [f64; 4],
}

#[derive(Debug, Deserialize)]
struct InstanceRow {
    token: String,
    category_token: String,
}

#[derive(Debug, Deserialize)]
struct CategoryRow {
    token: String,
    name: String,
}

/// Maps a NuScenes category name onto the vehicle set; `None` for everything else.
pub fn map_category(name: &str) -> Option<VehicleCategory> {
    let c = match name {
        "vehicle.car" => VehicleCategory::Car,
        "vehicle.bus.bendy" | "vehicle.bus.rigid" => VehicleCategory::Bus,
        "vehicle.bicycle" => VehicleCategory::Bicycle,
        "vehicle.construction" => VehicleCategory::ConstructionVehicle,
        "vehicle.motorcycle" => VehicleCategory::Motorcycle,
        "vehicle.trailer" => VehicleCategory::Trailer,
        "vehicle.truck" => VehicleCategory::Truck,
        "vehicle.emergency.ambulance" | "vehicle.emergency.police" => VehicleCategory::EmergencyVehicle,
        _ => return None,
    };
    Some(c)
}

/// Finds the directory holding `scene.json`: either `dataroot` itself or a
/// `v1.0-*` subdirectory.
pub fn table_dir(dataroot: &Path) -> Result<PathBuf, IngestError> {
    if dataroot.join("scene.json").is_file() {
        return Ok(dataroot.to_path_buf());
    }
    let entries = std::fs::read_dir(dataroot).map_err(|source| IngestError::Io { path: dataroot.to_path_buf(), source })?;
    let mut candidates: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("scene.json").is_file())
        .collect();
    candidates.sort();
    candidates
        .into_iter()
        .next()
        .ok_or_else(|| IngestError::MissingTable { table: "scene", path: dataroot.join("scene.json") })
}

fn load_table<T: DeserializeOwned>(dir: &Path, table: &'static str) -> Result<Vec<T>, IngestError> {
    let path = dir.join(format!("{table}.json"));
    if !path.is_file() {
        return Err(IngestError::MissingTable { table, path });
    }
    let text = std::fs::read_to_string(&path).map_err(|source| IngestError::Io { path: path.clone(), source })?;
    serde_json::from_str(&text).map_err(|source| IngestError::MalformedTable { table, source })
}

/// Lists `(token, name)` for every scene in the table set.
pub fn list_scenes(dataroot: &Path) -> Result<Vec<(String, String)>, IngestError> {
    let dir = table_dir(dataroot)?;
    let scenes: Vec<SceneRow> = load_table(&dir, "scene")?;
    Ok(scenes.into_iter().map(|s| (s.token, s.name)).collect())
}

/// Builds a [`SceneBundle`] for the scene whose name or token equals `scene_id`.
pub fn ingest_nuscenes(dataroot: &Path, scene_id: &str) -> Result<SceneBundle, IngestError> {
    let dir = table_dir(dataroot)?;
    let scenes: Vec<SceneRow> = load_table(&dir, "scene")?;
    let samples: Vec<SampleRow> = load_table(&dir, "sample")?;
    let sample_data: Vec<SampleDataRow> = load_table(&dir, "sample_data")?;
    let ego_poses: Vec<EgoPoseRow> = load_table(&dir, "ego_pose")?;
    let annotations: Vec<AnnotationRow> = load_table(&dir, "sample_annotation")?;
    let instances: Vec<InstanceRow> = load_table(&dir, "instance")?;
    let categories: Vec<CategoryRow> = load_table(&dir, "category")?;
    let sensors: Vec<CalibratedSensorRow> = load_table(&dir, "calibrated_sensor")?;

    let scene = scenes
        .iter()
        .find(|s| s.name == scene_id || s.token == scene_id)
        .ok_or_else(|| IngestError::SceneNotFound(scene_id.to_string()))?;

    let sample_by_token: HashMap<&str, &SampleRow> = samples.iter().map(|s| (s.token.as_str(), s)).collect();
    let pose_by_token: HashMap<&str, &EgoPoseRow> = ego_poses.iter().map(|p| (p.token.as_str(), p)).collect();
    let sensor_by_token: HashMap<&str, &CalibratedSensorRow> = sensors.iter().map(|s| (s.token.as_str(), s)).collect();
    let category_by_token: HashMap<&str, &CategoryRow> = categories.iter().map(|c| (c.token.as_str(), c)).collect();
    let instance_by_token: HashMap<&str, &InstanceRow> = instances.iter().map(|i| (i.token.as_str(), i)).collect();
    let mut front_cam: HashMap<&str, &SampleDataRow> = HashMap::new();
    for sd in sample_data.iter().filter(|sd| sd.is_key_frame && is_front_camera(&sd.filename)) {
        front_cam.insert(sd.sample_token.as_str(), sd);
    }

    // walk the sample chain
    let mut chain: Vec<&SampleRow> = Vec::new();
    let mut token = scene.first_sample_token.as_str();
    while !token.is_empty() {
        let sample = sample_by_token
            .get(token)
            .ok_or_else(|| IngestError::DanglingKey { table: "sample", key: token.to_string() })?;
        chain.push(sample);
        if chain.len() > samples.len() {
            return Err(IngestError::DanglingKey { table: "sample", key: format!("cycle at {token}") });
        }
        token = sample.next.as_str();
    }
    chain.sort_by_key(|s| s.timestamp);

    struct Keyframe<'a> {
        cam: &'a SampleDataRow,
        pose: &'a EgoPoseRow,
        sensor: &'a CalibratedSensorRow,
    }

    let mut frames = Vec::with_capacity(chain.len());
    let mut poses = Vec::with_capacity(chain.len());
    let mut keyframes = Vec::with_capacity(chain.len());
    let mut frame_of_sample: HashMap<&str, u32> = HashMap::new();
    for (i, sample) in chain.iter().enumerate() {
        let cam = front_cam
            .get(sample.token.as_str())
            .ok_or_else(|| IngestError::DanglingKey { table: "sample_data", key: format!("no front-camera keyframe for sample {}", sample.token) })?;
        let pose = pose_by_token
            .get(cam.ego_pose_token.as_str())
            .ok_or_else(|| IngestError::DanglingKey { table: "ego_pose", key: cam.ego_pose_token.clone() })?;
        let sensor = sensor_by_token
            .get(cam.calibrated_sensor_token.as_str())
            .ok_or_else(|| IngestError::DanglingKey { table: "calibrated_sensor", key: cam.calibrated_sensor_token.clone() })?;
        let t = sample.timestamp as f64 * 1e-6;
        frames.push(Frame { idx: i as u32, t, image: (!cam.filename.is_empty()).then(|| cam.filename.clone()) });
        poses.push(EgoPose::new(t, pose.translation, Quaternion::from(pose.rotation)));
        keyframes.push(Keyframe { cam, pose, sensor });
        frame_of_sample.insert(sample.token.as_str(), i as u32);
    }

    let mut tracks: BTreeMap<&str, ObjectTrack> = BTreeMap::new();
    for ann in &annotations {
        let Some(&frame) = frame_of_sample.get(ann.sample_token.as_str()) else { continue };
        let instance = instance_by_token
            .get(ann.instance_token.as_str())
            .ok_or_else(|| IngestError::DanglingKey { table: "instance", key: ann.instance_token.clone() })?;
        let category = category_by_token
            .get(instance.category_token.as_str())
            .ok_or_else(|| IngestError::DanglingKey { table: "category", key: instance.category_token.clone() })?;
        let Some(vehicle) = map_category(&category.name) else { continue };

        let kf = &keyframes[frame as usize];
        let projected = projects_into_image(
            ann.translation,
            &Quaternion::from(kf.pose.rotation),
            kf.pose.translation,
            kf.sensor,
            kf.cam.width,
            kf.cam.height,
        );
        let low_visibility = ann.visibility_token.as_deref() == Some(LOWEST_VISIBILITY_TOKEN);
        let yaw = motion::yaw_from_quaternion(&Quaternion::from(ann.rotation).normalized()).unwrap_or(0.0);
        tracks
            .entry(ann.instance_token.as_str())
            .or_insert_with(|| ObjectTrack { track_id: ann.instance_token.clone(), category: vehicle, states: Vec::new() })
            .states
            .push(TrackState { frame_index: frame, center: ann.translation, yaw, visible_in_front_camera: projected && !low_visibility });
    }

    let mut tracks: Vec<ObjectTrack> = tracks.into_values().collect();
    for t in &mut tracks {
        t.states.sort_by_key(|s| s.frame_index);
        t.states.dedup_by_key(|s| s.frame_index);
    }
    tracks.sort_by(|a, b| (a.states[0].frame_index, &a.track_id).cmp(&(b.states[0].frame_index, &b.track_id)));

    Ok(SceneBundle { scene_id: scene.name.clone(), nominal_rate: KEYFRAME_RATE_HZ, frames, ego_poses: poses, tracks })
}

fn is_front_camera(filename: &str) -> bool {
    filename.contains(&format!("/{FRONT_CAMERA_DIR}")) || filename.starts_with(FRONT_CAMERA_DIR)
}

/// Projects a global point through ego pose and camera extrinsics/intrinsics and
/// reports whether it lands inside the image.
fn projects_into_image(
    point: Vec3,
    ego_rotation: &Quaternion,
    ego_translation: Vec3,
    sensor: &CalibratedSensorRow,
    width: u32,
    height: u32,
) -> bool {
    if sensor.camera_intrinsic.len() != 3 || sensor.camera_intrinsic.iter().any(|r| r.len() != 3) {
        return false;
    }
    let in_ego = ego_rotation.inverse_rotate(geom::sub(point, ego_translation));
    let in_cam = Quaternion::from(sensor.rotation).inverse_rotate(geom::sub(in_ego, sensor.translation));
    if in_cam[2] <= MIN_CAMERA_DEPTH {
        return false;
    }
    let k = &sensor.camera_intrinsic;
    let u = (k[0][0] * in_cam[0] + k[0][1] * in_cam[1] + k[0][2] * in_cam[2]) / in_cam[2];
    let v = (k[1][0] * in_cam[0] + k[1][1] * in_cam[1] + k[1][2] * in_cam[2]) / in_cam[2];
    let (w, h) = if width == 0 || height == 0 { (1600.0, 900.0) } else { (width as f64, height as f64) };
    u >= 0.0 && u < w && v >= 0.0 && v < h
}
