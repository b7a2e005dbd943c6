use std::fs;
use std::path::Path;

use serde_json::json;
use tad_core::nuscenes::{ingest_nuscenes, list_scenes, IngestError};
use tad_core::scene::validate_bundle;
use tad_core::VehicleCategory;

fn write(dir: &Path, table: &str, value: serde_json::Value) {
    fs::write(dir.join(format!("{table}.json")), serde_json::to_string_pretty(&value).unwrap()).unwrap();
}

/// One scene, two keyframes, a car ahead, a car behind, and a pedestrian.
fn fixture(with_vehicles: bool) -> tempfile::TempDir {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("v1.0-mini");
    fs::create_dir_all(&dir).unwrap();
    write(&dir, "scene", json!([{"token": "sc1", "name": "scene-0001", "first_sample_token": "s1"}]));
    write(&dir, "sample", json!([
        {"token": "s1", "timestamp": 1_000_000, "next": "s2"},
        {"token": "s2", "timestamp": 1_500_000, "next": ""}
    ]));
    write(&dir, "sample_data", json!([
        {"sample_token": "s1", "ego_pose_token": "e1", "calibrated_sensor_token": "cam", "is_key_frame": true,
         "filename": "samples/CAM_FRONT/a.jpg", "width": 1600, "height": 900},
        {"sample_token": "s2", "ego_pose_token": "e2", "calibrated_sensor_token": "cam", "is_key_frame": true,
         "filename": "samples/CAM_FRONT/b.jpg", "width": 1600, "height": 900},
        {"sample_token": "s1", "ego_pose_token": "e9", "calibrated_sensor_token": "lidar", "is_key_frame": true,
         "filename": "samples/LIDAR_TOP/a.pcd.bin"}
    ]));
    write(&dir, "ego_pose", json!([
        {"token": "e1", "translation": [0.0, 0.0, 0.0], "rotation": [1.0, 0.0, 0.0, 0.0]},
        {"token": "e2", "translation": [1.0, 0.0, 0.0], "rotation": [1.0, 0.0, 0.0, 0.0]},
        {"token": "e9", "translation": [50.0, 50.0, 0.0], "rotation": [1.0, 0.0, 0.0, 0.0]}
    ]));
    // camera looks along ego +x: cam z -> ego x, cam x -> ego -y, cam y -> ego -z
    write(&dir, "calibrated_sensor", json!([
        {"token": "cam", "translation": [1.7, 0.0, 1.5], "rotation": [0.5, -0.5, 0.5, -0.5],
         "camera_intrinsic": [[1266.0, 0.0, 816.0], [0.0, 1266.0, 491.0], [0.0, 0.0, 1.0]]},
        {"token": "lidar", "translation": [0.9, 0.0, 1.8], "rotation": [1.0, 0.0, 0.0, 0.0], "camera_intrinsic": []}
    ]));
    write(&dir, "category", json!([
        {"token": "c-car", "name": "vehicle.car"},
        {"token": "c-ped", "name": "human.pedestrian.adult"}
    ]));
    let mut instances = vec![json!({"token": "ped", "category_token": "c-ped"})];
    let mut anns = vec![json!({"sample_token": "s1", "instance_token": "ped", "visibility_token": "4",
                               "translation": [8.0, 1.0, 1.0], "rotation": [1.0, 0.0, 0.0, 0.0]})];
    if with_vehicles {
        instances.push(json!({"token": "car-front", "category_token": "c-car"}));
        instances.push(json!({"token": "car-back", "category_token": "c-car"}));
        for (s, x) in [("s1", 10.0), ("s2", 11.0)] {
            anns.push(json!({"sample_token": s, "instance_token": "car-front", "visibility_token": "4",
                             "translation": [x, 0.0, 1.0], "rotation": [1.0, 0.0, 0.0, 0.0]}));
        }
        anns.push(json!({"sample_token": "s2", "instance_token": "car-back", "visibility_token": "4",
                         "translation": [-10.0, 0.0, 1.0], "rotation": [0.0, 0.0, 0.0, 1.0]}));
    }
    write(&dir, "instance", json!(instances));
    write(&dir, "sample_annotation", json!(anns));
    root
}

#[test]
fn two_keyframes_become_two_frames() {
    let root = fixture(true);
    let b = ingest_nuscenes(root.path(), "scene-0001").unwrap();
    assert_eq!(b.num_frames(), 2);
    assert_eq!(b.nominal_rate, 2.0);
    assert_eq!(b.ego_poses[1].translation, [1.0, 0.0, 0.0]);
    assert!((b.frames[1].t - 1.5).abs() < 1e-12);
    assert_eq!(b.frames[0].image.as_deref(), Some("samples/CAM_FRONT/a.jpg"));
    assert!(validate_bundle(&b).is_valid());

    assert_eq!(b.tracks.len(), 2);
    let front = b.track("car-front").unwrap();
    assert_eq!(front.category, VehicleCategory::Car);
    assert_eq!(front.states.len(), 2);
    assert!(front.states.iter().all(|s| s.visible_in_front_camera));
    let back = b.track("car-back").unwrap();
    assert_eq!(back.states.len(), 1);
    assert!(!back.states[0].visible_in_front_camera);
    assert!((back.states[0].yaw.abs() - std::f64::consts::PI).abs() < 1e-9);
}

#[test]
fn scene_can_be_selected_by_token() {
    let root = fixture(true);
    assert_eq!(ingest_nuscenes(root.path(), "sc1").unwrap().scene_id, "scene-0001");
    assert_eq!(list_scenes(root.path()).unwrap(), vec![("sc1".to_string(), "scene-0001".to_string())]);
}

#[test]
fn pedestrians_only_yield_no_tracks() {
    let root = fixture(false);
    let b = ingest_nuscenes(root.path(), "scene-0001").unwrap();
    assert!(b.tracks.is_empty());
}

#[test]
fn missing_scene_is_reported() {
    let root = fixture(true);
    assert!(matches!(ingest_nuscenes(root.path(), "scene-9999"), Err(IngestError::SceneNotFound(s)) if s == "scene-9999"));
}

#[test]
fn missing_table_is_named() {
    let root = fixture(true);
    fs::remove_file(root.path().join("v1.0-mini/ego_pose.json")).unwrap();
    let err = ingest_nuscenes(root.path(), "scene-0001").unwrap_err();
    assert!(matches!(err, IngestError::MissingTable { table: "ego_pose", .. }));
    assert!(err.to_string().contains("ego_pose"));
}

#[test]
fn visibility_bin_one_is_not_visible() {
    let root = fixture(true);
    let path = root.path().join("v1.0-mini/sample_annotation.json");
    let text = fs::read_to_string(&path).unwrap().replace("\"visibility_token\": \"4\"", "\"visibility_token\": \"1\"");
    fs::write(&path, text).unwrap();
    let b = ingest_nuscenes(root.path(), "scene-0001").unwrap();
    assert!(b.track("car-front").unwrap().states.iter().all(|s| !s.visible_in_front_camera));
}

#[test]
fn ingestion_is_deterministic_and_round_trips() {
    let root = fixture(true);
    let a = ingest_nuscenes(root.path(), "scene-0001").unwrap().to_json();
    let b = ingest_nuscenes(root.path(), "scene-0001").unwrap().to_json();
    assert_eq!(a, b);
    let reparsed = tad_core::SceneBundle::from_json(&a).unwrap().to_json();
    assert_eq!(a, reparsed);
}
