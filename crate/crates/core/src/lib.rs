//! Core building blocks for a temporal-understanding benchmark over ego-centric
//! driving video: scene model and dataset ingestion, ego maneuver classification,
//! segmentation, template-driven question generation, and answer scoring.

pub mod eval;
pub mod geom;
pub mod motion;
pub mod nuscenes;
pub mod qa;
pub mod scene;
pub mod segment;
pub mod synth;

pub use geom::Quaternion;
pub use motion::{ActionLabel, MotionError, MotionFeatures, Thresholds};
pub use qa::{QaItem, SceneAnnotations, Task};
pub use scene::{EgoPose, ObjectTrack, SceneBundle, VehicleCategory};
pub use segment::{Segment, SegmentationParams};
