//! On-disk synthetic suite: bundles, machine labels, and placeholder frames.

use std::path::{Path, PathBuf};

use tad_core::motion::Thresholds;
use tad_core::qa::SceneAnnotations;
use tad_core::segment::{partition_scene, SegmentationParams};
use tad_core::synth::synthetic_suite;
use tad_core::SceneBundle;

use crate::PipelineError;

#[derive(Debug, Clone)]
pub struct SuiteFiles {
    pub root: PathBuf,
    pub bundles: Vec<PathBuf>,
    pub labels: Vec<PathBuf>,
}

fn io(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io(format!("{}: {e}", path.display()))
}

/// Writes small JPEG frames for every frame with an image path under `root`.
pub fn render_placeholder_frames(bundle: &SceneBundle, root: &Path) -> Result<(), PipelineError> {
    for frame in &bundle.frames {
        let Some(rel) = &frame.image else { continue };
        let path = root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        }
        let shade = (frame.idx * 6 % 256) as u8;
        let img = image::RgbImage::from_fn(64, 36, |x, y| image::Rgb([shade, (x * 4) as u8, (y * 7) as u8]));
        img.save(&path).map_err(|e| io(&path, e))?;
    }
    Ok(())
}

/// Writes the three-scene suite under `root`: `bundles/`, `labels/` and `frames/`.
pub fn write_synthetic_suite(root: &Path) -> Result<SuiteFiles, PipelineError> {
    let params = SegmentationParams::default();
    let mut files = SuiteFiles { root: root.to_path_buf(), bundles: Vec::new(), labels: Vec::new() };
    for dir in ["bundles", "labels"] {
        std::fs::create_dir_all(root.join(dir)).map_err(|e| io(&root.join(dir), e))?;
    }
    for bundle in synthetic_suite() {
        render_placeholder_frames(&bundle, root)?;
        let segments = partition_scene(&bundle, &params)
            .map_err(|e| PipelineError::Segmentation { scene: bundle.scene_id.clone(), message: e.to_string() })?;
        let labels = SceneAnnotations::from_classifier(&bundle, &segments, &Thresholds::default())
            .map_err(|e| PipelineError::Classifier { segment: None, message: e.to_string() })?;
        let bpath = root.join("bundles").join(format!("{}.json", bundle.scene_id));
        bundle.save(&bpath).map_err(|e| io(&bpath, e))?;
        let lpath = root.join("labels").join(format!("{}.json", bundle.scene_id));
        std::fs::write(&lpath, serde_json::to_string_pretty(&labels).expect("labels serialize")).map_err(|e| io(&lpath, e))?;
        files.bundles.push(bpath);
        files.labels.push(lpath);
    }
    Ok(files)
}
