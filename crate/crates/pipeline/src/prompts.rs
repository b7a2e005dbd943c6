//! Prompt assembly for the baseline and TCogMap configurations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tad_core::motion::{classify_motion, yaw_from_quaternion, Thresholds};
use tad_core::qa::QaItem;
use tad_core::segment::{segment_ego_poses, Segment};
use tad_core::SceneBundle;
use tad_gateway::{Part, PromptBundle};

use crate::PipelineError;

/// Which inputs reach the model alongside the question.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    FramesOnly,
    SummaryOnly,
    Blind,
}

impl Ablation {
    pub fn images(&self) -> bool {
        matches!(self, Ablation::Full | Ablation::FramesOnly)
    }

    pub fn summary(&self) -> bool {
        matches!(self, Ablation::Full | Ablation::SummaryOnly)
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Ablation::Full),
            "frames-only" | "frames_only" => Ok(Ablation::FramesOnly),
            "summary-only" | "summary_only" => Ok(Ablation::SummaryOnly),
            "blind" => Ok(Ablation::Blind),
            other => Err(format!("unknown ablation {other:?} (expected full|frames-only|summary-only|blind)")),
        }
    }
}

pub fn frame_label(i: u32) -> String {
    format!("Frame{i}:")
}

/// Resolves a frame's image path against `image_root`.
pub fn frame_image(bundle: &SceneBundle, frame: u32, image_root: &Path) -> Result<PathBuf, PipelineError> {
    let rel = bundle
        .frames
        .get(frame as usize)
        .and_then(|f| f.image.as_ref())
        .ok_or_else(|| PipelineError::MissingImage { scene: bundle.scene_id.clone(), frame })?;
    Ok(image_root.join(rel))
}

/// `Frame{i}:` label parts, each followed by its image when `with_images`.
pub fn frame_parts(bundle: &SceneBundle, frames: &[u32], image_root: &Path, with_images: bool) -> Result<Vec<Part>, PipelineError> {
    let mut parts = Vec::with_capacity(frames.len() * 2);
    for &f in frames {
        let label = frame_label(f);
        parts.push(Part::text(label.clone()));
        if with_images {
            parts.push(Part::Image { path: frame_image(bundle, f, image_root)?, label });
        }
    }
    Ok(parts)
}

/// One raw pose line per frame.
pub fn pose_lines(bundle: &SceneBundle, frames: &[u32]) -> Result<Vec<String>, PipelineError> {
    frames
        .iter()
        .map(|&f| {
            let pose = bundle
                .ego_poses
                .get(f as usize)
                .ok_or_else(|| PipelineError::MissingImage { scene: bundle.scene_id.clone(), frame: f })?;
            let yaw = yaw_from_quaternion(&pose.rotation).map_err(|e| PipelineError::Classifier { segment: None, message: e.to_string() })?;
            let [x, y, z] = pose.translation;
            Ok(format!("Frame{f}: translation=({x:.2},{y:.2},{z:.2}), yaw={:.1}°", yaw.to_degrees()))
        })
        .collect()
}

/// Frames plus question; with `include_ego_pose` a block of per-frame poses sits
/// between them. `ablation` can drop the images (labels stay) or everything.
pub fn build_baseline_prompt(
    bundle: &SceneBundle,
    item: &QaItem,
    include_ego_pose: bool,
    image_root: &Path,
    ablation: Ablation,
) -> Result<PromptBundle, PipelineError> {
    let mut parts = Vec::new();
    if ablation != Ablation::Blind {
        parts = frame_parts(bundle, &item.frames, image_root, ablation.images())?;
        if include_ego_pose {
            let mut block = String::from("Ego vehicle poses:\n");
            block.push_str(&pose_lines(bundle, &item.frames)?.join("\n"));
            parts.push(Part::text(block));
        }
    }
    parts.push(Part::text(item.question_text.clone()));
    Ok(PromptBundle::single_user(parts))
}

/// Per-segment ego motion lines, in segment order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionSummary {
    pub lines: Vec<String>,
}

impl MotionSummary {
    pub fn text(&self) -> String {
        self.lines.join("\n")
    }
}

pub fn summary_line(first: u32, last: u32, phrase: &str) -> String {
    format!("Motion summary for Frame{first} to Frame{last}: The ego-vehicle is {}.", phrase.to_lowercase())
}

/// Classifies the ego poses of every segment and formats one line each.
pub fn build_tcogmap_context(bundle: &SceneBundle, segments: &[Segment], thr: &Thresholds) -> Result<MotionSummary, PipelineError> {
    let mut lines = Vec::with_capacity(segments.len());
    for seg in segments {
        let label = classify_motion(segment_ego_poses(bundle, seg), thr).map_err(|e| PipelineError::Classifier {
            segment: Some(seg.segment_index),
            message: e.to_string(),
        })?;
        lines.push(summary_line(seg.first_frame(), seg.last_frame(), label.phrase()));
    }
    Ok(MotionSummary { lines })
}

/// Frames, then the motion summary, then the question.
pub fn build_tcogmap_prompt(
    bundle: &SceneBundle,
    item: &QaItem,
    summary: &MotionSummary,
    image_root: &Path,
    ablation: Ablation,
) -> Result<PromptBundle, PipelineError> {
    let mut parts = Vec::new();
    if ablation != Ablation::Blind {
        parts = frame_parts(bundle, &item.frames, image_root, ablation.images())?;
    }
    if ablation.summary() {
        parts.push(Part::text(summary.text()));
    }
    parts.push(Part::text(item.question_text.clone()));
    Ok(PromptBundle::single_user(parts))
}
