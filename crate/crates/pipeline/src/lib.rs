//! Inference configurations (baseline, baseline with ego pose, Scene-CoT, TCogMap)
//! and a bounded-parallelism runner over QA items.

pub mod prompts;
pub mod scene_cot;
pub mod synthetic;
pub mod templates;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use tad_core::motion::Thresholds;
use tad_core::qa::QaItem;
use tad_core::segment::{partition_scene, Segment, SegmentationParams};
use tad_core::SceneBundle;
use tad_gateway::{ChatModel, GatewayError, PromptBundle};
use thiserror::Error;

pub use prompts::{build_baseline_prompt, build_tcogmap_context, build_tcogmap_prompt, Ablation, MotionSummary};
pub use scene_cot::{CotTrace, SceneCot, TraceCache, TraceKey};
pub use templates::PromptTemplates;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("scene {scene}: frame {frame} has no image")]
    MissingImage { scene: String, frame: u32 },
    #[error("motion classification failed{}: {message}", segment.map(|s| format!(" in segment {s}")).unwrap_or_default())]
    Classifier { segment: Option<usize>, message: String },
    #[error("{context}: {source}")]
    Model {
        context: String,
        #[source]
        source: GatewayError,
    },
    #[error("unknown scene {0}")]
    UnknownScene(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("segmentation failed for {scene}: {message}")]
    Segmentation { scene: String, message: String },
    #[error("scene-cot needs a text model endpoint")]
    MissingTextModel,
    #[error("io error: {0}")]
    Io(String),
    #[error("item {id}: {source}")]
    Item {
        id: String,
        #[source]
        source: Box<PipelineError>,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Baseline,
    BaselineEgoPose,
    SceneCot,
    Tcogmap,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::BaselineEgoPose => "baseline-ego-pose",
            Method::SceneCot => "scene-cot",
            Method::Tcogmap => "tcogmap",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "baseline-ego-pose" | "baseline_ego_pose" => Ok(Method::BaselineEgoPose),
            "scene-cot" | "scene_cot" => Ok(Method::SceneCot),
            "tcogmap" => Ok(Method::Tcogmap),
            other => Err(format!("unknown method {other:?} (expected baseline|baseline-ego-pose|scene-cot|tcogmap)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub method: Method,
    pub ablation: Ablation,
    pub parallelism: usize,
    pub image_root: PathBuf,
    pub thresholds: Thresholds,
    pub segmentation: SegmentationParams,
}

impl PipelineConfig {
    pub fn new(method: Method, image_root: PathBuf) -> Self {
        Self {
            method,
            ablation: Ablation::Full,
            parallelism: 4,
            image_root,
            thresholds: Thresholds::default(),
            segmentation: SegmentationParams::default(),
        }
    }
}

/// A scene with its segments and motion summary computed once.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub bundle: SceneBundle,
    pub segments: Vec<Segment>,
    pub summary: MotionSummary,
}

impl PreparedScene {
    pub fn new(bundle: SceneBundle, params: &SegmentationParams, thr: &Thresholds) -> Result<Self, PipelineError> {
        let segments = partition_scene(&bundle, params)
            .map_err(|e| PipelineError::Segmentation { scene: bundle.scene_id.clone(), message: e.to_string() })?;
        let summary = build_tcogmap_context(&bundle, &segments, thr)?;
        Ok(Self { bundle, segments, summary })
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    vlm: Arc<dyn ChatModel>,
    llm: Option<Arc<dyn ChatModel>>,
    templates: PromptTemplates,
    cache: Arc<TraceCache>,
    scenes: HashMap<String, PreparedScene>,
}

impl Pipeline {
    pub fn new(
        cfg: PipelineConfig,
        vlm: Arc<dyn ChatModel>,
        llm: Option<Arc<dyn ChatModel>>,
        templates: PromptTemplates,
        cache: Arc<TraceCache>,
        bundles: Vec<SceneBundle>,
    ) -> Result<Self, PipelineError> {
        if cfg.method == Method::SceneCot && llm.is_none() {
            return Err(PipelineError::MissingTextModel);
        }
        let scenes = bundles
            .into_iter()
            .map(|b| Ok((b.scene_id.clone(), PreparedScene::new(b, &cfg.segmentation, &cfg.thresholds)?)))
            .collect::<Result<HashMap<_, _>, PipelineError>>()?;
        Ok(Self { cfg, vlm, llm, templates, cache, scenes })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn scene(&self, id: &str) -> Option<&PreparedScene> {
        self.scenes.get(id)
    }

    fn prepared(&self, item: &QaItem) -> Result<&PreparedScene, PipelineError> {
        self.scenes.get(&item.scene_id).ok_or_else(|| PipelineError::UnknownScene(item.scene_id.clone()))
    }

    fn scene_cot(&self) -> Result<SceneCot<'_>, PipelineError> {
        Ok(SceneCot {
            vlm: self.vlm.as_ref(),
            llm: self.llm.as_deref().ok_or(PipelineError::MissingTextModel)?,
            templates: &self.templates,
            cache: &self.cache,
            image_root: &self.cfg.image_root,
        })
    }

    /// The single-call prompt for non-CoT methods, or the final text prompt for Scene-CoT.
    pub async fn prompt_for(&self, item: &QaItem) -> Result<PromptBundle, PipelineError> {
        let scene = self.prepared(item)?;
        let root = &self.cfg.image_root;
        match self.cfg.method {
            Method::Baseline => build_baseline_prompt(&scene.bundle, item, false, root, self.cfg.ablation),
            Method::BaselineEgoPose => build_baseline_prompt(&scene.bundle, item, true, root, self.cfg.ablation),
            Method::Tcogmap => build_tcogmap_prompt(&scene.bundle, item, &scene.summary, root, self.cfg.ablation),
            Method::SceneCot => self.scene_cot()?.prompt(&scene.bundle, &scene.segments, item).await,
        }
    }

    /// Raw completion for one item.
    pub async fn answer(&self, item: &QaItem) -> Result<String, PipelineError> {
        let wrap = |e: PipelineError| PipelineError::Item { id: item.id.clone(), source: Box::new(e) };
        let scene = self.prepared(item).map_err(wrap)?;
        if self.cfg.method == Method::SceneCot {
            return self.scene_cot().map_err(wrap)?.answer(&scene.bundle, &scene.segments, item).await.map_err(wrap);
        }
        let prompt = self.prompt_for(item).await.map_err(wrap)?;
        self.vlm
            .chat(&prompt)
            .await
            .map(|r| r.text)
            .map_err(|e| wrap(PipelineError::Model { context: "answer".into(), source: e }))
    }

    /// Answers items with at most `parallelism` in flight; `on_done` sees results in input order.
    pub async fn run_each<F>(&self, items: &[QaItem], mut on_done: F)
    where
        F: FnMut(&QaItem, Result<String, PipelineError>),
    {
        let width = self.cfg.parallelism.max(1);
        let mut stream = futures::stream::iter(items.iter().map(|item| async move { (item, self.answer(item).await) })).buffered(width);
        while let Some((item, result)) = stream.next().await {
            on_done(item, result);
        }
    }

    pub async fn run(&self, items: &[QaItem]) -> Vec<Result<String, PipelineError>> {
        let mut out = Vec::with_capacity(items.len());
        self.run_each(items, |_, r| out.push(r)).await;
        out
    }
}
