//! Four-step per-segment reasoning traces and the final text-only answer call.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use dashmap::DashMap;
use futures::future::try_join_all;
use serde::{Deserialize, Serialize};
use tad_core::qa::QaItem;
use tad_core::segment::{sample_frames, Segment};
use tad_core::{ActionLabel, SceneBundle};
use tad_gateway::{ChatModel, Part, PromptBundle};
use tokio::sync::OnceCell;

use crate::prompts::frame_parts;
use crate::templates::{render, PromptTemplates};
use crate::PipelineError;

/// Frames sampled per segment for the reasoning steps.
pub const COT_FRAMES_PER_SEGMENT: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotTrace {
    pub segment_index: usize,
    pub first_frame: u32,
    pub last_frame: u32,
    pub scene_description: String,
    pub ego_motion: String,
    pub nearby_motion: String,
    pub json_summary: String,
}

impl CotTrace {
    /// Segment context: scene description joined with the formatted summary.
    pub fn context(&self, templates: &PromptTemplates, segment_number: usize) -> Result<String, PipelineError> {
        render(
            &templates.segment_description,
            &[
                ("segment_number", &segment_number.to_string()),
                ("first_frame", &self.first_frame.to_string()),
                ("last_frame", &self.last_frame.to_string()),
                ("scene_description", self.scene_description.trim()),
                ("summary", self.json_summary.trim()),
            ],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceKey {
    pub scene_id: String,
    pub segment_index: usize,
    pub prompt_version: String,
    pub model: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheRecord {
    key: TraceKey,
    trace: CotTrace,
}

/// Steps that completed before a failure, kept for inspection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialTrace {
    pub key: TraceKey,
    pub failed_step: u8,
    pub error: String,
    pub completed: Vec<String>,
}

/// Concurrent trace cache with insert-if-absent semantics and optional JSONL persistence.
#[derive(Debug, Default)]
pub struct TraceCache {
    cells: DashMap<TraceKey, Arc<OnceCell<Arc<CotTrace>>>>,
    path: Option<PathBuf>,
    write_lock: Mutex<()>,
    partials: Mutex<Vec<PartialTrace>>,
}

impl TraceCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads `path` if present; new traces are appended to it.
    pub fn persistent(path: PathBuf) -> Result<Self, PipelineError> {
        let cache = Self { path: Some(path.clone()), ..Self::default() };
        if path.is_file() {
            let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                match serde_json::from_str::<CacheRecord>(line) {
                    Ok(rec) => {
                        cache.cells.insert(rec.key, Arc::new(OnceCell::new_with(Some(Arc::new(rec.trace)))));
                    }
                    Err(e) => log::warn!("{}:{}: skipping unreadable trace ({e})", path.display(), n + 1),
                }
            }
        }
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.cells.iter().filter(|c| c.value().initialized()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn partials(&self) -> Vec<PartialTrace> {
        self.partials.lock().expect("partials lock").clone()
    }

    fn append(&self, file: &Path, line: &str) {
        let _guard = self.write_lock.lock().expect("cache write lock");
        let res = file
            .parent()
            .map_or(Ok(()), std::fs::create_dir_all)
            .and_then(|_| std::fs::OpenOptions::new().create(true).append(true).open(file))
            .and_then(|mut f| writeln!(f, "{line}"));
        if let Err(e) = res {
            log::warn!("cannot persist trace to {}: {e}", file.display());
        }
    }

    fn persist(&self, key: &TraceKey, trace: &CotTrace) {
        if let Some(path) = &self.path {
            let line = serde_json::to_string(&CacheRecord { key: key.clone(), trace: trace.clone() }).expect("trace serializes");
            self.append(path, &line);
        }
    }

    fn record_partial(&self, partial: PartialTrace) {
        if let Some(path) = &self.path {
            let file = path.with_extension("partial.jsonl");
            self.append(&file, &serde_json::to_string(&partial).expect("partial serializes"));
        }
        self.partials.lock().expect("partials lock").push(partial);
    }

    /// Returns the cached trace or computes it exactly once, even under concurrent callers.
    pub async fn get_or_compute<F, Fut>(&self, key: TraceKey, compute: F) -> Result<Arc<CotTrace>, PipelineError>
    where
        F: FnOnce() -> Fut,
        Fut: std::future::Future<Output = Result<CotTrace, PipelineError>>,
    {
        let cell = self.cells.entry(key.clone()).or_default().clone();
        let trace = cell
            .get_or_try_init(|| async {
                let t = compute().await?;
                self.persist(&key, &t);
                Ok::<_, PipelineError>(Arc::new(t))
            })
            .await?;
        Ok(trace.clone())
    }
}

fn action_list() -> String {
    ActionLabel::ALL.iter().map(|a| format!("'{}'", a.phrase())).collect::<Vec<_>>().join(", ")
}

fn step_prompt(frames: &[Part], text: String) -> PromptBundle {
    let mut parts = frames.to_vec();
    parts.push(Part::text(text));
    PromptBundle::single_user(parts)
}

/// Runs the four sequential reasoning calls for one segment.
pub async fn compute_segment_trace(
    bundle: &SceneBundle,
    segment: &Segment,
    vlm: &dyn ChatModel,
    templates: &PromptTemplates,
    image_root: &Path,
) -> Result<CotTrace, (u8, Vec<String>, PipelineError)> {
    let sampled = sample_frames(segment, COT_FRAMES_PER_SEGMENT).map_err(|e| (0, vec![], PipelineError::Template(e.to_string())))?;
    let frames = frame_parts(bundle, &sampled, image_root, true).map_err(|e| (0, vec![], e))?;
    let actions = action_list();
    let mut done: Vec<String> = Vec::with_capacity(4);

    macro_rules! step {
        ($n:expr, $template:expr, $values:expr) => {{
            let text = render($template, $values).map_err(|e| ($n, done.clone(), e))?;
            let out = vlm
                .chat(&step_prompt(&frames, text))
                .await
                .map_err(|e| ($n, done.clone(), PipelineError::Model { context: format!("segment {} step {}", segment.segment_index, $n), source: e }))?;
            done.push(out.text.clone());
            out.text
        }};
    }

    let n = sampled.len().to_string();
    let scene_description = step!(1u8, &templates.step1_scene, &[("num_frames", n.as_str())]);
    let ego_motion = step!(
        2u8,
        &templates.step2_ego,
        &[("scene_description", scene_description.as_str()), ("action_list", actions.as_str())]
    );
    let nearby_motion = step!(
        3u8,
        &templates.step3_nearby,
        &[
            ("scene_description", scene_description.as_str()),
            ("ego_motion", ego_motion.as_str()),
            ("action_list", actions.as_str())
        ]
    );
    let json_summary = step!(
        4u8,
        &templates.step4_summary,
        &[("ego_motion", ego_motion.as_str()), ("nearby_motion", nearby_motion.as_str())]
    );
    Ok(CotTrace {
        segment_index: segment.segment_index,
        first_frame: segment.first_frame(),
        last_frame: segment.last_frame(),
        scene_description,
        ego_motion,
        nearby_motion,
        json_summary,
    })
}

/// Shared resources for Scene-CoT answering.
pub struct SceneCot<'a> {
    pub vlm: &'a dyn ChatModel,
    pub llm: &'a dyn ChatModel,
    pub templates: &'a PromptTemplates,
    pub cache: &'a TraceCache,
    pub image_root: &'a Path,
}

impl SceneCot<'_> {
    async fn trace(&self, bundle: &SceneBundle, segment: &Segment) -> Result<Arc<CotTrace>, PipelineError> {
        let key = TraceKey {
            scene_id: bundle.scene_id.clone(),
            segment_index: segment.segment_index,
            prompt_version: self.templates.version(),
            model: self.vlm.model_id().to_string(),
        };
        self.cache
            .get_or_compute(key.clone(), || async {
                compute_segment_trace(bundle, segment, self.vlm, self.templates, self.image_root).await.map_err(
                    |(step, completed, err)| {
                        self.cache.record_partial(PartialTrace { key, failed_step: step, error: err.to_string(), completed });
                        err
                    },
                )
            })
            .await
    }

    /// Segments the question reasons over: the item's own segment for segment
    /// tasks, every segment otherwise.
    pub fn relevant_segments<'s>(item: &QaItem, segments: &'s [Segment]) -> Vec<&'s Segment> {
        match item.segment_index {
            Some(i) => segments.iter().filter(|s| s.segment_index == i).collect(),
            None => segments.iter().collect(),
        }
    }

    /// Builds the final text-only prompt from the traces of the relevant segments.
    pub async fn prompt(&self, bundle: &SceneBundle, segments: &[Segment], item: &QaItem) -> Result<PromptBundle, PipelineError> {
        let relevant = Self::relevant_segments(item, segments);
        let traces = try_join_all(relevant.iter().map(|s| self.trace(bundle, s))).await?;
        let contexts = traces
            .iter()
            .enumerate()
            .map(|(i, t)| t.context(self.templates, i + 1))
            .collect::<Result<Vec<_>, _>>()?;
        let text = render(
            &self.templates.answer,
            &[("segment_descriptions", &contexts.join("\n\n")), ("question", &item.question_text)],
        )?;
        Ok(PromptBundle::single_user(vec![Part::text(text)]))
    }

    pub async fn answer(&self, bundle: &SceneBundle, segments: &[Segment], item: &QaItem) -> Result<String, PipelineError> {
        let prompt = self.prompt(bundle, segments, item).await?;
        let out = self
            .llm
            .chat(&prompt)
            .await
            .map_err(|e| PipelineError::Model { context: format!("item {} final answer", item.id), source: e })?;
        Ok(out.text)
    }
}
