//! Template-driven question generation from segment-level action annotations.
//!
//! Seven question templates are rendered per scene. Every template runs logical
//! checks first and skips the question whenever the answer would be ambiguous
//! (non-unique vehicle references, duration ties, too few distinct actions).
//! All randomness (distractors, option order) comes from per-(scene, task, target)
//! sub-seeds so output is independent of processing order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geom;
use crate::motion::{self, ActionLabel, Thresholds};
use crate::scene::{SceneBundle, VehicleCategory};
use crate::segment::{self, Segment, SegmentationParams};

pub const LETTER_INSTRUCTION: &str = "Respond with exactly one letter corresponding to the correct option.";
pub const PHRASE_INSTRUCTION: &str = "Respond with exactly one full phrase from the following list:";
pub const FRAMES_INSTRUCTION: &str =
    "Respond with an explicit list of all frame numbers, enumerating each value individually, without summarizing as a range.";

pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Error)]
pub enum QaError {
    #[error("annotations for scene {ann} do not match bundle {bundle}")]
    SceneMismatch { ann: String, bundle: String },
    #[error("labeled track {0} is not in the scene")]
    UnknownTrack(String),
    #[error("segment {index} frames {first}..={last} fall outside the scene ({frames} frames)")]
    SegmentOutOfRange { index: usize, first: u32, last: u32, frames: usize },
    #[error(transparent)]
    Segment(#[from] segment::SegmentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ExactAnswerActionRecognition,
    MultipleChoiceActionRecognition,
    ActionDuration,
    TemporalOrdering,
    TemporalActionLocalization,
    RelativeTemporalActionLocalization,
    TemporalObjectLocalization,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::ExactAnswerActionRecognition,
        Task::MultipleChoiceActionRecognition,
        Task::ActionDuration,
        Task::TemporalOrdering,
        Task::TemporalActionLocalization,
        Task::RelativeTemporalActionLocalization,
        Task::TemporalObjectLocalization,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Task::ExactAnswerActionRecognition => "Exact Answer Action Recognition",
            Task::MultipleChoiceActionRecognition => "Multiple Choice Action Recognition",
            Task::ActionDuration => "Action Duration",
            Task::TemporalOrdering => "Temporal Ordering",
            Task::TemporalActionLocalization => "Temporal Action Localization",
            Task::RelativeTemporalActionLocalization => "Relative Temporal Action Localization",
            Task::TemporalObjectLocalization => "Temporal Object Localization",
        }
    }

    pub fn key(&self) -> &'static str {
        match self {
            Task::ExactAnswerActionRecognition => "exact_answer_action_recognition",
            Task::MultipleChoiceActionRecognition => "multiple_choice_action_recognition",
            Task::ActionDuration => "action_duration",
            Task::TemporalOrdering => "temporal_ordering",
            Task::TemporalActionLocalization => "temporal_action_localization",
            Task::RelativeTemporalActionLocalization => "relative_temporal_action_localization",
            Task::TemporalObjectLocalization => "temporal_object_localization",
        }
    }

    /// Column header used in report tables.
    pub fn short(&self) -> &'static str {
        match self {
            Task::ExactAnswerActionRecognition => "EA Act. Recog.",
            Task::MultipleChoiceActionRecognition => "MC Act. Recog.",
            Task::ActionDuration => "Action Dur.",
            Task::TemporalOrdering => "Temp. Ord.",
            Task::TemporalActionLocalization => "Temp. Act. Local.",
            Task::RelativeTemporalActionLocalization => "Rel. Temp. Local.",
            Task::TemporalObjectLocalization => "Temp. Obj. Local.",
        }
    }

    pub fn is_segment_level(&self) -> bool {
        matches!(self, Task::ExactAnswerActionRecognition | Task::MultipleChoiceActionRecognition)
    }

    pub fn answer_format(&self) -> AnswerFormat {
        match self {
            Task::ExactAnswerActionRecognition => AnswerFormat::ExactPhrase,
            Task::TemporalActionLocalization | Task::TemporalObjectLocalization => AnswerFormat::FrameList,
            _ => AnswerFormat::SingleLetter,
        }
    }

    /// Reference per-task question counts `(ego, non_ego, total)` of the full labeled release.
    pub fn reference_counts(&self) -> (usize, usize, usize) {
        match self {
            Task::ExactAnswerActionRecognition => (1500, 1104, 2604),
            Task::MultipleChoiceActionRecognition => (1030, 756, 1786),
            Task::ActionDuration => (124, 0, 124),
            Task::TemporalOrdering => (62, 18, 80),
            Task::TemporalActionLocalization => (338, 432, 770),
            Task::RelativeTemporalActionLocalization => (92, 0, 92),
            Task::TemporalObjectLocalization => (0, 405, 405),
        }
    }

    pub fn allows_ego(&self) -> bool {
        !matches!(self, Task::TemporalObjectLocalization)
    }

    pub fn allows_non_ego(&self) -> bool {
        !matches!(self, Task::ActionDuration | Task::RelativeTemporalActionLocalization)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let k = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        Task::ALL.into_iter().find(|t| t.key() == k).ok_or_else(|| format!("unknown task {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Ego,
    Vehicle {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        track_id: Option<String>,
        category: VehicleCategory,
    },
}

impl Target {
    pub fn is_ego(&self) -> bool {
        matches!(self, Target::Ego)
    }

    /// Noun phrase used inside question text.
    pub fn subject(&self) -> String {
        match self {
            Target::Ego => "the ego vehicle".to_string(),
            Target::Vehicle { category, .. } => format!("the {category}"),
        }
    }

    fn key(&self) -> String {
        match self {
            Target::Ego => "ego".to_string(),
            Target::Vehicle { track_id, category } => track_id.clone().unwrap_or_else(|| category.name().to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFormat {
    SingleLetter,
    ExactPhrase,
    FrameList,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroundTruth {
    Text(String),
    Frames(Vec<u32>),
}

impl GroundTruth {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            GroundTruth::Text(s) => Some(s),
            GroundTruth::Frames(_) => None,
        }
    }

    pub fn as_frames(&self) -> Option<&[u32]> {
        match self {
            GroundTruth::Frames(f) => Some(f),
            GroundTruth::Text(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: String,
    pub scene_id: String,
    pub task: Task,
    pub target: Target,
    pub question_text: String,
    pub answer_format: AnswerFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<BTreeMap<String, String>>,
    pub ground_truth: GroundTruth,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_index: Option<usize>,
    /// Frames the question is asked over: the segment's frames for segment tasks,
    /// every scene frame otherwise.
    pub frames: Vec<u32>,
}

/// Checks every per-item invariant; returns human-readable problems.
pub fn validate_item(item: &QaItem) -> Vec<String> {
    let mut problems = Vec::new();
    if item.answer_format != item.task.answer_format() {
        problems.push(format!("answer format {:?} does not match task {}", item.answer_format, item.task));
    }
    if item.target.is_ego() && !item.task.allows_ego() {
        problems.push(format!("task {} does not allow ego targets", item.task));
    }
    if !item.target.is_ego() && !item.task.allows_non_ego() {
        problems.push(format!("task {} does not allow non-ego targets", item.task));
    }
    if item.task.is_segment_level() != item.segment_index.is_some() {
        problems.push("segment index presence does not match task level".to_string());
    }
    match item.answer_format {
        AnswerFormat::SingleLetter => {
            let Some(options) = &item.options else {
                problems.push("single_letter item without options".into());
                return problems;
            };
            if !(2..=4).contains(&options.len()) {
                problems.push(format!("{} options", options.len()));
            }
            let expected: Vec<String> = LETTERS[..options.len().min(4)].iter().map(|c| c.to_string()).collect();
            if options.keys().cloned().collect::<Vec<_>>() != expected {
                problems.push("option letters are not a contiguous A.. prefix".into());
            }
            let distinct: BTreeSet<&String> = options.values().collect();
            if distinct.len() != options.len() {
                problems.push("duplicate option texts".into());
            }
            match item.ground_truth.as_text() {
                Some(letter) if options.contains_key(letter) => {}
                _ => problems.push(format!("ground truth {:?} is not an option letter", item.ground_truth)),
            }
        }
        AnswerFormat::ExactPhrase => match item.ground_truth.as_text() {
            Some(p) if ActionLabel::ALL.iter().any(|a| a.phrase() == p) => {}
            _ => problems.push(format!("ground truth {:?} is not an action phrase", item.ground_truth)),
        },
        AnswerFormat::FrameList => match item.ground_truth.as_frames() {
            Some(frames) => {
                if frames.is_empty() {
                    problems.push("empty frame list".into());
                }
                if frames.windows(2).any(|w| w[0] >= w[1]) {
                    problems.push("frame list not sorted and deduplicated".into());
                }
                let scene: BTreeSet<u32> = item.frames.iter().copied().collect();
                if frames.iter().any(|f| !scene.contains(f)) {
                    problems.push("frame list leaves the scene".into());
                }
            }
            None => problems.push("frame_list item without frame ground truth".into()),
        },
    }
    problems
}

/// Action labels for one segment window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub segment_index: usize,
    pub frame_indices: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ego: Option<ActionLabel>,
    #[serde(default)]
    pub tracks: BTreeMap<String, ActionLabel>,
}

impl SegmentAnnotation {
    fn center(&self) -> f64 {
        match (self.frame_indices.first(), self.frame_indices.last()) {
            (Some(a), Some(b)) => (*a as f64 + *b as f64) / 2.0,
            _ => f64::NAN,
        }
    }

    fn contains(&self, frame: u32) -> bool {
        matches!((self.frame_indices.first(), self.frame_indices.last()), (Some(a), Some(b)) if frame >= *a && frame <= *b)
    }

    fn label_for(&self, who: &TimelineTarget<'_>) -> Option<ActionLabel> {
        match who {
            TimelineTarget::Ego => self.ego,
            TimelineTarget::Track(id) => self.tracks.get(*id).copied(),
        }
    }
}

/// Per-segment action labels for one scene (the labels file schema).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotations {
    pub scene_id: String,
    pub segments: Vec<SegmentAnnotation>,
}

/// A maximal run of consecutive frames carrying one action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub label: ActionLabel,
    pub start_frame: u32,
    pub end_frame: u32,
}

impl Run {
    pub fn len(&self) -> u32 {
        self.end_frame - self.start_frame + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy)]
enum TimelineTarget<'a> {
    Ego,
    Track(&'a str),
}

impl SceneAnnotations {
    /// Empty annotations with one entry per segment.
    pub fn empty(scene_id: &str, segments: &[Segment]) -> Self {
        Self {
            scene_id: scene_id.to_string(),
            segments: segments
                .iter()
                .map(|s| SegmentAnnotation {
                    segment_index: s.segment_index,
                    frame_indices: s.frame_indices.clone(),
                    ego: None,
                    tracks: s.auto_labels.clone(),
                })
                .collect(),
        }
    }

    /// Machine labels: classifier output for the ego, automatic `Stopped` or the
    /// classifier suggestion for in-range tracks. Useful for synthetic data and
    /// bootstrapping; not ground truth.
    pub fn from_classifier(bundle: &SceneBundle, segments: &[Segment], thr: &Thresholds) -> Result<Self, QaError> {
        let mut ann = Self::empty(&bundle.scene_id, segments);
        for (seg, sa) in segments.iter().zip(&mut ann.segments) {
            sa.ego = Some(
                motion::classify_motion(segment::segment_ego_poses(bundle, seg), thr)
                    .map_err(segment::SegmentError::from)?,
            );
            for track_id in &seg.tracks_in_range {
                if sa.tracks.contains_key(track_id) {
                    continue;
                }
                if let Ok(label) = segment::suggest_track_label(bundle, seg, track_id, thr) {
                    sa.tracks.insert(track_id.clone(), label);
                }
            }
        }
        Ok(ann)
    }

    pub fn validate(&self, bundle: &SceneBundle) -> Result<(), QaError> {
        if self.scene_id != bundle.scene_id {
            return Err(QaError::SceneMismatch { ann: self.scene_id.clone(), bundle: bundle.scene_id.clone() });
        }
        let n = bundle.num_frames();
        for s in &self.segments {
            let first = s.frame_indices.first().copied().unwrap_or(0);
            let last = s.frame_indices.last().copied().unwrap_or(0);
            if s.frame_indices.is_empty() || last as usize >= n {
                return Err(QaError::SegmentOutOfRange { index: s.segment_index, first, last, frames: n });
            }
            for id in s.tracks.keys() {
                if bundle.track(id).is_none() {
                    return Err(QaError::UnknownTrack(id.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn segment(&self, index: usize) -> Option<&SegmentAnnotation> {
        self.segments.iter().find(|s| s.segment_index == index)
    }

    /// Frame-level ego timeline. Each frame takes the label of the nearest-centered
    /// labeled segment covering it (earlier segment on ties).
    pub fn ego_timeline(&self) -> Vec<Run> {
        self.timeline(TimelineTarget::Ego)
    }

    pub fn track_timeline(&self, track_id: &str) -> Vec<Run> {
        self.timeline(TimelineTarget::Track(track_id))
    }

    fn timeline(&self, who: TimelineTarget<'_>) -> Vec<Run> {
        let Some(max_frame) = self.segments.iter().filter_map(|s| s.frame_indices.last()).max().copied() else {
            return Vec::new();
        };
        let mut runs: Vec<Run> = Vec::new();
        for frame in 0..=max_frame {
            let mut best: Option<(f64, usize, ActionLabel)> = None;
            for s in &self.segments {
                let Some(label) = s.label_for(&who) else { continue };
                if !s.contains(frame) {
                    continue;
                }
                let d = (s.center() - frame as f64).abs();
                let better = match best {
                    None => true,
                    Some((bd, bi, _)) => d < bd || (d == bd && s.segment_index < bi),
                };
                if better {
                    best = Some((d, s.segment_index, label));
                }
            }
            let Some((_, _, label)) = best else { continue };
            match runs.last_mut() {
                Some(r) if r.label == label && r.end_frame + 1 == frame => r.end_frame = frame,
                _ => runs.push(Run { label, start_frame: frame, end_frame: frame }),
            }
        }
        runs
    }
}

fn timeline_for(ann: &SceneAnnotations, target: &Target) -> Vec<Run> {
    match target {
        Target::Ego => ann.ego_timeline(),
        Target::Vehicle { track_id: Some(id), .. } => ann.track_timeline(id),
        Target::Vehicle { track_id: None, .. } => Vec::new(),
    }
}

/// Distinct actions in order of first occurrence.
pub fn first_occurrence_order(runs: &[Run]) -> Vec<(ActionLabel, u32)> {
    let mut out: Vec<(ActionLabel, u32)> = Vec::new();
    for r in runs {
        if !out.iter().any(|(a, _)| *a == r.label) {
            out.push((r.label, r.start_frame));
        }
    }
    out
}

/// Derives a 64-bit seed from a base seed and a path of string keys.
pub fn sub_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Renders a lettered multiple-choice question; returns `(text, options)`.
pub fn render_multiple_choice(question: &str, options: &[String]) -> (String, BTreeMap<String, String>) {
    let listed: Vec<String> = options
        .iter()
        .zip(LETTERS)
        .map(|(o, l)| format!("{l}. {o}{}", if o.ends_with('.') { "" } else { "." }))
        .collect();
    let map = options.iter().zip(LETTERS).map(|(o, l)| (l.to_string(), o.clone())).collect();
    (format!("{question} {LETTER_INSTRUCTION} {}", listed.join(" ")), map)
}

/// Exact-answer prompt listing all eight phrases in canonical order.
pub fn render_exact_answer(question: &str) -> String {
    let phrases: Vec<String> = ActionLabel::ALL.iter().map(|a| format!("'{}'", a.phrase())).collect();
    format!("{question} {PHRASE_INSTRUCTION} {}", phrases.join(", "))
}

pub fn render_frame_question(question: &str) -> String {
    format!("{question} {FRAMES_INSTRUCTION}")
}

fn letter_of(options: &[String], correct: &str) -> String {
    let pos = options.iter().position(|o| o == correct).expect("correct option present");
    LETTERS[pos].to_string()
}

/// Everything the generators need about one scene.
#[derive(Debug, Clone)]
pub struct SceneContext<'a> {
    pub bundle: &'a SceneBundle,
    pub annotations: &'a SceneAnnotations,
    pub segments: Vec<Segment>,
    pub params: SegmentationParams,
}

impl<'a> SceneContext<'a> {
    pub fn new(bundle: &'a SceneBundle, annotations: &'a SceneAnnotations, params: SegmentationParams) -> Result<Self, QaError> {
        annotations.validate(bundle)?;
        let segments = segment::partition_scene(bundle, &params)?;
        Ok(Self { bundle, annotations, segments, params })
    }

    fn all_frames(&self) -> Vec<u32> {
        (0..self.bundle.num_frames() as u32).collect()
    }

    fn whole_scene(&self) -> Segment {
        Segment {
            segment_index: 0,
            frame_indices: self.all_frames(),
            tracks_in_range: Vec::new(),
            auto_labels: BTreeMap::new(),
        }
    }

    /// Frames of the annotated segment, falling back to the partition.
    fn segment_frames(&self, index: usize) -> Option<Vec<u32>> {
        self.annotations
            .segment(index)
            .map(|s| s.frame_indices.clone())
            .or_else(|| self.segments.get(index).map(|s| s.frame_indices.clone()))
    }
}

/// True iff exactly one in-range, front-visible track of `category` exists over `span`.
pub fn check_unique_reference(bundle: &SceneBundle, span: &Segment, category: VehicleCategory, range_limit: f64) -> bool {
    segment::filter_vehicles(bundle, span, range_limit)
        .iter()
        .filter(|id| bundle.track(id).map(|t| t.category) == Some(category))
        .count()
        == 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecognitionMode {
    Exact,
    MultipleChoice,
}

fn base_item(ctx: &SceneContext<'_>, task: Task, target: Target) -> QaItem {
    QaItem {
        id: String::new(),
        scene_id: ctx.bundle.scene_id.clone(),
        task,
        target,
        question_text: String::new(),
        answer_format: task.answer_format(),
        options: None,
        ground_truth: GroundTruth::Text(String::new()),
        segment_index: None,
        frames: ctx.all_frames(),
    }
}

/// Segment-level action recognition, exact-phrase or four-option multiple choice.
pub fn generate_segment_action_qa(
    ctx: &SceneContext<'_>,
    segment_index: usize,
    target: &Target,
    mode: RecognitionMode,
    seed: u64,
) -> Option<QaItem> {
    let seg_ann = ctx.annotations.segment(segment_index)?;
    let frames = ctx.segment_frames(segment_index)?;
    let label = match target {
        Target::Ego => seg_ann.ego?,
        Target::Vehicle { track_id: Some(id), category } => {
            let span = Segment { segment_index, frame_indices: frames.clone(), tracks_in_range: vec![], auto_labels: BTreeMap::new() };
            if !check_unique_reference(ctx.bundle, &span, *category, ctx.params.range_limit) {
                log::debug!("skip {}: {category} not unique in segment {segment_index}", ctx.bundle.scene_id);
                return None;
            }
            if !segment::filter_vehicles(ctx.bundle, &span, ctx.params.range_limit).contains(id) {
                return None;
            }
            *seg_ann.tracks.get(id)?
        }
        Target::Vehicle { track_id: None, .. } => return None,
    };

    let task = match mode {
        RecognitionMode::Exact => Task::ExactAnswerActionRecognition,
        RecognitionMode::MultipleChoice => Task::MultipleChoiceActionRecognition,
    };
    let mut item = base_item(ctx, task, target.clone());
    item.segment_index = Some(segment_index);
    item.frames = frames;
    match mode {
        RecognitionMode::Exact => {
            let q = match target {
                Target::Ego => "What best describes the motion of the ego vehicle in this video segment?".to_string(),
                _ => format!("What best describes the motion of {} visible in this video segment?", target.subject()),
            };
            item.question_text = render_exact_answer(&q);
            item.ground_truth = GroundTruth::Text(label.phrase().to_string());
        }
        RecognitionMode::MultipleChoice => {
            let mut rng = rng_for(seed);
            let wrong: Vec<ActionLabel> = ActionLabel::ALL.into_iter().filter(|a| *a != label).collect();
            let mut options: Vec<String> =
                wrong.choose_multiple(&mut rng, 3).map(|a| a.phrase().to_string()).collect();
            options.push(label.phrase().to_string());
            options.shuffle(&mut rng);
            let q = match target {
                Target::Ego => "What is the motion of the ego vehicle in this video segment?".to_string(),
                _ => format!("What is the motion of {} visible in this video segment?", target.subject()),
            };
            let (text, map) = render_multiple_choice(&q, &options);
            item.question_text = text;
            item.ground_truth = GroundTruth::Text(letter_of(&options, label.phrase()));
            item.options = Some(map);
        }
    }
    Some(item)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationVariant {
    Longest,
    Shortest,
}

/// Ego-only: which action lasted longest (or shortest) over the scene.
pub fn generate_duration_qa(ctx: &SceneContext<'_>, variant: DurationVariant, seed: u64) -> Option<QaItem> {
    let runs = ctx.annotations.ego_timeline();
    let mut totals: BTreeMap<ActionLabel, u32> = BTreeMap::new();
    for r in &runs {
        *totals.entry(r.label).or_default() += r.len();
    }
    if totals.len() < 2 {
        return None;
    }
    let extreme = match variant {
        DurationVariant::Longest => *totals.values().max()?,
        DurationVariant::Shortest => *totals.values().min()?,
    };
    let winners: Vec<ActionLabel> = totals.iter().filter(|(_, v)| **v == extreme).map(|(a, _)| *a).collect();
    if winners.len() != 1 {
        log::debug!("skip duration question for {}: tie", ctx.bundle.scene_id);
        return None;
    }
    let correct = winners[0];

    let mut rng = rng_for(seed);
    let order = first_occurrence_order(&runs);
    let others: Vec<ActionLabel> = order.iter().map(|(a, _)| *a).filter(|a| *a != correct).collect();
    let mut options: Vec<String> = others.choose_multiple(&mut rng, 3.min(others.len())).map(|a| a.phrase().to_string()).collect();
    options.push(correct.phrase().to_string());
    options.shuffle(&mut rng);

    let q = match variant {
        DurationVariant::Longest => "Which action did the ego vehicle spend the most time doing?",
        DurationVariant::Shortest => "Which action did the ego vehicle spend the least time doing?",
    };
    let (text, map) = render_multiple_choice(q, &options);
    let mut item = base_item(ctx, Task::ActionDuration, Target::Ego);
    item.question_text = text;
    item.ground_truth = GroundTruth::Text(letter_of(&options, correct.phrase()));
    item.options = Some(map);
    Some(item)
}

fn sequence_text(seq: &[ActionLabel]) -> String {
    seq.iter().map(|a| a.phrase()).collect::<Vec<_>>().join("; ")
}

fn permutations(items: &[ActionLabel]) -> Vec<Vec<ActionLabel>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// Distractor sequences: permutations of the true order, then (for three or more
/// actions) variants with one action dropped.
fn ordering_candidates(truth: &[ActionLabel]) -> Vec<Vec<ActionLabel>> {
    let mut seen: BTreeSet<Vec<ActionLabel>> = BTreeSet::new();
    seen.insert(truth.to_vec());
    let mut out = Vec::new();
    // cap the permutation space at 5 actions (120 sequences)
    let head = &truth[..truth.len().min(5)];
    for mut p in permutations(head) {
        p.extend_from_slice(&truth[head.len()..]);
        if seen.insert(p.clone()) {
            out.push(p);
        }
    }
    if truth.len() >= 3 {
        for i in 0..truth.len() {
            let mut v = truth.to_vec();
            v.remove(i);
            if seen.insert(v.clone()) {
                out.push(v);
            }
        }
    }
    out
}

/// Correct temporal order of a target's distinct actions among up to four sequences.
pub fn generate_ordering_qa(ctx: &SceneContext<'_>, target: &Target, seed: u64) -> Option<QaItem> {
    if let Target::Vehicle { category, .. } = target {
        if !check_unique_reference(ctx.bundle, &ctx.whole_scene(), *category, ctx.params.range_limit) {
            return None;
        }
    }
    let runs = timeline_for(ctx.annotations, target);
    if runs.len() < 2 {
        return None;
    }
    let truth: Vec<ActionLabel> = first_occurrence_order(&runs).into_iter().map(|(a, _)| a).collect();
    if truth.len() < 2 {
        return None;
    }
    let mut rng = rng_for(seed);
    let candidates = ordering_candidates(&truth);
    let mut seqs: Vec<Vec<ActionLabel>> = candidates.choose_multiple(&mut rng, 3.min(candidates.len())).cloned().collect();
    seqs.push(truth.clone());
    seqs.shuffle(&mut rng);
    let options: Vec<String> = seqs.iter().map(|s| sequence_text(s)).collect();

    let q = format!(
        "Which of the following represents the correct temporal order of motions for {}?",
        target.subject()
    );
    let (text, map) = render_multiple_choice(&q, &options);
    let mut item = base_item(ctx, Task::TemporalOrdering, target.clone());
    item.question_text = text;
    item.ground_truth = GroundTruth::Text(letter_of(&options, &sequence_text(&truth)));
    item.options = Some(map);
    Some(item)
}

/// Frames during which the target performs `action`.
pub fn generate_action_localization_qa(ctx: &SceneContext<'_>, target: &Target, action: ActionLabel) -> Option<QaItem> {
    if let Target::Vehicle { category, .. } = target {
        if !check_unique_reference(ctx.bundle, &ctx.whole_scene(), *category, ctx.params.range_limit) {
            return None;
        }
    }
    let runs = timeline_for(ctx.annotations, target);
    let frames: BTreeSet<u32> = runs
        .iter()
        .filter(|r| r.label == action)
        .flat_map(|r| r.start_frame..=r.end_frame)
        .collect();
    if frames.is_empty() {
        return None;
    }
    let q = format!(
        "In which frames is {} doing action '{}'?",
        target.subject(),
        action.phrase().to_lowercase()
    );
    let mut item = base_item(ctx, Task::TemporalActionLocalization, target.clone());
    item.question_text = render_frame_question(&q);
    item.ground_truth = GroundTruth::Frames(frames.into_iter().collect());
    Some(item)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelativeVariant {
    Earlier,
    Later,
}

/// Ego-only: which of two actions happened first (or last), two options.
pub fn generate_relative_localization_qa(
    ctx: &SceneContext<'_>,
    pair: Option<(ActionLabel, ActionLabel)>,
    variant: RelativeVariant,
    seed: u64,
) -> Option<QaItem> {
    let order = first_occurrence_order(&ctx.annotations.ego_timeline());
    if order.len() < 2 {
        return None;
    }
    let mut rng = rng_for(seed);
    let (a, b) = match pair {
        Some((x, y)) => {
            let fx = order.iter().find(|(l, _)| *l == x)?;
            let fy = order.iter().find(|(l, _)| *l == y)?;
            (*fx, *fy)
        }
        None => {
            let picked: Vec<&(ActionLabel, u32)> = order.choose_multiple(&mut rng, 2).collect();
            (*picked[0], *picked[1])
        }
    };
    if a.0 == b.0 || a.1 == b.1 {
        return None;
    }
    let (earlier, later) = if a.1 < b.1 { (a.0, b.0) } else { (b.0, a.0) };
    let correct = match variant {
        RelativeVariant::Earlier => earlier,
        RelativeVariant::Later => later,
    };
    let mut options = vec![a.0.phrase().to_string(), b.0.phrase().to_string()];
    options.shuffle(&mut rng);
    let q = match variant {
        RelativeVariant::Earlier => "Which ego vehicle event happened earlier in the video?",
        RelativeVariant::Later => "Which ego vehicle event happened later in the video?",
    };
    let (text, map) = render_multiple_choice(q, &options);
    let mut item = base_item(ctx, Task::RelativeTemporalActionLocalization, Target::Ego);
    item.question_text = text;
    item.ground_truth = GroundTruth::Text(letter_of(&options, correct.phrase()));
    item.options = Some(map);
    Some(item)
}

/// Frames where at least one in-range, front-visible vehicle of `category` exists.
pub fn category_visible_frames(bundle: &SceneBundle, category: VehicleCategory, range_limit: f64) -> BTreeSet<u32> {
    let mut frames = BTreeSet::new();
    for track in bundle.tracks.iter().filter(|t| t.category == category) {
        for s in &track.states {
            let Some(ego) = bundle.ego_poses.get(s.frame_index as usize) else { continue };
            if s.visible_in_front_camera && geom::planar_distance(s.center, ego.translation) <= range_limit {
                frames.insert(s.frame_index);
            }
        }
    }
    frames
}

/// Non-ego only: frames in which any vehicle of `category` is visible.
pub fn generate_object_localization_qa(ctx: &SceneContext<'_>, category: VehicleCategory) -> Option<QaItem> {
    let frames = category_visible_frames(ctx.bundle, category, ctx.params.range_limit);
    if frames.is_empty() {
        return None;
    }
    let q = format!("In which frames are there any {} visible to the ego vehicle?", category.plural());
    let mut item = base_item(ctx, Task::TemporalObjectLocalization, Target::Vehicle { track_id: None, category });
    item.question_text = render_frame_question(&q);
    item.ground_truth = GroundTruth::Frames(frames.into_iter().collect());
    Some(item)
}

/// Non-ego targets (one per labeled track) whose category is unique over the scene.
fn scene_level_vehicle_targets(ctx: &SceneContext<'_>) -> Vec<Target> {
    let scene = ctx.whole_scene();
    let labeled: BTreeSet<&String> = ctx.annotations.segments.iter().flat_map(|s| s.tracks.keys()).collect();
    let mut out = Vec::new();
    for id in labeled {
        let Some(track) = ctx.bundle.track(id) else { continue };
        if check_unique_reference(ctx.bundle, &scene, track.category, ctx.params.range_limit) {
            out.push(Target::Vehicle { track_id: Some(id.clone()), category: track.category });
        }
    }
    out
}

/// Runs every enabled template over one scene, assigns ids and self-validates.
pub fn generate_scene_qa(ctx: &SceneContext<'_>, seed: u64, tasks: &[Task]) -> Vec<QaItem> {
    let scene_id = ctx.bundle.scene_id.as_str();
    let enabled = |t: Task| tasks.contains(&t);
    let mut items: Vec<QaItem> = Vec::new();

    for sa in &ctx.annotations.segments {
        let idx = sa.segment_index;
        let mut targets = Vec::new();
        if sa.ego.is_some() {
            targets.push(Target::Ego);
        }
        for id in sa.tracks.keys() {
            if let Some(track) = ctx.bundle.track(id) {
                targets.push(Target::Vehicle { track_id: Some(id.clone()), category: track.category });
            }
        }
        for target in &targets {
            let tkey = target.key();
            let idx_s = idx.to_string();
            if enabled(Task::ExactAnswerActionRecognition) {
                let s = sub_seed(seed, &[scene_id, Task::ExactAnswerActionRecognition.key(), &idx_s, &tkey]);
                items.extend(generate_segment_action_qa(ctx, idx, target, RecognitionMode::Exact, s));
            }
            if enabled(Task::MultipleChoiceActionRecognition) {
                let s = sub_seed(seed, &[scene_id, Task::MultipleChoiceActionRecognition.key(), &idx_s, &tkey]);
                items.extend(generate_segment_action_qa(ctx, idx, target, RecognitionMode::MultipleChoice, s));
            }
        }
    }

    if enabled(Task::ActionDuration) {
        let s = sub_seed(seed, &[scene_id, Task::ActionDuration.key()]);
        let first = if rng_for(s).random_bool(0.5) { DurationVariant::Longest } else { DurationVariant::Shortest };
        let second = if first == DurationVariant::Longest { DurationVariant::Shortest } else { DurationVariant::Longest };
        items.extend(generate_duration_qa(ctx, first, s).or_else(|| generate_duration_qa(ctx, second, s)));
    }

    let mut scene_targets = vec![Target::Ego];
    scene_targets.extend(scene_level_vehicle_targets(ctx));

    if enabled(Task::TemporalOrdering) {
        for target in &scene_targets {
            let s = sub_seed(seed, &[scene_id, Task::TemporalOrdering.key(), &target.key()]);
            items.extend(generate_ordering_qa(ctx, target, s));
        }
    }

    if enabled(Task::TemporalActionLocalization) {
        for target in &scene_targets {
            for (action, _) in first_occurrence_order(&timeline_for(ctx.annotations, target)) {
                items.extend(generate_action_localization_qa(ctx, target, action));
            }
        }
    }

    if enabled(Task::RelativeTemporalActionLocalization) {
        let s = sub_seed(seed, &[scene_id, Task::RelativeTemporalActionLocalization.key()]);
        let variant = if rng_for(s ^ 1).random_bool(0.5) { RelativeVariant::Earlier } else { RelativeVariant::Later };
        items.extend(generate_relative_localization_qa(ctx, None, variant, s));
    }

    if enabled(Task::TemporalObjectLocalization) {
        for category in VehicleCategory::ALL {
            items.extend(generate_object_localization_qa(ctx, category));
        }
    }

    let mut counters: BTreeMap<Task, usize> = BTreeMap::new();
    items.retain(|item| {
        let problems = validate_item(item);
        if !problems.is_empty() {
            log::warn!("dropping generated item in {scene_id}: {}", problems.join("; "));
        }
        problems.is_empty()
    });
    for item in &mut items {
        let n = counters.entry(item.task).or_default();
        item.id = format!("{scene_id}-{}-{:03}", item.task.key(), *n);
        *n += 1;
    }
    items
}

/// Generates QA items for many scenes in parallel; output order follows input order.
pub fn generate_qa(
    scenes: &[(SceneBundle, SceneAnnotations)],
    params: &SegmentationParams,
    seed: u64,
    tasks: &[Task],
) -> Result<Vec<QaItem>, QaError> {
    let per_scene: Result<Vec<Vec<QaItem>>, QaError> = scenes
        .par_iter()
        .map(|(bundle, ann)| {
            let ctx = SceneContext::new(bundle, ann, *params)?;
            Ok(generate_scene_qa(&ctx, seed, tasks))
        })
        .collect();
    Ok(per_scene?.into_iter().flatten().collect())
}

/// Per-task `(ego, non_ego, total)` counts.
pub fn count_by_task(items: &[QaItem]) -> BTreeMap<Task, (usize, usize, usize)> {
    let mut out: BTreeMap<Task, (usize, usize, usize)> = Task::ALL.iter().map(|t| (*t, (0, 0, 0))).collect();
    for item in items {
        let e = out.entry(item.task).or_default();
        if item.target.is_ego() {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
        e.2 += 1;
    }
    out
}

/// Side-by-side table of generated vs reference per-task counts.
pub fn count_diff_table(items: &[QaItem]) -> String {
    let counts = count_by_task(items);
    let mut out = format!(
        "{:<40} {:>6} {:>8} {:>6} | {:>6} {:>8} {:>6}\n",
        "Task", "Ego", "Non-Ego", "Total", "Ref", "Ref-NE", "RefTot"
    );
    for task in Task::ALL {
        let (e, ne, t) = counts[&task];
        let (re, rne, rt) = task.reference_counts();
        out.push_str(&format!("{:<40} {e:>6} {ne:>8} {t:>6} | {re:>6} {rne:>8} {rt:>6}\n", task.name()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_answer_prompt_lists_phrases_in_order() {
        let text = render_exact_answer("What best describes the motion of the bus visible in this video segment?");
        assert_eq!(
            text,
            "What best describes the motion of the bus visible in this video segment? Respond with exactly one full phrase from the following list: 'Starting', 'Stopping', 'Turn left', 'Turn right', 'Change lane to the left', 'Change lane to the right', 'Straight, constant speed', 'Stopped'"
        );
    }

    #[test]
    fn multiple_choice_rendering_matches_reference_example() {
        let options: Vec<String> = ["Turn left", "Straight, constant speed", "Stopped", "Starting"].map(String::from).to_vec();
        let (text, map) = render_multiple_choice("What is the motion of the ego vehicle in this video segment?", &options);
        assert_eq!(
            text,
            "What is the motion of the ego vehicle in this video segment? Respond with exactly one letter corresponding to the correct option. A. Turn left. B. Straight, constant speed. C. Stopped. D. Starting."
        );
        assert_eq!(letter_of(&options, "Starting"), "D");
        assert_eq!(map["D"], "Starting");
    }

    #[test]
    fn sub_seed_is_stable_and_path_sensitive() {
        assert_eq!(sub_seed(7, &["a", "b"]), sub_seed(7, &["a", "b"]));
        assert_ne!(sub_seed(7, &["a", "b"]), sub_seed(7, &["ab"]));
        assert_ne!(sub_seed(7, &["a"]), sub_seed(8, &["a"]));
    }

    #[test]
    fn ordering_candidates_for_two_actions() {
        let truth = [ActionLabel::Stopped, ActionLabel::Starting];
        assert_eq!(ordering_candidates(&truth), vec![vec![ActionLabel::Starting, ActionLabel::Stopped]]);
    }

    #[test]
    fn ordering_candidates_exclude_truth_and_are_distinct() {
        let truth = [ActionLabel::Starting, ActionLabel::Stopping, ActionLabel::StraightConstantSpeed];
        let c = ordering_candidates(&truth);
        assert_eq!(c.len(), 5 + 3);
        assert!(!c.contains(&truth.to_vec()));
        let set: BTreeSet<_> = c.iter().collect();
        assert_eq!(set.len(), c.len());
    }

    #[test]
    fn task_parse_and_constraints() {
        assert_eq!("action-duration".parse::<Task>().unwrap(), Task::ActionDuration);
        assert!(!Task::ActionDuration.allows_non_ego());
        assert!(!Task::TemporalObjectLocalization.allows_ego());
        let total: usize = Task::ALL.iter().map(|t| t.reference_counts().2).sum();
        assert_eq!(total, 5861);
    }
}
