//! Append-only label and review store with optimistic concurrency.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tad_core::qa::{AnswerFormat, GroundTruth, QaItem, SceneAnnotations};
use tad_core::segment::Segment;
use tad_core::ActionLabel;
use thiserror::Error;

pub const EGO_TARGET: &str = "ego";
const LABELS_FILE: &str = "labels.jsonl";
const REVIEWS_FILE: &str = "reviews.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("stale revision: expected {expected}, current is {current}")]
    Conflict { expected: u64, current: u64, record: Option<Box<LabelRecord>> },
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("io error on {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

impl StoreError {
    fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        StoreError::Invalid { field, reason: reason.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Auto,
    Suggested,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelKey {
    pub scene_id: String,
    pub segment_index: usize,
    /// `"ego"` or a track id.
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub scene_id: String,
    pub segment_index: usize,
    pub target: String,
    pub label: ActionLabel,
    pub source: LabelSource,
    pub revision: u64,
    pub annotator: String,
    pub timestamp: f64,
}

impl LabelRecord {
    pub fn key(&self) -> LabelKey {
        LabelKey { scene_id: self.scene_id.clone(), segment_index: self.segment_index, target: self.target.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected,
    Edited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub qa_id: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_answer: Option<GroundTruth>,
    pub annotator: String,
    pub timestamp: f64,
}

/// Checks a replacement answer against the item's format.
pub fn validate_edit(item: &QaItem, answer: &GroundTruth) -> Result<(), StoreError> {
    match (item.answer_format, answer) {
        (AnswerFormat::SingleLetter, GroundTruth::Text(l)) => {
            if item.options.as_ref().is_some_and(|o| o.contains_key(l)) {
                Ok(())
            } else {
                Err(StoreError::invalid("edited_answer", format!("{l:?} is not an option letter")))
            }
        }
        (AnswerFormat::ExactPhrase, GroundTruth::Text(p)) => ActionLabel::from_phrase(p)
            .map(|_| ())
            .ok_or_else(|| StoreError::invalid("edited_answer", format!("{p:?} is not an action phrase"))),
        (AnswerFormat::FrameList, GroundTruth::Frames(f)) => {
            if f.is_empty() || f.iter().any(|x| !item.frames.contains(x)) {
                Err(StoreError::invalid("edited_answer", "frame list must be non-empty and inside the scene"))
            } else {
                Ok(())
            }
        }
        _ => Err(StoreError::invalid("edited_answer", format!("wrong answer kind for {:?}", item.answer_format))),
    }
}

/// Immutable view handed to readers.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    pub labels: BTreeMap<LabelKey, LabelRecord>,
    pub reviews: BTreeMap<String, ReviewRecord>,
}

impl Snapshot {
    pub fn scene_labels<'a>(&'a self, scene_id: &'a str) -> impl Iterator<Item = &'a LabelRecord> + 'a {
        self.labels.values().filter(move |r| r.scene_id == scene_id)
    }

    /// Labels file for one scene in the same schema as generator input.
    pub fn export_scene(&self, scene_id: &str, segments: &[Segment]) -> SceneAnnotations {
        let mut ann = SceneAnnotations::empty(scene_id, segments);
        for r in self.scene_labels(scene_id) {
            let Some(seg) = ann.segments.iter_mut().find(|s| s.segment_index == r.segment_index) else { continue };
            if r.target == EGO_TARGET {
                seg.ego = Some(r.label);
            } else {
                seg.tracks.insert(r.target.clone(), r.label);
            }
        }
        ann
    }
}

/// Replays label records in revision order; the result is the latest record per key.
pub fn replay(records: impl IntoIterator<Item = LabelRecord>) -> BTreeMap<LabelKey, LabelRecord> {
    let mut sorted: Vec<LabelRecord> = records.into_iter().collect();
    sorted.sort_by_key(|r| r.revision);
    let mut out = BTreeMap::new();
    for r in sorted {
        out.insert(r.key(), r);
    }
    out
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> StoreError {
    StoreError::Io { path: path.to_path_buf(), reason: e.to_string() }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, StoreError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            // a torn final line from a crash mid-write is dropped; it was never acknowledged
            Err(e) => log::warn!("{}:{}: skipping unreadable record ({e})", path.display(), n + 1),
        }
    }
    Ok(out)
}

fn write_jsonl_atomic<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<(), StoreError> {
    let tmp = path.with_extension("jsonl.tmp");
    let mut f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(&r).expect("record serializes")).map_err(|e| io_err(&tmp, e))?;
    }
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

struct Writer {
    labels: File,
    reviews: File,
}

/// Durable store: writes go through one writer lock and are fsynced before returning.
pub struct Store {
    dir: PathBuf,
    snapshot: RwLock<Arc<Snapshot>>,
    writer: tokio::sync::Mutex<Writer>,
}

/// A label write request after field validation by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelWrite {
    pub key: LabelKey,
    pub label: ActionLabel,
    pub source: LabelSource,
    pub base_revision: u64,
    pub annotator: String,
}

impl Store {
    /// Opens (or creates) the store, compacting both logs to their replayed state.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let labels_path = dir.join(LABELS_FILE);
        let reviews_path = dir.join(REVIEWS_FILE);
        let labels = replay(read_jsonl::<LabelRecord>(&labels_path)?);
        let mut reviews = BTreeMap::new();
        for r in read_jsonl::<ReviewRecord>(&reviews_path)? {
            reviews.insert(r.qa_id.clone(), r);
        }
        write_jsonl_atomic(&labels_path, labels.values())?;
        write_jsonl_atomic(&reviews_path, reviews.values())?;
        let open = |p: &Path| OpenOptions::new().append(true).open(p).map_err(|e| io_err(p, e));
        let writer = Writer { labels: open(&labels_path)?, reviews: open(&reviews_path)? };
        Ok(Self {
            dir: dir.to_path_buf(),
            snapshot: RwLock::new(Arc::new(Snapshot { labels, reviews })),
            writer: tokio::sync::Mutex::new(writer),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn append(file: &mut File, path: &Path, line: &str) -> Result<(), StoreError> {
        writeln!(file, "{line}").map_err(|e| io_err(path, e))?;
        file.sync_data().map_err(|e| io_err(path, e))
    }

    /// Applies a label write if `base_revision` matches the current revision (0 when unlabeled).
    /// Machine-sourced writes never replace a human label.
    pub async fn put_label(&self, w: LabelWrite) -> Result<LabelRecord, StoreError> {
        let mut writer = self.writer.lock().await;
        let snap = self.snapshot();
        let current = snap.labels.get(&w.key);
        let current_rev = current.map_or(0, |r| r.revision);
        if w.base_revision != current_rev {
            return Err(StoreError::Conflict {
                expected: w.base_revision,
                current: current_rev,
                record: current.cloned().map(Box::new),
            });
        }
        if let Some(cur) = current {
            if cur.source == LabelSource::Human && w.source != LabelSource::Human {
                return Err(StoreError::Conflict { expected: w.base_revision, current: current_rev, record: Some(Box::new(cur.clone())) });
            }
        }
        let record = LabelRecord {
            scene_id: w.key.scene_id.clone(),
            segment_index: w.key.segment_index,
            target: w.key.target.clone(),
            label: w.label,
            source: w.source,
            revision: current_rev + 1,
            annotator: w.annotator,
            timestamp: now(),
        };
        let path = self.dir.join(LABELS_FILE);
        Self::append(&mut writer.labels, &path, &serde_json::to_string(&record).expect("record serializes"))?;
        let mut next = (*snap).clone();
        next.labels.insert(w.key, record.clone());
        *self.snapshot.write().expect("snapshot lock") = Arc::new(next);
        Ok(record)
    }

    pub async fn put_review(&self, mut review: ReviewRecord) -> Result<ReviewRecord, StoreError> {
        let mut writer = self.writer.lock().await;
        review.timestamp = now();
        let path = self.dir.join(REVIEWS_FILE);
        Self::append(&mut writer.reviews, &path, &serde_json::to_string(&review).expect("review serializes"))?;
        let mut next = (*self.snapshot()).clone();
        next.reviews.insert(review.qa_id.clone(), review.clone());
        *self.snapshot.write().expect("snapshot lock") = Arc::new(next);
        Ok(review)
    }
}

/// QA items with rejected ones dropped and edited answers substituted.
pub fn reviewed_items(items: &[QaItem], reviews: &BTreeMap<String, ReviewRecord>) -> Vec<QaItem> {
    items
        .iter()
        .filter_map(|item| match reviews.get(&item.id) {
            Some(r) if r.verdict == Verdict::Rejected => None,
            Some(ReviewRecord { verdict: Verdict::Edited, edited_answer: Some(a), .. }) => {
                let mut edited = item.clone();
                edited.ground_truth = a.clone();
                Some(edited)
            }
            _ => Some(item.clone()),
        })
        .collect()
}
