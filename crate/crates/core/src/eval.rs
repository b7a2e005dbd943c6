//! Answer parsing, scoring, chance baselines and report aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::LazyLock;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motion::{canonicalize_phrase, ActionLabel};
use crate::qa::{sub_seed, AnswerFormat, GroundTruth, QaItem, Target, Task, LETTERS};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("ground-truth frame set is empty")]
    EmptyGroundTruth,
    #[error("item {id} expects {expected:?} but the answer was parsed as {got}")]
    FormatMismatch { id: String, expected: AnswerFormat, got: &'static str },
    #[error("trials must be at least 1")]
    NoTrials,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ParsedAnswer {
    Letter(char),
    Phrase(String),
    Frames(Vec<u32>),
    Unparseable(String),
}

impl ParsedAnswer {
    fn kind(&self) -> &'static str {
        match self {
            ParsedAnswer::Letter(_) => "letter",
            ParsedAnswer::Phrase(_) => "phrase",
            ParsedAnswer::Frames(_) => "frames",
            ParsedAnswer::Unparseable(_) => "unparseable",
        }
    }

    pub fn is_unparseable(&self) -> bool {
        matches!(self, ParsedAnswer::Unparseable(_))
    }
}

static ANSWER_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\banswer\b[^A-Za-z0-9\n]{0,10}(?:is\s+)?(?:option\s+)?\(?([A-D])\b").unwrap());
static LETTER_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([A-D])\b").unwrap());
static BRACKET_LIST: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[([^\[\]]*)\]").unwrap());
static INTEGER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").unwrap());

/// Action phrase keys after canonicalization, with the comma-free variant of
/// "Straight, constant speed" falling out of the canonicalizer itself.
fn phrase_keys() -> &'static [(String, ActionLabel)] {
    static KEYS: LazyLock<Vec<(String, ActionLabel)>> =
        LazyLock::new(|| ActionLabel::ALL.iter().map(|a| (canonicalize_phrase(a.phrase()), *a)).collect());
    &KEYS
}

fn parse_letter(raw: &str) -> Option<char> {
    let bare = raw.trim().trim_matches(|c: char| !c.is_ascii_alphanumeric());
    if bare.len() == 1 {
        let c = bare.chars().next()?.to_ascii_uppercase();
        if LETTERS.contains(&c) {
            return Some(c);
        }
    }
    if let Some(m) = ANSWER_LETTER.captures_iter(raw).last() {
        return m[1].chars().next().map(|c| c.to_ascii_uppercase());
    }
    LETTER_TOKEN.captures_iter(raw).last().and_then(|m| m[1].chars().next())
}

fn parse_phrase(raw: &str) -> Option<ActionLabel> {
    let padded = format!(" {} ", canonicalize_phrase(raw));
    let mut best: Option<(usize, usize, ActionLabel)> = None;
    for (key, label) in phrase_keys() {
        if let Some(pos) = padded.rfind(&format!(" {key} ")) {
            let cand = (key.len(), pos, *label);
            if best.is_none_or(|b| (cand.0, cand.1) > (b.0, b.1)) {
                best = Some(cand);
            }
        }
    }
    best.map(|b| b.2)
}

fn parse_frames(raw: &str) -> Option<Vec<u32>> {
    let source = BRACKET_LIST
        .captures_iter(raw)
        .filter(|c| INTEGER.is_match(&c[1]))
        .last()
        .map(|c| c[1].to_string())
        .unwrap_or_else(|| raw.to_string());
    let set: BTreeSet<u32> = INTEGER.find_iter(&source).filter_map(|m| m.as_str().parse().ok()).collect();
    (!set.is_empty()).then(|| set.into_iter().collect())
}

/// Extracts an answer of the requested format from a raw completion.
pub fn parse_answer(raw: &str, fmt: AnswerFormat) -> ParsedAnswer {
    let parsed = match fmt {
        AnswerFormat::SingleLetter => parse_letter(raw).map(ParsedAnswer::Letter),
        AnswerFormat::ExactPhrase => parse_phrase(raw).map(|a| ParsedAnswer::Phrase(a.phrase().to_string())),
        AnswerFormat::FrameList => parse_frames(raw).map(ParsedAnswer::Frames),
    };
    parsed.unwrap_or_else(|| ParsedAnswer::Unparseable(raw.to_string()))
}

/// |pred ∩ gt| / |pred ∪ gt| over frame sets.
pub fn temporal_miou(pred: &BTreeSet<u32>, gt: &BTreeSet<u32>) -> Result<f64, EvalError> {
    if gt.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let inter = pred.intersection(gt).count();
    let union = pred.len() + gt.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// Score in [0, 1] for one parsed answer.
pub fn score_item(item: &QaItem, parsed: &ParsedAnswer) -> Result<f64, EvalError> {
    let mismatch = || EvalError::FormatMismatch { id: item.id.clone(), expected: item.answer_format, got: parsed.kind() };
    match (item.answer_format, parsed) {
        (_, ParsedAnswer::Unparseable(_)) => Ok(0.0),
        (AnswerFormat::SingleLetter, ParsedAnswer::Letter(c)) => {
            let gt = item.ground_truth.as_text().unwrap_or_default();
            Ok(if gt.len() == 1 && gt.starts_with(*c) { 1.0 } else { 0.0 })
        }
        (AnswerFormat::ExactPhrase, ParsedAnswer::Phrase(p)) => {
            let gt = item.ground_truth.as_text().unwrap_or_default();
            Ok(if canonicalize_phrase(gt) == canonicalize_phrase(p) { 1.0 } else { 0.0 })
        }
        (AnswerFormat::FrameList, ParsedAnswer::Frames(f)) => {
            let gt: BTreeSet<u32> = item.ground_truth.as_frames().unwrap_or_default().iter().copied().collect();
            temporal_miou(&f.iter().copied().collect(), &gt)
        }
        _ => Err(mismatch()),
    }
}

/// One line of a scored-run file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub id: String,
    pub task: Task,
    pub target: Target,
    pub raw: String,
    pub parsed: ParsedAnswer,
    pub score: f64,
}

/// Parses and scores a raw completion for `item`.
pub fn score_raw(item: &QaItem, raw: &str) -> Result<ScoredRecord, EvalError> {
    let parsed = parse_answer(raw, item.answer_format);
    let score = score_item(item, &parsed)?;
    Ok(ScoredRecord { id: item.id.clone(), task: item.task, target: item.target.clone(), raw: raw.to_string(), parsed, score })
}

/// Scores many `(item, raw)` pairs in parallel, preserving order.
pub fn score_all(pairs: &[(&QaItem, &str)]) -> Result<Vec<ScoredRecord>, EvalError> {
    pairs.par_iter().map(|(item, raw)| score_raw(item, raw)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FramePolicy {
    /// Contiguous interval of uniform length in [1, N] at a uniform start.
    #[default]
    Interval,
    /// Each frame included independently with probability 1/2.
    Bernoulli,
}

impl FromStr for FramePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "interval" => Ok(FramePolicy::Interval),
            "bernoulli" => Ok(FramePolicy::Bernoulli),
            other => Err(format!("unknown frame policy {other:?} (expected interval|bernoulli)")),
        }
    }
}

fn random_answer(item: &QaItem, policy: FramePolicy, rng: &mut ChaCha8Rng) -> ParsedAnswer {
    match item.answer_format {
        AnswerFormat::SingleLetter => {
            let n = item.options.as_ref().map_or(4, |o| o.len()).clamp(1, 4);
            ParsedAnswer::Letter(*LETTERS[..n].choose(rng).expect("non-empty"))
        }
        AnswerFormat::ExactPhrase => {
            ParsedAnswer::Phrase(ActionLabel::ALL.choose(rng).expect("non-empty").phrase().to_string())
        }
        AnswerFormat::FrameList => {
            let frames = &item.frames;
            if frames.is_empty() {
                return ParsedAnswer::Unparseable(String::new());
            }
            let picked: Vec<u32> = match policy {
                FramePolicy::Interval => {
                    let len = rng.random_range(1..=frames.len());
                    let start = rng.random_range(0..=frames.len() - len);
                    frames[start..start + len].to_vec()
                }
                FramePolicy::Bernoulli => frames.iter().copied().filter(|_| rng.random_bool(0.5)).collect(),
            };
            if picked.is_empty() {
                ParsedAnswer::Unparseable(String::new())
            } else {
                ParsedAnswer::Frames(picked)
            }
        }
    }
}

/// Expected score of uniform random answering, estimated with `trials` draws per item.
pub fn chance_baseline(items: &[QaItem], seed: u64, trials: usize, policy: FramePolicy) -> Result<EvalReport, EvalError> {
    if trials == 0 {
        return Err(EvalError::NoTrials);
    }
    let records: Result<Vec<ScoredRecord>, EvalError> = items
        .par_iter()
        .map(|item| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &["chance", &item.id]));
            let mut total = 0.0;
            for _ in 0..trials {
                total += score_item(item, &random_answer(item, policy, &mut rng))?;
            }
            Ok(ScoredRecord {
                id: item.id.clone(),
                task: item.task,
                target: item.target.clone(),
                raw: String::new(),
                parsed: ParsedAnswer::Unparseable(String::new()),
                score: total / trials as f64,
            })
        })
        .collect();
    let mut report = aggregate_report(&records?);
    report.unparseable_rate = 0.0;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: Task,
    pub count: usize,
    pub ego_count: usize,
    pub non_ego_count: usize,
    /// Mean score ×100.
    pub score: f64,
    pub ego_score: Option<f64>,
    pub non_ego_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Present tasks only, in canonical task order.
    pub tasks: Vec<TaskScore>,
    pub macro_average: Option<f64>,
    pub ego_average: Option<f64>,
    pub non_ego_average: Option<f64>,
    pub total: usize,
    pub unparseable_rate: f64,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Per-task means ×100 plus the unweighted mean over present tasks.
pub fn aggregate_report(records: &[ScoredRecord]) -> EvalReport {
    let mut by_task: BTreeMap<Task, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let e = by_task.entry(r.task).or_default();
        if r.target.is_ego() {
            e.0.push(r.score);
        } else {
            e.1.push(r.score);
        }
    }
    let mut tasks = Vec::new();
    for task in Task::ALL {
        let Some((ego, non_ego)) = by_task.get(&task) else {
            log::info!("task {task} has no items; excluded from the macro average");
            continue;
        };
        let all: Vec<f64> = ego.iter().chain(non_ego).copied().collect();
        tasks.push(TaskScore {
            task,
            count: all.len(),
            ego_count: ego.len(),
            non_ego_count: non_ego.len(),
            score: mean(&all).unwrap_or(0.0) * 100.0,
            ego_score: mean(ego).map(|m| m * 100.0),
            non_ego_score: mean(non_ego).map(|m| m * 100.0),
        });
    }
    let cells: Vec<f64> = tasks.iter().map(|t| t.score).collect();
    let ego_cells: Vec<f64> = tasks.iter().filter_map(|t| t.ego_score).collect();
    let non_ego_cells: Vec<f64> = tasks.iter().filter_map(|t| t.non_ego_score).collect();
    let unparseable = records.iter().filter(|r| r.parsed.is_unparseable()).count();
    EvalReport {
        macro_average: mean(&cells),
        ego_average: mean(&ego_cells),
        non_ego_average: mean(&non_ego_cells),
        total: records.len(),
        unparseable_rate: if records.is_empty() { 0.0 } else { unparseable as f64 / records.len() as f64 },
        tasks,
    }
}

impl EvalReport {
    pub fn task(&self, task: Task) -> Option<&TaskScore> {
        self.tasks.iter().find(|t| t.task == task)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned table: one row per split, one column per task plus the average.
    pub fn to_table(&self, label: &str) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        let mut header = format!("{:<14}", "");
        for task in Task::ALL {
            let _ = write!(header, " {:>17}", task.short());
        }
        let _ = write!(header, " {:>7}", "Avg");
        let mut rows = vec![header];
        let splits: [(&str, Box<dyn Fn(&TaskScore) -> Option<f64>>, Option<f64>); 3] = [
            (label, Box::new(|t: &TaskScore| Some(t.score)), self.macro_average),
            ("  ego", Box::new(|t: &TaskScore| t.ego_score), self.ego_average),
            ("  non-ego", Box::new(|t: &TaskScore| t.non_ego_score), self.non_ego_average),
        ];
        for (name, f, avg) in splits {
            let mut row = format!("{name:<14}");
            for task in Task::ALL {
                let _ = write!(row, " {:>17}", cell(self.task(task).and_then(&f)));
            }
            let _ = write!(row, " {:>7}", cell(avg));
            rows.push(row);
        }
        let mut counts = format!("{:<14}", "  n (ego/ne)");
        for task in Task::ALL {
            let c = self.task(task).map_or_else(|| "0".to_string(), |t| format!("{}/{}", t.ego_count, t.non_ego_count));
            let _ = write!(counts, " {c:>17}");
        }
        let _ = write!(counts, " {:>7}", self.total);
        rows.push(counts);
        rows.push(format!("unparseable: {:.2}%", self.unparseable_rate * 100.0));
        rows.join("\n") + "\n"
    }
}

/// Reads a JSON-lines scored-run file.
pub fn read_scored_records(text: &str) -> serde_json::Result<Vec<ScoredRecord>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

pub fn write_scored_records(records: &[ScoredRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Convenience: ground truth rendered the way a perfect model would answer.
pub fn perfect_answer(item: &QaItem) -> String {
    match &item.ground_truth {
        GroundTruth::Text(t) => t.clone(),
        GroundTruth::Frames(f) => format!("{f:?}"),
    }
}
