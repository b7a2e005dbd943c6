//! One function per subcommand; `main` only parses flags and prints.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tad_core::eval::{aggregate_report, chance_baseline, read_scored_records, score_raw, EvalReport, FramePolicy, ScoredRecord};
use tad_core::motion::Thresholds;
use tad_core::nuscenes::{ingest_nuscenes, list_scenes};
use tad_core::qa::{count_diff_table, generate_qa, QaItem, SceneAnnotations};
use tad_core::segment::{partition_scene, Segment, SegmentationParams};
use tad_core::SceneBundle;
use tad_gateway::{serve_mock, ChatModel, EndpointConfig, HttpClient, MockScript};
use tad_pipeline::{Ablation, Method, Pipeline, PipelineConfig, PromptTemplates, TraceCache};

use crate::{read_json, read_jsonl, require_path, write_file, write_jsonl, CliError, CliResult, Selection};

/// Writes one bundle per scene into `out`; `scenes` empty means every scene.
pub fn ingest(dataroot: &Path, scenes: &[String], out: &Path) -> CliResult<Vec<PathBuf>> {
    require_path("dataroot", dataroot)?;
    let names: Vec<String> = if scenes.is_empty() {
        list_scenes(dataroot).map_err(|e| CliError::keyed("dataroot", e))?.into_iter().map(|(_, name)| name).collect()
    } else {
        scenes.to_vec()
    };
    let mut written = Vec::new();
    for name in names {
        let bundle = ingest_nuscenes(dataroot, &name).map_err(|e| CliError::keyed("scene", e))?;
        let path = out.join(format!("{}.json", bundle.scene_id));
        write_file("out", &path, &bundle.to_json())?;
        written.push(path);
    }
    Ok(written)
}

fn partition(bundle: &SceneBundle, params: &SegmentationParams) -> CliResult<Vec<Segment>> {
    partition_scene(bundle, params).map_err(|e| CliError::keyed("segments", format!("scene {}: {e}", bundle.scene_id)))
}

/// Machine labels for every scene; written to `out` as generator-ready label files when given.
pub fn classify_motions(
    bundles: &[SceneBundle],
    params: &SegmentationParams,
    thr: &Thresholds,
    out: Option<&Path>,
) -> CliResult<Vec<SceneAnnotations>> {
    bundles
        .iter()
        .map(|b| {
            let segs = partition(b, params)?;
            let ann = SceneAnnotations::from_classifier(b, &segs, thr).map_err(|e| CliError::keyed("motion", e))?;
            if let Some(dir) = out {
                let json = serde_json::to_string_pretty(&ann).expect("labels serialize");
                write_file("out", &dir.join(format!("{}.json", b.scene_id)), &json)?;
            }
            Ok(ann)
        })
        .collect()
}

/// Segments with in-range tracks and automatic labels, one file per scene.
pub fn partition_all(bundles: &[SceneBundle], params: &SegmentationParams, out: Option<&Path>) -> CliResult<Vec<(String, Vec<Segment>)>> {
    bundles
        .iter()
        .map(|b| {
            let segs = partition(b, params)?;
            if let Some(dir) = out {
                let json = serde_json::to_string_pretty(&segs).expect("segments serialize");
                write_file("out", &dir.join(format!("{}.segments.json", b.scene_id)), &json)?;
            }
            Ok((b.scene_id.clone(), segs))
        })
        .collect()
}

/// Pairs each bundle with its label file from `labels`, or machine labels when `labels` is `None`.
pub fn annotated_scenes(
    bundles: Vec<SceneBundle>,
    labels: Option<&Path>,
    params: &SegmentationParams,
    thr: &Thresholds,
) -> CliResult<Vec<(SceneBundle, SceneAnnotations)>> {
    bundles
        .into_iter()
        .map(|b| {
            let ann = match labels {
                Some(dir) => {
                    let ann: SceneAnnotations = read_json("labels", &dir.join(format!("{}.json", b.scene_id)))?;
                    ann.validate(&b).map_err(|e| CliError::keyed("labels", e))?;
                    ann
                }
                None => SceneAnnotations::from_classifier(&b, &partition(&b, params)?, thr).map_err(|e| CliError::keyed("motion", e))?,
            };
            Ok((b, ann))
        })
        .collect()
}

/// Generates, filters and writes QA items. Returns the items and the calibration table.
pub fn generate(
    scenes: &[(SceneBundle, SceneAnnotations)],
    params: &SegmentationParams,
    seed: u64,
    selection: &Selection,
    out: &Path,
) -> CliResult<(Vec<QaItem>, String)> {
    let items = generate_qa(scenes, params, seed, &selection.task_list()).map_err(|e| CliError::keyed("labels", e))?;
    let items = selection.apply(items);
    write_jsonl("out", out, &items)?;
    let table = count_diff_table(&items);
    Ok((items, table))
}

/// Where answers come from during `run`.
#[derive(Debug, Clone)]
pub enum EndpointChoice {
    /// In-process HTTP mock driven by a script.
    Mock(MockScript),
    Http(EndpointConfig),
}

impl EndpointChoice {
    /// `mock` or a base URL; `cfg` supplies the model name and transport settings.
    pub fn from_flag(flag: Option<&str>, cfg: Option<&EndpointConfig>) -> CliResult<Self> {
        match (flag, cfg) {
            (Some("mock"), _) => Ok(EndpointChoice::Mock(MockScript::summary_oracle("A"))),
            (Some(url), Some(c)) => Ok(EndpointChoice::Http(EndpointConfig { base_url: url.to_string(), ..c.clone() })),
            (Some(url), None) => Ok(EndpointChoice::Http(EndpointConfig::new(url, "default"))),
            (None, Some(c)) => Ok(EndpointChoice::Http(c.clone())),
            (None, None) => Err(CliError::keyed("endpoint", "no endpoint: pass --endpoint <url|mock> or set [endpoint]")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub qa: PathBuf,
    pub bundles: PathBuf,
    pub images: PathBuf,
    pub out: PathBuf,
    pub method: Method,
    pub ablation: Ablation,
    pub parallel: usize,
    pub trace: Option<PathBuf>,
    pub endpoint: EndpointChoice,
    pub text_endpoint: Option<EndpointConfig>,
    pub templates: Option<PathBuf>,
    pub selection: Selection,
    pub segmentation: SegmentationParams,
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunSnapshot {
    method: Method,
    ablation: Ablation,
    parallel: usize,
    qa: PathBuf,
    endpoint: String,
    model: String,
    prompt_version: String,
    segmentation: SegmentationParams,
    thresholds: Thresholds,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    /// Items already present in the output before this run.
    pub skipped: usize,
    pub answered: usize,
    pub failures: Vec<String>,
    /// Every record in the output file after the run.
    pub records: Vec<ScoredRecord>,
    /// Requests served by the in-process mock, when one was used.
    pub mock_requests: Option<usize>,
}

/// Records already in `path`. A torn or unreadable line (an interrupted run) is
/// dropped and the file rewritten so appends start on a clean line.
fn existing_records(path: &Path) -> CliResult<Vec<ScoredRecord>> {
    let Ok(text) = std::fs::read_to_string(path) else { return Ok(Vec::new()) };
    let mut clean = !text.is_empty() && !text.ends_with('\n');
    let records: Vec<ScoredRecord> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| match serde_json::from_str(l) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("{}: dropping unreadable record ({e})", path.display());
                clean = true;
                None
            }
        })
        .collect();
    if clean {
        write_file("out", path, &tad_core::eval::write_scored_records(&records))?;
    }
    Ok(records)
}

/// Answers every selected item not yet in `out`, appending scored records as they finish.
pub async fn run(opts: RunOptions) -> CliResult<RunSummary> {
    require_path("images", &opts.images)?;
    let items = opts.selection.apply(read_jsonl::<QaItem>("qa", &opts.qa)?);
    let needed: HashSet<&str> = items.iter().map(|i| i.scene_id.as_str()).collect();
    let bundles: Vec<SceneBundle> =
        crate::load_bundles("bundles", &opts.bundles)?.into_iter().filter(|b| needed.contains(b.scene_id.as_str())).collect();
    if let Some(missing) = needed.iter().find(|s| !bundles.iter().any(|b| b.scene_id == **s)) {
        return Err(CliError::keyed("bundles", format!("no bundle for scene {missing}")));
    }

    let mut records = existing_records(&opts.out)?;
    let done: HashSet<String> = records.iter().map(|r| r.id.clone()).collect();
    let pending: Vec<QaItem> = items.iter().filter(|i| !done.contains(&i.id)).cloned().collect();
    let skipped = items.len() - pending.len();

    let templates = match &opts.templates {
        Some(dir) => PromptTemplates::from_dir(dir).map_err(|e| CliError::keyed("templates", e))?,
        None => PromptTemplates::default(),
    };
    let (endpoint_cfg, mock) = match &opts.endpoint {
        EndpointChoice::Mock(script) => {
            let server = serve_mock(script.clone(), 0).await.map_err(|e| CliError::keyed("endpoint", e))?;
            let mut cfg = EndpointConfig::new(server.base_url(), "mock-vlm");
            cfg.backoff_base_ms = 10;
            (cfg, Some(server))
        }
        EndpointChoice::Http(cfg) => (cfg.clone(), None),
    };
    let client = |cfg: EndpointConfig, key: &str| -> CliResult<Arc<dyn ChatModel>> {
        let mut c = HttpClient::new(cfg).map_err(|e| CliError::keyed(key, e))?;
        if let Some(dir) = &opts.trace {
            c = c.with_trace(dir.clone());
        }
        Ok(Arc::new(c))
    };
    let vlm = client(endpoint_cfg.clone(), "endpoint")?;
    let llm = match (&opts.text_endpoint, opts.method) {
        (Some(cfg), _) => Some(client(cfg.clone(), "text_endpoint")?),
        (None, Method::SceneCot) => Some(vlm.clone()),
        _ => None,
    };
    let cache_path = match &opts.trace {
        Some(dir) => dir.join("cot_traces.jsonl"),
        None => opts.out.with_extension("traces.jsonl"),
    };
    let cache = Arc::new(TraceCache::persistent(cache_path).map_err(|e| CliError::keyed("trace", e))?);

    let snapshot = RunSnapshot {
        method: opts.method,
        ablation: opts.ablation,
        parallel: opts.parallel,
        qa: opts.qa.clone(),
        endpoint: endpoint_cfg.base_url.clone(),
        model: endpoint_cfg.model.clone(),
        prompt_version: templates.version(),
        segmentation: opts.segmentation,
        thresholds: opts.thresholds,
    };
    write_file("out", &opts.out.with_extension("config.json"), &serde_json::to_string_pretty(&snapshot).expect("snapshot serializes"))?;

    let mut cfg = PipelineConfig::new(opts.method, opts.images.clone());
    cfg.ablation = opts.ablation;
    cfg.parallelism = opts.parallel.max(1);
    cfg.segmentation = opts.segmentation;
    cfg.thresholds = opts.thresholds;
    let pipeline = Pipeline::new(cfg, vlm, llm, templates, cache, bundles).map_err(|e| CliError::keyed("method", e))?;

    if let Some(dir) = opts.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::keyed("out", format!("{}: {e}", dir.display())))?;
    }
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&opts.out)
        .map_err(|e| CliError::keyed("out", format!("{}: {e}", opts.out.display())))?;
    let mut failures = Vec::new();
    let mut answered = 0usize;
    let mut write_error = None;
    pipeline
        .run_each(&pending, |item, result| {
            let record = result.map_err(|e| e.to_string()).and_then(|raw| score_raw(item, &raw).map_err(|e| format!("item {}: {e}", item.id)));
            match record {
                Ok(rec) => {
                    let line = serde_json::to_string(&rec).expect("record serializes");
                    if let Err(e) = writeln!(file, "{line}").and_then(|_| file.flush()) {
                        write_error.get_or_insert(e.to_string());
                    }
                    records.push(rec);
                    answered += 1;
                }
                Err(msg) => {
                    log::error!("{msg}");
                    failures.push(msg);
                }
            }
        })
        .await;
    let mock_requests = match &mock {
        Some(server) => {
            let n = server.requests().len();
            server.shutdown().await;
            Some(n)
        }
        None => None,
    };
    if let Some(e) = write_error {
        return Err(CliError::keyed("out", e));
    }
    let order: BTreeMap<&str, usize> = items.iter().enumerate().map(|(i, it)| (it.id.as_str(), i)).collect();
    records.sort_by_key(|r| order.get(r.id.as_str()).copied().unwrap_or(usize::MAX));
    Ok(RunSummary { skipped, answered, failures, records, mock_requests })
}

/// A raw completion for one item, as produced by an external runner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawAnswer {
    pub id: String,
    pub raw: String,
}

/// Scores `{id, raw}` lines against the QA file.
pub fn score(items: &[QaItem], answers: &[RawAnswer]) -> CliResult<Vec<ScoredRecord>> {
    let by_id: BTreeMap<&str, &QaItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    answers
        .iter()
        .map(|a| {
            let item = by_id.get(a.id.as_str()).ok_or_else(|| CliError::keyed("answers", format!("unknown item id {}", a.id)))?;
            score_raw(item, &a.raw).map_err(|e| CliError::keyed("qa", format!("item {}: {e}", a.id)))
        })
        .collect()
}

/// Aggregates one or more scored-run files.
pub fn report(runs: &[PathBuf]) -> CliResult<EvalReport> {
    let mut records = Vec::new();
    for path in runs {
        require_path("run", path)?;
        let text = std::fs::read_to_string(path).map_err(|e| CliError::keyed("run", format!("{}: {e}", path.display())))?;
        records.extend(read_scored_records(&text).map_err(|e| CliError::keyed("run", format!("{}: {e}", path.display())))?);
    }
    Ok(aggregate_report(&records))
}

pub fn chance(items: &[QaItem], seed: u64, trials: usize, policy: FramePolicy) -> CliResult<EvalReport> {
    chance_baseline(items, seed, trials, policy).map_err(|e| CliError::keyed("trials", e))
}
