use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use tad_core::geom::Quaternion;
use tad_core::motion::{classify_motion, Thresholds};
use tad_core::qa::{generate_qa, AnswerFormat, GroundTruth, QaItem, SceneAnnotations, Target, Task};
use tad_core::scene::Frame;
use tad_core::segment::{partition_scene, segment_ego_poses, Segment, SegmentationParams};
use tad_core::{EgoPose, SceneBundle};
use tad_gateway::{ChatModel, Matcher, MockReply, MockScript, ScriptedModel};
use tad_pipeline::prompts::summary_line;
use tad_pipeline::synthetic::write_synthetic_suite;
use tad_pipeline::{
    build_baseline_prompt, build_tcogmap_context, build_tcogmap_prompt, Ablation, Method, Pipeline, PipelineConfig,
    PipelineError, PromptTemplates, TraceCache,
};

struct Suite {
    dir: tempfile::TempDir,
    bundles: Vec<SceneBundle>,
    items: Vec<QaItem>,
}

fn suite() -> Suite {
    let dir = tempfile::tempdir().unwrap();
    let files = write_synthetic_suite(dir.path()).unwrap();
    let bundles: Vec<SceneBundle> = files.bundles.iter().map(|p| SceneBundle::load(p).unwrap()).collect();
    let scenes: Vec<(SceneBundle, SceneAnnotations)> = bundles
        .iter()
        .zip(&files.labels)
        .map(|(b, l)| (b.clone(), serde_json::from_str(&std::fs::read_to_string(l).unwrap()).unwrap()))
        .collect();
    let items = generate_qa(&scenes, &SegmentationParams::default(), 7, &Task::ALL).unwrap();
    Suite { dir, bundles, items }
}

fn scene_item(s: &Suite) -> &QaItem {
    s.items.iter().find(|i| i.segment_index.is_none() && i.scene_id == s.bundles[0].scene_id).unwrap()
}

fn segment_item(s: &Suite) -> &QaItem {
    s.items.iter().find(|i| i.segment_index.is_some() && i.scene_id == s.bundles[0].scene_id).unwrap()
}

fn pipeline(s: &Suite, method: Method, vlm: Arc<dyn ChatModel>, llm: Option<Arc<dyn ChatModel>>, cache: Arc<TraceCache>) -> Pipeline {
    let cfg = PipelineConfig::new(method, s.dir.path().to_path_buf());
    Pipeline::new(cfg, vlm, llm, PromptTemplates::default(), cache, s.bundles.clone()).unwrap()
}

#[test]
fn baseline_prompt_shapes() {
    let s = suite();
    let b = &s.bundles[0];
    let p = build_baseline_prompt(b, scene_item(&s), false, s.dir.path(), Ablation::Full).unwrap();
    assert_eq!(p.image_count(), 40);
    assert!(p.check_labels().is_ok());
    assert!(p.text_view().ends_with(&scene_item(&s).question_text));

    let p = build_baseline_prompt(b, segment_item(&s), false, s.dir.path(), Ablation::Full).unwrap();
    assert_eq!(p.image_count(), 10);

    let mut two = scene_item(&s).clone();
    two.frames = vec![0, 1];
    let p = build_baseline_prompt(b, &two, true, s.dir.path(), Ablation::Full).unwrap();
    let pose_lines = p.text_view().lines().filter(|l| l.contains("translation=(")).count();
    assert_eq!(pose_lines, 2);
    assert!(p.text_view().contains("Frame0: translation=(100.00,200.00,0.00), yaw=0.0°"));
}

#[test]
fn missing_image_names_the_frame() {
    let s = suite();
    let mut b = s.bundles[0].clone();
    b.frames[3].image = None;
    let err = build_baseline_prompt(&b, scene_item(&s), false, s.dir.path(), Ablation::Full).unwrap_err();
    assert!(matches!(err, PipelineError::MissingImage { frame: 3, .. }));
}

fn stopped_bundle(n: usize) -> SceneBundle {
    let poses: Vec<EgoPose> = (0..n).map(|i| EgoPose::new(i as f64 * 0.5, [5.0, 5.0, 0.0], Quaternion::IDENTITY)).collect();
    SceneBundle {
        scene_id: "still".into(),
        nominal_rate: 2.0,
        frames: (0..n).map(|i| Frame { idx: i as u32, t: i as f64 * 0.5, image: None }).collect(),
        ego_poses: poses,
        tracks: vec![],
    }
}

#[test]
fn summary_line_format_is_exact() {
    let b = stopped_bundle(8);
    let seg = Segment { segment_index: 0, frame_indices: (1..=7).collect(), tracks_in_range: vec![], auto_labels: BTreeMap::new() };
    let m = build_tcogmap_context(&b, &[seg], &Thresholds::default()).unwrap();
    assert_eq!(m.lines, vec!["Motion summary for Frame1 to Frame7: The ego-vehicle is stopped.".to_string()]);
}

#[test]
fn summary_follows_classifier_per_segment() {
    let s = suite();
    let params = SegmentationParams::default();
    let thr = Thresholds::default();
    for b in &s.bundles {
        let segs = partition_scene(b, &params).unwrap();
        let m = build_tcogmap_context(b, &segs, &thr).unwrap();
        assert_eq!(m.lines.len(), 10);
        for (line, seg) in m.lines.iter().zip(&segs) {
            let label = classify_motion(segment_ego_poses(b, seg), &thr).unwrap();
            assert_eq!(line, &summary_line(seg.first_frame(), seg.last_frame(), label.phrase()));
        }
        assert_eq!(m, build_tcogmap_context(b, &segs, &thr).unwrap());
    }
}

#[test]
fn tcogmap_ablations_control_inputs() {
    let s = suite();
    let b = &s.bundles[0];
    let segs = partition_scene(b, &SegmentationParams::default()).unwrap();
    let m = build_tcogmap_context(b, &segs, &Thresholds::default()).unwrap();
    let item = scene_item(&s);
    let full = build_tcogmap_prompt(b, item, &m, s.dir.path(), Ablation::Full).unwrap();
    assert_eq!(full.image_count(), 40);
    assert!(full.text_view().contains(&m.lines[0]));
    let summary_only = build_tcogmap_prompt(b, item, &m, s.dir.path(), Ablation::SummaryOnly).unwrap();
    assert_eq!(summary_only.image_count(), 0);
    assert!(summary_only.text_view().contains(&m.lines[9]));
    let frames_only = build_tcogmap_prompt(b, item, &m, s.dir.path(), Ablation::FramesOnly).unwrap();
    assert!(!frames_only.text_view().contains("Motion summary"));
    let blind = build_tcogmap_prompt(b, item, &m, s.dir.path(), Ablation::Blind).unwrap();
    assert_eq!(blind.text_view(), item.question_text);
}

#[tokio::test]
async fn single_call_methods_issue_one_call() {
    let s = suite();
    for method in [Method::Baseline, Method::BaselineEgoPose, Method::Tcogmap] {
        let vlm = Arc::new(ScriptedModel::new("vlm", MockScript::with_default("A")));
        let p = pipeline(&s, method, vlm.clone(), None, Arc::new(TraceCache::in_memory()));
        assert_eq!(p.answer(scene_item(&s)).await.unwrap(), "A");
        assert_eq!(vlm.calls(), 1, "{method:?}");
    }
}

#[tokio::test]
async fn scene_cot_call_accounting() {
    let s = suite();
    let vlm = Arc::new(ScriptedModel::new("vlm", MockScript::with_default("vlm says")));
    let llm = Arc::new(ScriptedModel::new("llm", MockScript::with_default("C")));
    let p = pipeline(&s, Method::SceneCot, vlm.clone(), Some(llm.clone()), Arc::new(TraceCache::in_memory()));
    assert_eq!(p.answer(scene_item(&s)).await.unwrap(), "C");
    assert_eq!((vlm.calls(), llm.calls()), (4 * 10, 1));
    for q in vlm.queries() {
        assert_eq!(q.image_count, 4);
    }
    let final_prompt = &llm.queries()[0].text;
    let mut last = 0;
    for j in 1..=10 {
        let pos = final_prompt.find(&format!("Segment {j} (")).unwrap();
        assert!(pos >= last);
        last = pos;
    }

    // traces are reused: a second scene-level question costs one text call
    let other = s.items.iter().filter(|i| i.segment_index.is_none() && i.scene_id == s.bundles[0].scene_id).nth(1).unwrap();
    p.answer(other).await.unwrap();
    assert_eq!((vlm.calls(), llm.calls()), (40, 2));
}

#[tokio::test]
async fn scene_cot_segment_item_uses_its_own_segment() {
    let s = suite();
    let vlm = Arc::new(ScriptedModel::new("vlm", MockScript::default()));
    let llm = Arc::new(ScriptedModel::new("llm", MockScript::default()));
    let p = pipeline(&s, Method::SceneCot, vlm.clone(), Some(llm.clone()), Arc::new(TraceCache::in_memory()));
    p.answer(segment_item(&s)).await.unwrap();
    assert_eq!((vlm.calls(), llm.calls()), (4, 1));
}

#[tokio::test]
async fn concurrent_questions_share_one_trace_computation() {
    let s = suite();
    let vlm = Arc::new(ScriptedModel::new("vlm", MockScript::default()));
    let llm = Arc::new(ScriptedModel::new("llm", MockScript::default()));
    let mut cfg = PipelineConfig::new(Method::SceneCot, s.dir.path().to_path_buf());
    cfg.parallelism = 8;
    let p = Pipeline::new(cfg, vlm.clone(), Some(llm.clone()), PromptTemplates::default(), Arc::new(TraceCache::in_memory()), s.bundles.clone()).unwrap();
    let items: Vec<QaItem> = s.items.iter().filter(|i| i.segment_index.is_none()).cloned().collect();
    let results = p.run(&items).await;
    assert!(results.iter().all(|r| r.is_ok()));
    assert_eq!(vlm.calls(), 3 * 40);
    assert_eq!(llm.calls(), items.len());
}

#[tokio::test]
async fn persisted_traces_survive_restart() {
    let s = suite();
    let path = s.dir.path().join("cache/traces.jsonl");
    let item = scene_item(&s);
    {
        let vlm = Arc::new(ScriptedModel::new("vlm", MockScript::default()));
        let llm = Arc::new(ScriptedModel::new("llm", MockScript::default()));
        let cache = Arc::new(TraceCache::persistent(path.clone()).unwrap());
        pipeline(&s, Method::SceneCot, vlm.clone(), Some(llm), cache).answer(item).await.unwrap();
        assert_eq!(vlm.calls(), 40);
    }
    let vlm = Arc::new(ScriptedModel::new("vlm", MockScript::default()));
    let llm = Arc::new(ScriptedModel::new("llm", MockScript::default()));
    let cache = Arc::new(TraceCache::persistent(path).unwrap());
    assert_eq!(cache.len(), 10);
    pipeline(&s, Method::SceneCot, vlm.clone(), Some(llm.clone()), cache).answer(item).await.unwrap();
    assert_eq!((vlm.calls(), llm.calls()), (0, 1));
}

#[tokio::test]
async fn failing_step_is_reported_and_kept() {
    let s = suite();
    let vlm = Arc::new(ScriptedModel::new(
        "vlm",
        MockScript::default().rule(Matcher::Contains { text: "Identify the vehicles close".into() }, MockReply::Status { status: 500, body: "down".into() }),
    ));
    let llm = Arc::new(ScriptedModel::new("llm", MockScript::default()));
    let cache = Arc::new(TraceCache::in_memory());
    let p = pipeline(&s, Method::SceneCot, vlm, Some(llm.clone()), cache.clone());
    let err = p.answer(segment_item(&s)).await.unwrap_err().to_string();
    assert!(err.contains("step 3"), "{err}");
    let partials = cache.partials();
    assert_eq!(partials.len(), 1);
    assert_eq!(partials[0].failed_step, 3);
    assert_eq!(partials[0].completed.len(), 2);
    assert_eq!(llm.calls(), 0);
}

#[tokio::test]
async fn scripted_timeline_flows_to_the_answer() {
    let s = suite();
    let vlm = Arc::new(ScriptedModel::new(
        "vlm",
        MockScript::with_default(r#"{"ego_vehicle": "Straight, constant speed"}"#).rule(
            Matcher::Regex { pattern: r"(?s)Frame17:.*Output only the JSON".into() },
            MockReply::Text { text: r#"{"ego_vehicle": "Turn left"}"#.into() },
        ),
    ));
    let llm = Arc::new(ScriptedModel::new(
        "llm",
        MockScript::with_default("A").rule(
            Matcher::Regex { pattern: r#"Segment 6 \(Frame17 to Frame26\):\nScene description: [^\n]*\nMotion summary: \{"ego_vehicle": "Turn left"\}"#.into() },
            MockReply::Text { text: "B".into() },
        ),
    ));
    let p = pipeline(&s, Method::SceneCot, vlm, Some(llm), Arc::new(TraceCache::in_memory()));
    let item = QaItem {
        id: "ord".into(),
        scene_id: s.bundles[1].scene_id.clone(),
        task: Task::TemporalOrdering,
        target: Target::Ego,
        question_text: "Which of the following represents the correct temporal order of motions for the ego vehicle?".into(),
        answer_format: AnswerFormat::SingleLetter,
        options: None,
        ground_truth: GroundTruth::Text("B".into()),
        segment_index: None,
        frames: (0..40).collect(),
    };
    assert_eq!(p.answer(&item).await.unwrap(), "B");
}

#[tokio::test]
async fn runs_are_reproducible() {
    let s = suite();
    let script = MockScript::summary_oracle("A");
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let vlm = Arc::new(ScriptedModel::new("vlm", script.clone()));
        let p = pipeline(&s, Method::Tcogmap, vlm, None, Arc::new(TraceCache::in_memory()));
        let out: Vec<String> = p.run(&s.items).await.into_iter().map(|r| r.unwrap()).collect();
        outputs.push(out);
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn scene_cot_requires_text_model() {
    let s = suite();
    let vlm: Arc<dyn ChatModel> = Arc::new(ScriptedModel::new("vlm", MockScript::default()));
    let cfg = PipelineConfig::new(Method::SceneCot, Path::new(".").to_path_buf());
    let err = Pipeline::new(cfg, vlm, None, PromptTemplates::default(), Arc::new(TraceCache::in_memory()), s.bundles.clone());
    assert!(matches!(err, Err(PipelineError::MissingTextModel)));
}
