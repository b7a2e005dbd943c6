use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tad_annotate::{AnnotateConfig, AnnotateError};
use tad_cli::commands::{self, EndpointChoice, RawAnswer, RunOptions};
use tad_cli::config::pick_path;
use tad_cli::{load_bundles, read_json, read_jsonl, write_file, CliError, CliResult, RunConfig, Selection};
use tad_core::eval::FramePolicy;
use tad_core::qa::QaItem;
use tad_gateway::{serve_mock, MockScript};
use tad_pipeline::{Ablation, Method};

#[derive(Parser)]
#[command(name = "tad", version, about = "Temporal driving-video QA: data prep, inference runs and scoring")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct SelectArgs {
    /// Comma-separated task keys.
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long, conflicts_with = "non_ego_only")]
    ego_only: bool,
    #[arg(long)]
    non_ego_only: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Convert dataset tables into scene bundles.
    Ingest {
        #[arg(long)]
        dataroot: Option<PathBuf>,
        /// Scene name or token; repeatable. Default: every scene.
        #[arg(long = "scene")]
        scenes: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify ego motion per segment and write machine label files.
    ClassifyMotions {
        #[arg(long)]
        bundles: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split scenes into segments with in-range tracks.
    Partition {
        #[arg(long)]
        bundles: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate QA items from bundles and labels.
    GenerateQa {
        #[arg(long)]
        bundles: Option<PathBuf>,
        /// Label files; omit together with --machine-labels to use classifier output.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, conflicts_with = "labels")]
        machine_labels: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        select: SelectArgs,
    },
    /// Answer QA items with a model and write a scored-run file. Resumes when the output exists.
    Run {
        #[arg(long)]
        qa: Option<PathBuf>,
        #[arg(long)]
        bundles: Option<PathBuf>,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long = "parallel")]
        parallel: Option<usize>,
        /// Directory for request traces and cached reasoning steps.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// `mock` or a base URL.
        #[arg(long)]
        endpoint: Option<String>,
        /// Mock script (JSON) used with `--endpoint mock`.
        #[arg(long)]
        mock_script: Option<PathBuf>,
        #[command(flatten)]
        select: SelectArgs,
    },
    /// Score raw `{id, raw}` answers against a QA file.
    Score {
        #[arg(long)]
        qa: Option<PathBuf>,
        #[arg(long)]
        answers: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate scored-run files into a task table.
    Report {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "Model")]
        label: String,
        #[arg(long)]
        json: Option<PathBuf>,
        /// Fail when the unparseable fraction exceeds this.
        #[arg(long)]
        max_unparseable: Option<f64>,
    },
    /// Expected score of random answering.
    Chance {
        #[arg(long)]
        qa: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value = "interval")]
        policy: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        select: SelectArgs,
    },
    /// Serve the scripted chat-completions mock until interrupted.
    ServeMock {
        #[arg(long, default_value_t = 8765)]
        port: u16,
        /// JSON script; default is the summary oracle.
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Serve the annotation REST API until interrupted.
    ServeAnnotation {
        #[arg(long)]
        bundles: Option<PathBuf>,
        #[arg(long)]
        qa: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        media: Option<PathBuf>,
        #[arg(long)]
        ui: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Shared token required on writes; also read from TAD_ANNOTATION_TOKEN.
        #[arg(long, env = "TAD_ANNOTATION_TOKEN")]
        token: Option<String>,
    },
    /// Write the synthetic three-scene suite (bundles, labels, frames).
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
}

fn selection(args: &SelectArgs, cfg: &RunConfig) -> CliResult<Selection> {
    let tasks = match (&args.tasks, &cfg.tasks) {
        (Some(list), _) => Some(Selection::parse_tasks(list)?),
        (None, Some(list)) => Some(Selection::parse_tasks(&list.join(","))?),
        (None, None) => None,
    };
    Ok(Selection { tasks, ego_only: args.ego_only, non_ego_only: args.non_ego_only })
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

async fn execute(cli: Cli) -> CliResult<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let p = &cfg.paths;
    let seed = |flag: Option<u64>| flag.or(cfg.seed).unwrap_or(0);
    match cli.command {
        Command::Ingest { dataroot, scenes, out } => {
            let dataroot = pick_path(dataroot, &p.dataroot, "dataroot")?;
            let out = pick_path(out, &p.bundles, "bundles")?;
            for path in commands::ingest(&dataroot, &scenes, &out)? {
                println!("{}", path.display());
            }
        }
        Command::ClassifyMotions { bundles, out } => {
            let bundles = load_bundles("bundles", &pick_path(bundles, &p.bundles, "bundles")?)?;
            let out = out.or_else(|| p.labels.clone());
            for ann in commands::classify_motions(&bundles, &cfg.segments, &cfg.motion, out.as_deref())? {
                for s in &ann.segments {
                    let label = s.ego.map_or("-", |l| l.phrase());
                    println!("{}\t{}\t{}-{}\t{label}", ann.scene_id, s.segment_index, s.frame_indices[0], s.frame_indices.last().unwrap_or(&0));
                }
            }
        }
        Command::Partition { bundles, out } => {
            let bundles = load_bundles("bundles", &pick_path(bundles, &p.bundles, "bundles")?)?;
            for (scene, segs) in commands::partition_all(&bundles, &cfg.segments, out.as_deref())? {
                for s in segs {
                    println!("{scene}\t{}\t{}-{}\t{}", s.segment_index, s.first_frame(), s.last_frame(), s.tracks_in_range.join(","));
                }
            }
        }
        Command::GenerateQa { bundles, labels, machine_labels, out, seed: s, select } => {
            let bundles = load_bundles("bundles", &pick_path(bundles, &p.bundles, "bundles")?)?;
            let labels = if machine_labels { None } else { Some(pick_path(labels, &p.labels, "labels")?) };
            let out = pick_path(out, &p.qa, "qa")?;
            let scenes = commands::annotated_scenes(bundles, labels.as_deref(), &cfg.segments, &cfg.motion)?;
            let (items, table) = commands::generate(&scenes, &cfg.segments, seed(s), &selection(&select, &cfg)?, &out)?;
            eprint!("{table}");
            println!("{} items -> {}", items.len(), out.display());
        }
        Command::Run { qa, bundles, images, out, method, ablation, parallel, trace, endpoint, mock_script, select } => {
            let qa = pick_path(qa, &p.qa, "qa")?;
            let method: Method = method
                .or_else(|| cfg.method.clone())
                .ok_or_else(|| CliError::keyed("method", "no value: pass --method or set method"))?
                .parse()
                .map_err(|e| CliError::keyed("method", e))?;
            let out = match out {
                Some(o) => o,
                None => pick_path(None, &p.runs, "runs")?.join(format!(
                    "{}-{}.jsonl",
                    method.as_str(),
                    ablation.clone().or(cfg.ablation.clone()).unwrap_or_else(|| "full".into())
                )),
            };
            let ablation: Ablation =
                ablation.or_else(|| cfg.ablation.clone()).map_or(Ok(Ablation::Full), |a| a.parse().map_err(|e| CliError::keyed("ablation", e)))?;
            let mut endpoint = EndpointChoice::from_flag(endpoint.as_deref(), cfg.endpoint.as_ref())?;
            if let (EndpointChoice::Mock(script), Some(path)) = (&mut endpoint, mock_script) {
                *script = read_json::<MockScript>("mock_script", &path)?;
            }
            let bundles = pick_path(bundles, &p.bundles, "bundles")?;
            let images = images.or_else(|| p.images.clone()).unwrap_or_else(|| bundles.parent().map(PathBuf::from).unwrap_or_default());
            let opts = RunOptions {
                qa,
                bundles,
                images,
                out: out.clone(),
                method,
                ablation,
                parallel: parallel.or(cfg.parallelism).unwrap_or(4),
                trace,
                endpoint,
                text_endpoint: cfg.text_endpoint.clone(),
                templates: p.templates.clone(),
                selection: selection(&select, &cfg)?,
                segmentation: cfg.segments,
                thresholds: cfg.motion,
            };
            let summary = commands::run(opts).await?;
            let report = tad_core::eval::aggregate_report(&summary.records);
            print!("{}", report.to_table(method.as_str()));
            eprintln!("answered {}, resumed past {}, failed {} -> {}", summary.answered, summary.skipped, summary.failures.len(), out.display());
            if let Some(first) = summary.failures.first() {
                return Err(CliError::keyed("run", format!("{} items failed; first: {first}", summary.failures.len())));
            }
        }
        Command::Score { qa, answers, out } => {
            let items: Vec<QaItem> = read_jsonl("qa", &pick_path(qa, &p.qa, "qa")?)?;
            let answers: Vec<RawAnswer> = read_jsonl("answers", &answers)?;
            let records = commands::score(&items, &answers)?;
            write_file("out", &out, &tad_core::eval::write_scored_records(&records))?;
            println!("{} scored -> {}", records.len(), out.display());
        }
        Command::Report { runs, label, json, max_unparseable } => {
            let report = commands::report(&runs)?;
            print!("{}", report.to_table(&label));
            if let Some(path) = json {
                write_file("json", &path, &report.to_json())?;
            }
            let limit = max_unparseable.or(cfg.max_unparseable).unwrap_or(0.1);
            if report.unparseable_rate > limit {
                return Err(CliError::keyed(
                    "max_unparseable",
                    format!("unparseable rate {:.4} exceeds limit {limit}", report.unparseable_rate),
                ));
            }
        }
        Command::Chance { qa, trials, policy, seed: s, json, select } => {
            let policy: FramePolicy = policy.parse().map_err(|e| CliError::keyed("policy", e))?;
            let items = selection(&select, &cfg)?.apply(read_jsonl("qa", &pick_path(qa, &p.qa, "qa")?)?);
            let report = commands::chance(&items, seed(s), trials, policy)?;
            print!("{}", report.to_table("Chance"));
            if let Some(path) = json {
                write_file("json", &path, &report.to_json())?;
            }
        }
        Command::ServeMock { port, script } => {
            let script = match script {
                Some(path) => read_json::<MockScript>("script", &path)?,
                None => MockScript::summary_oracle("A"),
            };
            let server = serve_mock(script, port).await.map_err(|e| CliError::keyed("port", e))?;
            println!("mock listening on {}", server.base_url());
            shutdown_signal().await;
            server.shutdown().await;
        }
        Command::ServeAnnotation { bundles, qa, store, media, ui, host, port, token } => {
            let bundles = load_bundles("bundles", &pick_path(bundles, &p.bundles, "bundles")?)?;
            let store = pick_path(store, &p.store, "store")?;
            let mut acfg = AnnotateConfig::new(store, bundles);
            if let Some(qa) = qa.or_else(|| p.qa.clone()).filter(|q| q.exists()) {
                acfg.qa_items = read_jsonl("qa", &qa)?;
            }
            acfg.media_root = media.or_else(|| p.images.clone());
            acfg.ui_root = ui;
            acfg.token = token;
            acfg.segmentation = cfg.segments;
            acfg.thresholds = cfg.motion;
            let server = tad_annotate::serve(acfg, &host, port).await.map_err(|e: AnnotateError| match e {
                AnnotateError::Bind { .. } => CliError::keyed("port", e),
                other => CliError::keyed("store", other),
            })?;
            println!("annotation service on {}", server.base_url());
            shutdown_signal().await;
            server.shutdown().await;
        }
        Command::Synth { out } => {
            let files = tad_pipeline::synthetic::write_synthetic_suite(&out).map_err(|e| CliError::keyed("out", e))?;
            println!("{} scenes -> {}", files.bundles.len(), files.root.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::keyed("args", first).to_json_line());
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).target(env_logger::Target::Stderr).init();
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{}", CliError::new(e).to_json_line());
            return ExitCode::FAILURE;
        }
    };
    match runtime.block_on(execute(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::FAILURE
        }
    }
}
