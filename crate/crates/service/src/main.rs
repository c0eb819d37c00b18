use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use label3d_core::dataset::{load_annotations, open_sequence, OpenOptions};
use label3d_core::eval::{load_class_map, render_table, run_evaluation, EvalOptions};
use label3d_core::interpreter::Verdict;
use label3d_core::service::{
    AnnotationRequest, AnnotationService, CreateSession, Mode, PipelineConfig, ServiceError, SubmitOutcome,
};
use label3d_service::{parse_frames, router};

const EXIT_EXHAUSTED: u8 = 2;
const EXIT_DATA: u8 = 3;

#[derive(Parser)]
#[command(name = "label3d", version, about = "Open-vocabulary 3D auto-labeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label a frame range from a text prompt.
    Annotate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Contiguous range such as `0-9`.
        #[arg(long)]
        frames: String,
        #[arg(long, value_enum)]
        mode: Option<CliMode>,
        /// Commit the candidate without review.
        #[arg(long)]
        auto_accept: bool,
        /// Defaults to `annotations.jsonl` under the sequence root.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Score annotations against ground-truth labels.
    Evaluate {
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Frame list such as `0-9` or `1,4,7`.
        #[arg(long)]
        frames: String,
        /// JSON object mapping class text to ground-truth class id.
        #[arg(long)]
        class_map: PathBuf,
        #[arg(long, default_value = "P2")]
        camera: String,
        /// Count every point, not only those the camera sees.
        #[arg(long)]
        no_fov: bool,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliMode {
    KeyframeInterpolate,
    PerFrameFuse,
}

impl From<CliMode> for Mode {
    fn from(m: CliMode) -> Self {
        match m {
            CliMode::KeyframeInterpolate => Mode::KeyframeInterpolate,
            CliMode::PerFrameFuse => Mode::PerFrameFuse,
        }
    }
}

fn fail(e: &ServiceError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

#[allow(clippy::too_many_arguments)]
fn annotate(
    config: PathBuf,
    sequence: PathBuf,
    prompt: String,
    frames: String,
    mode: Option<CliMode>,
    auto_accept: bool,
    annotations: Option<PathBuf>,
) -> ExitCode {
    let frames = match parse_frames(&frames) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if frames.windows(2).any(|w| w[1] != w[0] + 1) {
        eprintln!("error: annotate needs a contiguous frame range");
        return ExitCode::from(1);
    }
    let run = || -> Result<ExitCode, ServiceError> {
        let cfg = PipelineConfig::load(&config)?;
        let svc = AnnotationService::new(cfg)?;
        let id = svc.create_session(&CreateSession {
            sequence_root: sequence,
            idempotency_key: None,
            annotations_path: annotations,
        })?;
        let req = AnnotationRequest {
            text: prompt,
            frame_start: frames[0],
            frame_end: *frames.last().expect("non-empty"),
            mode: mode.map(Mode::from),
        };
        match svc.submit_request(&id, &req)? {
            SubmitOutcome::Exhausted { transcript, message } => {
                println!("{}", to_json(&serde_json::json!({ "status": "exhausted", "message": message, "transcript": transcript })));
                Ok(ExitCode::from(EXIT_EXHAUSTED))
            }
            SubmitOutcome::Candidate { candidate } => {
                if auto_accept {
                    let out = svc.review(&id, &candidate.id, Verdict::Accept, None)?;
                    eprintln!("committed {} records", out.committed);
                }
                println!("{}", to_json(&candidate));
                Ok(ExitCode::SUCCESS)
            }
        }
    };
    run().unwrap_or_else(|e| fail(&e))
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    sequence: PathBuf,
    annotations: PathBuf,
    frames: String,
    class_map: PathBuf,
    camera: String,
    no_fov: bool,
    json: Option<PathBuf>,
) -> ExitCode {
    let frames = match parse_frames(&frames) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let run = || -> Result<(), String> {
        let manifest = open_sequence(&sequence, &OpenOptions { camera_id: camera, image_size: None })
            .map_err(|e| e.to_string())?;
        let records = load_annotations(&annotations).map_err(|e| e.to_string())?;
        let map = load_class_map(&class_map).map_err(|e| e.to_string())?;
        let options = EvalOptions { fov_filter: !no_fov, ..Default::default() };
        let report = run_evaluation(&manifest, &records, &frames, &map, &options).map_err(|e| e.to_string())?;
        print!("{}", render_table(&report));
        if let Some(path) = json {
            std::fs::write(&path, to_json(&report)).map_err(|e| format!("{}: {e}", path.display()))?;
        }
        Ok(())
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
    }
}

fn serve(config: PathBuf, addr: String) -> ExitCode {
    let svc = match PipelineConfig::load(&config).and_then(AnnotationService::new) {
        Ok(s) => Arc::new(s),
        Err(e) => return fail(&e),
    };
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    rt.block_on(async move {
        let listener = match tokio::net::TcpListener::bind(&addr).await {
            Ok(l) => l,
            Err(e) => {
                eprintln!("error: {addr}: {e}");
                return ExitCode::from(1);
            }
        };
        tracing::info!(%addr, "listening");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        match axum::serve(listener, router(svc)).with_graceful_shutdown(shutdown).await {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        }
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    // clap exits with 2 on usage errors, which would read as "exhausted"
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Annotate { config, sequence, prompt, frames, mode, auto_accept, annotations } => {
            annotate(config, sequence, prompt, frames, mode, auto_accept, annotations)
        }
        Command::Evaluate { sequence, annotations, frames, class_map, camera, no_fov, json } => {
            evaluate(sequence, annotations, frames, class_map, camera, no_fov, json)
        }
        Command::Serve { config, addr } => serve(config, addr),
    }
}
