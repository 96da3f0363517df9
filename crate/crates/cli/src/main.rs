use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use awcc::config::RunConfig;
use awcc::data::{load_image, load_sample, parse_annotations};
use awcc::eval::{build_gallery, evaluate_dataset, export_density, infer_count, load_eval_samples, probe_weather_neighbors, render_density};
use awcc::train::{load_checkpoint, save_checkpoint};
use awcc::{Error, TrainState32};

#[derive(Parser)]
#[command(name = "awcc", version, about = "Weather-adaptive crowd counting")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Refuse to run anything that is not bit-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    Weather,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train for `train.steps` steps, logging one JSON line per step.
    Train {
        /// Continue from this checkpoint up to the configured step budget.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Count every image of an annotation file and print MAE/MSE as JSON.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `data.annotations` of the config.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long, value_enum)]
        subset: Option<Subset>,
    },
    /// Count one image and write its density map.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a colour PNG of the density map here.
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Nearest neighbours of one image in weather-query space.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        query_id: String,
        #[arg(long, default_value_t = 4)]
        topk: usize,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

fn fail(code: u8, msg: impl Into<String>) -> Failure {
    Failure { code, msg: msg.into() }
}

/// Exit code of an error raised while running a command.
fn code_of(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite { .. } | Error::NumericalGuard(_) => 4,
        Error::Parse { .. } | Error::Io { .. } | Error::Image { .. } | Error::Validation(_) => 3,
        _ => 1,
    }
}

fn run_err(e: Error) -> Failure {
    fail(code_of(&e), e.to_string())
}

fn config_err(e: Error) -> Failure {
    fail(2, e.to_string())
}

fn data_err(e: Error) -> Failure {
    match e {
        Error::Config(_) => config_err(e),
        e => fail(3, e.to_string()),
    }
}

fn load_config(cli: &Cli) -> Result<Option<RunConfig>, Failure> {
    let Some(path) = &cli.config else { return Ok(None) };
    let mut cfg = RunConfig::load(path).map_err(config_err)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate().map_err(config_err)?;
    Ok(Some(cfg))
}

/// Loads a checkpoint for inference. With a config, its model section
/// must describe the same architecture.
fn load_model_state(path: &Path, cfg: Option<&RunConfig>) -> Result<TrainState32, Failure> {
    let state = load_checkpoint::<f32>(path).map_err(|e| fail(2, format!("checkpoint {}: {e}", path.display())))?;
    if let Some(cfg) = cfg {
        let want = cfg.model_config().map_err(config_err)?;
        if &want != state.model.config() {
            return Err(fail(
                2,
                format!("checkpoint {} was trained with a different model configuration", path.display()),
            ));
        }
    }
    Ok(state)
}

fn annotations_path(arg: Option<&PathBuf>, cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let p = arg
        .or(cfg.data.annotations.as_ref())
        .ok_or_else(|| fail(2, "no annotation file: pass --annotations or set data.annotations"))?;
    Ok(cfg.data.resolve_path(p))
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn cmd_train(cli: &Cli, resume: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let mut state = match resume {
        Some(path) => {
            let mut state = load_model_state(path, cfg.as_ref())?;
            if cli.seed.is_some() {
                log::warn!("--seed is ignored when resuming; the checkpoint carries its own streams");
            }
            if let Some(cfg) = cfg {
                // budget, cadence and paths come from the new config
                state.config.train.steps = cfg.train.steps;
                state.config.train.checkpoint_every = cfg.train.checkpoint_every;
                state.config.train.out_dir = cfg.train.out_dir;
                state.config.data = cfg.data;
            }
            state
        }
        None => {
            let cfg = cfg.ok_or_else(|| fail(2, "train needs --config"))?;
            TrainState32::new(cfg).map_err(data_err)?
        }
    };
    let cfg = state.config.clone();
    let ann = annotations_path(None, &cfg)?;
    let crop = state.model.config().crop_size;
    let descs = parse_annotations(&ann).map_err(data_err)?;
    let dataset = descs
        .iter()
        .map(|d| load_sample(d, crop))
        .collect::<Result<Vec<_>, _>>()
        .map_err(data_err)?;
    if dataset.is_empty() {
        return Err(fail(3, format!("{}: no training images", ann.display())));
    }

    let out_dir = cfg.data.resolve_path(&cfg.train.out_dir);
    fs::create_dir_all(&out_dir).map_err(|e| fail(3, format!("{}: {e}", out_dir.display())))?;
    let log_path = out_dir.join("loss.jsonl");
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| fail(3, format!("{}: {e}", log_path.display())))?;
    if state.step >= cfg.train.steps {
        log::warn!("checkpoint is already at step {} of {}", state.step, cfg.train.steps);
    }
    let every = cfg.train.checkpoint_every;
    let mut stdout = std::io::stdout().lock();
    state
        .run(&dataset, cfg.train.steps, |s, r| {
            let line = serde_json::to_string(r).expect("report serializes");
            writeln!(stdout, "{line}").map_err(|e| Error::Validation(format!("stdout: {e}")))?;
            writeln!(log_file, "{line}").map_err(|e| Error::Validation(format!("{}: {e}", log_path.display())))?;
            if every > 0 && s.step % every == 0 {
                save_checkpoint(s, out_dir.join(format!("step-{:08}.ckpt", s.step)))?;
            }
            Ok(())
        })
        .map_err(run_err)?;
    save_checkpoint(&state, out_dir.join("last.ckpt")).map_err(run_err)?;
    Ok(())
}

fn cmd_evaluate(cli: &Cli, checkpoint: &Path, annotations: Option<&PathBuf>, subset: Option<Subset>) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let state = load_model_state(checkpoint, cfg.as_ref())?;
    let cfg = cfg.unwrap_or(state.config);
    let ann = annotations_path(annotations, &cfg)?;
    let by_weather = subset.is_some() || cfg.eval.subset_key.is_some();
    let report = evaluate_dataset(&state.model, &ann, by_weather).map_err(run_err)?;
    print_json(&report);
    Ok(())
}

fn cmd_predict(cli: &Cli, checkpoint: &Path, image: &Path, out: &Path, render: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let state = load_model_state(checkpoint, cfg.as_ref())?;
    let img = load_image::<f32>(image).map_err(|e| fail(3, e.to_string()))?;
    let (count, density) = infer_count(&state.model, &img, None).map_err(run_err)?;
    export_density(&density, out).map_err(run_err)?;
    if let Some(r) = render {
        render_density(&density, r, state.model.config().output_stride).map_err(run_err)?;
    }
    println!("{count:?}");
    Ok(())
}

fn cmd_probe(cli: &Cli, checkpoint: &Path, annotations: Option<&PathBuf>, query_id: &str, topk: usize) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let state = load_model_state(checkpoint, cfg.as_ref())?;
    let cfg = cfg.unwrap_or(state.config);
    let ann = annotations_path(annotations, &cfg)?;
    let descs = parse_annotations(&ann).map_err(data_err)?;
    if !descs.iter().any(|d| d.image_id == query_id) {
        return Err(fail(2, format!("query id {query_id:?} is not in {}", ann.display())));
    }
    if topk == 0 || topk >= descs.len() {
        return Err(fail(
            2,
            format!("--topk {topk} must be between 1 and {}", descs.len().saturating_sub(1)),
        ));
    }
    let gallery = build_gallery(&state.model, load_eval_samples::<f32>(&ann).map_err(data_err)?).map_err(run_err)?;
    let neighbors = probe_weather_neighbors(&gallery, query_id, topk).map_err(run_err)?;
    print_json(&serde_json::json!({ "query_id": query_id, "neighbors": neighbors }));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.deterministic {
        // every kernel is single-threaded with a fixed reduction order
        log::info!("deterministic mode");
    }
    let res = match &cli.cmd {
        Cmd::Train { resume } => cmd_train(&cli, resume.as_deref()),
        Cmd::Evaluate {
            checkpoint,
            annotations,
            subset,
        } => cmd_evaluate(&cli, checkpoint, annotations.as_ref(), *subset),
        Cmd::Predict {
            checkpoint,
            image,
            out,
            render,
        } => cmd_predict(&cli, checkpoint, image, out, render.as_deref()),
        Cmd::Probe {
            checkpoint,
            annotations,
            query_id,
            topk,
        } => cmd_probe(&cli, checkpoint, annotations.as_ref(), query_id, *topk),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
