//! `vce`: command-line driver for contrastive subspace editing.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use vce_core::editor::{EditPlan, EditTarget, LayerRange};
use vce_core::metrics::ObjectVocab;
use vce_core::perturbation::DiffusionSampler;
use vce_core::pipeline::{
    self, build_report, caption_metrics, default_prompts_path, io::read_token_lines,
    read_scene_objects, run_pipeline, stage_edit, stage_fixture, stage_perturb, stage_scenes,
    stage_shifts, stage_subspace, stage_trace, PipelineConfig, REPORT_JSON, REPORT_TXT,
};
use vce_core::tensor_store::{validate_bundle, EntryStatus};
use vce_core::toy_lvlm::read_model_config;
use vce_core::VceError;

#[derive(Parser)]
#[command(name = "vce", version, about = "Contrastive subspace editing on a toy vision-language model")]
struct Cli {
    /// JSON pipeline config; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Recompute stages whose outputs already validate.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct MethodArgs {
    /// 1-based inclusive layer range `a..b`.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    /// Comma-separated subset of `mlp,attn`.
    #[arg(long)]
    targets: Option<String>,
}

#[derive(Args, Default)]
struct DiffusionArgs {
    /// Diffusion steps T.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    #[arg(long, value_enum)]
    sampler: Option<Sampler>,
}

#[derive(Args, Default)]
struct ScheduleArgs {
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    z0: Option<f64>,
    #[arg(long)]
    z1: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    wmin: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampler {
    ClosedForm,
    Stepwise,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage and print the final report.
    Run {
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        method: MethodArgs,
        #[command(flatten)]
        diffusion: DiffusionArgs,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
    /// Build the planted-prior fixture checkpoint.
    Fixture {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render training and evaluation scenes.
    Scenes {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        eval_out: Option<PathBuf>,
    },
    /// Diffuse every image into a contrastive pair.
    Perturb {
        #[arg(long)]
        images: Option<PathBuf>,
        /// Defaults to the prompts sidecar of the image bundle.
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        diffusion: DiffusionArgs,
    },
    /// Caption originals, then trace both images of every pair.
    Trace {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Logit shifts, robust z-scores and token weights.
    Shifts {
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
    /// Editing vectors and per-layer hallucination subspaces.
    Subspace {
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Shifts bundle holding the token weights.
        #[arg(long, alias = "weights")]
        shifts: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        method: MethodArgs,
    },
    /// Project the selected weights off their layer's subspace.
    Edit {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        spaces: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        method: MethodArgs,
    },
    /// Compare unedited and edited models on the evaluation scenes.
    Report {
        #[command(flatten)]
        method: MethodArgs,
    },
    /// CHAIR or POPE scores of caption files against truth files.
    Eval {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum)]
        mode: EvalMode,
        /// Comma-separated object token ids; defaults to the fixture's.
        #[arg(long)]
        objects: Option<String>,
        /// Also write the structured report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Check manifests, lengths and hashes of bundles.
    Validate {
        #[arg(required = true)]
        bundles: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Chair,
    Pope,
}

fn exit_code(err: &VceError) -> u8 {
    match err.root() {
        VceError::Config(_) | VceError::Parse(_) => 2,
        VceError::Validation(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, VceError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(o) = &cli.out_dir {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn apply_method(cfg: &mut PipelineConfig, m: &MethodArgs) -> Result<(), VceError> {
    if let Some(l) = &m.layers {
        cfg.layers = Some(l.clone());
    }
    if let Some(k) = m.rank {
        cfg.rank = k;
    }
    if let Some(t) = &m.targets {
        cfg.targets = EditTarget::parse_list(t)?;
    }
    Ok(())
}

fn apply_diffusion(cfg: &mut PipelineConfig, d: &DiffusionArgs) {
    let c = &mut cfg.diffusion;
    c.steps = d.steps.unwrap_or(c.steps);
    c.beta_start = d.beta_start.unwrap_or(c.beta_start);
    c.beta_end = d.beta_end.unwrap_or(c.beta_end);
    if let Some(s) = d.sampler {
        c.sampler = match s {
            Sampler::ClosedForm => DiffusionSampler::ClosedForm,
            Sampler::Stepwise => DiffusionSampler::Stepwise,
        };
    }
}

fn apply_schedule(cfg: &mut PipelineConfig, a: &ScheduleArgs) {
    let p = &mut cfg.schedule;
    p.eps = a.eps.unwrap_or(p.eps);
    p.z0 = a.z0.unwrap_or(p.z0);
    p.z1 = a.z1.unwrap_or(p.z1);
    p.gamma = a.gamma.unwrap_or(p.gamma);
    p.w_min = a.wmin.unwrap_or(p.w_min);
}

fn or_default(arg: &Option<PathBuf>, cfg: &PipelineConfig, default: &Path) -> PathBuf {
    arg.clone().unwrap_or_else(|| cfg.resolve(default))
}

fn layers_for(cfg: &PipelineConfig, model: &Path) -> Result<LayerRange, VceError> {
    cfg.layer_range(read_model_config(model)?.n_layers)
}

fn parse_objects(list: &str) -> Result<Vec<u32>, VceError> {
    list.split(',')
        .map(|w| {
            w.trim()
                .parse::<u32>()
                .map_err(|_| VceError::Parse(format!("object token `{w}` is not an integer")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), VceError> {
    let mut cfg = load_config(&cli)?;
    let force = cli.force;
    let with_threads = |cfg: &PipelineConfig| -> Result<(), VceError> {
        if let Some(n) = cfg.threads {
            pipeline::set_global_threads(n)?;
        }
        Ok(())
    };

    match &cli.command {
        Command::Run {
            pairs,
            checkpoint,
            method,
            diffusion,
            schedule,
        } => {
            apply_diffusion(&mut cfg, diffusion);
            apply_schedule(&mut cfg, schedule);
            if let Some(m) = pairs {
                cfg.pairs = *m;
            }
            if let Some(c) = checkpoint {
                cfg.checkpoint = Some(c.clone());
            }
            apply_method(&mut cfg, method)?;
            let outcome = run_pipeline(&cfg, force)?;
            for s in &outcome.stages {
                info!("{:<9} {}", s.stage, if s.skipped { "skipped" } else { "done" });
            }
            print!("{}", outcome.report.to_text());
        }
        Command::Fixture { out } => {
            cfg.validate()?;
            let out = or_default(out, &cfg, &cfg.paths.model);
            stage_fixture(&cfg.fixture, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Scenes { out, eval_out } => {
            cfg.validate()?;
            let out = or_default(out, &cfg, &cfg.paths.scenes);
            let eval_out = or_default(eval_out, &cfg, &cfg.paths.eval_scenes);
            let prompt = cfg.prompt();
            stage_scenes(&cfg.fixture, cfg.trigger_rate, cfg.pairs, cfg.train_scene_seed(), &prompt, &out)?;
            stage_scenes(
                &cfg.fixture,
                cfg.trigger_rate,
                cfg.eval_captions,
                cfg.eval_scene_seed(),
                &prompt,
                &eval_out,
            )?;
            println!("wrote {} and {}", out.display(), eval_out.display());
        }
        Command::Perturb {
            images,
            prompts,
            out,
            diffusion,
        } => {
            apply_diffusion(&mut cfg, diffusion);
            cfg.validate()?;
            with_threads(&cfg)?;
            let images = or_default(images, &cfg, &cfg.paths.scenes);
            let prompts = prompts.clone().unwrap_or_else(|| default_prompts_path(&images));
            let out = or_default(out, &cfg, &cfg.paths.pairs);
            let schedule = cfg.diffusion.schedule()?;
            stage_perturb(&images, &prompts, &schedule, cfg.diffusion.sampler, cfg.seed, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Trace { model, pairs, out } => {
            cfg.validate()?;
            with_threads(&cfg)?;
            let model = model.clone().unwrap_or_else(|| cfg.model_dir());
            let pairs = or_default(pairs, &cfg, &cfg.paths.pairs);
            let out = or_default(out, &cfg, &cfg.paths.traces);
            stage_trace(&model, &pairs, cfg.max_new, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Shifts {
            traces,
            out,
            schedule,
        } => {
            apply_schedule(&mut cfg, schedule);
            cfg.validate()?;
            with_threads(&cfg)?;
            let traces = or_default(traces, &cfg, &cfg.paths.traces);
            let out = or_default(out, &cfg, &cfg.paths.shifts);
            stage_shifts(&traces, &cfg.schedule, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Subspace {
            traces,
            shifts,
            out,
            method,
        } => {
            apply_method(&mut cfg, method)?;
            cfg.validate()?;
            with_threads(&cfg)?;
            let traces = or_default(traces, &cfg, &cfg.paths.traces);
            let shifts = or_default(shifts, &cfg, &cfg.paths.shifts);
            let out = or_default(out, &cfg, &cfg.paths.spaces);
            let layers = match &cfg.layers {
                Some(s) => Some(LayerRange::parse_one_based(s)?),
                None => None,
            };
            let spaces = stage_subspace(&traces, &shifts, layers, cfg.rank, &out)?;
            print!("{}", vce_core::subspace::spectrum_report(&spaces));
        }
        Command::Edit {
            model,
            spaces,
            out,
            method,
        } => {
            apply_method(&mut cfg, method)?;
            cfg.validate()?;
            with_threads(&cfg)?;
            let model = model.clone().unwrap_or_else(|| cfg.model_dir());
            let spaces = or_default(spaces, &cfg, &cfg.paths.spaces);
            let out = or_default(out, &cfg, &cfg.paths.edited);
            let plan = EditPlan::new(layers_for(&cfg, &model)?, cfg.targets.clone(), Some(cfg.rank))?;
            let report = stage_edit(&model, &spaces, &plan, &out)?;
            print!("{}", report.to_table());
        }
        Command::Report { method } => {
            apply_method(&mut cfg, method)?;
            cfg.validate()?;
            with_threads(&cfg)?;
            let report = build_report(
                &cfg,
                &cfg.model_dir(),
                &cfg.resolve(&cfg.paths.eval_scenes),
                &cfg.resolve(&cfg.paths.traces),
                &cfg.resolve(&cfg.paths.spaces),
                &cfg.resolve(&cfg.paths.edited),
            )?;
            let dir = cfg.resolve(&cfg.paths.report);
            write(&dir.join(REPORT_JSON), &report.to_json())?;
            write(&dir.join(REPORT_TXT), &report.to_text())?;
            print!("{}", report.to_text());
        }
        Command::Eval {
            captions,
            truth,
            mode,
            objects,
            json,
        } => {
            let tokens = match objects {
                Some(list) => parse_objects(list)?,
                None => cfg.fixture.object_tokens(),
            };
            let vocab = ObjectVocab::new(tokens);
            let captions = read_token_lines(captions)?;
            let truths = if truth.is_dir() {
                read_scene_objects(truth)?
            } else {
                read_token_lines(truth)?
            };
            let (chair, pope) = caption_metrics(&captions, &truths, &vocab)?;
            let (text, structured) = match mode {
                EvalMode::Chair => (chair.to_string(), serde_json::to_string_pretty(&chair)),
                EvalMode::Pope => (pope.to_string(), serde_json::to_string_pretty(&pope)),
            };
            println!("{}", text.trim_end());
            if let Some(path) = json {
                let body = structured.map_err(|e| VceError::Parse(e.to_string()))?;
                write(path, &(body + "\n"))?;
            }
        }
        Command::Validate { bundles } => {
            let mut failed = Vec::new();
            for dir in bundles {
                let report = validate_bundle(dir);
                if let Some(err) = &report.manifest_error {
                    println!("{}: manifest error: {err}", dir.display());
                }
                for e in report.entries.iter().filter(|e| e.status != EntryStatus::Ok) {
                    println!("  {}: {}", e.name, e.status);
                }
                if report.manifest_error.is_none() {
                    let bad = report.entries.iter().filter(|e| e.status != EntryStatus::Ok).count();
                    println!("{}: {} tensors, {bad} failed", dir.display(), report.entries.len());
                }
                if !report.is_ok() {
                    failed.push(dir.display().to_string());
                }
            }
            if !failed.is_empty() {
                return Err(VceError::Validation(failed.join(", ")));
            }
            println!("all ok");
        }
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<(), VceError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| VceError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| VceError::io(path, e))
}
