use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fslab_core::config::{
    ExperimentConfig, ProjectionMethod, SelectionStrategy, SubsetRule, Supervision,
};
use fslab_core::pipeline::{AblationAxis, AdaptSpec, Pipeline, StageResult, StageStatus};
use fslab_core::Error;

#[derive(Parser)]
#[command(
    name = "fslab",
    version,
    about = "Few-shot cross-subject brain decoding experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Run even if upstream checksums do not match, and rerun completed stages.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone, Default)]
struct RunFlags {
    #[arg(long)]
    supervision: Option<Supervision>,
    #[arg(long)]
    shots: Option<usize>,
    /// `first` or `selected`.
    #[arg(long)]
    subset: Option<String>,
    /// Selection strategy used with `--subset selected`.
    #[arg(long)]
    strategy: Option<SelectionStrategy>,
    #[arg(long)]
    adapter_depth: Option<usize>,
    #[arg(long)]
    non_residual: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and serialize the synthetic dataset.
    GenData(Common),
    /// Pretrain the shared encoder on every subject except the new one.
    Pretrain(Common),
    /// One-shot stimulus selection for the new subject.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<SelectionStrategy>,
        #[arg(long)]
        method: Option<ProjectionMethod>,
    },
    /// Fit the new subject's adapter with the encoder frozen.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Evaluate an adapted run on the new subject's test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Assemble the comparison tables from evaluated runs.
    Report(Common),
    /// Sweep one axis and write a single comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// supervision | adapter_depth | selection | shots
        #[arg(long)]
        axis: AblationAxis,
    },
    /// Check that every artifact matches its manifest and none is dangling.
    Verify(Common),
    /// The full pipeline: data, pretraining, selection, every sweep run, report.
    Run(Common),
}

fn load(common: &Common) -> Result<Pipeline, Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    let root = cfg.output_dir();
    Ok(Pipeline::new(cfg, root, common.force))
}

fn apply_run_flags(p: &mut Pipeline, f: &RunFlags) -> Result<AdaptSpec, Error> {
    let cfg = &mut p.cfg;
    if let Some(s) = f.supervision {
        cfg.adapt.supervision = s;
    }
    if let Some(k) = f.shots {
        cfg.adapt.shots = k;
    }
    if let Some(s) = &f.subset {
        cfg.adapt.subset = match s.as_str() {
            "first" => SubsetRule::First,
            "selected" => SubsetRule::Selected,
            other => return Err(Error::Config(format!("unknown subset rule `{other}`"))),
        };
    }
    if let Some(s) = f.strategy {
        cfg.selection.strategy = s;
    }
    if let Some(d) = f.adapter_depth {
        cfg.model.adapter_depth = d;
    }
    if f.non_residual {
        cfg.model.adapter_residual = false;
    }
    let spec = AdaptSpec::from_config(cfg);
    // Flags only pick the run; the manifest echoes the config as loaded.
    cfg.validate()?;
    Ok(spec)
}

fn print(results: &[StageResult]) {
    for r in results {
        let status = match r.status {
            StageStatus::Ran => "done",
            StageStatus::Skipped => "skipped (up to date)",
        };
        let metrics: Vec<String> = r
            .metrics
            .iter()
            .map(|(k, v)| format!("{k}={v:.4}"))
            .collect();
        println!(
            "{:<9} {:<40} {status}  {}",
            r.stage,
            r.dir,
            metrics.join(" ")
        );
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData(c) => {
            let p = load(&c)?;
            let r = p.gen_data()?;
            print(std::slice::from_ref(&r));
            let sha = fslab_core::array::file_sha256(
                &p.root
                    .join("data")
                    .join(fslab_core::synthgen::DATASET_MANIFEST),
            )?;
            println!("dataset manifest sha256 {sha}");
        }
        Command::Pretrain(c) => print(&[load(&c)?.pretrain()?]),
        Command::Select {
            common,
            strategy,
            method,
        } => {
            let mut p = load(&common)?;
            if let Some(m) = method {
                p.cfg.selection.method = m;
            }
            let s = strategy.unwrap_or(p.cfg.selection.strategy);
            print(&[p.select(s)?]);
        }
        Command::Adapt { common, run } => {
            let mut p = load(&common)?;
            let base = p.cfg.clone();
            let spec = apply_run_flags(&mut p, &run)?;
            p.cfg = base;
            print(&[p.adapt(&spec)?]);
        }
        Command::Eval { common, run } => {
            let mut p = load(&common)?;
            let base = p.cfg.clone();
            let spec = apply_run_flags(&mut p, &run)?;
            p.cfg = base;
            print(&[p.eval(&spec)?]);
        }
        Command::Report(c) => {
            let p = load(&c)?;
            print(&[p.report()?]);
        }
        Command::Ablate { common, axis } => print(&load(&common)?.ablate(axis)?),
        Command::Verify(c) => {
            let r = load(&c)?.verify()?;
            println!("ok: {} manifests, {} files", r.manifests, r.files);
        }
        Command::Run(c) => print(&load(&c)?.run_all()?),
    }
    Ok(())
}

fn init_threads() {
    let n = std::env::var("MINDSHOT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    if let Some(n) = n {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not cap worker threads: {e}");
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
