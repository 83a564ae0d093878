use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use poseadapt::apanet::{gradient_suite, save_model, ApanetError, Checkpoint, Method, GRADIENT_PATHS};
use poseadapt::config::{ConfigError, KeyValues};
use poseadapt::experiments::{
    compare_methods, emit_report, load_report, markdown_table, medians_csv, nu_sweep, recompute_medians,
    ExperimentConfig, ExperimentError, STANDARD_TASK,
};
use poseadapt::pose_analysis::{analyze, parse_pose_file, AnalysisError, ParseMode, PoseRecord};
use poseadapt::synth::SynthError;

/// Environment variable consulted for `train.seed` when no config sets it.
const SEED_ENV: &str = "POSEADAPT_SEED";

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Model(#[from] ApanetError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Failed(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Parser)]
#[command(name = "poseadapt", version, about = "Adversarial pose adaptation experiments")]
struct Cli {
    /// Configuration file layered over the built-in standard task.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a value, e.g. `--set train.nu=0.2`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Print the fully resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs", global = true)]
    out_dir: PathBuf,
    /// Worker threads for independent runs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate and store the task's scenes.
    Synth,
    /// Finite-difference check of every training loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Train and evaluate a single method.
    Train {
        /// Overrides `train.method`.
        #[arg(long)]
        method: Option<Method>,
    },
    /// Train all five methods on the task for every configured seed.
    Adapt,
    /// Sweep the labeled target fraction.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "ss,apanet,apanets")]
        methods: Vec<Method>,
    },
    /// Coverage and occupancy statistics of pose files.
    Analyze {
        #[arg(long)]
        queries: PathBuf,
        /// Reference pose files; several are concatenated.
        #[arg(long, required = true, num_args = 1..)]
        refs: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        stride: usize,
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
        /// Defaults to the mean pairwise distance of the reference cloud.
        #[arg(long)]
        tau: Option<f64>,
        /// Skip malformed lines instead of failing.
        #[arg(long)]
        lenient: bool,
    },
    /// Render a stored archive as tables.
    Report {
        #[arg(long)]
        archive: PathBuf,
    },
}

fn resolve_config(cli: &Cli) -> Result<(ExperimentConfig, KeyValues), CliError> {
    let mut kv = KeyValues::parse(STANDARD_TASK)?;
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        kv.merge(&KeyValues::parse(&text)?);
    }
    let mut explicit_seed = kv.get("train", "seed").is_some();
    for o in &cli.overrides {
        kv.apply_override(o)?;
        explicit_seed |= kv.get("train", "seed").is_some();
    }
    if !explicit_seed {
        if let Ok(seed) = std::env::var(SEED_ENV) {
            kv.apply_override(&format!("train.seed={seed}"))?;
        }
    }
    if let Some(j) = cli.jobs {
        kv.set("experiment", "jobs", j.to_string());
    }
    ExperimentConfig::check_keys(&kv)?;
    let cfg = ExperimentConfig::from_key_values(&kv)?;
    let resolved = cfg.to_key_values();
    Ok((cfg, resolved))
}

fn run_dir(out: &Path, hash: &str) -> Result<PathBuf, CliError> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let mut dir = out.join(format!("{stamp}-{hash}"));
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = out.join(format!("{stamp}-{hash}-{n}"));
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn load_poses(paths: &[PathBuf], mode: ParseMode) -> Result<Vec<PoseRecord>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        let parsed = parse_pose_file(p, mode)?;
        for w in &parsed.warnings {
            eprintln!("warning: {w}");
        }
        out.extend(parsed.records);
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (cfg, kv) = resolve_config(&cli)?;
    if cli.print_config {
        print!("{kv}");
        return Ok(());
    }
    let hash = cfg.hash();
    let Some(command) = &cli.command else {
        return Err(CliError::Failed("a subcommand is required (see --help)".into()));
    };
    match command {
        Command::Synth => {
            let task = cfg.build_task()?;
            let dir = run_dir(&cli.out_dir, &hash)?;
            write(&dir.join("config.txt"), &kv.to_string())?;
            for (i, s) in task.sources.iter().enumerate() {
                s.write_dir(&dir.join(format!("source.{i}")))?;
            }
            task.target.write_dir(&dir.join("target"))?;
            println!("{}", dir.display());
        }
        Command::Gradcheck { points, seed, tolerance } => {
            let checks = gradient_suite(*seed, *points, 1e-4)?;
            let mut failed = Vec::new();
            for path in GRADIENT_PATHS {
                let of_path: Vec<_> = checks.iter().filter(|c| c.path == path).collect();
                let worst = of_path.iter().map(|c| c.report.max_relative_error).fold(0.0, f64::max);
                let checked: usize = of_path.iter().map(|c| c.report.checked).sum();
                let skipped: usize = of_path.iter().map(|c| c.report.skipped).sum();
                let ok = worst < *tolerance;
                println!("{path:<18} points={} checked={checked} skipped={skipped} max_rel={worst:.3e} {}", of_path.len(), if ok { "ok" } else { "FAIL" });
                if !ok {
                    failed.push(path);
                }
            }
            if !failed.is_empty() {
                return Err(CliError::Failed(format!("gradient check failed on {}", failed.join(", "))));
            }
        }
        Command::Train { method } => {
            let task = cfg.build_task()?;
            let method = method.unwrap_or(cfg.train.method);
            let run = poseadapt::experiments::train_method(&task, method, &cfg.train)?;
            let dir = run_dir(&cli.out_dir, &hash)?;
            emit_report(std::slice::from_ref(&run.report), &kv, &dir)?;
            let ckpt = Checkpoint { model: run.model, config: cfg.train.clone(), step: 0, rng_word_pos: 0 };
            save_model(&dir.join("model.apanet"), &ckpt)?;
            let r = &run.report;
            println!("{}", dir.display());
            println!("{method}: target {} source {}", r.target_error, r.source_error);
        }
        Command::Adapt => {
            let task = cfg.build_task()?;
            let runs = compare_methods(&task, &Method::ALL, &cfg.train, &cfg.sweep.seeds, cfg.sweep.jobs)?;
            let reports: Vec<_> = runs.into_iter().map(|r| r.report).collect();
            let dir = run_dir(&cli.out_dir, &hash)?;
            emit_report(&reports, &kv, &dir)?;
            println!("{}", dir.display());
            print!("{}", markdown_table(&reports));
        }
        Command::Sweep { methods } => {
            let task = cfg.build_task()?;
            let reports = nu_sweep(&task, &cfg.sweep.nu_values, methods, &cfg.train, &cfg.sweep.seeds, cfg.sweep.jobs)?;
            let dir = run_dir(&cli.out_dir, &hash)?;
            emit_report(&reports, &kv, &dir)?;
            println!("{}", dir.display());
            print!("{}", markdown_table(&reports));
        }
        Command::Analyze { queries, refs, stride, rho, tau, lenient } => {
            let mode = if *lenient { ParseMode::Lenient } else { ParseMode::Strict };
            let q = load_poses(std::slice::from_ref(queries), mode)?;
            let r = load_poses(refs, mode)?;
            let summary = analyze(&q, &r, *stride, *rho, *tau)?;
            let mut params = summary.to_key_values();
            params.set("inputs", "queries", queries.display().to_string());
            let refs: Vec<String> = refs.iter().map(|p| p.display().to_string()).collect();
            params.set("inputs", "refs", refs.join(","));
            let dir = run_dir(&cli.out_dir, &hash)?;
            write(&dir.join("summary.txt"), &params.to_string())?;
            write(&dir.join("summary.csv"), &summary.to_csv())?;
            println!("{}", dir.display());
            print!("{}", summary.to_key_values());
        }
        Command::Report { archive } => {
            let (reports, _) = load_report(archive)?;
            for r in &reports {
                let (t, s) = recompute_medians(r);
                if t != r.target_error || s != r.source_error {
                    return Err(CliError::Failed(format!("stored medians of {} disagree with its predictions", r.run_id())));
                }
            }
            let dir = run_dir(&cli.out_dir, &hash)?;
            let table = markdown_table(&reports);
            write(&dir.join("table.md"), &table)?;
            write(&dir.join("medians.csv"), &medians_csv(&reports))?;
            println!("{}", dir.display());
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("ERROR: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
