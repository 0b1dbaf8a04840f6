//! `idsynth`: run the synthetic-identity pipeline stage by stage or end to
//! end, sweep ablations and render reports.
//!
//! Exit codes: 0 success, 2 usage error (bad flags or config, missing
//! inputs), 1 runtime error. Failures also print a one-line JSON error
//! record on stderr.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use idsynth::pipeline::{
    artifacts as art, run_ablation, run_pipeline, write_report, AblationSpec, PipelineConfig,
    RunManifest, RunOptions, Stage, StageRecord, SvgOptions,
};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "idsynth", version, about = "Reward-guided synthetic identity data pipeline")]
struct Cli {
    /// TOML config file (merged over the built-in defaults).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set rl.steps=40`. Repeatable;
    /// beats the file and IDSYNTH_* environment variables.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Master seed. Required in CI mode; otherwise taken from an existing
    /// run manifest or the clock.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// CI mode: never pick a seed implicitly.
    #[arg(long, global = true, env = "CI", value_parser = clap::builder::FalseyValueParser::new())]
    ci: bool,

    /// Log progress to stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Do not echo the resolved config to stderr.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunDir {
    /// Run directory holding the manifest and stage outputs.
    #[arg(long, value_name = "DIR")]
    run_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the target and generic worlds and the reward extractor.
    World(RunDir),
    /// Pretrain the class-conditional denoiser on the generic world.
    Pretrain(RunDir),
    /// Cold-start adaptation to the real training set.
    Coldstart(RunDir),
    /// Reward-guided policy-gradient fine-tuning.
    Rl(RunDir),
    /// Generate the synthetic pool.
    Synth(RunDir),
    /// Train the downstream classifier.
    Train(RunDir),
    /// Evaluate the downstream classifier.
    Eval(RunDir),
    /// Run every stage, reusing matching completed stages.
    Run {
        #[command(flatten)]
        dir: RunDir,
        /// Recompute every stage even if outputs can be reused.
        #[arg(long)]
        fresh: bool,
    },
    /// Sweep an ablation over seeds and write the result table.
    Ablate {
        /// Output directory for the ablation CSVs.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        #[arg(long, value_enum, default_value_t = Preset::Ladder)]
        preset: Preset,
    },
    /// Render summary.txt and SVG charts from a run or ablation directory.
    Report {
        #[command(flatten)]
        dir: RunDir,
        /// Output directory (defaults to the run directory).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 640.0)]
        width: f64,
        #[arg(long, default_value_t = 400.0)]
        height: f64,
    },
    /// Print the resolved config as TOML.
    Config,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Components added one at a time.
    Ladder,
    /// All 16 combinations of {selection, sem, cov, exp}.
    Grid,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            kind: "usage",
            message: message.into(),
        }
    }
}

impl From<idsynth::Error> for Failure {
    fn from(e: idsynth::Error) -> Self {
        if e.is_usage() {
            Failure::usage(e.to_string())
        } else {
            Failure {
                code: EXIT_RUNTIME,
                kind: "runtime",
                message: e.to_string(),
            }
        }
    }
}

impl From<config::ConfigError> for Failure {
    fn from(e: config::ConfigError) -> Self {
        Failure::usage(e.0)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                // --help / --version
                return ExitCode::SUCCESS;
            }
            let record = serde_json::json!({
                "status": "error",
                "command": null,
                "kind": "usage",
                "exit_code": EXIT_USAGE,
                "message": e.kind().to_string(),
            });
            eprintln!("{record}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("IDSYNTH_LOG", level))
        .format_timestamp(None)
        .init();
    let command = command_name(&cli.command);
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let record = serde_json::json!({
                "status": "error",
                "command": command,
                "kind": f.kind,
                "exit_code": f.code,
                "message": f.message,
            });
            eprintln!("{record}");
            ExitCode::from(f.code)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::World(_) => "world",
        Command::Pretrain(_) => "pretrain",
        Command::Coldstart(_) => "coldstart",
        Command::Rl(_) => "rl",
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Run { .. } => "run",
        Command::Ablate { .. } => "ablate",
        Command::Report { .. } => "report",
        Command::Config => "config",
    }
}

fn resolve_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let cfg = config::resolve(&config::Layers {
        file: cli.config.as_deref(),
        env: config::env_overrides(),
        sets: &cli.sets,
    })?;
    Ok(cfg)
}

fn echo_config(cli: &Cli, cfg: &PipelineConfig) -> Result<(), Failure> {
    if !cli.quiet {
        eprintln!("# resolved config\n{}", config::to_toml(cfg)?);
    }
    Ok(())
}

/// `--seed`, else the seed of an existing run, else (outside CI) the clock.
fn resolve_seed(cli: &Cli, dir: Option<&Path>) -> Result<u64, Failure> {
    if let Some(s) = cli.seed {
        return Ok(s);
    }
    if let Some(d) = dir.filter(|d| d.join(art::MANIFEST).exists()) {
        let m = RunManifest::load(d)?;
        eprintln!("using seed {} from {}", m.seed, d.join(art::MANIFEST).display());
        return Ok(m.seed);
    }
    if cli.ci {
        return Err(Failure::usage("--seed is required in CI mode"));
    }
    let seed = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    eprintln!("no --seed given; using timestamp seed {seed}");
    Ok(seed)
}

fn print_records(manifest: &RunManifest, from: usize) {
    for rec in &manifest.stages[from.min(manifest.stages.len())..] {
        print_record(rec);
    }
}

fn print_record(rec: &StageRecord) {
    let metrics: Vec<String> = rec.metrics.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!(
        "{:<10} {:?} {}{}",
        rec.stage.name(),
        rec.status,
        metrics.join(" "),
        rec.note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default()
    );
}

fn stage_command(cli: &Cli, stage: Stage, dir: &Path) -> Result<(), Failure> {
    let cfg = resolve_config(cli)?;
    let seed = resolve_seed(cli, Some(dir))?;
    echo_config(cli, &cfg)?;
    let m = run_pipeline(
        &cfg,
        seed,
        dir,
        RunOptions {
            stop_after: Some(stage),
            resume: true,
            require_previous: true,
        },
    )?;
    if let Some(rec) = m.record(stage) {
        print_record(rec);
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::World(d) => stage_command(cli, Stage::World, &d.run_dir),
        Command::Pretrain(d) => stage_command(cli, Stage::Pretrain, &d.run_dir),
        Command::Coldstart(d) => stage_command(cli, Stage::Coldstart, &d.run_dir),
        Command::Rl(d) => stage_command(cli, Stage::Rl, &d.run_dir),
        Command::Synth(d) => stage_command(cli, Stage::Synth, &d.run_dir),
        Command::Train(d) => stage_command(cli, Stage::Train, &d.run_dir),
        Command::Eval(d) => stage_command(cli, Stage::Eval, &d.run_dir),
        Command::Run { dir, fresh } => {
            let cfg = resolve_config(cli)?;
            let seed = resolve_seed(cli, Some(&dir.run_dir))?;
            echo_config(cli, &cfg)?;
            let m = run_pipeline(
                &cfg,
                seed,
                &dir.run_dir,
                RunOptions {
                    stop_after: None,
                    resume: !fresh,
                    require_previous: false,
                },
            )?;
            println!("run {} -> {}", m.run_id, dir.run_dir.display());
            print_records(&m, 0);
            Ok(())
        }
        Command::Ablate { out, seeds, preset } => {
            let cfg = resolve_config(cli)?;
            echo_config(cli, &cfg)?;
            let spec = match preset {
                Preset::Ladder => AblationSpec::ladder(seeds.clone()),
                Preset::Grid => {
                    let b = [false, true];
                    AblationSpec::grid(&b, &b, &b, &b, seeds.clone())
                }
            };
            let table = run_ablation(&spec, &cfg)?;
            std::fs::create_dir_all(out).map_err(|e| idsynth::Error::io(out, e))?;
            art::write_bytes(out, art::ABLATION_TABLE, &art::ablation_table_csv(&table)?)?;
            art::write_bytes(out, art::ABLATION_CELLS, &art::ablation_cells_csv(&table)?)?;
            art::write_bytes(out, art::ABLATION_LADDER, &art::ablation_ladder_csv(&table)?)?;
            let echo = serde_json::json!({ "spec": spec, "config": cfg });
            art::write_bytes(out, "ablation.json", &art::to_json_bytes(&echo)?)?;
            println!("{:<24} {:>5} {:>6}  accuracy", "variant", "runs", "failed");
            for r in &table.rows {
                println!(
                    "{:<24} {:>5} {:>6}  {:.4} ± {:.4}",
                    r.variant, r.runs, r.failed, r.mean_accuracy, r.std_accuracy
                );
            }
            for s in &table.monotonicity {
                println!(
                    "{} -> {}: {:+.4}{}",
                    s.from,
                    s.to,
                    s.delta,
                    if s.improves { "" } else { " (no improvement)" }
                );
            }
            Ok(())
        }
        Command::Report {
            dir,
            out,
            width,
            height,
        } => {
            if !(width.is_finite() && height.is_finite() && *width > 100.0 && *height > 100.0) {
                return Err(Failure::usage("--width and --height must exceed 100"));
            }
            let opts = SvgOptions {
                width: *width,
                height: *height,
                ..SvgOptions::default()
            };
            let target = out.as_deref().unwrap_or(&dir.run_dir);
            for name in write_report(&dir.run_dir, target, opts)? {
                println!("{}", target.join(name).display());
            }
            Ok(())
        }
        Command::Config => {
            let cfg = resolve_config(cli)?;
            print!("{}", config::to_toml(&cfg)?);
            Ok(())
        }
    }
}
