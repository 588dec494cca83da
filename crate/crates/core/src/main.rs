use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ompsynth::config::Config;
use ompsynth::fix::FeedbackSource;
use ompsynth::model::Tool;
use ompsynth::pipeline::{doctor, Options, Pipeline, StageSummary};
use ompsynth::{Error, Result};

#[derive(Parser)]
#[command(name = "ompsynth", version, about = "OpenMP world-model data pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Mock endpoints and the stub toolchain.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Serve completions from this fixture directory.
    #[arg(long, global = true, value_name = "DIR")]
    mock_endpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ToolArg {
    Tsan,
    Caliper,
}

impl From<ToolArg> for Tool {
    fn from(t: ToolArg) -> Tool {
        match t {
            ToolArg::Tsan => Tool::Tsan,
            ToolArg::Caliper => Tool::Caliper,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Problem variants from the seed pool.
    Explore,
    /// Reference implementation and harness per problem.
    Harness,
    /// Candidate implementations per problem, model and strategy.
    Candidates,
    /// Ground-truth tool runs.
    Toolrun {
        #[arg(long, value_enum)]
        tool: ToolArg,
    },
    /// Reasoning traces for tool outcomes.
    Cot {
        #[arg(long, value_enum)]
        tool: ToolArg,
        #[arg(long)]
        no_hindsight: bool,
    },
    /// Training tuples, SFT export and nested subsets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// World-model evaluation.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Race-fixing loop over sanitizer-flagged candidates.
    Fix {
        #[arg(long = "actor")]
        actors: Vec<String>,
        #[arg(long = "source", value_parser = parse_source, default_values = ["self", "oracle", "world_model"])]
        sources: Vec<FeedbackSource>,
        #[arg(long, default_value_t = 1)]
        passes: u32,
    },
    /// Summary of the run directory.
    Report,
    /// Check the compiler and endpoint setup.
    Doctor,
    /// Every stage from explore to dataset export.
    Run {
        #[arg(long)]
        no_hindsight: bool,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    Build {
        #[arg(long, value_enum)]
        tool: Option<ToolArg>,
        #[arg(long)]
        no_hindsight: bool,
    },
    Export {
        #[arg(long, value_enum)]
        tool: Option<ToolArg>,
    },
    Subsample {
        #[arg(long, value_enum)]
        tool: Option<ToolArg>,
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<usize>>,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    Race {
        /// Benchmark directory; the run's own candidates when omitted.
        #[arg(long)]
        bench: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long = "endpoint")]
        endpoints: Vec<String>,
    },
    Ranking {
        #[arg(long = "endpoint")]
        endpoints: Vec<String>,
    },
}

fn parse_source(s: &str) -> Result<FeedbackSource, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn tools(t: Option<ToolArg>) -> Vec<Tool> {
    match t {
        Some(t) => vec![t.into()],
        None => vec![Tool::Tsan, Tool::Caliper],
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Explore => "explore",
        Command::Harness => "harness",
        Command::Candidates => "candidates",
        Command::Toolrun { .. } => "toolrun",
        Command::Cot { .. } => "cot",
        Command::Dataset(DatasetCmd::Build { .. }) => "dataset build",
        Command::Dataset(DatasetCmd::Export { .. }) => "dataset export",
        Command::Dataset(DatasetCmd::Subsample { .. }) => "dataset subsample",
        Command::Eval(EvalCmd::Race { .. }) => "eval race",
        Command::Eval(EvalCmd::Ranking { .. }) => "eval ranking",
        Command::Fix { .. } => "fix",
        Command::Report => "report",
        Command::Doctor => "doctor",
        Command::Run { .. } => "run",
    }
}

fn dispatch(p: &Pipeline, cmd: &Command, out: &mut Vec<StageSummary>) -> Result<()> {
    match cmd {
        Command::Explore => out.push(p.explore()?),
        Command::Harness => out.push(p.harness()?),
        Command::Candidates => out.push(p.candidates()?),
        Command::Toolrun { tool } => out.push(p.toolrun((*tool).into())?),
        Command::Cot { tool, no_hindsight } => out.push(p.cot((*tool).into(), !no_hindsight)?),
        Command::Dataset(DatasetCmd::Build { tool, no_hindsight }) => {
            for t in tools(*tool) {
                out.push(p.dataset_build(t, Some(!no_hindsight))?);
            }
        }
        Command::Dataset(DatasetCmd::Export { tool }) => {
            for t in tools(*tool) {
                out.push(p.dataset_export(t)?);
            }
        }
        Command::Dataset(DatasetCmd::Subsample { tool, targets }) => {
            for t in tools(*tool) {
                out.push(p.dataset_subsample(t, targets.as_deref())?);
            }
        }
        Command::Eval(EvalCmd::Race {
            bench,
            labels,
            endpoints,
        }) => out.push(p.eval_race(bench.as_deref(), labels.as_deref(), endpoints)?),
        Command::Eval(EvalCmd::Ranking { endpoints }) => out.push(p.eval_ranking(endpoints)?),
        Command::Fix {
            actors,
            sources,
            passes,
        } => out.push(p.fix(actors, sources, *passes)?),
        Command::Report => out.push(p.report()?),
        Command::Run { no_hindsight } => {
            for s in p.run_all(!no_hindsight)? {
                out.push(s);
            }
        }
        Command::Doctor => unreachable!("handled before the pipeline is built"),
    }
    Ok(())
}

fn load_config(common: &Common) -> Result<Config> {
    match &common.config {
        Some(path) => Config::load(path),
        None => Ok(Config::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    if let Command::Doctor = cli.command {
        for line in doctor(&cfg)? {
            println!("{line}");
        }
        return Ok(());
    }
    let opts = Options {
        run_dir: cli.common.run_dir.clone(),
        dry_run: cli.common.dry_run,
        mock_endpoint: cli.common.mock_endpoint.clone(),
    };
    let pipeline = Pipeline::new(cfg, &opts)?;
    let flag = pipeline.interrupt_flag();
    if let Err(e) = ctrlc::set_handler(move || {
        eprintln!("interrupt: finishing items in flight");
        flag.store(true, Ordering::SeqCst);
    }) {
        log::warn!("cannot install the Ctrl-C handler: {e}");
    }

    let started = Instant::now();
    let mut stages = Vec::new();
    let result = dispatch(&pipeline, &cli.command, &mut stages);
    for s in &stages {
        println!(
            "{:<24} processed {:>6}  written {:>6}  failed {:>6}",
            s.stage, s.processed, s.written, s.failed
        );
    }
    let stats = pipeline.gateway.stats();
    println!("endpoint calls {}  replayed {}", stats.backend_calls, stats.replayed);
    pipeline.write_invocation(command_name(&cli.command), &stages, started, result.as_ref().err())?;
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Compile { log } = &e {
                eprintln!("{log}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
