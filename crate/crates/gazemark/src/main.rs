use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gazemark::config::RunConfig;
use gazemark::pipeline::{self, ConditionSelection, ValidationFailure};
use gazemark_core::task::TaskKind;

/// Exit codes: 0 success (possibly with skips), 1 configuration or
/// validation error, 2 runtime failure with partial progress preserved.
const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(
    name = "gazemark",
    version,
    about = "Render gaze heatmap overlays on chest X-rays, build a five-task \
             evaluation set, query a vision-language endpoint with and without \
             the overlays, and score both conditions side by side."
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "gazemark.toml")]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Restrict to a comma-separated task subset (gen,sum,err,ddx,vqa).
    #[arg(long, global = true, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a heatmap overlay for every image with a gaze recording.
    Render,
    /// Build the task manifest from reports, gold labels, and overlays.
    Build,
    /// Query the endpoint for every manifest instance.
    Run {
        /// Condition(s) to query: gaze, no_gaze, or both.
        #[arg(long, default_value = "both")]
        condition: ConditionSelection,
    },
    /// Score cached responses into report.json and report.md.
    Score,
    /// Check configuration and data without writing anything.
    Validate,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut config = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(tasks) = &cli.tasks {
        config.tasks = tasks
            .iter()
            .map(|t| t.parse::<TaskKind>())
            .collect::<Result<Vec<_>, _>>()?;
        config = config.validated()?;
    }
    Ok(config)
}

fn dispatch(cli: &Cli, config: &RunConfig) -> anyhow::Result<()> {
    match &cli.command {
        Command::Render => {
            let s = pipeline::cmd_render(config)?;
            println!(
                "render: {} image(s): {} rendered, {} up to date, {} missing gaze",
                s.images, s.rendered, s.up_to_date, s.missing_gaze
            );
        }
        Command::Build => {
            let s = pipeline::cmd_build(config)?;
            let total: usize = s.instances.values().sum();
            println!(
                "build: {total} instance(s) from {} study(ies) -> {}",
                s.studies,
                config.manifest_path().display()
            );
        }
        Command::Run { condition } => {
            let s = pipeline::cmd_run(config, *condition)?;
            println!(
                "run: {} exchange(s) succeeded under {:?}",
                s.succeeded,
                s.conditions.iter().map(|c| c.slug()).collect::<Vec<_>>()
            );
        }
        Command::Score => {
            let report = pipeline::cmd_score(config)?;
            print!("{}", report.to_markdown());
            println!(
                "\nwrote {} and {}",
                config.report_json_path().display(),
                config.report_md_path().display()
            );
        }
        Command::Validate => {
            let report = pipeline::cmd_validate(config)?;
            println!("validate: ok ({} warning(s))", report.warnings.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    let config = match load_config(&cli) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    match dispatch(&cli, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ValidationFailure>().is_some() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}
