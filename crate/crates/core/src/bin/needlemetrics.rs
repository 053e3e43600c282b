use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use needlemetrics::config::RunConfig;
use needlemetrics::ingest::Condition;
use needlemetrics::pipeline;
use needlemetrics::synth::{self, CohortProfile, TrialScript};
use needlemetrics::Error;

/// Kinematic skill metrics for needle-driving trials.
///
/// Settings come from the config file, then NEEDLEMETRICS_SECTION__KEY
/// environment variables, then flags.
#[derive(Parser, Debug)]
#[command(name = "needlemetrics", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true, env = "NEEDLEMETRICS_CONFIG")]
    config: Option<PathBuf>,
    /// Restrict to one condition (teleoperated or open).
    #[arg(long, global = true)]
    condition: Option<Condition>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory for all stage artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Manual segmentation overrides CSV.
    #[arg(long, global = true)]
    overrides: Option<PathBuf>,
    /// Open-condition calibration recording.
    #[arg(long, global = true)]
    calibration: Option<PathBuf>,
    /// Log progress to stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate and preprocess the manifest's trials into the ingest cache.
    Ingest,
    /// Find segment boundaries; writes the segmentation report.
    Segment,
    /// Per-segment metrics with outlier removal; writes the metrics table.
    Metrics,
    /// Early/late mixed ANOVA per condition, segment and metric.
    Stats,
    /// Plot-ready learning-curve and summary tables.
    Report,
    /// Every stage in order.
    Run,
    /// Fit tracker lever arms from a calibration recording.
    Calibrate {
        /// Recording to fit; defaults to the configured calibration path.
        recording: Option<PathBuf>,
    },
    /// Generate a synthetic trial or cohort with ground-truth sidecars.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Destination directory.
    dir: PathBuf,
    /// Generate a two-group cohort with manifest instead of a single trial.
    #[arg(long)]
    cohort: bool,
    #[arg(long, default_value_t = 6, requires = "cohort")]
    experienced: usize,
    #[arg(long, default_value_t = 9, requires = "cohort")]
    novice: usize,
    #[arg(long, default_value_t = 20, requires = "cohort")]
    trials: u32,
    /// Draw both groups from the same profile.
    #[arg(long, requires = "cohort")]
    null: bool,
    /// Single trial from a JSON script instead of the condition's default.
    #[arg(long, conflicts_with = "cohort")]
    script: Option<PathBuf>,
    /// File stem of the single trial.
    #[arg(long, default_value = "synthetic", conflicts_with = "cohort")]
    name: String,
}

fn load_config(g: &Global) -> needlemetrics::Result<RunConfig> {
    let mut c = RunConfig::load(g.config.as_deref(), std::env::vars())?;
    if g.condition.is_some() {
        c.condition = g.condition;
    }
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(j) = g.jobs {
        c.jobs = j;
    }
    if let Some(o) = &g.out {
        c.paths.out = o.clone();
    }
    for (slot, flag) in [
        (&mut c.paths.manifest, &g.manifest),
        (&mut c.paths.overrides, &g.overrides),
        (&mut c.paths.calibration, &g.calibration),
    ] {
        if flag.is_some() {
            *slot = flag.clone();
        }
    }
    c.validate()?;
    Ok(c)
}

fn synth_command(config: &RunConfig, args: &SynthArgs) -> needlemetrics::Result<()> {
    if args.cohort {
        let conditions = match config.condition {
            Some(c) => vec![c],
            None => vec![Condition::Teleoperated, Condition::Open],
        };
        let mut plan = Vec::new();
        for c in conditions {
            let profile = if args.null {
                CohortProfile::null(c, args.experienced, args.novice, args.trials)
            } else {
                CohortProfile::separated(c, args.experienced, args.novice, args.trials)
            };
            plan.extend(synth::plan_cohort(&profile, config.seed)?);
        }
        let manifest = pipeline::with_pool(config.jobs, || synth::write_cohort(&args.dir, &plan, config.seed))?;
        println!("{} trials, manifest {}", plan.len(), manifest.display());
        return Ok(());
    }
    let script = match &args.script {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)?
        }
        None => match config.condition.unwrap_or(Condition::Teleoperated) {
            Condition::Teleoperated => TrialScript::teleoperated(),
            Condition::Open => TrialScript::open(),
        },
    };
    let trial = synth::generate_trial(&script, config.seed, &args.name)?;
    std::fs::create_dir_all(&args.dir).map_err(|e| Error::Data(format!("{}: {e}", args.dir.display())))?;
    let path = synth::write_trial(&args.dir, &args.name, &trial)?;
    println!("{}", path.display());
    Ok(())
}

fn calibrate_command(config: &RunConfig, recording: Option<&Path>) -> needlemetrics::Result<()> {
    let recording = recording
        .or(config.paths.calibration.as_deref())
        .ok_or_else(|| Error::Config("no calibration recording given".into()))?;
    let model = pipeline::calibrate(config, recording)?;
    println!("{}", serde_json::to_string_pretty(&model)?);
    Ok(())
}

fn execute(cli: &Cli) -> needlemetrics::Result<()> {
    let config = load_config(&cli.global)?;
    match &cli.command {
        Command::Ingest => {
            let index = pipeline::ingest(&config)?;
            let cached = index.iter().filter(|e| e.cache.is_some()).count();
            println!("ingested {cached} of {} trials", index.len());
        }
        Command::Segment => {
            let rows = pipeline::segment(&config)?;
            let failed = rows.iter().filter(|r| r.failure_reason.is_some()).count();
            println!(
                "segmented {} trials, {failed} need manual boundaries",
                rows.len() - failed
            );
        }
        Command::Metrics => {
            let records = pipeline::compute_metrics(&config)?;
            println!("{} segment records", records.len());
        }
        Command::Stats => {
            let report = pipeline::compute_stats(&config)?;
            println!("{} analyses", report.analyses.len());
        }
        Command::Report => {
            let files = pipeline::report(&config)?;
            println!("{} report tables", files.len());
        }
        Command::Run => {
            pipeline::run(&config)?;
            info!("artifacts under {}", config.out_dir().display());
            println!("{}", config.out_dir().display());
        }
        Command::Calibrate { recording } => calibrate_command(&config, recording.as_deref())?,
        Command::Synth(args) => synth_command(&config, args)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
