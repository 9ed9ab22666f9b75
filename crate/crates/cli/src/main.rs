use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hbmodal::io::{parse_scenario, Algorithm, ProjectConfig};
use hbmodal_cli::{cmd_fuse, cmd_identify, cmd_predict, cmd_spectrum, cmd_synth, CliError, FuseOptions};

#[derive(Parser)]
#[command(name = "hbmodal", version, about = "Hierarchical Bayesian fusion of FFT modal identification results")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Project (or scenario, for `synth`) configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the project's `output` key.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct FuseArgs {
    #[command(flatten)]
    common: Common,
    /// `laplace` or `tmcmc`; overrides the project setting.
    #[arg(long)]
    algorithm: Option<String>,
    /// Directory holding `<mode>/<dataset>.json` evidence files; defaults to `<out>/evidence`.
    #[arg(long)]
    evidence: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Averaged singular value spectrum for choosing bands.
    Spectrum(Common),
    /// Per-dataset Bayesian FFT identification in each band.
    Identify(Common),
    /// Hierarchical fusion of the evidence files.
    Fuse(FuseArgs),
    /// Fusion, reporting only the predictive distribution.
    Predict(FuseArgs),
    /// Synthetic records and their ground truth.
    Synth(Common),
}

fn setup_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn project(common: &Common) -> Result<(ProjectConfig, PathBuf), CliError> {
    let mut cfg = ProjectConfig::load(&common.config).map_err(|e| CliError::Usage(format!("{}: {e}", common.config.display())))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output.clone());
    Ok((cfg, out))
}

fn fuse_options(args: &FuseArgs, cfg: &ProjectConfig, out: &std::path::Path) -> Result<FuseOptions, CliError> {
    let algorithm = match &args.algorithm {
        Some(a) => a.parse::<Algorithm>().map_err(|e| CliError::Usage(e.to_string()))?,
        None => cfg.algorithm,
    };
    Ok(FuseOptions {
        evidence_dir: args.evidence.clone().unwrap_or_else(|| out.join("evidence")),
        algorithm,
        seed: cfg.seed,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Spectrum(c) => {
            setup_threads(c.threads)?;
            let (cfg, out) = project(&c)?;
            let path = cmd_spectrum(&cfg, &out)?;
            log::info!("wrote {}", path.display());
        }
        Command::Identify(c) => {
            setup_threads(c.threads)?;
            let (cfg, out) = project(&c)?;
            let report = cmd_identify(&cfg, &out)?;
            let failed = report.results.iter().filter(|s| !s.ok).count();
            if failed > 0 {
                log::warn!("{failed} of {} identifications failed", report.results.len());
            }
        }
        Command::Fuse(a) => {
            setup_threads(a.common.threads)?;
            let (cfg, out) = project(&a.common)?;
            let opts = fuse_options(&a, &cfg, &out)?;
            let report = cmd_fuse(&cfg, &opts, &out)?;
            for w in report.modes.iter().flat_map(|m| m.warnings.iter().map(move |w| (&m.mode, w))) {
                log::warn!("{}: {}", w.0, w.1);
            }
        }
        Command::Predict(a) => {
            setup_threads(a.common.threads)?;
            let (cfg, out) = project(&a.common)?;
            let opts = fuse_options(&a, &cfg, &out)?;
            let pred = cmd_predict(&cfg, &opts, &out)?;
            for m in &pred.modes {
                for (i, name) in m.parameters.iter().enumerate() {
                    println!("{} {name}: mean {} sd {}", m.mode, m.laplace.mean[i], m.laplace.sd[i]);
                }
            }
        }
        Command::Synth(c) => {
            setup_threads(c.threads)?;
            let text = std::fs::read_to_string(&c.config).map_err(|e| CliError::Usage(format!("{}: {e}", c.config.display())))?;
            let mut sc = parse_scenario(&text).map_err(|e| CliError::Usage(format!("{}: {e}", c.config.display())))?;
            if let Some(seed) = c.seed {
                sc.seed = seed;
            }
            let out = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let truth = cmd_synth(&sc, &out)?;
            log::info!("wrote {} records to {}", truth.datasets.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
