use std::path::PathBuf;
use std::process::ExitCode;

use bdl_cli::acceptance::{run_selected, AcceptOptions, ALL};
use bdl_cli::commands::{
    cmd_bootstrap, cmd_bootstrap_rerun, cmd_bounds, cmd_eval, cmd_gen, cmd_sample, cmd_train_views, with_threads,
    BOUNDS_CSV_HELP, EVAL_CSV_HELP,
};
use bdl_cli::config::{
    apply_overrides, resolve_data_dir, BoundsConfig, CliError, CliResult, ExperimentConfig, SweepConfig,
};
use bdl_core::bounds::BoundParam;
use bdl_core::diffusion::SamplerKind;
use bdl_core::evalkit::EvalConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bdl", version, about = "Bootstrapped diffusion from partial data views")]
struct Cli {
    /// Output root; falls back to BDL_DATA_DIR, then the config's output_dir.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Worker threads; 1 is the bit-exact serial mode. Default: all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log level filter (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML). Without it the desk defaults are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted overrides such as `pipeline.n0=32`, applied before validation.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default desk-scale configuration.
    DefaultConfig,
    /// Generate the full-resolution set and every view dataset.
    #[command(after_help = "Writes data/*.bin (+ .json sidecars), operators/*.json and gen-manifest.json.")]
    Gen(ConfigArgs),
    /// Train the view denoisers on datasets written by `gen`.
    #[command(after_help = "curves/view-<id>.csv columns: step,loss,bucket0,bucket1,bucket2,bucket3 \
(bucket k averages rows with diffusion time in [k/4, (k+1)/4)).")]
    TrainViews(ConfigArgs),
    /// Run or rerun the full bootstrapping pipeline.
    Bootstrap {
        #[command(subcommand)]
        action: BootstrapAction,
    },
    /// Draw samples from a trained run.
    #[command(after_help = "samples/summary.csv columns: sample,mean,rms,min,max.")]
    Sample {
        /// Run directory holding manifest.json.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = Sampler::Heun)]
        sampler: Sampler,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a trained run against the exact posterior oracle.
    #[command(after_help = EVAL_CSV_HELP)]
    Eval {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long, default_value_t = 30)]
        per_bin: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also train and evaluate the full-resolution-only baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Evaluate the generalization bound, optionally over a sweep.
    #[command(after_help = BOUNDS_CSV_HELP)]
    Bounds {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Parameter to sweep (n, k, m, u, delta_b, delta_v, rho, gamma, epsilon, ev, rademacher).
        #[arg(long)]
        sweep: Option<String>,
        /// Comma-separated sweep values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Run the acceptance suite; exits 4 if any criterion fails.
    Accept {
        /// Subset of criteria, e.g. `1,2,3`.
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<u8>,
        /// Seeds for the multi-seed criteria.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

#[derive(Subcommand)]
enum BootstrapAction {
    /// Train views, calibrate, fit the adapter and train the residual.
    #[command(after_help = "Writes manifest.json, weights.json, adapter.json, nets/*.bdlp, curves/*.csv, plots/losses.svg.")]
    Run(ConfigArgs),
    /// Rerun the configuration recorded in a manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampler {
    Euler,
    Heun,
    Stochastic,
}

impl From<Sampler> for SamplerKind {
    fn from(s: Sampler) -> Self {
        match s {
            Sampler::Euler => SamplerKind::Euler,
            Sampler::Heun => SamplerKind::Heun,
            Sampler::Stochastic => SamplerKind::Stochastic,
        }
    }
}

fn load(args: &ConfigArgs) -> CliResult<ExperimentConfig> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?,
        None => ExperimentConfig::desk_default(1).to_toml()?,
    };
    let text = apply_overrides(&text, &args.overrides)?;
    ExperimentConfig::parse(&text).map_err(|e| match (&args.config, e) {
        (Some(p), CliError::Config(m)) => CliError::Config(format!("{}: {m}", p.display())),
        (_, e) => e,
    })
}

fn run(cli: Cli) -> CliResult<()> {
    let data_dir = cli.data_dir.clone();
    let dir_for = |cfg: Option<&ExperimentConfig>| resolve_data_dir(data_dir.as_deref(), cfg);
    match cli.command {
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::desk_default(1).to_toml()?);
        }
        Command::Gen(a) => {
            let cfg = load(&a)?;
            let dir = dir_for(Some(&cfg));
            let man = cmd_gen(&cfg, &dir)?;
            println!("wrote {} artifacts to {}", man.artifacts.len(), dir.display());
        }
        Command::TrainViews(a) => {
            let cfg = load(&a)?;
            let dir = dir_for(Some(&cfg));
            let man = cmd_train_views(&cfg, &dir)?;
            println!("trained {} view networks in {}", man.artifacts.len() / 2, dir.display());
        }
        Command::Bootstrap { action } => match action {
            BootstrapAction::Run(a) => {
                let cfg = load(&a)?;
                let dir = dir_for(Some(&cfg));
                let rec = cmd_bootstrap(&cfg, &dir)?;
                for w in &rec.warnings {
                    log::warn!("{w}");
                }
                println!("manifest {}", dir.join("manifest.json").display());
            }
            BootstrapAction::Rerun { manifest } => {
                let dir = dir_for(None);
                cmd_bootstrap_rerun(&manifest, &dir)?;
                println!("manifest {}", dir.join("manifest.json").display());
            }
        },
        Command::Sample {
            run,
            count,
            steps,
            sampler,
            seed,
        } => {
            let dir = run.unwrap_or_else(|| dir_for(None));
            let cfg = bdl_cli::config::SampleConfig {
                count,
                steps,
                kind: sampler.into(),
                seed,
            };
            let path = cmd_sample(&dir, &cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Eval {
            run,
            bins,
            per_bin,
            seed,
            baseline,
        } => {
            let dir = run.unwrap_or_else(|| dir_for(None));
            let summary = cmd_eval(&dir, &EvalConfig { bins, per_bin, seed }, baseline)?;
            for r in &summary.reports {
                print!("{}", r.to_table());
            }
            if let Some(g) = summary.relative_improvement {
                println!("relative R reduction vs baseline: {:.1}%", 100.0 * g);
            }
        }
        Command::Bounds { cfg, sweep, values } => {
            let mut b = if cfg.config.is_some() || !cfg.overrides.is_empty() {
                load(&cfg)?.bounds.unwrap_or_else(BoundsConfig::worked_row)
            } else {
                BoundsConfig::worked_row()
            };
            if let Some(name) = sweep {
                let param: BoundParam = serde_json::from_value(serde_json::Value::String(name.clone()))
                    .map_err(|_| CliError::Config(format!("unknown sweep parameter {name:?}")))?;
                if values.is_empty() {
                    return Err(CliError::Config("--sweep needs --values".into()));
                }
                b.sweep = Some(SweepConfig { param, values });
            }
            let dir = dir_for(None);
            print!("{}", cmd_bounds(&b, &dir)?);
        }
        Command::Accept { criteria, seeds } => {
            let mut opts = AcceptOptions::default();
            if !seeds.is_empty() {
                opts.seeds = seeds;
            }
            let ids = if criteria.is_empty() { ALL.to_vec() } else { criteria };
            let dir = dir_for(None).join("accept");
            std::fs::create_dir_all(&dir)?;
            let results = run_selected(&ids, &opts, &dir, |r| println!("{}", r.line()));
            std::fs::write(dir.join("accept.json"), serde_json::to_string_pretty(&results)?)?;
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(CliError::Acceptance(format!("{failed} of {} criteria failed", results.len())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    let threads = cli.threads;
    match with_threads(threads, || run(cli)).and_then(|r| r) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bdl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
