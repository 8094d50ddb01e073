use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::config::{parse_list, parse_n_grid, Experiment, ExperimentConfig};
use super::repro::{find_target, repro_catalog, REPRO_SEED};
use super::{execute, execute_target};
use crate::error::{Error, Result};
use crate::finite::{EmVariant, StopRule};
use crate::kernel::DensityKernel;
use crate::population::nu_from_beta;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "EM2MLR_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "em2mlr",
    version,
    about = "EM laboratory for overspecified mixed linear regression"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON experiment config; inline flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Moment table over the alpha x nu grid plus closed-form checks.
    Moments(Overrides),
    /// Population EM trajectory with bound envelopes.
    Population(Overrides),
    /// Convergence bounds, contraction margin and iteration budget.
    Bounds(Overrides),
    /// One-step dynamic-equation residuals over the alpha x beta grid.
    Dynamics(Overrides),
    /// A single finite-sample EM run.
    Finite(Overrides),
    /// Final-alpha sweep over n.
    Sweep(Overrides),
    /// Low-SNR perturbative, dynamic and Monte Carlo updates.
    Lowsnr(Overrides),
    /// Moment table only.
    DumpMoments(Overrides),
    /// Run a named reproduction target.
    Repro(ReproArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// `bessel` or `normal`.
    #[arg(long)]
    pub kernel: Option<DensityKernel>,
    #[arg(long, allow_hyphen_values = true)]
    pub alpha0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub nu0: Option<f64>,
    /// Initial imbalance; sets `nu0 = atanh(beta0)`.
    #[arg(long, allow_hyphen_values = true, conflicts_with_all = ["nu0", "pi0"])]
    pub beta0: Option<f64>,
    /// Initial weight `pi0(1)`; sets `nu0`.
    #[arg(long, conflicts_with = "nu0")]
    pub pi0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub rho0: Option<f64>,
    /// Number of EM steps.
    #[arg(long = "T")]
    pub steps: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    /// `2^a..2^b` or a comma-separated list.
    #[arg(long)]
    pub ngrid: Option<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub eta: Option<f64>,
    /// `pi*(1) - pi*(2)`.
    #[arg(long, allow_hyphen_values = true)]
    pub beta_star: Option<f64>,
    /// Monte Carlo samples per low-SNR point.
    #[arg(long)]
    pub samples: Option<usize>,
    /// `standard` or `easy`.
    #[arg(long)]
    pub variant: Option<EmVariant>,
    /// Reuse one batch for every step instead of resampling.
    #[arg(long)]
    pub fixed_batch: bool,
    /// Let the mixing weights evolve in finite-sample runs.
    #[arg(long)]
    pub free_weights: bool,
    /// `budget` or `plateau`.
    #[arg(long, value_parser = parse_stop_rule)]
    pub stop_rule: Option<StopRule>,
    #[arg(long)]
    pub alphas: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub nus: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub betas: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub rhos: Option<String>,
    #[arg(long)]
    pub etas: Option<String>,
}

fn parse_stop_rule(s: &str) -> std::result::Result<StopRule, String> {
    match s {
        "budget" => Ok(StopRule::Budget),
        "plateau" => Ok(StopRule::Plateau),
        other => Err(format!("unknown stop rule `{other}`")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct ReproArgs {
    /// Target name; see `--list`.
    #[arg(long, required_unless_present = "list")]
    pub figure: Option<String>,
    #[arg(long)]
    pub list: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        if let Some(k) = self.kernel {
            cfg.kernel = k;
        }
        set(&mut cfg.initial.alpha0, self.alpha0);
        set(&mut cfg.initial.nu0, self.nu0);
        if let Some(b) = self.beta0 {
            if !(b.abs() < 1.0) {
                return Err(Error::Config(format!("--beta0 must lie in (-1, 1), got {b}")));
            }
            cfg.initial.nu0 = nu_from_beta(b);
        }
        if let Some(p) = self.pi0 {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config(format!("--pi0 must lie in (0, 1), got {p}")));
            }
            cfg.initial.nu0 = nu_from_beta(2.0 * p - 1.0);
        }
        set(&mut cfg.initial.rho0, self.rho0);
        if let Some(t) = self.steps {
            cfg.schedule.steps = t;
        }
        set(&mut cfg.schedule.epsilon, self.epsilon);
        if let Some(d) = self.d {
            cfg.model.d = d;
        }
        set(&mut cfg.model.sigma, self.sigma);
        if let Some(n) = self.n {
            cfg.schedule.n = n;
        }
        if let Some(g) = &self.ngrid {
            cfg.schedule.n_grid = parse_n_grid(g)?;
        }
        if let Some(t) = self.trials {
            cfg.schedule.trials = t;
        }
        set(&mut cfg.model.eta, self.eta);
        if let Some(b) = self.beta_star {
            cfg.model.pi_star = (0.5 * (1.0 + b), 0.5 * (1.0 - b));
        }
        if let Some(s) = self.samples {
            cfg.schedule.samples = s;
        }
        if let Some(v) = self.variant {
            cfg.schedule.variant = v;
        }
        if self.fixed_batch {
            cfg.schedule.resample = false;
        }
        if self.free_weights {
            cfg.schedule.fixed_weights = false;
        }
        if let Some(r) = self.stop_rule {
            cfg.schedule.stop_rule = r;
        }
        let grids = [
            (&self.alphas, &mut cfg.grids.alphas, "--alphas"),
            (&self.nus, &mut cfg.grids.nus, "--nus"),
            (&self.betas, &mut cfg.grids.betas, "--betas"),
            (&self.rhos, &mut cfg.grids.rhos, "--rhos"),
            (&self.etas, &mut cfg.grids.etas, "--etas"),
        ];
        for (src, dst, what) in grids {
            if let Some(text) = src {
                *dst = parse_list(text, what)?;
            }
        }
        Ok(())
    }
}

/// Resolve the effective config: file (or defaults), then inline flags.
pub fn resolve_config(cli: &Cli, experiment: Experiment, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.experiment = experiment;
    overrides.apply(&mut cfg)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn dispatch(cli: &Cli) -> Result<bool> {
    let (experiment, overrides) = match &cli.command {
        Command::Moments(o) => (Experiment::Moments, o),
        Command::Population(o) => (Experiment::Population, o),
        Command::Bounds(o) => (Experiment::Bounds, o),
        Command::Dynamics(o) => (Experiment::Dynamics, o),
        Command::Finite(o) => (Experiment::Finite, o),
        Command::Sweep(o) => (Experiment::Sweep, o),
        Command::Lowsnr(o) => (Experiment::Lowsnr, o),
        Command::DumpMoments(o) => (Experiment::DumpMoments, o),
        Command::Repro(args) => return repro(cli, args),
    };
    let cfg = resolve_config(cli, experiment, overrides)?;
    let pool = thread_pool()?;
    let (output, _) = pool.install(|| execute(&cfg))?;
    for note in &output.notes {
        println!("{note}");
    }
    for f in &output.files {
        println!("wrote {}", cfg.output_dir.join(f).display());
    }
    Ok(true)
}

fn repro(cli: &Cli, args: &ReproArgs) -> Result<bool> {
    if args.list {
        for t in repro_catalog() {
            println!("{:<22}{}", t.name, t.about);
        }
        return Ok(true);
    }
    let name = args.figure.as_deref().unwrap_or_default();
    let target = find_target(name)?;
    if cli.config.is_some() {
        return Err(Error::Config(
            "repro targets pin their own parameters; drop --config".into(),
        ));
    }
    let dir = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("em2mlr-out"))
        .join(target.name);
    let pool = thread_pool()?;
    let (outcome, _) = pool.install(|| execute_target(target, cli.seed.unwrap_or(REPRO_SEED), &dir))?;
    for c in &outcome.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("outputs in {}", dir.display());
    Ok(outcome.passed())
}

/// Parse `argv` and run. Returns the process exit code: 0 on success, 1 on
/// invalid input, 2 on numerical failure or a failed reproduction check.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
