//! Experiment harness: JSON configs, CSV output, run manifests, named
//! reproduction targets and the command-line front end.

pub mod cli;
pub mod config;
pub mod csv;
pub mod manifest;
pub mod repro;
pub mod run;

use std::fs;
use std::path::Path;

pub use config::{Experiment, ExperimentConfig};
pub use manifest::RunManifest;
pub use repro::{find_target, repro_catalog, ReproOutcome, ReproTarget};
pub use run::{run_experiment, RunOutput};

use crate::error::Result;

pub const PLOT_SCRIPT: &str = "plot.gp";
pub const CONFIG_COPY: &str = "config.json";

fn plot_script(body: &str) -> String {
    format!(
        "# gnuplot script; run from this directory with `gnuplot plot.gp`.\n\
         set datafile separator ','\nset key autotitle columnhead\n\
         set terminal pngcairo size 900,600\nset output 'plot.png'\n{body}"
    )
}

/// Writes the plot script, then a manifest covering every output file.
fn finish(dir: &Path, mut output: RunOutput, config_json: &str, started: u64) -> Result<(RunOutput, RunManifest)> {
    fs::write(dir.join(PLOT_SCRIPT), plot_script(&output.plot))?;
    fs::write(dir.join(CONFIG_COPY), config_json)?;
    output.files.push(PLOT_SCRIPT.to_string());
    output.files.push(CONFIG_COPY.to_string());
    let hash = manifest::sha256_hex(config_json.as_bytes());
    let m = RunManifest::build(hash, started, dir, &output.files)?;
    m.write(dir)?;
    Ok((output, m))
}

/// Validate `cfg`, run it into `cfg.output_dir` and write the manifest.
pub fn execute(cfg: &ExperimentConfig) -> Result<(RunOutput, RunManifest)> {
    cfg.validate()?;
    let started = manifest::unix_now();
    fs::create_dir_all(&cfg.output_dir)?;
    let output = run_experiment(cfg, &cfg.output_dir)?;
    finish(&cfg.output_dir, output, &(cfg.to_json()? + "\n"), started)
}

/// Run a reproduction target into `dir`.
pub fn execute_target(target: &ReproTarget, seed: u64, dir: &Path) -> Result<(ReproOutcome, RunManifest)> {
    let started = manifest::unix_now();
    fs::create_dir_all(dir)?;
    let mut outcome = target.run(seed, dir)?;
    let params = serde_json::to_string_pretty(&outcome.params)? + "\n";
    let (output, m) = finish(dir, std::mem::take(&mut outcome.output), &params, started)?;
    outcome.output = output;
    Ok((outcome, m))
}
