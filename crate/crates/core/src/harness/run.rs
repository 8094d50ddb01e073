//! One runner per experiment kind. Each writes its CSVs into the output
//! directory and returns the file names plus a gnuplot fragment.

use std::path::Path;

use rayon::prelude::*;

use super::config::{Experiment, ExperimentConfig};
use super::csv::{Cell, Table};
use crate::error::{Error, Result};
use crate::expectations::{Expectations, MomentRow, SERIES_ALPHA_LIMIT};
use crate::finite::{
    error_sweep, random_direction, run_finite, FiniteState, MixtureModel, StreamId, SweepResult, SweepSpec,
};
use crate::kernel::{closed_form_moment, ClosedFormMoment, DensityKernel};
use crate::lowsnr::{compare_paths, LowSnrRow, LowSnrState};
use crate::population::{
    contraction_report, lambert_upper_bound, population_step, run_population, iteration_count,
    PopulationState, Trajectory,
};

/// Cap on population steps when searching for the first `alpha <= epsilon`.
pub const ITERATION_SEARCH_CAP: usize = 1_000_000;

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    /// CSV files written, relative to the output directory.
    pub files: Vec<String>,
    pub plot: String,
    /// Short human-readable summary lines.
    pub notes: Vec<String>,
}

impl RunOutput {
    pub(crate) fn table(&mut self, dir: &Path, name: &str, table: &Table) -> Result<()> {
        table.write(&dir.join(name))?;
        self.files.push(name.to_string());
        Ok(())
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    let engine = Expectations::new(cfg.kernel, cfg.quad)?;
    match cfg.experiment {
        Experiment::Moments => moments(cfg, &engine, dir),
        Experiment::DumpMoments => dump_moments(cfg, &engine, dir),
        Experiment::Population => population(cfg, &engine, dir),
        Experiment::Bounds => bounds(cfg, &engine, dir),
        Experiment::Dynamics => dynamics(cfg, &engine, dir),
        Experiment::Finite => finite(cfg, dir),
        Experiment::Sweep => sweep(cfg, dir),
        Experiment::Lowsnr => lowsnr(cfg, &engine, dir),
    }
}

pub const MOMENT_HEADER: [&str; 10] = [
    "alpha", "nu", "m", "n", "l", "tanh2x", "tanh2x2", "J", "series_m", "series_n",
];

pub fn moment_table(engine: &Expectations, alphas: &[f64], nus: &[f64]) -> Result<Table> {
    let points: Vec<(f64, f64)> = alphas.iter().flat_map(|&a| nus.iter().map(move |&v| (a, v))).collect();
    let rows: Vec<Result<MomentRow>> = points.par_iter().map(|&(a, v)| engine.moment_row(a, v)).collect();
    let mut t = Table::new(&MOMENT_HEADER);
    for r in rows {
        let r = r?;
        t.push_floats(&[
            r.alpha, r.nu, r.m, r.n, r.l, r.tanh2x, r.tanh2x2, r.j, r.series_m, r.series_n,
        ])?;
    }
    Ok(t)
}

fn dump_moments(cfg: &ExperimentConfig, engine: &Expectations, dir: &Path) -> Result<RunOutput> {
    let mut out = RunOutput::default();
    out.table(
        dir,
        "moments.csv",
        &moment_table(engine, &cfg.grids.alphas, &cfg.grids.nus)?,
    )?;
    out.plot = moments_plot();
    Ok(out)
}

fn moments_plot() -> String {
    "set title 'm(alpha, nu) and its small-alpha series'\nset xlabel 'alpha'\n\
     plot 'moments.csv' using 1:3 with points title 'm', '' using 1:9 with lines title 'series m'\n"
        .to_string()
}

fn moments(cfg: &ExperimentConfig, engine: &Expectations, dir: &Path) -> Result<RunOutput> {
    let mut out = dump_moments(cfg, engine, dir)?;
    let mut t = Table::new(&["power", "quadrature", "exact", "rel_err"]);
    for k in 1..=3u32 {
        let q = engine.expect(|x| x.powi(2 * k as i32))?.value;
        let exact = match cfg.kernel {
            DensityKernel::BesselProductNormal => closed_form_moment(ClosedFormMoment::EvenPower(k))?,
            DensityKernel::StandardNormal => (1..=k).map(|j| (2 * j - 1) as f64).product(),
        };
        let rel = (q - exact).abs() / exact;
        t.push(vec![Cell::from(2 * k), q.into(), exact.into(), rel.into()])?;
        out.notes
            .push(format!("E[X^{}] = {q:.12} (exact {exact}, rel err {rel:.2e})", 2 * k));
    }
    out.table(dir, "closed_forms.csv", &t)?;
    Ok(out)
}

fn trajectory_table(traj: &Trajectory) -> Result<Table> {
    let mut t = Table::new(&Trajectory::CSV_HEADER);
    for row in traj.csv_rows() {
        let mut cells: Vec<Cell> = row.iter().map(|&v| v.into()).collect();
        cells[0] = Cell::from(row[0] as usize);
        t.push(cells)?;
    }
    let fp = traj.first_passage;
    let show = |o: Option<usize>| o.map_or("none".to_string(), |t| t.to_string());
    t.footer = Some(format!(
        "first_below_0.31={},first_below_0.1={},first_below_epsilon={}",
        show(fp.below_031),
        show(fp.below_01),
        show(fp.below_epsilon)
    ));
    Ok(t)
}

fn population(cfg: &ExperimentConfig, engine: &Expectations, dir: &Path) -> Result<RunOutput> {
    let i = &cfg.initial;
    let traj = run_population(engine, i.alpha0, i.nu0, cfg.schedule.steps, cfg.schedule.epsilon)?;
    let mut out = RunOutput::default();
    out.table(dir, "trajectory.csv", &trajectory_table(&traj)?)?;
    let last = traj.records.last().expect("at least one record");
    out.notes.push(format!(
        "alpha^{} = {:.6e}, beta^{} = {:.6e}",
        last.t, last.alpha, last.t, last.beta
    ));
    out.plot = "set datafile missing 'NaN'\nset logscale y\nset title 'Population EM trajectory'\nset xlabel 't'\n\
                plot 'trajectory.csv' using 1:2 with lines title 'alpha', '' using 1:4 with lines title 'upper', \
                '' using 1:5 with lines title 'lower', '' using 1:6 with points title 'contraction'\n"
        .to_string();
    Ok(out)
}

pub const BOUNDS_HEADER: [&str; 6] = [
    "t",
    "alpha",
    "sub_lower",
    "sub_upper",
    "lambert_upper",
    "contract_bound",
];

fn bounds(cfg: &ExperimentConfig, engine: &Expectations, dir: &Path) -> Result<RunOutput> {
    let i = &cfg.initial;
    let s = &cfg.schedule;
    let traj = run_population(engine, i.alpha0, i.nu0, s.steps, s.epsilon)?;
    let balanced = i.nu0 == 0.0;
    let mut t = Table::new(&BOUNDS_HEADER);
    let nan = |o: Option<f64>| o.unwrap_or(f64::NAN);
    for r in &traj.records {
        let lambert = if balanced {
            lambert_upper_bound(i.alpha0, r.t).unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        t.push(vec![
            Cell::from(r.t),
            r.alpha.into(),
            nan(r.envelope.sublinear_lower).into(),
            nan(r.envelope.sublinear_upper).into(),
            lambert.into(),
            nan(r.envelope.contraction_upper).into(),
        ])?;
    }
    let count = iteration_count(engine, i.alpha0, i.nu0, s.epsilon, ITERATION_SEARCH_CAP)?;
    let report = contraction_report(engine, &traj)?;
    let margin = if report.ratios.is_empty() {
        f64::NAN
    } else {
        report.worst_margin
    };
    t.footer = Some(format!(
        "observed={},budget={},t0={},beta_infinity={:.16e},worst_contraction_margin={:.16e}",
        count.observed, count.budget, count.t0, count.beta_infinity, margin
    ));
    let mut out = RunOutput::default();
    out.table(dir, "bounds.csv", &t)?;
    out.notes.push(format!(
        "alpha <= {} after {} steps; proof budget {}",
        s.epsilon, count.observed, count.budget
    ));
    out.plot = "set datafile missing 'NaN'\nset logscale y\nset title 'Convergence envelopes'\nset xlabel 't'\n\
                plot 'bounds.csv' using 1:2 with lines title 'alpha', '' using 1:3 with lines title 'lower', \
                '' using 1:4 with lines title 'upper', '' using 1:5 with lines title 'lambert', \
                '' using 1:6 with points title 'contraction'\n"
        .to_string();
    Ok(out)
}

pub const DYNAMICS_HEADER: [&str; 10] = [
    "alpha",
    "beta",
    "alpha_next",
    "beta_next",
    "lhs_alpha",
    "rhs_alpha",
    "resid_alpha",
    "lhs_beta",
    "rhs_beta",
    "resid_beta",
];

/// One-step residuals of the dynamic equations, normalized by `1 - beta^2`.
pub fn dynamics_table(engine: &Expectations, alphas: &[f64], betas: &[f64]) -> Result<Table> {
    let mut t = Table::new(&DYNAMICS_HEADER);
    for &a in alphas {
        for &b in betas {
            let s = PopulationState::from_beta(a, b)?;
            let next = population_step(&s, engine)?;
            let (a1, b1) = (next.alpha, next.beta());
            let scale = 1.0 - b * b;
            let lhs_a = (a - a1) / a;
            let rhs_a = b * b;
            let lhs_b = if b == 0.0 { f64::NAN } else { (b - b1) / b };
            let rhs_b = a * a1;
            t.push_floats(&[
                a,
                b,
                a1,
                b1,
                lhs_a,
                rhs_a,
                (lhs_a - rhs_a).abs() / scale,
                lhs_b,
                rhs_b,
                (lhs_b - rhs_b).abs() / scale,
            ])?;
        }
    }
    Ok(t)
}

fn dynamics(cfg: &ExperimentConfig, engine: &Expectations, dir: &Path) -> Result<RunOutput> {
    let mut out = RunOutput::default();
    out.table(
        dir,
        "dynamics.csv",
        &dynamics_table(engine, &cfg.grids.alphas, &cfg.grids.betas)?,
    )?;
    out.plot = "set title 'One-step dynamics'\nset xlabel 'beta^2 or alpha alpha'''\n\
                plot 'dynamics.csv' using 6:5 with points title '(alpha-alpha'')/alpha', x title 'identity', \
                '' using 9:8 with points title '(beta-beta'')/beta'\n"
        .to_string();
    Ok(out)
}

pub const FINITE_HEADER: [&str; 5] = ["t", "alpha", "beta", "n_n", "angle"];
pub const STREAM_HEADER: [&str; 4] = ["step", "seed", "trial", "iteration"];

fn finite(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    let m = &cfg.model;
    let s = &cfg.schedule;
    let mut theta_star = vec![0.0; m.d];
    theta_star[0] = m.eta * m.sigma;
    let model = MixtureModel {
        d: m.d,
        sigma: m.sigma,
        theta_star,
        pi_star: m.pi_star,
    };
    model.validate()?;
    let u = random_direction(m.d, StreamId::init(cfg.seed, 0));
    let state0 = FiniteState {
        theta: u.iter().map(|v| v * cfg.initial.alpha0 * m.sigma).collect(),
        nu: cfg.initial.nu0,
        fixed_weights: s.fixed_weights,
    };
    let traj = run_finite(&model, s.n, s.steps, state0, s.variant, cfg.seed, 0, s.resample)?;
    let mut t = Table::new(&FINITE_HEADER);
    for k in 0..traj.alphas.len() {
        let (nn, ang) = if k == 0 {
            (f64::NAN, f64::NAN)
        } else {
            (traj.n_n[k - 1], traj.angles[k - 1])
        };
        t.push(vec![
            Cell::from(k),
            traj.alphas[k].into(),
            traj.betas[k].into(),
            nn.into(),
            ang.into(),
        ])?;
    }
    let mut streams = Table::new(&STREAM_HEADER);
    for (k, id) in traj.streams.iter().enumerate() {
        streams.push(vec![
            Cell::from(k + 1),
            id.seed.into(),
            id.trial.into(),
            id.iteration.into(),
        ])?;
    }
    let mut out = RunOutput::default();
    out.table(dir, "finite.csv", &t)?;
    out.table(dir, "streams.csv", &streams)?;
    out.notes
        .push(format!("final alpha = {:.6e}", traj.alphas.last().unwrap()));
    out.plot = "set datafile missing 'NaN'\nset logscale y\nset title 'Finite-sample EM'\nset xlabel 't'\n\
                plot 'finite.csv' using 1:2 with lines title 'alpha'\n"
        .to_string();
    Ok(out)
}

pub fn sweep_spec(cfg: &ExperimentConfig) -> SweepSpec {
    let s = &cfg.schedule;
    SweepSpec {
        d: cfg.model.d,
        sigma: cfg.model.sigma,
        pi0: 0.5 * (1.0 + cfg.initial.nu0.tanh()),
        n_grid: s.n_grid.clone(),
        trials: s.trials,
        seed: cfg.seed,
        alpha0: cfg.initial.alpha0,
        variant: s.variant,
        resample: s.resample,
        stop_rule: s.stop_rule,
        safety: s.safety,
        window: s.window,
    }
}

pub fn sweep_tables(r: &SweepResult) -> Result<(Table, Table)> {
    let mut trials = Table::new(&SweepResult::ROW_HEADER);
    for row in &r.rows {
        trials.push(vec![
            Cell::from(row.n),
            Cell::from(row.d),
            row.pi0_imbalance.into(),
            Cell::from(row.trial),
            row.final_alpha.into(),
            row.final_beta.into(),
            Cell::from(row.steps_used),
        ])?;
    }
    let mut summary = Table::new(&SweepResult::SUMMARY_HEADER);
    for s in &r.summary {
        summary.push(vec![Cell::from(s.n), s.median_alpha.into(), s.q25.into(), s.q75.into()])?;
    }
    summary.footer = Some(r.footer());
    Ok((trials, summary))
}

fn sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    let r = error_sweep(&sweep_spec(cfg))?;
    let (trials, summary) = sweep_tables(&r)?;
    let mut out = RunOutput::default();
    out.table(dir, "sweep.csv", &trials)?;
    out.table(dir, "sweep_summary.csv", &summary)?;
    out.notes.push(format!(
        "slope {:.4} +/- {:.4} ({} trials aborted)",
        r.fit.slope, r.fit.stderr, r.aborted
    ));
    out.plot = "set logscale xy\nset title 'Final alpha against n'\nset xlabel 'n'\n\
                plot 'sweep_summary.csv' using 1:2:3:4 with yerrorlines title 'median alpha'\n"
        .to_string();
    Ok(out)
}

/// Low-SNR comparison over `etas x alphas x betas x rhos`, in that nesting order.
pub fn lowsnr_rows(cfg: &ExperimentConfig, engine: &Expectations) -> Result<Vec<LowSnrRow>> {
    let g = &cfg.grids;
    let mut states = Vec::new();
    for &eta in &g.etas {
        for &a in &g.alphas {
            for &b in &g.betas {
                for &r in &g.rhos {
                    states.push(LowSnrState::new(a, b, r, eta, cfg.beta_star())?);
                }
            }
        }
    }
    let samples = cfg.schedule.samples;
    states
        .par_iter()
        .map(|s| compare_paths(s, engine, samples, cfg.seed))
        .collect()
}

fn lowsnr(cfg: &ExperimentConfig, engine: &Expectations, dir: &Path) -> Result<RunOutput> {
    if cfg.grids.alphas.iter().any(|&a| a >= SERIES_ALPHA_LIMIT) {
        return Err(Error::Config(format!(
            "grids.alphas: low-SNR runs need alpha < {SERIES_ALPHA_LIMIT}"
        )));
    }
    let rows = lowsnr_rows(cfg, engine)?;
    let mut t = Table::new(&LowSnrRow::CSV_HEADER);
    for r in &rows {
        t.push_floats(&r.csv_row())?;
    }
    let mut out = RunOutput::default();
    out.table(dir, "lowsnr.csv", &t)?;
    let worst = rows.iter().map(LowSnrRow::gap).fold(0.0, f64::max);
    out.notes
        .push(format!("{} points, largest perturbative gap {worst:.3e}", rows.len()));
    out.plot = "set datafile missing 'NaN'\nset title 'Perturbative against Monte Carlo alpha'\n\
                plot 'lowsnr.csv' using 11:5 with points title 'alpha', x title 'identity'\n"
        .to_string();
    Ok(out)
}
