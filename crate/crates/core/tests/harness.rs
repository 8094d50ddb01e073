use std::fs;
use std::path::Path;

use em2mlr::finite::{run_finite, StreamId};
use em2mlr::harness::cli;
use em2mlr::harness::csv::read_csv;
use em2mlr::harness::run::{BOUNDS_HEADER, DYNAMICS_HEADER, FINITE_HEADER, MOMENT_HEADER};
use em2mlr::harness::{execute, Experiment, ExperimentConfig, RunManifest};
use em2mlr::{EmVariant, FiniteState, MixtureModel};
use proptest::prelude::*;

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn cli_run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("em2mlr").chain(args.iter().copied()))
}

#[test]
fn cli_outputs_reread_with_their_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let out = |name: &str| tmp.path().join(name);
    let o = out("m");
    assert_eq!(
        cli_run(&[
            "dump-moments",
            "--alphas",
            "0.1,0.5",
            "--nus",
            "0,1",
            "--out",
            o.to_str().unwrap()
        ]),
        0
    );
    let t = read_csv(&o.join("moments.csv"), &MOMENT_HEADER).unwrap();
    assert_eq!(t.rows.len(), 4);

    let o = out("b");
    assert_eq!(
        cli_run(&["bounds", "--alpha0", "0.1", "--T", "50", "--out", o.to_str().unwrap()]),
        0
    );
    let t = read_csv(&o.join("bounds.csv"), &BOUNDS_HEADER).unwrap();
    let (a, lo, hi) = (
        t.column("alpha").unwrap(),
        t.column("sub_lower").unwrap(),
        t.column("sub_upper").unwrap(),
    );
    assert!((0..a.len()).all(|i| lo[i] <= a[i] && a[i] <= hi[i]));
    assert!(t.footer_value("budget").is_some());

    let o = out("d");
    assert_eq!(
        cli_run(&[
            "dynamics",
            "--alphas",
            "0.05",
            "--betas",
            "0.2",
            "--out",
            o.to_str().unwrap()
        ]),
        0
    );
    assert_eq!(
        read_csv(&o.join("dynamics.csv"), &DYNAMICS_HEADER).unwrap().rows.len(),
        1
    );

    let o = out("f");
    assert_eq!(
        cli_run(&[
            "finite",
            "--n",
            "512",
            "--T",
            "10",
            "--alpha0",
            "0.5",
            "--out",
            o.to_str().unwrap()
        ]),
        0
    );
    assert_eq!(read_csv(&o.join("finite.csv"), &FINITE_HEADER).unwrap().rows.len(), 11);

    let m = manifest(&o);
    assert!(m.outputs.iter().any(|c| c.file == "config.json"));
    for c in &m.outputs {
        let bytes = fs::read(o.join(&c.file)).unwrap();
        assert_eq!(em2mlr::harness::manifest::sha256_hex(&bytes), c.sha256);
    }
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"model\": {\"d\": 0}}").unwrap();
    assert_eq!(cli_run(&["population", "--config", bad.to_str().unwrap()]), 1);
    fs::write(&bad, "{\"modle\": {}}").unwrap();
    assert_eq!(cli_run(&["population", "--config", bad.to_str().unwrap()]), 1);
    assert_eq!(cli_run(&["no-such-command"]), 1);
    assert_eq!(cli_run(&["repro", "--figure", "no-such-target"]), 1);
    assert_eq!(cli_run(&["bounds", "--epsilon", "2"]), 1);
}

fn run_in_pool(cfg: &ExperimentConfig, threads: usize) -> RunManifest {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| execute(cfg)).unwrap().1
}

#[test]
fn outputs_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    for exp in [Experiment::Sweep, Experiment::Moments] {
        let mut cfg = ExperimentConfig {
            experiment: exp,
            seed: 11,
            ..ExperimentConfig::default()
        };
        cfg.schedule.n_grid = vec![64, 128];
        cfg.schedule.trials = 20;
        cfg.output_dir = tmp.path().join(format!("{}-1", exp.name()));
        let one = run_in_pool(&cfg, 1);
        cfg.output_dir = tmp.path().join(format!("{}-4", exp.name()));
        let four = run_in_pool(&cfg, 4);
        // config.json differs by output_dir; every data file must match.
        let data = |m: &RunManifest| {
            m.outputs
                .iter()
                .filter(|c| c.file.ends_with(".csv"))
                .cloned()
                .collect::<Vec<_>>()
        };
        assert!(!data(&one).is_empty());
        assert_eq!(data(&one), data(&four), "{}", exp.name());
    }
}

#[test]
fn finite_runs_are_reproducible_and_stream_distinct() {
    let model = MixtureModel::overspecified(3, 1.0).unwrap();
    let s0 = FiniteState {
        theta: vec![0.3, 0.0, 0.0],
        nu: 0.0,
        fixed_weights: true,
    };
    let run = |seed, resample| run_finite(&model, 256, 15, s0.clone(), EmVariant::Standard, seed, 0, resample).unwrap();
    let a = run(5, true);
    assert_eq!(a, run(5, true));
    assert_ne!(a.alphas, run(6, true).alphas);
    assert_eq!(a.streams[3], StreamId::new(5, 0, 3));
    let fixed = run(5, false);
    assert!(fixed.streams.iter().all(|s| s.iteration == 0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_json_round_trip(
        d in 1usize..50,
        alpha0 in 0.0f64..5.0,
        nu0 in -3.0f64..3.0,
        steps in 1usize..10_000,
        seed in any::<u64>(),
        alphas in prop::collection::vec(0.0f64..2.0, 1..5),
        resample in any::<bool>(),
    ) {
        let mut cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
        cfg.model.d = d;
        cfg.initial.alpha0 = alpha0;
        cfg.initial.nu0 = nu0;
        cfg.schedule.steps = steps;
        cfg.schedule.resample = resample;
        cfg.grids.alphas = alphas;
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }
}
