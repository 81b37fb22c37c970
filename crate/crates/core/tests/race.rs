use std::collections::BTreeMap;

use curvehalt::criteria::{Criterion, HaltPolicy, Reason};
use curvehalt::curve_models::eval_minimized;
use curvehalt::inference::{Epoch, InferenceConfig, RunId};
use curvehalt::race::*;
use curvehalt::Error;

fn id(s: &str) -> RunId {
    RunId::new(s)
}

fn traces(horizon: Epoch, runs: &[(&str, Vec<f64>)]) -> Traces {
    Traces::new(horizon, runs.iter().map(|(k, v)| (id(k), v.clone())).collect())
}

fn pow3_runs(asymptotes: &[f64], horizon: Epoch) -> Traces {
    let runs = asymptotes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let v = (1..=horizon)
                .map(|t| c + 0.5 * f64::from(t).powf(-0.8))
                .collect();
            (id(&format!("run-{i}")), v)
        })
        .collect();
    Traces::new(horizon, runs)
}

fn quick() -> InferenceConfig {
    InferenceConfig {
        chains: 2,
        chain_length: 600,
        burn_in: 200,
        thinning: 10,
        prefit_iterations: 60,
        ..InferenceConfig::default()
    }
}

fn config(horizon: Epoch, criterion: Criterion, delta: f64) -> RaceConfig {
    RaceConfig {
        inference: quick(),
        ..RaceConfig::new(horizon, HaltPolicy::new(criterion, delta))
    }
}

#[test]
fn accounting_example() {
    let cfg = config(10, Criterion::F, 0.0);
    let cache = FitCache::new();
    let mut state = RaceState::new([id("a"), id("b"), id("c")], 10).unwrap();
    for t in 1..=10 {
        let mut obs: BTreeMap<RunId, f64> = BTreeMap::new();
        for r in ["a", "b", "c"] {
            if state.curves[&id(r)].is_alive() {
                let y = if r == "c" && t == 7 { f64::NAN } else { 1.0 / f64::from(t) };
                obs.insert(id(r), y);
            }
        }
        state.step(&obs, &cfg, &cache).unwrap();
    }
    let tr = traces(
        10,
        &[("a", vec![0.5; 10]), ("b", vec![0.6; 10]), ("c", vec![0.7; 10])],
    );
    let report = build_report(&state, &tr, &cfg);
    assert_eq!(report.epochs_executed, 27);
    assert_eq!(report.epochs_saved(), 3);
    assert!((report.savings - 0.1).abs() < 1e-12);
    assert_eq!(
        report.outcomes[&id("c")],
        RunOutcome::Halted {
            epoch: 7,
            reason: Reason::DataError
        }
    );
}

#[test]
fn zero_delta_halts_nothing() {
    let tr = pow3_runs(&[0.1, 0.3, 0.5, 0.7], 20);
    for criterion in Criterion::HALTING {
        let report = run_race(&tr, &config(20, criterion, 0.0)).unwrap();
        assert_eq!(report.savings, 0.0);
        assert!(report.fail.is_none());
        assert!(report.outcomes.values().all(|o| *o == RunOutcome::Finished));
    }
}

#[test]
fn separated_curves_criterion_a() {
    let tr = pow3_runs(&[0.1, 0.2, 0.3, 0.4, 0.5], 40);
    let cfg = RaceConfig::new(40, HaltPolicy::new(Criterion::A, 0.5));
    let report = run_race(&tr, &cfg).unwrap();
    assert!(report.fail.is_none());
    assert!(report.savings > 0.0);
    assert_eq!(report.outcomes[&id("run-0")], RunOutcome::Finished);
}

#[test]
fn single_run_with_guards_finishes() {
    let tr = pow3_runs(&[0.3], 20);
    for criterion in Criterion::HALTING {
        let cfg = RaceConfig {
            policy: HaltPolicy::new(criterion, 0.9).with_guards(true),
            ..config(20, criterion, 0.9)
        };
        let report = run_race(&tr, &cfg).unwrap();
        assert_eq!(report.outcomes[&id("run-0")], RunOutcome::Finished);
    }
}

#[test]
fn warmup_epochs_continue_without_thresholds() {
    let tr = pow3_runs(&[0.1, 0.5, 0.9], 20);
    let report = run_race(&tr, &config(20, Criterion::F, 0.5)).unwrap();
    assert!(report.thresholds.iter().all(|th| th.epoch >= 5));
    for o in report.outcomes.values() {
        if let RunOutcome::Halted { epoch, .. } = o {
            assert!(*epoch >= 5 && *epoch < 20);
        }
    }
}

#[test]
fn step_protocol_errors() {
    let cfg = config(10, Criterion::A, 0.5);
    let cache = FitCache::new();
    let mut state = RaceState::new([id("a"), id("b")], 10).unwrap();
    let only_a: BTreeMap<_, _> = [(id("a"), 0.5)].into();
    assert!(matches!(state.step(&only_a, &cfg, &cache), Err(Error::Protocol(_))));
    let unknown: BTreeMap<_, _> = [(id("a"), 0.5), (id("b"), 0.5), (id("z"), 0.5)].into();
    assert!(matches!(state.step(&unknown, &cfg, &cache), Err(Error::NotFound(_))));
    assert_eq!(state.epoch, 0);

    let bad: BTreeMap<_, _> = [(id("a"), 0.5), (id("b"), -1.0)].into();
    let d = state.step(&bad, &cfg, &cache).unwrap();
    assert_eq!(d[&id("b")].reason, Reason::DataError);
    let again: BTreeMap<_, _> = [(id("a"), 0.5), (id("b"), 0.5)].into();
    assert!(matches!(state.step(&again, &cfg, &cache), Err(Error::Protocol(_))));
}

#[test]
fn ragged_traces_rejected() {
    let tr = traces(5, &[("a", vec![0.5; 5]), ("b", vec![0.5; 4])]);
    assert!(matches!(run_race(&tr, &config(5, Criterion::A, 0.5)), Err(Error::Domain(_))));
}

fn report_with(outcomes: &[(&str, RunOutcome)]) -> RaceReport {
    RaceReport {
        horizon: 10,
        policy: HaltPolicy::new(Criterion::F, 0.5),
        master_seed: 0,
        n_runs: outcomes.len(),
        epochs_executed: 0,
        epochs_budgeted: 0,
        savings: 0.0,
        fail: None,
        outcomes: outcomes.iter().map(|(k, o)| (id(k), *o)).collect(),
        thresholds: vec![],
    }
}

const HALTED: RunOutcome = RunOutcome::Halted {
    epoch: 6,
    reason: Reason::Threshold,
};

#[test]
fn fail_detection() {
    let mut a = vec![1.5; 10];
    a[9] = 1.083;
    let mut b = vec![1.5; 10];
    b[9] = 1.164;
    let tr = traces(10, &[("a", a), ("b", b.clone()), ("c", vec![2.0; 10])]);

    let ok = report_with(&[("a", RunOutcome::Finished), ("b", HALTED), ("c", HALTED)]);
    assert!(detect_fail(&ok, &tr).is_none());

    let fail = detect_fail(
        &report_with(&[("a", HALTED), ("b", RunOutcome::Finished), ("c", HALTED)]),
        &tr,
    )
    .unwrap();
    assert_eq!(fail.best_run, id("a"));
    assert_eq!(fail.halt_epoch, 6);
    assert_eq!(fail.best_final_error, 1.083);
    assert_eq!(fail.surviving_best_final_error, Some(1.164));

    let all = detect_fail(&report_with(&[("a", HALTED), ("b", HALTED), ("c", HALTED)]), &tr).unwrap();
    assert_eq!(all.surviving_best_final_error, None);
}

#[test]
fn fail_ties_need_every_tied_run_halted() {
    let tr = traces(10, &[("a", vec![0.5; 10]), ("b", vec![0.5; 10]), ("c", vec![0.9; 10])]);
    let one_survives = report_with(&[("a", HALTED), ("b", RunOutcome::Finished), ("c", HALTED)]);
    assert!(detect_fail(&one_survives, &tr).is_none());
    let both = report_with(&[("a", HALTED), ("b", HALTED), ("c", RunOutcome::Finished)]);
    let f = detect_fail(&both, &tr).unwrap();
    assert_eq!(f.best_run, id("a"));
    assert_eq!(f.surviving_best_final_error, Some(0.9));
}

#[test]
fn synthetic_is_seeded() {
    let cfg = SynthConfig::new(20, 50, 0.02, 11);
    assert_eq!(gen_synthetic(&cfg).unwrap(), gen_synthetic(&cfg).unwrap());
    let other = gen_synthetic(&SynthConfig { seed: 12, ..cfg.clone() }).unwrap();
    assert_ne!(other.traces, gen_synthetic(&cfg).unwrap().traces);
}

#[test]
fn synthetic_shape() {
    let c = gen_synthetic(&SynthConfig::new(20, 50, 0.02, 3)).unwrap();
    assert_eq!(c.traces.n_runs(), 20);
    assert!(c.traces.runs.values().all(|v| v.len() == 50 && v.iter().all(|&y| y >= 0.0)));
    let mut levels: Vec<f64> = c.truth.iter().map(|r| r.asymptote).collect();
    levels.sort_by(f64::total_cmp);
    assert!(levels.windows(2).all(|w| w[1] - w[0] >= 0.05));
    let best = c.truth.iter().find(|r| r.run_id == c.best_run).unwrap();
    assert_eq!(best.asymptote, levels[0]);
}

#[test]
fn synthetic_without_noise_is_analytic() {
    let c = gen_synthetic(&SynthConfig::new(8, 30, 0.0, 5)).unwrap();
    for run in &c.truth {
        let values = &c.traces.runs[&run.run_id];
        for (t, &y) in (1..).zip(values) {
            let analytic = eval_minimized(run.family, &run.params, run.offset, t).unwrap();
            assert_eq!(y, analytic.max(0.0), "{} t={t}", run.run_id);
        }
        assert!((values[29] - run.asymptote).abs() < 1e-12);
    }
}

#[test]
fn synthetic_small_horizons() {
    for horizon in [1, 2, 5, 15] {
        let c = gen_synthetic(&SynthConfig::new(5, horizon, 0.02, 1)).unwrap();
        assert!(c.traces.runs.values().all(|v| v.len() == horizon as usize));
    }
}

#[test]
fn synthetic_rejects_bad_config() {
    assert!(gen_synthetic(&SynthConfig::new(0, 50, 0.02, 0)).is_err());
    assert!(gen_synthetic(&SynthConfig::new(5, 50, -0.1, 0)).is_err());
    assert!(gen_synthetic(&SynthConfig { families: vec![], ..SynthConfig::new(5, 50, 0.0, 0) }).is_err());
}

#[test]
fn sweep_cells_are_independent_and_deterministic() {
    let corpus = gen_corpus(&SynthConfig::new(6, 20, 0.02, 9), 2).unwrap();
    let races: Vec<Traces> = corpus.into_iter().map(|c| c.traces).collect();
    let base = config(20, Criterion::A, 0.5);
    let grid = sweep(&races, &[Criterion::A, Criterion::F], &[0.0, 0.5], &base, &FitCache::new()).unwrap();
    assert_eq!(grid.len(), 4);
    for cell in grid.iter().filter(|c| c.delta == 0.0) {
        assert_eq!(cell.mean_savings, 0.0);
        assert_eq!(cell.fail_count, 0);
    }
    let again = sweep(&races, &[Criterion::A, Criterion::F], &[0.0, 0.5], &base, &FitCache::new()).unwrap();
    assert_eq!(grid, again);

    // A cell computed alone matches the same cell inside the grid.
    let alone = sweep(&races, &[Criterion::F], &[0.5], &base, &FitCache::new()).unwrap();
    assert_eq!(alone[0], grid[3]);
}

#[test]
fn race_report_is_reproducible() {
    let c = gen_synthetic(&SynthConfig::new(6, 20, 0.02, 21)).unwrap();
    let cfg = config(20, Criterion::F, 0.5);
    let a = run_race(&c.traces, &cfg).unwrap();
    let b = run_race_with(&c.traces, &cfg, &FitCache::new()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.epochs_executed + a.epochs_saved(), 6 * 20);
}
