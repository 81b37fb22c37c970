use curvehalt::criteria::{Criterion, HaltPolicy};
use curvehalt::inference::{InferenceConfig, RunId};
use curvehalt::io::*;
use curvehalt::race::{FailRecord, RaceReport, RunOutcome, ThresholdLogEntry};
use curvehalt::Error;
use proptest::prelude::*;

const TWO_RUNS: &str = "run_id,epoch,validation_error\n\
    b,2,0.4\n\
    a,1,0.9\n\
    a,2,0.7\n\
    b,1,0.8\n\
    a,3,0.6\n\
    b,3,NaN\n";

fn line_of(err: Error) -> u64 {
    match err {
        Error::Format { line, .. } => line,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn parses_two_runs() {
    let rows = parse_trace(TWO_RUNS).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[&RunId::new("a")], vec![0.9, 0.7, 0.6]);
    let b = &rows[&RunId::new("b")];
    assert_eq!(&b[..2], &[0.8, 0.4]);
    assert!(b[2].is_nan());
}

#[test]
fn canonical_round_trip() {
    let canonical = emit_trace(&parse_trace(TWO_RUNS).unwrap());
    assert_eq!(
        canonical,
        "run_id,epoch,validation_error\na,1,0.9\na,2,0.7\na,3,0.6\nb,1,0.8\nb,2,0.4\nb,3,NaN\n"
    );
    assert_eq!(emit_trace(&parse_trace(&canonical).unwrap()), canonical);
}

#[test]
fn format_errors_carry_line_numbers() {
    let h = "run_id,epoch,validation_error\n";
    assert_eq!(line_of(parse_trace(&format!("{h}a,0,0.5\n")).unwrap_err()), 2);
    assert_eq!(line_of(parse_trace(&format!("{h}a,1,0.5\na,1,0.4\n")).unwrap_err()), 3);
    assert_eq!(line_of(parse_trace(&format!("{h}a,1,0.5\na,3,0.4\n")).unwrap_err()), 3);
    assert_eq!(line_of(parse_trace(&format!("{h}a,1,-0.5\n")).unwrap_err()), 2);
    assert_eq!(line_of(parse_trace(&format!("{h}a,1,inf\n")).unwrap_err()), 2);
    assert_eq!(line_of(parse_trace(&format!("{h}a,x,0.5\n")).unwrap_err()), 2);
    assert_eq!(line_of(parse_trace(&format!("{h}a,1\n")).unwrap_err()), 2);
    assert_eq!(line_of(parse_trace("run,epoch,err\n").unwrap_err()), 1);
    assert_eq!(line_of(parse_trace("").unwrap_err()), 1);
}

#[test]
fn manifest_round_trip_and_assembly() {
    let text = r#"{"horizon_T": 3, "runs": [{"id": "a", "config": {"lr": 0.1}}, {"id": "b"}, {"id": "c"}]}"#;
    let m = parse_manifest(text).unwrap();
    assert_eq!(parse_manifest(&emit_manifest(&m)).unwrap(), m);
    assert_eq!(emit_manifest(&parse_manifest(&emit_manifest(&m)).unwrap()), emit_manifest(&m));

    let traces = assemble_traces(parse_trace(TWO_RUNS).unwrap(), &m).unwrap();
    assert_eq!(traces.horizon, 3);
    assert!(traces.runs[&RunId::new("c")].is_empty());

    let narrow = parse_manifest(r#"{"horizon_T": 3, "runs": [{"id": "a"}]}"#).unwrap();
    assert!(assemble_traces(parse_trace(TWO_RUNS).unwrap(), &narrow).is_err());
    let short = parse_manifest(r#"{"horizon_T": 2, "runs": [{"id": "a"}, {"id": "b"}]}"#).unwrap();
    assert!(assemble_traces(parse_trace(TWO_RUNS).unwrap(), &short).is_err());
    assert!(parse_manifest(r#"{"horizon_T": 2, "runs": [{"id": "a"}, {"id": "a"}]}"#).is_err());
    assert!(parse_manifest(r#"{"horizon_T": 0, "runs": []}"#).is_err());
}

fn fail_record() -> FailRecord {
    FailRecord {
        best_run: RunId::new("run-003"),
        halt_epoch: 12,
        best_final_error: 1.083,
        surviving_best_final_error: Some(1.164),
    }
}

fn sample_report(fail: Option<FailRecord>, savings: f64) -> RaceReport {
    RaceReport {
        horizon: 50,
        policy: HaltPolicy::new(Criterion::F, 0.5),
        master_seed: 7,
        n_runs: 2,
        epochs_executed: 60,
        epochs_budgeted: 100,
        savings,
        fail,
        outcomes: [
            (RunId::new("run-000"), RunOutcome::Finished),
            (
                RunId::new("run-001"),
                RunOutcome::Halted {
                    epoch: 10,
                    reason: curvehalt::criteria::Reason::Threshold,
                },
            ),
        ]
        .into(),
        thresholds: vec![ThresholdLogEntry {
            epoch: 10,
            tau: 0.123_456_789_012_345_6,
            k_used: Some(1),
            source_run: None,
            fallback: false,
            halted: vec![RunId::new("run-001")],
        }],
    }
}

fn document() -> ReportDocument {
    ReportDocument {
        testbed: "synthetic".into(),
        horizon: 50,
        master_seed: 7,
        warmup_epochs: 5,
        inference: InferenceConfig::default(),
        entries: vec![
            ReportEntry {
                criterion: Criterion::A,
                delta: 0.5,
                guards_enabled: false,
                mean_savings: 0.721,
                fail_count: 0,
                races: vec![sample_report(None, 0.721)],
            },
            ReportEntry {
                criterion: Criterion::F,
                delta: 0.5,
                guards_enabled: false,
                mean_savings: 0.9,
                fail_count: 1,
                races: vec![sample_report(Some(fail_record()), 0.9)],
            },
        ],
    }
}

#[test]
fn savings_and_fail_strings() {
    assert_eq!(format_savings(0.721), "\u{2212}72.1%");
    assert_eq!(format_savings(0.0), "0.0%");
    assert_eq!(format_fail(&fail_record()), "FAIL by 1.083 \u{2192} 1.164");
    let none = FailRecord {
        surviving_best_final_error: None,
        ..fail_record()
    };
    assert_eq!(format_fail(&none), "FAIL by 1.083 \u{2192} none");
    assert_eq!(
        format_cell(&sample_report(Some(fail_record()), 0.9)),
        "\u{2212}90.0% FAIL by 1.083 \u{2192} 1.164"
    );
}

#[test]
fn machine_report_round_trips() {
    let doc = document();
    let text = emit_report(&doc, ReportFormat::Machine);
    assert_eq!(parse_report(&text).unwrap(), doc);
    assert_eq!(emit_report(&parse_report(&text).unwrap(), ReportFormat::Machine), text);
}

#[test]
fn table_marks_best_saver_without_fail() {
    let table = emit_report(&document(), ReportFormat::Table);
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "delta = 0.5");
    assert!(rows[1].starts_with("testbed"));
    let a = rows.iter().find(|r| r.contains("synthetic  a")).unwrap();
    let f = rows.iter().find(|r| r.contains("synthetic  f")).unwrap();
    assert!(a.contains("\u{2212}72.1%") && a.trim_end().ends_with('*'));
    assert!(f.contains("FAIL by 1.083 \u{2192} 1.164") && !f.ends_with('*'));
}

#[test]
fn series_has_one_row_per_cell() {
    let s = emit_series(&document());
    let lines: Vec<&str> = s.lines().collect();
    assert_eq!(lines[0], "criterion,delta,mean_savings,fail_rate,races");
    assert_eq!(lines[1], "a,0.5,0.721,0,1");
    assert_eq!(lines[2], "f,0.5,0.9,1,1");
}

proptest! {
    #[test]
    fn trace_emit_parse_emit_is_stable(
        runs in prop::collection::btree_map(
            "[a-z][a-z0-9_-]{0,8}",
            prop::collection::vec(prop_oneof![9 => 0.0..5.0f64, 1 => Just(f64::NAN)], 1..12),
            1..6,
        )
    ) {
        let rows: TraceRows = runs.into_iter().map(|(k, v)| (RunId::new(k), v)).collect();
        let once = emit_trace(&rows);
        let parsed = parse_trace(&once).unwrap();
        prop_assert_eq!(emit_trace(&parsed), once);
        for (k, v) in &rows {
            let back = &parsed[k];
            prop_assert_eq!(back.len(), v.len());
            for (x, y) in v.iter().zip(back) {
                prop_assert!(x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()));
            }
        }
    }
}
