use std::path::Path;

use sovereign::scenario::{run_scenario, ScenarioError};

fn scenarios() -> Vec<(String, String)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "sov"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read_to_string(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn every_bundled_scenario_passes() {
    let all = scenarios();
    assert!(all.len() >= 6);
    for (name, text) in all {
        let report = run_scenario(&text, None).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(!report.checks.is_empty(), "{name} checks nothing");
    }
}

#[test]
fn scenarios_hold_under_other_seeds() {
    for (name, text) in scenarios() {
        for seed in [2, 3] {
            run_scenario(&text, Some(seed)).unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
        }
    }
}

#[test]
fn same_seed_same_run() {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/ac-demo.sov")).unwrap();
    let a = run_scenario(&text, Some(9)).unwrap();
    let b = run_scenario(&text, Some(9)).unwrap();
    assert_eq!(a.trace_text(), b.trace_text());
}

#[test]
fn failures_name_the_line() {
    let err = run_scenario("spawn l1 light hall\nbootstrap\nexpect actuated l1 switch-on\n", None).unwrap_err();
    match err {
        ScenarioError::AssertionFailed { line, excerpt, .. } => {
            assert_eq!(line, 3);
            assert!(!excerpt.is_empty());
        }
        e => panic!("{e}"),
    }
    assert!(matches!(run_scenario("spawn l1 toaster hall\n", None), Err(ScenarioError::Parse { line: 1, .. })));
    assert!(matches!(run_scenario("run 10\nexpect bootstrapped ghost\n", None), Err(ScenarioError::Parse { line: 2, .. }) | Err(ScenarioError::Step { line: 2, .. })));
}
