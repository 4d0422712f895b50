use std::time::Instant;

use hive_core::sim::{run_simulation, Scenario};

fn run(json: &str) -> hive_core::sim::SimReport {
    let dir = tempfile::tempdir().unwrap();
    let s = Scenario::from_json(json).unwrap();
    let t = Instant::now();
    let r = run_simulation(&s, dir.path()).unwrap();
    eprintln!("{json} took {:?}", t.elapsed());
    r
}

#[test]
fn fault_free_day() {
    let r = run("{}");
    assert_eq!((r.cycles_expected, r.cycles_completed, r.messages_stored), (96, 96, 96));
    assert_eq!(r.window_mismatches, 0);
    assert!(
        r.max_rel_error.len() == 8 && r.max_rel_error.values().all(|e| *e <= 1e-9),
        "{:?}",
        r.max_rel_error
    );
    assert!(r.conservation_ok);
    assert_eq!(r.duplicate_rows, 0);
}

#[test]
fn broker_outage_drains() {
    let r = run(r#"{"faults":{"broker_outages":[[3600,7200]]}}"#);
    assert_eq!(r.messages_stored, 96, "{}", r.to_json());
    assert!(r.missing_seqs.is_empty());
    assert_eq!(r.duplicate_rows, 0);
    assert!(r.conservation_ok);
    assert_eq!(r.messages_in_spool, 0);
    assert!(r.gateway_connects >= 2);
}

#[test]
fn total_serial_loss() {
    let r = run(r#"{"faults":{"serial_drop_prob":1.0}}"#);
    assert_eq!((r.messages_stored, r.missed_windows), (0, 96));
    assert!(r.conservation_ok);
}

#[test]
fn lossy_serial_still_accurate() {
    let r = run(r#"{"faults":{"seed":5,"serial_drop_prob":0.2,"serial_corrupt_prob":0.2}}"#);
    assert!(r.serial_frames_dropped > 0 && r.serial_frames_corrupted > 0);
    assert_eq!(r.messages_stored + r.missed_windows, 96);
    assert_eq!(r.window_mismatches, 0);
    assert!(r.max_rel_error.values().all(|e| *e <= 1e-9));
}

#[test]
fn deterministic() {
    let s = r#"{"faults":{"seed":3,"serial_drop_prob":0.1,"broker_outages":[[1000,5000]]}}"#;
    assert_eq!(run(s).to_json(), run(s).to_json());
}
