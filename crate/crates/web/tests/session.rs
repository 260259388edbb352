use dual_ac_web::{build_mdp, oracle_report, Session};
use serde_json::Value;

#[test]
fn oracle_report_is_consistent() {
    let rep: Value = serde_json::from_str(&oracle_report(4, 0.1, 0.9).unwrap()).unwrap();
    assert_eq!(rep["values"].as_array().unwrap().len(), 16);
    assert_eq!(rep["actions"].as_array().unwrap().len(), 16);
    assert!(rep["duality_gap"].as_f64().unwrap().abs() < 1e-6);
    // Without slip the goal is 6 moves away from the corner.
    let exact: Value = serde_json::from_str(&oracle_report(4, 0.0, 0.9).unwrap()).unwrap();
    let expected = 0.9f64.powi(5);
    assert!((exact["optimal_return"].as_f64().unwrap() - expected).abs() < 1e-9);
}

#[test]
fn rejects_oversized_or_invalid_worlds() {
    assert!(build_mdp(11, 0.1, 0.9).is_err());
    assert!(build_mdp(1, 0.1, 0.9).is_err());
    assert!(build_mdp(4, 1.5, 0.9).is_err());
    assert!(build_mdp(4, 0.1, 1.0).is_err());
    assert!(Session::new(4, 0.1, 0.9, 0, 3, -1.0).is_err());
}

#[test]
fn training_session_improves_and_reports() {
    let mut session = Session::new(4, 0.1, 0.9, 0, 3, 1.0).unwrap();
    let start: Value = serde_json::from_str(&session.snapshot().unwrap()).unwrap();
    assert_eq!(start["iteration"], 0);
    assert!(start["kl"].is_null());
    let snap: Value = serde_json::from_str(&session.advance(60).unwrap()).unwrap();
    assert_eq!(snap["iteration"], 60);
    assert_eq!(snap["returns"].as_array().unwrap().len(), 60);
    assert_eq!(session.history().len(), 60);
    let ratio = snap["current_return"].as_f64().unwrap() / session.optimal();
    assert!(ratio > start["current_return"].as_f64().unwrap() / session.optimal());
    assert!(ratio > 0.9, "{ratio}");
    for c in snap["confidence"].as_array().unwrap() {
        let c = c.as_f64().unwrap();
        assert!((0.25..=1.0).contains(&c));
    }
}
