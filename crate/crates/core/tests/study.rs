use homog::elliptic::SolverReport;
use homog::study::*;
use homog::HomogError;

fn row(eps: f64, l2: f64, pairings: &[f64]) -> StudyRow {
    let rep = SolverReport { iterations: 7, residual: 0.0, levels: 3 };
    StudyRow {
        eps,
        cells: 10,
        h: 0.1,
        net_points: 4,
        l2_gap: l2,
        h1_gap: 2.0 * l2,
        l2_star: 1.0,
        pairing_gaps: pairings.to_vec(),
        fem_eps: rep.clone(),
        fem_star: rep,
        seconds: 1.0,
    }
}

#[test]
fn config_round_trips_and_rejects_unknown_fields() {
    let cfg = StudyConfig { seed: 42, eps: vec![0.01, 0.005], ..Default::default() };
    let json = serde_json::to_string(&cfg).unwrap();
    let back: StudyConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());

    let partial: StudyConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
    assert_eq!(partial, StudyConfig { seed: 9, ..Default::default() });
    assert!(serde_json::from_str::<StudyConfig>(r#"{"sede": 9}"#).is_err());
}

#[test]
fn defaults_validate() {
    let cfg = StudyConfig::default();
    cfg.validate().unwrap();
    assert_eq!(cfg.suites, DEFAULT_SUITES.to_vec());
    assert_eq!((cfg.alpha, cfg.beta), (0.8, 0.6));
}

#[test]
fn validation_errors() {
    let bad = |f: fn(&mut StudyConfig)| {
        let mut c = StudyConfig::default();
        f(&mut c);
        c.validate()
    };
    assert!(matches!(bad(|c| c.alpha = 0.5), Err(HomogError::ExponentOrderViolated { .. })));
    assert!(matches!(bad(|c| c.eps = vec![0.0]), Err(HomogError::InvalidConfig(_))));
    assert!(matches!(bad(|c| c.eps = vec![1.5]), Err(HomogError::InvalidConfig(_))));
    // eps^0.8 / 2 = 0.138 < 0.2
    assert!(matches!(bad(|c| c.eps = vec![0.2]), Err(HomogError::ScaleOrderViolated { .. })));
    assert!(matches!(bad(|c| c.resolution = 4.0), Err(HomogError::InvalidConfig(_))));
    assert!(matches!(bad(|c| c.fiber_modes = 1), Err(HomogError::InvalidConfig(_))));
}

#[test]
fn hash_is_stable_and_sensitive() {
    let a = StudyConfig::default();
    let h = a.hash();
    assert_eq!(h.len(), 64);
    assert!(h.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(h, StudyConfig::default().hash());
    assert_ne!(h, StudyConfig { seed: 2, ..Default::default() }.hash());
    assert_ne!(h, StudyConfig { eps: vec![0.02, 0.01], ..Default::default() }.hash());
}

#[test]
fn suite_selection() {
    let unknown = StudyConfig { suites: vec!["rl".into(), "nope".into()], ..Default::default() };
    assert!(matches!(run_diagnostic_suite(&unknown), Err(HomogError::InvalidConfig(_))));

    let empty = StudyConfig { suites: vec![], ..Default::default() };
    let r = run_diagnostic_suite(&empty).unwrap();
    assert!(r.passed && r.results.is_empty());
    assert_eq!(r.config_hash, empty.hash());

    let leray = StudyConfig { suites: vec!["leray".into()], ..Default::default() };
    let r = run_diagnostic_suite(&leray).unwrap();
    assert_eq!(r.results.len(), 1);
    assert!(r.passed && r.results[0].leray.as_ref().unwrap().passed);
    assert_eq!(r.tolerances.final_gap_ratio, FINAL_GAP_RATIO);
}

#[test]
fn csv_layout() {
    let names = vec!["a".to_string(), "b".to_string()];
    let header = csv_header(&names);
    assert_eq!(header, "eps,cells,h,net_points,l2_gap,h1_gap,l2_star,pairing_a,pairing_b,iterations_eps,iterations_star\n");
    let line = csv_row(&row(0.01, 0.5, &[0.25, 0.125]));
    assert_eq!(line.trim_end().split(',').count(), header.trim_end().split(',').count());
    assert!(line.starts_with("0.01,10,"));
    assert!(line.ends_with(",7,7\n"));
    // wall time never reaches the CSV
    let mut slow = row(0.01, 0.5, &[0.25, 0.125]);
    slow.seconds = 99.0;
    assert_eq!(csv_row(&slow), line);
}

#[test]
fn verdict_rules() {
    let good = [row(0.02, 1.0, &[1.0]), row(0.01, 0.5, &[0.5]), row(0.005, 0.3, &[0.2])];
    let v = study_verdict(&good, 1e-10);
    assert!(v.l2_decreasing && v.passed);
    assert!((v.final_ratio - 0.3).abs() < 1e-15);

    let slow = [row(0.02, 1.0, &[1.0]), row(0.01, 0.8, &[0.5]), row(0.005, 0.6, &[0.2])];
    assert!(!study_verdict(&slow, 1e-10).passed);

    let rising = [row(0.02, 1.0, &[1.0]), row(0.01, 0.5, &[2.0]), row(0.005, 0.3, &[0.2])];
    assert!(!study_verdict(&rising, 1e-10).passed);

    let noise = [row(0.02, 1e-12, &[1e-13]), row(0.01, 2e-12, &[1e-13])];
    let v = study_verdict(&noise, 1e-10);
    assert!(v.at_solver_precision && v.passed);

    assert!(!study_verdict(&good[..1], 1e-10).passed);
}
