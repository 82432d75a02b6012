mod gradient_check {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/gradient_check.rs"));
}

mod train_synthetic {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/train_synthetic.rs"));
}

mod describe_offline {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/describe_offline.rs"));
}

mod zero_shot {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/zero_shot.rs"));
}

mod resume_training {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/resume_training.rs"));
}

mod ablation_sweep {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/ablation_sweep.rs"));
}

#[test]
fn gradient_check_example_runs() {
    let r = gradient_check::run_example().expect("gradient check example should run");
    assert!(r.max_rel_error < 1e-4);
}

#[test]
fn train_synthetic_example_runs() {
    let (ratio, report) = train_synthetic::run_example().expect("training example should run");
    assert!(ratio <= 0.5, "loss ratio {ratio}");
    assert!(report.base >= 90.0, "{report:?}");
}

#[test]
fn describe_offline_example_drops_outliers() {
    let sets = describe_offline::run_example().expect("description example should run");
    assert_eq!(sets.len(), 10);
    for s in &sets {
        assert_eq!(s.selected.len(), 4);
        assert!(s.selected.iter().all(|d| d.ends_with(&s.class)), "{s:?}");
    }
}

#[test]
fn zero_shot_example_runs() {
    let r = zero_shot::run_example().expect("zero-shot example should run");
    assert!((0.0..=100.0).contains(&r.hm));
}

#[test]
fn resume_example_is_exact() {
    assert!(resume_training::run_example().expect("resume example should run"));
}

#[test]
fn ablation_example_runs() {
    let t = ablation_sweep::run_example().expect("ablation example should run");
    assert_eq!(t.rows.len(), 3);
    assert!(t.rows[0].diversity_disabled);
}
