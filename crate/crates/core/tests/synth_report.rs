use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, FRAC_PI_6};
use std::fs;

use hidden_geometry::bounds::{self, SearchConfig};
use hidden_geometry::dump::HiddenStateDump;
use hidden_geometry::logistic::ClassifierConfig;
use hidden_geometry::measures::{self, Aggregation, MeasureName};
use hidden_geometry::report::{self, RunReport, SuiteOptions, TransitionConfig};
use hidden_geometry::synth::{self, PhaseProfileSpec, PhaseSchedule, SyntheticSpec};

fn profile(schedule: PhaseSchedule, seed: u64, icl: bool) -> HiddenStateDump {
    let setting = if icl {
        r#"{"mode": "icl", "num_demos": 4, "demo_selection": "random", "label_style": "natural"}"#
    } else {
        r#"{"mode": "zero_shot", "num_demos": 0, "demo_selection": "random", "label_style": "natural"}"#
    };
    synth::gen_phase_profile(&PhaseProfileSpec {
        n: 120,
        d: 8,
        noise_std: 1.0,
        schedule,
        extra_tokens: 3,
        setting: serde_json::from_str(setting).unwrap(),
        seed,
    })
    .unwrap()
}

fn run(dump: &HiddenStateDump, id: &str) -> RunReport {
    report::analyze(
        dump,
        id,
        &SuiteOptions::default(),
        &TransitionConfig::default(),
    )
    .unwrap()
}

#[test]
fn same_seed_same_instance() {
    let spec = SyntheticSpec::binary(50, 4, 3.0, 0.5, 0.7, 11);
    let (a, ea) = synth::gen_instance(&spec).unwrap();
    let (b, eb) = synth::gen_instance(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(ea, eb);
    let (c, _) = synth::gen_instance(&SyntheticSpec { seed: 12, ..spec }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn aligned_noiseless_instance_meets_the_bound() {
    let (m, e) = synth::gen_instance(&SyntheticSpec::binary(40, 3, 4.0, 0.0, 0.0, 3)).unwrap();
    let rep = bounds::check_thm1(&m, &e, &SearchConfig::default()).unwrap();
    assert_eq!(rep.acc, 1.0);
    assert_eq!(rep.bound, 1.0);
    assert_eq!(rep.gap, 0.0);
    assert!(rep.equality_conditions.no_interference);
    assert!(rep.equality_conditions.direction_parallel);
}

#[test]
fn orthogonal_instance_separates_but_does_not_align() {
    let (m, e) =
        synth::gen_instance(&SyntheticSpec::binary(400, 6, 10.0, 1.0, FRAC_PI_2, 8)).unwrap();
    let sep = measures::separability_score(&m, 0, &ClassifierConfig::default())
        .unwrap()
        .value;
    let out = measures::output_alignment(&m, &e).unwrap().value;
    assert!(sep >= 0.99, "separability {sep}");
    assert!(out <= 0.6, "output alignment {out}");
}

#[test]
fn separability_climbs_with_the_ramp() {
    let r = run(
        &profile(PhaseSchedule::canonical(8, 4, 6.0, 6, 0.0), 2, true),
        "ramp",
    );
    let sep = &r.suite.get(MeasureName::SeparabilityScore).unwrap().values;
    for l in 1..=4 {
        assert!(sep[l] >= sep[l - 1] - 0.05, "layer {l}: {sep:?}");
    }
    assert!(sep[4] > sep[0] + 0.3, "{sep:?}");
}

#[test]
fn run_against_itself_has_zero_deltas() {
    let r = run(
        &profile(PhaseSchedule::canonical(5, 2, 4.0, 3, 0.0), 4, true),
        "a",
    );
    let mut b = r.clone();
    b.run_id = "b".into();
    let c = report::compare_runs(&[r, b]).unwrap();
    assert_eq!(c.deltas.len(), 7);
    assert!(c.deltas.iter().all(|d| d.deltas.iter().all(|&x| x == 0.0)));
}

#[test]
fn chart_draws_one_line_per_run() {
    let a = run(
        &profile(PhaseSchedule::zero_rotation(4, 2, 4.0), 5, false),
        "zero_shot",
    );
    let b = run(
        &profile(PhaseSchedule::canonical(4, 2, 4.0, 2, 0.0), 5, true),
        "icl",
    );
    let svg = report::chart_svg(&[a, b], MeasureName::CompositeAlignment);
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains("zero_shot") && svg.contains("icl"));
}

#[test]
fn rotation_moves_alignment_not_separability() {
    let zs = run(
        &profile(PhaseSchedule::zero_rotation(6, 3, 6.0), 7, false),
        "zero_shot",
    );
    let icl = run(
        &profile(PhaseSchedule::canonical(6, 3, 6.0, 4, 0.0), 7, true),
        "icl",
    );
    let c = report::compare_runs(&[zs, icl]).unwrap();
    let dc = c
        .final_delta("icl", MeasureName::CompositeAlignment)
        .unwrap();
    let ds = c
        .final_delta("icl", MeasureName::SeparabilityScore)
        .unwrap();
    assert!(dc > 10.0, "composite delta {dc}");
    assert!(ds.abs() < 0.05, "separability delta {ds}");
}

#[test]
fn smaller_final_angle_larger_delta() {
    let mut runs = vec![run(
        &profile(PhaseSchedule::zero_rotation(6, 3, 6.0), 9, false),
        "zero_shot",
    )];
    for (k, angle) in [(1, FRAC_PI_3), (4, FRAC_PI_6), (16, 0.0)] {
        let d = profile(PhaseSchedule::canonical(6, 3, 6.0, 4, angle), 9, true);
        runs.push(run(&d, &format!("k{k}")));
    }
    let c = report::compare_runs(&runs).unwrap();
    let deltas: Vec<f64> = ["k1", "k4", "k16"]
        .iter()
        .map(|id| c.final_delta(id, MeasureName::CompositeAlignment).unwrap())
        .collect();
    assert!(deltas[0] < deltas[1] && deltas[1] < deltas[2], "{deltas:?}");
}

#[test]
fn constant_layer_is_flagged_and_the_rest_computed() {
    let mut dump = profile(PhaseSchedule::canonical(3, 1, 4.0, 2, 0.0), 13, true);
    let len = dump.layers[0].len();
    dump.layers[0] = vec![0.5; len];
    let suite = report::run_suite(&dump, "flat0", &SuiteOptions::default()).unwrap();
    let ed = suite.get(MeasureName::EffectiveDimension).unwrap();
    assert!(ed.degenerate[0]);
    assert_eq!(ed.values[0], 0.0);
    for s in &suite.series {
        assert!(s.degenerate[1..].iter().all(|&d| !d), "{}", s.measure);
    }
    assert!(!suite.warnings.is_empty());
}

#[test]
fn binary_runs_report_binary_aggregation() {
    let r = run(
        &profile(PhaseSchedule::zero_rotation(2, 1, 2.0), 1, false),
        "b",
    );
    assert!(r
        .suite
        .series
        .iter()
        .all(|s| s.aggregation == Aggregation::Binary));
}

#[test]
fn outputs_are_complete_and_deterministic() {
    let a = run(
        &profile(PhaseSchedule::zero_rotation(3, 1, 3.0), 2, false),
        "zs",
    );
    let b = run(
        &profile(PhaseSchedule::canonical(3, 1, 3.0, 2, 0.0), 2, true),
        "icl",
    );
    let c = report::compare_runs(&[a.clone(), b.clone()]).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        report::write_outputs(d.path(), &[a.clone(), b.clone()], Some(&c)).unwrap();
    }
    let charts = fs::read_dir(dirs[0].path().join("charts")).unwrap().count();
    assert_eq!(charts, 7);
    for name in [
        "measures.csv",
        "measures.json",
        "report.json",
        "comparison.csv",
        "charts/composite_alignment.svg",
    ] {
        let x = fs::read(dirs[0].path().join(name)).unwrap();
        let y = fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn mismatched_layer_counts_do_not_compare() {
    let a = run(
        &profile(PhaseSchedule::zero_rotation(3, 1, 3.0), 2, false),
        "three",
    );
    let b = run(
        &profile(PhaseSchedule::zero_rotation(4, 1, 3.0), 2, false),
        "four",
    );
    assert!(report::compare_runs(&[a.clone(), b]).is_err());
    assert!(report::compare_runs(&[a]).is_err());
}

#[test]
fn spec_files_round_trip_through_json() {
    let text = r#"{"kind": "instance", "n": 20, "d": 3, "num_labels": 2,
        "cluster_means": [[1, 0, 0], [-1, 0, 0]], "cluster_cov_scale": 0.1,
        "e_diff_angle": 0.0, "seed": 4}"#;
    let spec: synth::GeneratorSpec = serde_json::from_str(text).unwrap();
    let dump = synth::generate(&spec).unwrap();
    assert_eq!(dump.manifest.num_layers, 0);
    assert_eq!(dump.manifest.num_queries, 20);
    let bad = text.replace("\"seed\"", "\"sead\"");
    assert!(serde_json::from_str::<synth::GeneratorSpec>(&bad).is_err());
}
