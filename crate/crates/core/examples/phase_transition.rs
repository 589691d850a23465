//! A zero-shot run where the label subspace never rotates towards the
//! unembedding, against an ICL run where it does from layer 7. Writes the
//! report, CSVs and charts to a temp directory.

use hidden_geometry::measures::MeasureName;
use hidden_geometry::report::{self, SuiteOptions, TransitionConfig};
use hidden_geometry::synth::{self, PhaseProfileSpec, PhaseSchedule};

fn spec(schedule: PhaseSchedule, setting: &str) -> PhaseProfileSpec {
    PhaseProfileSpec {
        n: 200,
        d: 16,
        noise_std: 1.0,
        schedule,
        extra_tokens: 4,
        setting: serde_json::from_str(setting).expect("valid setting"),
        seed: 1,
    }
}

fn main() -> hidden_geometry::Result<()> {
    let zero_shot = synth::gen_phase_profile(&spec(
        PhaseSchedule::zero_rotation(12, 4, 6.0),
        r#"{"mode": "zero_shot", "num_demos": 0, "demo_selection": "random", "label_style": "natural"}"#,
    ))?;
    let icl = synth::gen_phase_profile(&spec(
        PhaseSchedule::canonical(12, 4, 6.0, 7, 0.0),
        r#"{"mode": "icl", "num_demos": 8, "demo_selection": "knn", "label_style": "natural"}"#,
    ))?;

    let opts = SuiteOptions::default();
    let cfg = TransitionConfig::default();
    let runs = vec![
        report::analyze(&zero_shot, "zero_shot", &opts, &cfg)?,
        report::analyze(&icl, "icl", &opts, &cfg)?,
    ];
    for r in &runs {
        let sep = &r
            .suite
            .get(MeasureName::SeparabilityScore)
            .expect("core measure")
            .values;
        let comp = &r
            .suite
            .get(MeasureName::CompositeAlignment)
            .expect("core measure")
            .values;
        println!(
            "{}: transition {:?}",
            r.run_id, r.transition.transition_layer
        );
        for l in 0..sep.len() {
            println!(
                "  layer {l:>2}  separability {:.3}  composite {:>8.3}",
                sep[l], comp[l]
            );
        }
    }

    let cmp = report::compare_runs(&runs)?;
    for m in [
        MeasureName::SeparabilityScore,
        MeasureName::CompositeAlignment,
        MeasureName::OutputAlignment,
    ] {
        println!(
            "final delta {:<22} {:+.3}",
            m.as_str(),
            cmp.final_delta("icl", m).expect("both runs have it")
        );
    }

    let out = std::env::temp_dir().join("hgeom-phase-transition");
    report::write_outputs(&out, &runs, Some(&cmp))?;
    println!("wrote {}", out.display());
    Ok(())
}
