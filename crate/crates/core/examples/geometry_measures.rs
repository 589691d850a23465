//! Every measure on one synthetic layer, binary and three-way.

use hidden_geometry::measures::{self, MeasureContext, MeasureName};
use hidden_geometry::synth::{self, SyntheticSpec};

fn main() -> hidden_geometry::Result<()> {
    let spec = SyntheticSpec::binary(200, 6, 4.0, 1.0, 0.6, 7);
    let (m, e) = synth::gen_instance(&spec)?;
    let ctx = MeasureContext::new(Some(&e), 0);
    println!("binary, angle 0.6 rad between mean gap and label direction");
    for v in measures::measure_suite(&m, &MeasureName::ALL, &ctx)? {
        println!(
            "  {:<30} {:>10.4}{}",
            v.name.as_str(),
            v.value,
            if v.degenerate { "  (flagged)" } else { "" }
        );
    }

    let three = SyntheticSpec {
        n: 300,
        num_labels: 3,
        cluster_means: vec![
            vec![3.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![-1.5, 2.6, 0.0, 0.0, 0.0, 0.0],
            vec![-1.5, -2.6, 0.0, 0.0, 0.0, 0.0],
        ],
        ..spec
    };
    let (m, e) = synth::gen_instance(&three)?;
    let ctx = MeasureContext::new(Some(&e), 0);
    println!("three labels, averaged over pairs");
    for v in measures::measure_suite(&m, &MeasureName::CORE, &ctx)? {
        let pairs: Vec<String> = v
            .pair_values
            .iter()
            .flatten()
            .map(|p| format!("{}/{}: {:.3}", p.label_a, p.label_b, p.value))
            .collect();
        println!(
            "  {:<22} {:>9.4}  [{}]",
            v.name.as_str(),
            v.value,
            pairs.join(", ")
        );
    }
    Ok(())
}
