//! Perfectly separable clusters read out through label tokens at a growing
//! angle from the cluster axis: separability stays put while output
//! alignment and the bound gap move.

use hidden_geometry::bounds::{self, SearchConfig};
use hidden_geometry::logistic::ClassifierConfig;
use hidden_geometry::measures;
use hidden_geometry::synth::{self, SyntheticSpec};

fn main() -> hidden_geometry::Result<()> {
    println!("angle   separability  output_alignment  S*      gap");
    for step in 0..=6 {
        let angle = step as f64 * std::f64::consts::FRAC_PI_2 / 6.0;
        let (m, e) = synth::gen_instance(&SyntheticSpec::binary(400, 2, 10.0, 1.0, angle, 21))?;
        let sep = measures::separability_score(&m, 0, &ClassifierConfig::default())?.value;
        let out = measures::output_alignment(&m, &e)?.value;
        let b = bounds::check_thm1(&m, &e, &SearchConfig::default())?;
        println!(
            "{angle:.3}   {sep:.3}         {out:.3}             {:.3}   {:.3}",
            b.bound, b.gap
        );
    }
    Ok(())
}
