//! Accuracy of the label-token readout against the separability bound, on
//! a misaligned instance, a constructed equality instance and three labels.

use hidden_geometry::bounds::{self, SearchConfig};
use hidden_geometry::synth::{self, EqualitySpec, SyntheticSpec};

fn main() -> hidden_geometry::Result<()> {
    let cfg = SearchConfig::default();

    let (m, e) = synth::gen_instance(&SyntheticSpec::binary(60, 2, 3.0, 0.5, 1.0, 4))?;
    let r = bounds::check_thm1(&m, &e, &cfg)?;
    println!(
        "misaligned 2-D:  acc {:.3}  S* {:.3}  gap {:.3}  exact {}",
        r.acc, r.bound, r.gap, r.exact
    );
    println!("  u* = {:?}", r.u_star);

    let (m, e) = synth::gen_equality_instance(&EqualitySpec {
        n: 40,
        d: 2,
        separation: 2.0,
        cluster_cov_scale: 1.0,
        interference_count: 3,
        seed: 2,
    })?;
    let r = bounds::check_thm1(&m, &e, &cfg)?;
    println!(
        "equality 2-D:    acc {:.3}  S* {:.3}  gap {}  no interference {}  parallel {}",
        r.acc,
        r.bound,
        r.gap,
        r.equality_conditions.no_interference,
        r.equality_conditions.direction_parallel
    );

    let (m, e) = synth::gen_instance(&SyntheticSpec::binary(30, 4, 2.0, 1.0, 0.3, 9))?;
    let r = bounds::check_thm1(&m, &e, &cfg)?;
    println!(
        "4-D by cells:    acc {:.3}  S* {:.3}  exact {}",
        r.acc, r.bound, r.exact
    );

    let three = SyntheticSpec {
        n: 60,
        d: 2,
        num_labels: 3,
        cluster_means: vec![vec![2.0, 0.0], vec![-1.0, 1.7], vec![-1.0, -1.7]],
        cluster_cov_scale: 0.3,
        e_diff_angle: 0.2,
        interference: Default::default(),
        seed: 5,
    };
    let (m, e) = synth::gen_instance(&three)?;
    let r = bounds::check_thm2(&m, &e, &cfg)?;
    println!(
        "three labels:    acc {:.3}  pairwise bound {:.3}",
        r.acc, r.bound
    );
    for p in r.per_pair.iter().flatten() {
        println!("  pair {}/{}: S* {:.3}", p.label_a, p.label_b, p.s_star);
    }
    Ok(())
}
