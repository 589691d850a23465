//! Low-rank denoising, decoding singular directions through the
//! unembedding, and which directions survive from one layer to the next.

use hidden_geometry::linalg::{self, ThinSvd};
use hidden_geometry::spectral::{self, RetentionConfig};
use hidden_geometry::synth::{self, PhaseProfileSpec, PhaseSchedule};

fn main() -> hidden_geometry::Result<()> {
    // One signal axis plus 50 noisy ones, each also a vocabulary row.
    let (m, e) = synth::gen_noisy_signal(400, 50, 0.5, 3)?;
    for r in [1, 2, 5, 20, 51] {
        println!(
            "rank {r:>2}: output alignment gain {:+.4}",
            spectral::denoising_gain(&m, r, &e)?
        );
    }

    let (centered, _) = linalg::center(&m.rows);
    let svd = ThinSvd::compute(&centered, false);
    let (plus, minus) = spectral::decode_direction(&svd.right_vector(0), &e, 3)?;
    let names = |d: &spectral::DecodedDirection| {
        d.top_tokens
            .iter()
            .map(|t| format!("{} ({:.2})", t.token, t.score))
            .collect::<Vec<_>>()
            .join(", ")
    };
    println!("top singular direction  +: {}", names(&plus));
    println!("                        -: {}", names(&minus));

    let dump = synth::gen_phase_profile(&PhaseProfileSpec {
        n: 120,
        d: 10,
        noise_std: 1.0,
        schedule: PhaseSchedule::canonical(4, 2, 5.0, 3, 0.0),
        extra_tokens: 6,
        setting: serde_json::from_str(
            r#"{"mode": "icl", "num_demos": 4, "demo_selection": "random", "label_style": "natural"}"#,
        )
        .expect("valid setting"),
        seed: 8,
    })?;
    let e = dump
        .unembedding_view()
        .expect("synthetic dumps store an unembedding");
    let cfg = RetentionConfig {
        rank: 4,
        retained: 2,
        filtered: 2,
        ..RetentionConfig::default()
    };
    for l in 2..4 {
        let rep = spectral::retention_analysis(
            &dump.layer_matrix(l)?,
            &dump.layer_matrix(l + 1)?,
            Some(&e),
            &cfg,
        )?;
        let norms: Vec<String> = rep.row_norms.iter().map(|x| format!("{x:.3}")).collect();
        println!(
            "layer {l} -> {}: row norms [{}], kept {:?}, dropped {:?}",
            l + 1,
            norms.join(", "),
            rep.retained,
            rep.filtered
        );
    }
    Ok(())
}
