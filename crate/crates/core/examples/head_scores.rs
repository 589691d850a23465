//! Scores heads on a synthetic attention tensor where two heads are planted:
//! one attends to the previous token, one from the final position to the
//! label positions. Then selects the top heads and builds a task vector.

use std::collections::BTreeMap;

use hidden_geometry::dump::{
    AttentionDump, AttentionPrompt, AttentionPromptMeta, HeadId, HeadOutputDump,
};
use hidden_geometry::heads::{self, ScoreKind};
use hidden_geometry::rng::SplitMix64;

const LAYERS: usize = 4;
const HEADS: usize = 5;
const PREV: HeadId = HeadId(1, 2);
const INDUCTION: HeadId = HeadId(3, 0);

fn prompt(rng: &mut SplitMix64, s: usize) -> AttentionPrompt {
    let labels: Vec<usize> = (1..s - 1).step_by(3).collect();
    let mut weights = vec![0.0f32; LAYERS * HEADS * s * s];
    for l in 0..LAYERS {
        for h in 0..HEADS {
            let base = (l * HEADS + h) * s * s;
            for q in 0..s {
                let row = &mut weights[base + q * s..base + (q + 1) * s];
                if HeadId(l, h) == PREV && q > 0 {
                    row[q - 1] = 0.9;
                    row[q] = 0.1;
                } else if HeadId(l, h) == INDUCTION && q == s - 1 {
                    for &p in &labels {
                        row[p] = 1.0 / labels.len() as f32;
                    }
                } else {
                    // Uniform over a random causal window.
                    let start = rng.below(q + 1);
                    let w = 1.0 / (q + 1 - start) as f32;
                    row[start..=q].fill(w);
                }
            }
        }
    }
    AttentionPrompt {
        meta: AttentionPromptMeta {
            length: s,
            label_positions: labels,
            final_position: s - 1,
        },
        weights,
    }
}

fn main() -> hidden_geometry::Result<()> {
    let mut rng = SplitMix64::new(11);
    let attn = AttentionDump {
        num_layers: LAYERS,
        num_heads: HEADS,
        prompts: (0..8)
            .map(|_| {
                let s = 10 + rng.below(6);
                prompt(&mut rng, s)
            })
            .collect(),
    };
    for kind in [ScoreKind::Pth, ScoreKind::Ih] {
        let table = heads::score_heads(&attn, kind)?;
        let top = heads::select_top_heads(&table, 0.1)?;
        let controls = heads::random_control_heads(&table, top.len(), 0, &top)?;
        println!("{kind:?}: top {:?}, controls {:?}", top, controls);
        for r in table.ranked.iter().take(4) {
            println!("  [{}, {}] {:.3}", r.layer, r.head, r.score);
        }
    }

    let mut outputs = BTreeMap::new();
    for l in 0..LAYERS {
        for h in 0..HEADS {
            outputs.insert(
                HeadId(l, h),
                (0..6).map(|_| rng.normal() as f32 * 0.1).collect(),
            );
        }
    }
    let outputs = HeadOutputDump {
        hidden_dim: 6,
        prompt_count: 8,
        outputs,
    };
    let ih = heads::score_heads(&attn, ScoreKind::Ih)?;
    let tv = heads::build_task_vector(&outputs, &heads::select_top_heads(&ih, 0.1)?)?;
    println!("task vector from {:?}: {:?}", tv.source_heads, tv.vector);
    Ok(())
}
