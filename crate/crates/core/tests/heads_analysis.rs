mod common;

use std::collections::{BTreeMap, BTreeSet};

use hidden_geometry::dump::{
    AttentionDump, AttentionPrompt, AttentionPromptMeta, HeadId, HeadOutputDump,
};
use hidden_geometry::heads::{self, HeadScoreTable, ScoreKind};
use hidden_geometry::rng::SplitMix64;
use proptest::prelude::*;

/// Causal rows whose weights are multiples of 1/1024 summing to 1, so any
/// summation order gives the same `f64`.
fn quantized_prompt(rng: &mut SplitMix64, layers: usize, nh: usize, s: usize) -> AttentionPrompt {
    let mut weights = vec![0.0f32; layers * nh * s * s];
    for block in weights.chunks_exact_mut(s * s) {
        for q in 0..s {
            let mut left = 1024usize;
            for k in 0..q {
                let take = rng.below(left + 1);
                block[q * s + k] = take as f32 / 1024.0;
                left -= take;
            }
            block[q * s + q] = left as f32 / 1024.0;
        }
    }
    let final_position = s - 1;
    let label_positions: Vec<usize> = (0..final_position).filter(|_| rng.below(3) == 0).collect();
    let label_positions = if label_positions.is_empty() {
        vec![0]
    } else {
        label_positions
    };
    AttentionPrompt {
        meta: AttentionPromptMeta {
            length: s,
            label_positions,
            final_position,
        },
        weights,
    }
}

fn random_attention(seed: u64, layers: usize, nh: usize, prompts: usize) -> AttentionDump {
    let mut rng = SplitMix64::new(seed);
    AttentionDump {
        num_layers: layers,
        num_heads: nh,
        prompts: (0..prompts)
            .map(|_| {
                let s = 3 + rng.below(6);
                quantized_prompt(&mut rng, layers, nh, s)
            })
            .collect(),
    }
}

/// Weight at `[layer][head][query][key]`, indexed by hand.
fn weight(attn: &AttentionDump, i: usize, l: usize, h: usize, q: usize, k: usize) -> f64 {
    let p = &attn.prompts[i];
    let s = p.meta.length;
    let per_head = s * s;
    let per_layer = attn.num_heads * per_head;
    f64::from(p.weights[l * per_layer + h * per_head + q * s + k])
}

fn oracle_ih(attn: &AttentionDump) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; attn.num_heads]; attn.num_layers];
    for l in 0..attn.num_layers {
        for h in 0..attn.num_heads {
            for i in 0..attn.prompts.len() {
                let m = &attn.prompts[i].meta;
                for &p in &m.label_positions {
                    out[l][h] += weight(attn, i, l, h, m.final_position, p);
                }
            }
        }
    }
    out
}

fn oracle_pth(attn: &AttentionDump) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; attn.num_heads]; attn.num_layers];
    for l in 0..attn.num_layers {
        for h in 0..attn.num_heads {
            for i in 0..attn.prompts.len() {
                let s = attn.prompts[i].meta.length;
                for q in 1..s - 1 {
                    out[l][h] += weight(attn, i, l, h, q, q - 1);
                }
            }
        }
    }
    out
}

fn table(scores: Vec<f64>) -> HeadScoreTable {
    // One layer; scores are written straight into a single-prompt IH table.
    let nh = scores.len();
    let s = 2;
    let mut weights = vec![0.0f32; nh * s * s];
    for (h, &v) in scores.iter().enumerate() {
        weights[h * s * s + s] = v as f32;
    }
    let attn = common::single_prompt(nh, s, weights, vec![0], 1);
    heads::ih_scores(&attn).unwrap()
}

#[test]
fn ih_matches_triple_loop() {
    let attn = random_attention(5, 3, 4, 3);
    assert_eq!(heads::ih_scores(&attn).unwrap().scores, oracle_ih(&attn));
    assert_eq!(heads::pth_scores(&attn).unwrap().scores, oracle_pth(&attn));
}

#[test]
fn four_token_previous_token_indices() {
    // Only A[1][0] and A[2][1] count; A[3][2] belongs to the last position.
    let s = 4;
    let mut w = vec![0.0f32; s * s];
    w[s] = 0.25; // [1][0]
    w[2 * s + 1] = 0.5; // [2][1]
    w[3 * s + 2] = 1.0; // [3][2]
    let attn = common::single_prompt(1, s, w, vec![0], 3);
    assert_eq!(heads::pth_scores(&attn).unwrap().scores, vec![vec![0.75]]);
}

#[test]
fn zero_tensor_scores_zero() {
    let attn = common::single_prompt(3, 5, vec![0.0; 3 * 25], vec![0, 2], 4);
    for kind in [ScoreKind::Pth, ScoreKind::Ih] {
        let t = heads::score_heads(&attn, kind).unwrap();
        assert!(t.scores.iter().flatten().all(|&s| s == 0.0));
        t.validate().unwrap();
    }
}

#[test]
fn full_final_mass_on_labels_scores_one_per_prompt() {
    let s = 5;
    let mut rng = SplitMix64::new(12);
    let mut prompts = Vec::new();
    for _ in 0..4 {
        let mut w = vec![0.0f32; 2 * s * s];
        for h in 0..2 {
            // Final row split over positions 1 and 3.
            let a = rng.below(1025) as f32 / 1024.0;
            w[h * s * s + 4 * s + 1] = a;
            w[h * s * s + 4 * s + 3] = 1.0 - a;
        }
        prompts.push(AttentionPrompt {
            meta: AttentionPromptMeta {
                length: s,
                label_positions: vec![1, 3],
                final_position: 4,
            },
            weights: w,
        });
    }
    let attn = AttentionDump {
        num_layers: 1,
        num_heads: 2,
        prompts,
    };
    assert_eq!(
        heads::ih_scores(&attn).unwrap().scores,
        vec![vec![4.0, 4.0]]
    );
}

#[test]
fn top_ten_percent_of_ten_heads_is_the_argmax() {
    let t = table(vec![0.1, 0.4, 0.2, 0.9, 0.3, 0.0, 0.5, 0.25, 0.6, 0.05]);
    assert_eq!(
        heads::select_top_heads(&t, 0.1).unwrap(),
        vec![HeadId(0, 3)]
    );
}

#[test]
fn equal_scores_pick_the_first_heads() {
    let t = table(vec![0.5; 20]);
    assert_eq!(
        heads::select_top_heads(&t, 0.1).unwrap(),
        vec![HeadId(0, 0), HeadId(0, 1)]
    );
}

#[test]
fn full_fraction_selects_every_head() {
    let t = table(vec![0.3, 0.1, 0.2]);
    let all = heads::select_top_heads(&t, 1.0).unwrap();
    assert_eq!(all, vec![HeadId(0, 0), HeadId(0, 2), HeadId(0, 1)]);
    assert!(heads::select_top_heads(&t, 0.0).is_err());
    assert!(heads::select_top_heads(&t, 1.5).is_err());
}

#[test]
fn controls_avoid_the_selected_heads() {
    let attn = random_attention(40, 4, 5, 2);
    let t = heads::ih_scores(&attn).unwrap();
    let top = heads::select_top_heads(&t, 0.1).unwrap();
    let chosen: BTreeSet<HeadId> = top.iter().copied().collect();
    let mut hits: BTreeMap<HeadId, usize> = BTreeMap::new();
    for seed in 0..1000 {
        let c = heads::random_control_heads(&t, top.len(), seed, &top).unwrap();
        assert_eq!(c.len(), top.len());
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        for h in c {
            assert!(!chosen.contains(&h));
            *hits.entry(h).or_default() += 1;
        }
    }
    // 18 eligible heads, 2 drawn per seed: about 111 hits each.
    assert_eq!(hits.len(), 18);
    assert!(hits.values().all(|&n| (60..=170).contains(&n)), "{hits:?}");
}

#[test]
fn controls_with_one_choice_left() {
    let t = table(vec![0.1, 0.2, 0.3, 0.4]);
    let excluded = [HeadId(0, 0), HeadId(0, 2)];
    let c = heads::random_control_heads(&t, 2, 77, &excluded).unwrap();
    assert_eq!(c, vec![HeadId(0, 1), HeadId(0, 3)]);
    assert!(heads::random_control_heads(&t, 3, 77, &excluded).is_err());
    assert_eq!(
        heads::random_control_heads(&t, 1, 5, &[]).unwrap(),
        heads::random_control_heads(&t, 1, 5, &[]).unwrap()
    );
}

fn outputs(rng: &mut SplitMix64, heads: &[HeadId], d: usize) -> HeadOutputDump {
    HeadOutputDump {
        hidden_dim: d,
        prompt_count: 50,
        outputs: heads
            .iter()
            .map(|&h| (h, (0..d).map(|_| rng.normal() as f32).collect()))
            .collect(),
    }
}

#[test]
fn single_head_task_vector_is_its_output() {
    let mut rng = SplitMix64::new(1);
    let o = outputs(&mut rng, &[HeadId(2, 1)], 4);
    let tv = heads::build_task_vector(&o, &[HeadId(2, 1)]).unwrap();
    let expected: Vec<f64> = o.outputs[&HeadId(2, 1)]
        .iter()
        .map(|&x| f64::from(x))
        .collect();
    assert_eq!(tv.vector, expected);
    assert_eq!(tv.prompt_count, 50);
}

#[test]
fn two_head_task_vector_by_hand() {
    let mut map = BTreeMap::new();
    map.insert(HeadId(0, 0), vec![1.0f32, -2.0, 0.5]);
    map.insert(HeadId(1, 3), vec![0.25f32, 2.0, 1.5]);
    let o = HeadOutputDump {
        hidden_dim: 3,
        prompt_count: 10,
        outputs: map,
    };
    let tv = heads::build_task_vector(&o, &[HeadId(1, 3), HeadId(0, 0)]).unwrap();
    assert_eq!(tv.vector, vec![1.25, 0.0, 2.0]);
    assert_eq!(tv.source_heads, vec![HeadId(0, 0), HeadId(1, 3)]);
    assert!(heads::build_task_vector(&o, &[HeadId(0, 0), HeadId(0, 0)]).is_err());
    assert!(heads::build_task_vector(&o, &[HeadId(4, 4)]).is_err());
    assert!(heads::build_task_vector(&o, &[]).is_err());
}

#[test]
fn five_head_task_vector_matches_naive_sum() {
    let mut rng = SplitMix64::new(9);
    let hs = [
        HeadId(3, 0),
        HeadId(0, 2),
        HeadId(1, 1),
        HeadId(0, 0),
        HeadId(2, 5),
    ];
    let o = outputs(&mut rng, &hs, 7);
    let tv = heads::build_task_vector(&o, &hs).unwrap();
    let mut order = hs.to_vec();
    order.sort();
    let mut naive = vec![0.0f64; 7];
    for h in order {
        for j in 0..7 {
            naive[j] += o.outputs[&h][j] as f64;
        }
    }
    assert_eq!(tv.vector, naive);
}

#[test]
fn ranked_table_validation() {
    let mut t = table(vec![0.2, 0.7, 0.1]);
    t.validate().unwrap();
    t.ranked.swap(0, 1);
    assert!(t.validate().is_err());
    let mut t = table(vec![0.2, 0.7, 0.1]);
    t.scores[0][1] = f64::NAN;
    assert!(t.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adding_a_prompt_never_lowers_scores(seed in any::<u64>(), nh in 1usize..4) {
        let full = random_attention(seed, 2, nh, 3);
        let mut fewer = full.clone();
        fewer.prompts.pop();
        for kind in [ScoreKind::Pth, ScoreKind::Ih] {
            let a = heads::score_heads(&fewer, kind).unwrap();
            let b = heads::score_heads(&full, kind).unwrap();
            for (x, y) in a.scores.iter().flatten().zip(b.scores.iter().flatten()) {
                prop_assert!(y >= x);
            }
        }
    }

    #[test]
    fn prompt_order_does_not_matter(seed in any::<u64>(), shift in 1usize..4) {
        let attn = random_attention(seed, 2, 3, 4);
        let mut rotated = attn.clone();
        rotated.prompts.rotate_left(shift);
        for kind in [ScoreKind::Pth, ScoreKind::Ih] {
            prop_assert_eq!(
                heads::score_heads(&attn, kind).unwrap().scores,
                heads::score_heads(&rotated, kind).unwrap().scores
            );
        }
    }

    #[test]
    fn task_vector_is_additive(seed in any::<u64>(), split in 1usize..5) {
        let mut rng = SplitMix64::new(seed);
        let hs: Vec<HeadId> = (0..5).map(|i| HeadId(i / 2, i % 2)).collect();
        // Dyadic outputs so the two sums round identically.
        let o = HeadOutputDump {
            hidden_dim: 3,
            prompt_count: 4,
            outputs: hs.iter().map(|&h| (h, (0..3).map(|_| rng.below(64) as f32 / 8.0 - 4.0).collect())).collect(),
        };
        let whole = heads::build_task_vector(&o, &hs).unwrap();
        let a = heads::build_task_vector(&o, &hs[..split]).unwrap();
        let b = heads::build_task_vector(&o, &hs[split..]).unwrap();
        let sum: Vec<f64> = a.vector.iter().zip(&b.vector).map(|(x, y)| x + y).collect();
        prop_assert_eq!(whole.vector, sum);
    }

    #[test]
    fn top_count_matches_integer_ceiling(num in 1usize..100, total in 1usize..200) {
        // fraction = num / 100 exactly in rationals.
        let f = num as f64 / 100.0;
        let exact = (num * total).div_ceil(100).clamp(1, total);
        prop_assert_eq!(heads::top_count(f, total), exact);
    }
}
