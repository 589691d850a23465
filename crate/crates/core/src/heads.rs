//! Previous-token and induction head scores, head selection and task
//! vectors.
//!
//! Attention tensors use 0-based positions and are indexed
//! `[layer][head][query][key]`, the query being the attending position. In
//! that convention a prompt of length `s` contributes
//!
//! ```text
//! PTH:  Σ_{q=1}^{s−2} A[q][q−1]          (every position but the first and
//!                                          last, attending one step back)
//! IH:   Σ_{p ∈ label_positions} A[final][p]
//! ```
//!
//! See `docs/format.md` for a worked 4-token example of the PTH indices.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dump::{AttentionDump, HeadId, HeadOutputDump, LabeledMatrix};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const DEFAULT_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Pth,
    Ih,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHead {
    pub layer: usize,
    pub head: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreTable {
    pub kind: ScoreKind,
    pub num_layers: usize,
    pub num_heads: usize,
    pub prompt_count: usize,
    /// `scores[layer][head]`.
    pub scores: Vec<Vec<f64>>,
    /// All heads by score descending, then `(layer, head)` ascending.
    pub ranked: Vec<RankedHead>,
}

fn rank(scores: &[Vec<f64>]) -> Vec<RankedHead> {
    let mut ranked: Vec<RankedHead> = scores
        .iter()
        .enumerate()
        .flat_map(|(l, row)| {
            row.iter().enumerate().map(move |(h, &score)| RankedHead {
                layer: l,
                head: h,
                score,
            })
        })
        .collect();
    ranked.sort_by(|x, y| {
        y.score
            .total_cmp(&x.score)
            .then((x.layer, x.head).cmp(&(y.layer, y.head)))
    });
    ranked
}

impl HeadScoreTable {
    fn from_scores(kind: ScoreKind, attn: &AttentionDump, scores: Vec<Vec<f64>>) -> Self {
        HeadScoreTable {
            kind,
            num_layers: attn.num_layers,
            num_heads: attn.num_heads,
            prompt_count: attn.prompts.len(),
            ranked: rank(&scores),
            scores,
        }
    }

    pub fn head_count(&self) -> usize {
        self.num_layers * self.num_heads
    }

    pub fn score(&self, head: HeadId) -> f64 {
        self.scores[head.0][head.1]
    }

    /// Checks shape, finiteness, sign and that `ranked` matches `scores`.
    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.num_layers
            || self.scores.iter().any(|r| r.len() != self.num_heads)
        {
            return Err(Error::manifest(
                "scores",
                "shape differs from num_layers × num_heads",
            ));
        }
        if self
            .scores
            .iter()
            .flatten()
            .any(|s| !s.is_finite() || *s < 0.0)
        {
            return Err(Error::manifest(
                "scores",
                "scores must be finite and non-negative",
            ));
        }
        if rank(&self.scores) != self.ranked {
            return Err(Error::manifest("ranked", "inconsistent with scores"));
        }
        Ok(())
    }
}

/// Sums `per_prompt(prompt, layer, head)` over prompts in ascending order.
fn accumulate(
    attn: &AttentionDump,
    per_prompt: impl Fn(usize, usize, usize) -> f64,
) -> Vec<Vec<f64>> {
    let mut scores = vec![vec![0.0; attn.num_heads]; attn.num_layers];
    for i in 0..attn.prompts.len() {
        for (l, row) in scores.iter_mut().enumerate() {
            for (h, s) in row.iter_mut().enumerate() {
                *s += per_prompt(i, l, h);
            }
        }
    }
    scores
}

/// Previous-token head scores.
pub fn pth_scores(attn: &AttentionDump) -> Result<HeadScoreTable> {
    attn.validate()?;
    if let Some((i, p)) = attn
        .prompts
        .iter()
        .enumerate()
        .find(|(_, p)| p.meta.length < 3)
    {
        return Err(Error::invalid(format!(
            "prompt {i} has {} tokens; previous-token scores need at least 3",
            p.meta.length
        )));
    }
    let nh = attn.num_heads;
    let scores = accumulate(attn, |i, l, h| {
        let p = &attn.prompts[i];
        (1..=p.meta.length - 2)
            .map(|q| f64::from(p.at(nh, l, h, q, q - 1)))
            .sum()
    });
    Ok(HeadScoreTable::from_scores(ScoreKind::Pth, attn, scores))
}

/// Induction head scores.
pub fn ih_scores(attn: &AttentionDump) -> Result<HeadScoreTable> {
    attn.validate()?;
    if let Some(i) = attn
        .prompts
        .iter()
        .position(|p| p.meta.label_positions.is_empty())
    {
        return Err(Error::invalid(format!("prompt {i} has no label positions")));
    }
    let nh = attn.num_heads;
    let scores = accumulate(attn, |i, l, h| {
        let p = &attn.prompts[i];
        let f = p.meta.final_position;
        p.meta
            .label_positions
            .iter()
            .map(|&k| f64::from(p.at(nh, l, h, f, k)))
            .sum()
    });
    Ok(HeadScoreTable::from_scores(ScoreKind::Ih, attn, scores))
}

pub fn score_heads(attn: &AttentionDump, kind: ScoreKind) -> Result<HeadScoreTable> {
    match kind {
        ScoreKind::Pth => pth_scores(attn),
        ScoreKind::Ih => ih_scores(attn),
    }
}

/// `⌈fraction · total⌉`, clamped to `[1, total]`. A tolerance of `1e-9`
/// keeps products like `0.1 · 30` from rounding up past 3.
pub fn top_count(fraction: f64, total: usize) -> usize {
    let raw = (fraction * total as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(total)
}

/// The top `⌈fraction · L · N_h⌉` heads in ranked order.
pub fn select_top_heads(t: &HeadScoreTable, fraction: f64) -> Result<Vec<HeadId>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let count = top_count(fraction, t.head_count());
    Ok(t.ranked[..count]
        .iter()
        .map(|r| HeadId(r.layer, r.head))
        .collect())
}

/// `count` heads drawn uniformly without replacement from the heads not in
/// `excluded`, returned in `(layer, head)` order.
///
/// The pool is every remaining head in `(layer, head)` order; position `i`
/// is swapped with `i + below(pool − i)` for `i < count`.
pub fn random_control_heads(
    t: &HeadScoreTable,
    count: usize,
    seed: u64,
    excluded: &[HeadId],
) -> Result<Vec<HeadId>> {
    let excluded: BTreeSet<HeadId> = excluded.iter().copied().collect();
    let mut pool: Vec<HeadId> = (0..t.num_layers)
        .flat_map(|l| (0..t.num_heads).map(move |h| HeadId(l, h)))
        .filter(|h| !excluded.contains(h))
        .collect();
    if count > pool.len() {
        return Err(Error::invalid(format!(
            "asked for {count} control heads but only {} remain after exclusion",
            pool.len()
        )));
    }
    let mut rng = SplitMix64::new(seed);
    for i in 0..count {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    let mut chosen = pool[..count].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskVector {
    pub vector: Vec<f64>,
    pub source_heads: Vec<HeadId>,
    pub prompt_count: usize,
}

/// Sum of the selected heads' mean outputs, accumulated in `f64` in
/// ascending `(layer, head)` order.
pub fn build_task_vector(outputs: &HeadOutputDump, heads: &[HeadId]) -> Result<TaskVector> {
    if heads.is_empty() {
        return Err(Error::invalid("a task vector needs at least one head"));
    }
    let mut sorted = heads.to_vec();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!(
            "head [{}, {}] listed twice",
            w[0].0, w[0].1
        )));
    }
    let mut vector = vec![0.0f64; outputs.hidden_dim];
    for head in &sorted {
        let out = outputs.outputs.get(head).ok_or_else(|| {
            Error::invalid(format!(
                "no stored output for head [{}, {}]",
                head.0, head.1
            ))
        })?;
        for (acc, &x) in vector.iter_mut().zip(out) {
            *acc += f64::from(x);
        }
    }
    Ok(TaskVector {
        vector,
        source_heads: sorted,
        prompt_count: outputs.prompt_count,
    })
}

/// Adds the task vector to every row. Only the given layer's states change;
/// propagating through later layers needs the model.
pub fn apply_steering(m: &LabeledMatrix, tv: &TaskVector) -> Result<LabeledMatrix> {
    if tv.vector.len() != m.d() {
        return Err(Error::invalid(format!(
            "task vector has {} entries, hidden states have {}",
            tv.vector.len(),
            m.d()
        )));
    }
    let mut rows = m.rows.clone();
    for (j, mut col) in rows.column_iter_mut().enumerate() {
        col.add_scalar_mut(tv.vector[j]);
    }
    m.with_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dump::{AttentionPrompt, AttentionPromptMeta};

    fn one_head(s: usize, weights: Vec<f32>, labels: Vec<usize>, fin: usize) -> AttentionDump {
        AttentionDump {
            num_layers: 1,
            num_heads: 1,
            prompts: vec![AttentionPrompt {
                meta: AttentionPromptMeta {
                    length: s,
                    label_positions: labels,
                    final_position: fin,
                },
                weights,
            }],
        }
    }

    #[test]
    fn perfect_previous_token_pattern() {
        let mut w = vec![0.0f32; 16];
        w[0] = 1.0;
        for q in 1..4 {
            w[q * 4 + q - 1] = 1.0;
        }
        let t = pth_scores(&one_head(4, w, vec![0], 3)).unwrap();
        assert_eq!(t.scores[0][0], 2.0);
    }

    #[test]
    fn short_prompt_rejected() {
        let w = vec![1.0f32, 0.0, 0.5, 0.5];
        assert!(pth_scores(&one_head(2, w, vec![0], 1)).is_err());
    }

    #[test]
    fn top_count_rounding() {
        assert_eq!(top_count(0.1, 10), 1);
        assert_eq!(top_count(0.1, 30), 3);
        assert_eq!(top_count(0.1, 31), 4);
        assert_eq!(top_count(0.001, 10), 1);
        assert_eq!(top_count(1.0, 7), 7);
    }

    #[test]
    fn duplicate_heads_rejected() {
        let mut outputs = std::collections::BTreeMap::new();
        outputs.insert(HeadId(0, 0), vec![1.0f32]);
        let dump = HeadOutputDump {
            hidden_dim: 1,
            prompt_count: 1,
            outputs,
        };
        assert!(build_task_vector(&dump, &[HeadId(0, 0), HeadId(0, 0)]).is_err());
        assert!(build_task_vector(&dump, &[HeadId(1, 0)]).is_err());
        assert!(build_task_vector(&dump, &[]).is_err());
    }
}
