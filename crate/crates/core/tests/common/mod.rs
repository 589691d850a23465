//! Fixture builders and brute-force oracles shared by the integration
//! tests. Oracles here deliberately avoid the library's own algorithms.

#![allow(dead_code)]

use std::f64::consts::PI;

use hidden_geometry::dump::{
    AttentionDump, AttentionPrompt, AttentionPromptMeta, LabeledMatrix, UnembeddingView,
};
use hidden_geometry::rng::SplitMix64;
use nalgebra::DMatrix;

/// `n` rows in `d` dimensions drawn around one random center per label,
/// every label in `0..labels` present.
pub fn random_instance(rng: &mut SplitMix64, n: usize, d: usize, labels: usize) -> LabeledMatrix {
    let centers: Vec<Vec<f64>> = (0..labels)
        .map(|_| (0..d).map(|_| 1.5 * rng.normal()).collect())
        .collect();
    let spread = 0.2 + 1.5 * rng.next_f64();
    let mut ids: Vec<usize> = (0..n).map(|i| i % labels).collect();
    rng.shuffle(&mut ids);
    let rows = DMatrix::from_fn(n, d, |i, j| centers[ids[i]][j] + spread * rng.normal());
    LabeledMatrix::new(rows, ids, 0).unwrap()
}

/// A vocabulary of `size` random rows; label `y` maps to a random distinct
/// row.
pub fn random_vocab(rng: &mut SplitMix64, size: usize, d: usize, labels: usize) -> UnembeddingView {
    let rows: Vec<Vec<f64>> = (0..size)
        .map(|_| (0..d).map(|_| rng.normal()).collect())
        .collect();
    let mut order: Vec<usize> = (0..size).collect();
    rng.shuffle(&mut order);
    UnembeddingView::from_rows(&rows, order[..labels].to_vec()).unwrap()
}

fn plain_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

fn row_of(m: &LabeledMatrix, i: usize) -> Vec<f64> {
    (0..m.d()).map(|j| m.rows[(i, j)]).collect()
}

/// Fraction of rows whose argmax token (lowest id on ties) is their label's
/// token.
pub fn naive_accuracy(m: &LabeledMatrix, e: &UnembeddingView) -> f64 {
    let mut hits = 0;
    for i in 0..m.n() {
        let h = row_of(m, i);
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for r in 0..e.vocab_len() {
            let s = plain_dot(&e.row(r), &h);
            if s > best_score || (s == best_score && e.token_ids[r] < e.token_ids[best]) {
                best = r;
                best_score = s;
            }
        }
        if best == e.label_rows[m.labels[i]] {
            hits += 1;
        }
    }
    hits as f64 / m.n() as f64
}

/// Rows correct along `u`: label `a` needs `u·h ≥ 0`, the other `u·h < 0`.
pub fn count_along(points: &[[f64; 2]], is_a: &[bool], u: [f64; 2]) -> usize {
    points
        .iter()
        .zip(is_a)
        .filter(|(p, &a)| {
            let s = u[0] * p[0] + u[1] * p[1];
            if a {
                s >= 0.0
            } else {
                s < 0.0
            }
        })
        .count()
}

/// Exact 2-D maximum by evaluating every boundary direction and a point
/// slightly to each side of it (a quarter of the narrowest arc).
pub fn oracle_s_star_2d(m: &LabeledMatrix) -> f64 {
    let a = m.label_set()[0];
    let points: Vec<[f64; 2]> = (0..m.n())
        .map(|i| [m.rows[(i, 0)], m.rows[(i, 1)]])
        .collect();
    let is_a: Vec<bool> = m.labels.iter().map(|&l| l == a).collect();
    let mut angles: Vec<f64> = Vec::new();
    let mut exact: Vec<[f64; 2]> = Vec::new();
    for p in &points {
        if p[0] == 0.0 && p[1] == 0.0 {
            continue;
        }
        let r = p[0].hypot(p[1]);
        exact.push([-p[1] / r, p[0] / r]);
        exact.push([p[1] / r, -p[0] / r]);
        let t = p[1].atan2(p[0]);
        for s in [t + PI / 2.0, t - PI / 2.0] {
            angles.push(s.rem_euclid(2.0 * PI));
        }
    }
    angles.sort_by(f64::total_cmp);
    let mut delta: f64 = 0.1;
    for w in angles.windows(2) {
        if w[1] > w[0] {
            delta = delta.min((w[1] - w[0]) / 4.0);
        }
    }
    if let (Some(f), Some(l)) = (angles.first(), angles.last()) {
        let wrap = f + 2.0 * PI - l;
        if wrap > 0.0 {
            delta = delta.min(wrap / 4.0);
        }
    }
    let mut best = count_along(&points, &is_a, [1.0, 0.0]);
    for u in exact {
        best = best.max(count_along(&points, &is_a, u));
    }
    for t in angles {
        for s in [t - delta, t + delta] {
            best = best.max(count_along(&points, &is_a, [s.cos(), s.sin()]));
        }
    }
    best as f64 / m.n() as f64
}

/// Largest count over `steps` evenly spaced angles.
pub fn grid_s_star_2d(m: &LabeledMatrix, steps: usize) -> f64 {
    let a = m.label_set()[0];
    let points: Vec<[f64; 2]> = (0..m.n())
        .map(|i| [m.rows[(i, 0)], m.rows[(i, 1)]])
        .collect();
    let is_a: Vec<bool> = m.labels.iter().map(|&l| l == a).collect();
    let mut best = 0;
    for k in 0..steps {
        let t = 2.0 * PI * k as f64 / steps as f64;
        best = best.max(count_along(&points, &is_a, [t.cos(), t.sin()]));
    }
    best as f64 / m.n() as f64
}

/// Random orthogonal matrix from the QR factor of a Gaussian matrix.
pub fn random_rotation(rng: &mut SplitMix64, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.normal());
    g.qr().q()
}

pub fn single_prompt(
    num_heads: usize,
    s: usize,
    weights: Vec<f32>,
    labels: Vec<usize>,
    fin: usize,
) -> AttentionDump {
    AttentionDump {
        num_layers: 1,
        num_heads,
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
