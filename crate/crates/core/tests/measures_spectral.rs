mod common;

use hidden_geometry::dump::{LabeledMatrix, UnembeddingView};
use hidden_geometry::linalg;
use hidden_geometry::measures::{self, Aggregation, LabelDirection, MeasureContext, MeasureName};
use hidden_geometry::rng::SplitMix64;
use hidden_geometry::spectral::{self, RetentionConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn rng_instance(seed: u64, n: usize, d: usize, labels: usize) -> (LabeledMatrix, UnembeddingView) {
    let mut rng = SplitMix64::new(seed);
    let m = common::random_instance(&mut rng, n, d, labels);
    let e = common::random_vocab(&mut rng, labels + 3, d, labels);
    (m, e)
}

#[test]
fn alignment_by_hand() {
    // Projections on e₁: label 0 at 3 and 1, label 1 at −1 and −3. Population
    // variance 5, class means ±2, pooled deviation 1.
    let m = LabeledMatrix::from_rows(
        &[
            vec![3.0, 1.0],
            vec![1.0, -1.0],
            vec![-1.0, 2.0],
            vec![-3.0, 0.0],
        ],
        vec![0, 0, 1, 1],
        0,
    )
    .unwrap();
    let dir = LabelDirection::new(&[1.0, 0.0], (0, 1)).unwrap();
    assert_eq!(measures::variance_alignment(&m, &dir).unwrap().value, 5.0);
    assert_eq!(measures::mean_alignment(&m, &dir).unwrap().value, 4.0);
    assert_eq!(measures::composite_alignment(&m, &dir).unwrap().value, 20.0);
}

#[test]
fn zero_variance_layer_is_flagged() {
    let m = LabeledMatrix::from_rows(&vec![vec![1.0, 2.0]; 6], vec![0, 1, 0, 1, 0, 1], 0).unwrap();
    assert!(matches!(
        measures::effective_dimension(&m),
        Err(hidden_geometry::Error::Degenerate(_))
    ));
    let v = measures::aggregate_pairwise(
        &m,
        MeasureName::EffectiveDimension,
        &MeasureContext::new(None, 0),
    )
    .unwrap();
    assert!(v.degenerate);
    assert_eq!(v.value, 0.0);
}

#[test]
fn multiclass_uses_pairwise_mean() {
    let (m, e) = rng_instance(4, 30, 4, 3);
    let ctx = MeasureContext::new(Some(&e), 1);
    let all = measures::measure_suite(&m, &MeasureName::ALL, &ctx).unwrap();
    for v in &all {
        assert_eq!(v.aggregation, Aggregation::PairwiseMean);
        let pairs = v.pair_values.as_ref().unwrap();
        assert_eq!(pairs.len(), 3);
        let mean = pairs.iter().map(|p| p.value).sum::<f64>() / 3.0;
        assert!(
            (mean - v.value).abs() <= 1e-12 * mean.abs().max(1.0),
            "{}",
            v.name
        );
    }
    let (b, eb) = rng_instance(5, 20, 4, 2);
    for v in
        measures::measure_suite(&b, &MeasureName::ALL, &MeasureContext::new(Some(&eb), 1)).unwrap()
    {
        assert_eq!(v.aggregation, Aggregation::Binary);
    }
}

#[test]
fn decode_unit_row_finds_its_token() {
    let rows: Vec<Vec<f64>> = (0..5)
        .map(|i| {
            let mut r = vec![0.0; 5];
            r[i] = 1.0 + i as f64;
            r
        })
        .collect();
    let e = UnembeddingView::from_rows(&rows, vec![0, 1]).unwrap();
    let (plus, _) = spectral::decode_direction(&rows[3], &e, 2).unwrap();
    assert_eq!(plus.top_tokens[0].token_id, 3);
}

#[test]
fn retention_of_orthogonal_spans_is_zero() {
    // prev varies only in the first two coordinates, next only in the last two.
    let mut rng = SplitMix64::new(8);
    let prev = DMatrix::from_fn(12, 4, |_, j| if j < 2 { rng.normal() } else { 0.0 });
    let next = DMatrix::from_fn(12, 4, |_, j| if j >= 2 { rng.normal() } else { 0.0 });
    let labels: Vec<usize> = (0..12).map(|i| i % 2).collect();
    let prev = LabeledMatrix::new(prev, labels.clone(), 0).unwrap();
    let next = LabeledMatrix::new(next, labels, 1).unwrap();
    let cfg = RetentionConfig {
        rank: 2,
        ..RetentionConfig::default()
    };
    let rep = spectral::retention_analysis(&prev, &next, None, &cfg).unwrap();
    assert_eq!(rep.rank, 2);
    for n in rep.row_norms {
        assert!(n.abs() < 1e-12);
    }
}

#[test]
fn retention_matches_dense_oracle() {
    let mut rng = SplitMix64::new(21);
    let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
    let a = LabeledMatrix::new(
        DMatrix::from_fn(20, 8, |_, _| rng.normal()),
        labels.clone(),
        0,
    )
    .unwrap();
    let b = LabeledMatrix::new(DMatrix::from_fn(20, 8, |_, _| rng.normal()), labels, 1).unwrap();
    let cfg = RetentionConfig {
        rank: 4,
        ..RetentionConfig::default()
    };
    let e = common::random_vocab(&mut rng, 12, 8, 2);
    let rep = spectral::retention_analysis(&a, &b, Some(&e), &cfg).unwrap();
    // Right singular vectors from the Gram eigendecomposition.
    let top = |m: &LabeledMatrix| {
        let (c, _) = linalg::center(&m.rows);
        let eig = (c.transpose() * &c).symmetric_eigen();
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        DMatrix::from_fn(8, 4, |r, k| eig.eigenvectors[(r, order[k])])
    };
    let vp = top(&a);
    let vn = top(&b);
    for j in 0..4 {
        let oracle = (vn.transpose() * vp.column(j)).norm();
        assert!(
            (oracle - rep.row_norms[j]).abs() < 1e-9,
            "{j}: {oracle} vs {}",
            rep.row_norms[j]
        );
    }
    assert_eq!(rep.retained.len(), 3);
    assert_eq!(rep.filtered.len(), 3);
    assert!(!rep.decoded.is_empty());
}

#[test]
fn retention_clips_rank_with_warning() {
    let mut rng = SplitMix64::new(2);
    let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
    let flat = DMatrix::from_fn(10, 6, |_, j| if j == 0 { rng.normal() } else { 0.0 });
    let m = LabeledMatrix::new(flat, labels, 0).unwrap();
    let rep = spectral::retention_analysis(&m, &m, None, &RetentionConfig::default()).unwrap();
    assert_eq!(rep.rank, 1);
    assert_eq!(rep.warnings.len(), 1);
}

#[test]
fn rank_one_input_keeps_its_norm() {
    // This input once tripped nalgebra's SVD into factors that did not
    // reconstruct it.
    let mut rng = SplitMix64::new(1958195999333102618);
    let m = common::random_instance(&mut rng, 20, 6, 2);
    let once = spectral::denoise(&m, 1).unwrap();
    let (c, _) = linalg::center(&once.rows);
    let svd = linalg::ThinSvd::direct(&c, true);
    let energy: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    assert!((energy.sqrt() - c.norm()).abs() < 1e-9 * c.norm());
    let twice = spectral::denoise(&once, 1).unwrap();
    assert!((&once.rows - &twice.rows).amax() < 1e-9);
}

#[test]
fn full_rank_denoise_has_no_gain() {
    let (m, e) = rng_instance(31, 24, 5, 2);
    assert_eq!(spectral::denoising_gain(&m, 5, &e).unwrap(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn measures_stay_in_range(seed in any::<u64>(), labels in 2usize..4, d in 2usize..7) {
        let (m, e) = rng_instance(seed, 24, d, labels);
        let ctx = MeasureContext::new(Some(&e), seed);
        for v in measures::measure_suite(&m, &MeasureName::ALL, &ctx).unwrap() {
            prop_assert!(v.value.is_finite());
            match v.name {
                MeasureName::SeparabilityScore
                | MeasureName::OutputAlignment
                | MeasureName::SingularAlignment => {
                    prop_assert!((0.0..=1.0).contains(&v.value), "{} = {}", v.name, v.value)
                }
                MeasureName::EffectiveDimension => {
                    prop_assert!(v.value >= 1.0 - 1e-12 && v.value <= d as f64 + 1e-12)
                }
                MeasureName::VarianceAlignment | MeasureName::VarianceAlignmentNormalized => {
                    prop_assert!(v.value >= 0.0, "{} = {}", v.name, v.value)
                }
                // Mean and composite alignment carry the sign of the mean gap.
                _ => {}
            }
        }
    }

    #[test]
    fn suite_matches_single_measures(seed in any::<u64>(), labels in 2usize..4) {
        let (m, e) = rng_instance(seed, 18, 3, labels);
        let ctx = MeasureContext::new(Some(&e), 3);
        let suite = measures::measure_suite(&m, &MeasureName::ALL, &ctx).unwrap();
        for v in suite {
            let single = measures::aggregate_pairwise(&m, v.name, &ctx).unwrap();
            prop_assert_eq!(v, single);
        }
    }

    #[test]
    fn denoise_is_idempotent_and_low_rank(seed in any::<u64>(), r in 1usize..5) {
        let (m, _) = rng_instance(seed, 20, 6, 2);
        let once = spectral::denoise(&m, r).unwrap();
        let twice = spectral::denoise(&once, r).unwrap();
        let scale = once.rows.amax().max(1.0);
        prop_assert!((&once.rows - &twice.rows).amax() <= 1e-9 * scale);
        let ed = measures::effective_dimension(&once).unwrap().value;
        prop_assert!(ed <= r as f64 + 1e-9);
    }

    #[test]
    fn steering_shifts_the_mean(seed in any::<u64>()) {
        let (m, _) = rng_instance(seed, 10, 4, 2);
        let v = vec![0.5, -1.0, 2.0, 0.25];
        let tv = hidden_geometry::heads::TaskVector { vector: v.clone(), source_heads: vec![], prompt_count: 1 };
        let back = hidden_geometry::heads::TaskVector { vector: v.iter().map(|x| -x).collect(), source_heads: vec![], prompt_count: 1 };
        let steered = hidden_geometry::heads::apply_steering(&m, &tv).unwrap();
        let restored = hidden_geometry::heads::apply_steering(&steered, &back).unwrap();
        prop_assert!((&restored.rows - &m.rows).amax() <= 1e-9);
        let before = linalg::column_means(&m.rows);
        let after = linalg::column_means(&steered.rows);
        for j in 0..4 {
            prop_assert!((after[j] - before[j] - v[j]).abs() <= 1e-9);
        }
    }

    #[test]
    fn minus_ranking_reverses_plus(seed in any::<u64>(), vocab in 2usize..12) {
        let mut rng = SplitMix64::new(seed);
        // Integer rows make exact ties likely.
        let rows: Vec<Vec<f64>> = (0..vocab)
            .map(|_| (0..3).map(|_| (rng.below(5) as f64) - 2.0).collect())
            .collect();
        let e = UnembeddingView::from_rows(&rows, vec![0, 1]).unwrap();
        let v = [1.0, (rng.below(3) as f64) - 1.0, 0.5];
        let (plus, minus) = spectral::decode_direction(&v, &e, vocab).unwrap();
        let p: Vec<usize> = plus.top_tokens.iter().map(|t| t.token_id).collect();
        let mut q: Vec<usize> = minus.top_tokens.iter().map(|t| t.token_id).collect();
        q.reverse();
        prop_assert_eq!(p, q);
        for w in plus.top_tokens.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
    }
}
