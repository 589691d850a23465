//! Binary logistic regression used by the separability score.
//!
//! Loss on `N` training rows with targets `y ∈ {+1, −1}`:
//!
//! ```text
//! J(w, b) = (1/N) Σ log(1 + exp(−y (w·x + b))) + (λ / 2N) ‖w‖²
//! ```
//!
//! The bias is not penalized. Optimization is full-batch gradient descent with
//! Armijo backtracking. Inputs are centered on the training mean and divided
//! by one global scale (the RMS entry of the centered training block), so an
//! orthogonal change of basis leaves predictions unchanged.

use nalgebra::{DMatrix, DVector};

use crate::dump::LabeledMatrix;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub lambda: f64,
    pub max_iter: usize,
    /// Stop once the gradient's largest absolute entry falls below this.
    pub grad_tol: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            max_iter: 100,
            grad_tol: 1e-6,
        }
    }
}

/// A fitted model in the caller's coordinates: predict the positive class
/// when `weights · x + bias ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        linalg::dot(&self.weights, x) + self.bias
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

struct Problem<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    lambda: f64,
}

impl Problem<'_> {
    fn n(&self) -> f64 {
        self.x.nrows() as f64
    }

    fn loss(&self, w: &DVector<f64>, b: f64) -> f64 {
        let z = self.x * w;
        let data: f64 = z
            .iter()
            .zip(self.y)
            .map(|(zi, yi)| softplus(-yi * (zi + b)))
            .sum();
        data / self.n() + self.lambda / (2.0 * self.n()) * w.norm_squared()
    }

    fn gradient(&self, w: &DVector<f64>, b: f64) -> (DVector<f64>, f64) {
        let z = self.x * w;
        // d/dz softplus(−y z) = −y σ(−y z)
        let r = DVector::from_iterator(
            self.y.len(),
            z.iter()
                .zip(self.y)
                .map(|(zi, yi)| -yi * sigmoid(-yi * (zi + b))),
        );
        let gw = self.x.transpose() * &r / self.n() + w * (self.lambda / self.n());
        let gb = r.sum() / self.n();
        (gw, gb)
    }
}

/// Fits on rows of `x`; `positive[i]` marks the `+1` class.
pub fn fit(x: &DMatrix<f64>, positive: &[bool], cfg: &ClassifierConfig) -> LogisticModel {
    assert_eq!(x.nrows(), positive.len());
    let (n, d) = x.shape();
    let (centered, mean) = linalg::center(x);
    let rms = (centered.norm_squared() / (n * d) as f64).sqrt();
    let scale = if rms > 0.0 && rms.is_finite() {
        rms
    } else {
        1.0
    };
    let xs = centered / scale;
    let y: Vec<f64> = positive
        .iter()
        .map(|&p| if p { 1.0 } else { -1.0 })
        .collect();
    let problem = Problem {
        x: &xs,
        y: &y,
        lambda: cfg.lambda,
    };

    let mut w = DVector::zeros(d);
    let mut b = 0.0;
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    let mut f = problem.loss(&w, b);
    while iterations < cfg.max_iter {
        let (gw, gb) = problem.gradient(&w, b);
        let ginf = gw.amax().max(gb.abs());
        if ginf < cfg.grad_tol {
            converged = true;
            break;
        }
        let gnorm2 = gw.norm_squared() + gb * gb;
        let mut t = step * 2.0;
        loop {
            let w_new = &w - &gw * t;
            let b_new = b - gb * t;
            let f_new = problem.loss(&w_new, b_new);
            if f_new <= f - 1e-4 * t * gnorm2 || t < 1e-20 {
                w = w_new;
                b = b_new;
                f = f_new;
                break;
            }
            t *= 0.5;
        }
        step = t;
        iterations += 1;
    }
    if !converged {
        let (gw, gb) = problem.gradient(&w, b);
        converged = gw.amax().max(gb.abs()) < cfg.grad_tol;
    }

    // Undo the standardization: w·(x − μ)/s + b.
    let weights: Vec<f64> = w.iter().map(|wi| wi / scale).collect();
    let bias = b - linalg::dot(&weights, mean.as_slice());
    LogisticModel {
        weights,
        bias,
        iterations,
        converged,
    }
}

/// Stratified 50/50 split of a binary matrix.
///
/// Within each label, rows are first put in an order that depends only on
/// their geometry (squared distance to the label mean, then squared norm,
/// then index), then shuffled by the seeded generator. The first
/// `⌊count/2⌋` rows of each label train; the rest are held out. Labels are
/// processed in ascending order from one stream.
pub fn stratified_split(m: &LabeledMatrix, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if m.n() < 4 {
        return Err(Error::Degenerate(format!(
            "separability score needs at least 4 rows, found {}",
            m.n()
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in m.label_set() {
        let mut idx = m.indices_of(label);
        if idx.len() < 2 {
            return Err(Error::Degenerate(format!(
                "label {label} has {} row(s); both splits need one",
                idx.len()
            )));
        }
        let sub = m.rows.select_rows(&idx);
        let mean = linalg::column_means(&sub);
        let key = |i: usize| {
            let r = linalg::row(&m.rows, i);
            let dist: f64 = r
                .iter()
                .zip(mean.iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            (dist, linalg::dot(&r, &r))
        };
        let mut keyed: Vec<(f64, f64, usize)> = idx
            .iter()
            .map(|&i| {
                let (a, b) = key(i);
                (a, b, i)
            })
            .collect();
        keyed.sort_by(|x, y| {
            x.0.total_cmp(&y.0)
                .then(x.1.total_cmp(&y.1))
                .then(x.2.cmp(&y.2))
        });
        idx = keyed.into_iter().map(|k| k.2).collect();
        rng.shuffle(&mut idx);
        let half = idx.len() / 2;
        train.extend_from_slice(&idx[..half]);
        test.extend_from_slice(&idx[half..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Held-out accuracy of a classifier trained on the stratified split.
/// The lower label id is the positive class.
pub fn held_out_accuracy(m: &LabeledMatrix, seed: u64, cfg: &ClassifierConfig) -> Result<f64> {
    let (a, _) = m.binary_labels()?;
    let (train, test) = stratified_split(m, seed)?;
    let x = m.rows.select_rows(&train);
    let positive: Vec<bool> = train.iter().map(|&i| m.labels[i] == a).collect();
    let model = fit(&x, &positive, cfg);
    let correct = test
        .iter()
        .filter(|&&i| {
            let predicted_a = model.decision(&linalg::row(&m.rows, i)) >= 0.0;
            predicted_a == (m.labels[i] == a)
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Fits on every row and returns the weight vector, used as a candidate
/// direction by the sampled separability search.
pub fn full_fit_direction(m: &LabeledMatrix, cfg: &ClassifierConfig) -> Result<Vec<f64>> {
    let (a, _) = m.binary_labels()?;
    let positive: Vec<bool> = m.labels.iter().map(|&y| y == a).collect();
    Ok(fit(&m.rows, &positive, cfg).weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_pair(n_per: usize, sep: f64, seed: u64) -> LabeledMatrix {
        let mut rng = SplitMix64::new(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (label, sign) in [(0usize, 1.0), (1, -1.0)] {
            for _ in 0..n_per {
                rows.push(vec![sign * sep + rng.normal(), rng.normal()]);
                labels.push(label);
            }
        }
        LabeledMatrix::from_rows(&rows, labels, 0).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(5);
        let x = DMatrix::from_fn(9, 3, |_, _| rng.normal());
        let y: Vec<f64> = (0..9)
            .map(|i| if i % 3 == 0 { 1.0 } else { -1.0 })
            .collect();
        let p = Problem {
            x: &x,
            y: &y,
            lambda: 0.7,
        };
        let w = DVector::from_vec(vec![0.3, -0.2, 0.5]);
        let b = 0.1;
        let (gw, gb) = p.gradient(&w, b);
        let h = 1e-6;
        for j in 0..3 {
            let mut wp = w.clone();
            wp[j] += h;
            let mut wm = w.clone();
            wm[j] -= h;
            let fd = (p.loss(&wp, b) - p.loss(&wm, b)) / (2.0 * h);
            assert!((fd - gw[j]).abs() < 1e-8, "{fd} vs {}", gw[j]);
        }
        let fd = (p.loss(&w, b + h) - p.loss(&w, b - h)) / (2.0 * h);
        assert!((fd - gb).abs() < 1e-8);
    }

    #[test]
    fn converges_on_small_problem() {
        let m = gaussian_pair(20, 0.5, 8);
        let positive: Vec<bool> = m.labels.iter().map(|&y| y == 0).collect();
        let model = fit(&m.rows, &positive, &ClassifierConfig::default());
        assert!(model.converged, "{} iterations", model.iterations);
    }

    #[test]
    fn perfectly_separable_points() {
        let mut rows = vec![vec![1.0, 0.0]; 50];
        rows.extend(vec![vec![-1.0, 0.0]; 50]);
        let labels = (0..100).map(|i| usize::from(i >= 50)).collect();
        let m = LabeledMatrix::from_rows(&rows, labels, 0).unwrap();
        let acc = held_out_accuracy(&m, 0, &ClassifierConfig::default()).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn identical_rows_give_chance() {
        let rows = vec![vec![0.3, -0.7, 1.1]; 100];
        let labels = (0..100).map(|i| i % 2).collect();
        let m = LabeledMatrix::from_rows(&rows, labels, 0).unwrap();
        let acc = held_out_accuracy(&m, 11, &ClassifierConfig::default()).unwrap();
        assert!((0.35..=0.65).contains(&acc), "{acc}");
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let m = gaussian_pair(7, 1.0, 2);
        let (train, test) = stratified_split(&m, 4).unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(test.len(), 8);
        assert_eq!(stratified_split(&m, 4).unwrap(), (train, test));
    }

    #[test]
    fn tiny_inputs_are_rejected() {
        let m =
            LabeledMatrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]], vec![0, 1, 1], 0).unwrap();
        assert!(matches!(
            held_out_accuracy(&m, 0, &ClassifierConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }
}
