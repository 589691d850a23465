//! Seeded synthetic hidden states with controlled separability and
//! alignment.
//!
//! All randomness comes from [`SplitMix64`], drawn in the order documented on
//! each generator, so the same seed gives bit-identical output.

use std::f64::consts::FRAC_PI_2;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bounds::{self, CellConfig};
use crate::dump::{
    DemoSelection, HiddenStateDump, LabelStyle, LabeledMatrix, Mode, RunManifest, Setting,
    Unembedding, UnembeddingScope, UnembeddingView, SCHEMA_VERSION,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interference {
    pub count: usize,
    /// Every interfering logit stays this far below the best label logit of
    /// every row.
    pub margin: f64,
}

/// Gaussian clusters plus an unembedding whose label difference sits at a
/// chosen angle from the inter-mean direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub num_labels: usize,
    pub cluster_means: Vec<Vec<f64>>,
    /// Each cluster has covariance `cluster_cov_scale · I`.
    pub cluster_cov_scale: f64,
    /// Angle in radians between `μ_0 − μ_1` and `E_0 − E_1`.
    pub e_diff_angle: f64,
    #[serde(default)]
    pub interference: Interference,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Two clusters at `±(separation / 2) e₁`.
    pub fn binary(n: usize, d: usize, separation: f64, cov: f64, angle: f64, seed: u64) -> Self {
        let mut mu = vec![0.0; d];
        mu[0] = separation / 2.0;
        let neg = mu.iter().map(|x| -x).collect();
        SyntheticSpec {
            n,
            d,
            num_labels: 2,
            cluster_means: vec![mu, neg],
            cluster_cov_scale: cov,
            e_diff_angle: angle,
            interference: Interference::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_labels < 2 {
            return Err(Error::invalid("synthetic instances need at least 2 labels"));
        }
        if self.n < 2 * self.num_labels {
            return Err(Error::invalid(format!(
                "n = {} is below 2 rows per label",
                self.n
            )));
        }
        if self.d == 0 {
            return Err(Error::invalid("d must be at least 1"));
        }
        if !(self.cluster_cov_scale >= 0.0 && self.cluster_cov_scale.is_finite()) {
            return Err(Error::invalid(
                "cluster_cov_scale must be finite and non-negative",
            ));
        }
        if self.cluster_means.len() != self.num_labels
            || self.cluster_means.iter().any(|m| m.len() != self.d)
        {
            return Err(Error::invalid(format!(
                "cluster_means must hold {} vectors of length {}",
                self.num_labels, self.d
            )));
        }
        if self.cluster_means.iter().flatten().any(|x| !x.is_finite())
            || !self.e_diff_angle.is_finite()
            || !(self.interference.margin >= 0.0 && self.interference.margin.is_finite())
        {
            return Err(Error::invalid(
                "spec values must be finite, margin non-negative",
            ));
        }
        if self.d == 1 && self.e_diff_angle != 0.0 {
            return Err(Error::invalid(
                "a nonzero angle to the label direction needs d ≥ 2",
            ));
        }
        Ok(())
    }
}

/// Row `i` gets label `i mod num_labels`; its entries are the label mean
/// plus `√cov · z` with `z` drawn row by row, coordinate by coordinate.
fn gaussian_rows(
    n: usize,
    means: &[Vec<f64>],
    cov: f64,
    rng: &mut SplitMix64,
) -> (DMatrix<f64>, Vec<usize>) {
    let m = means.len();
    let d = means[0].len();
    let sd = cov.sqrt();
    let labels: Vec<usize> = (0..n).map(|i| i % m).collect();
    let mut rows = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            rows[(i, j)] = means[labels[i]][j] + sd * rng.normal();
        }
    }
    (rows, labels)
}

/// Rotation by `angle` in the plane spanned by orthonormal `a` and `b`,
/// taking `a` toward `b`.
fn rotate_in_plane(x: &[f64], a: &[f64], b: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = if angle == FRAC_PI_2 {
        (1.0, 0.0)
    } else {
        angle.sin_cos()
    };
    let xa = linalg::dot(x, a);
    let xb = linalg::dot(x, b);
    x.iter()
        .zip(a.iter().zip(b))
        .map(|(&xi, (&ai, &bi))| xi + (c - 1.0) * (xa * ai + xb * bi) + s * (xa * bi - xb * ai))
        .collect()
}

/// Unit vector orthogonal to `a`: Gram–Schmidt on the standard basis vector
/// least aligned with `a` (lowest index on ties).
fn orthogonal_partner(a: &[f64]) -> Vec<f64> {
    let mut best = 0;
    for (j, x) in a.iter().enumerate() {
        if x.abs() < a[best].abs() {
            best = j;
        }
    }
    let mut p: Vec<f64> = a.iter().map(|x| -a[best] * x).collect();
    p[best] += 1.0;
    linalg::normalized(&p).expect("d ≥ 2 leaves an orthogonal direction")
}

/// Appends `count` interfering rows `t · q`, `q` a seeded random unit
/// vector, with `t` chosen by bisection so that the largest
/// `E_v·hᵢ − max_y E_y·hᵢ` over rows equals `−margin`.
fn add_interference(
    label_rows: &[Vec<f64>],
    h: &DMatrix<f64>,
    count: usize,
    margin: f64,
    rng: &mut SplitMix64,
) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<Vec<f64>> = (0..h.nrows()).map(|i| linalg::row(h, i)).collect();
    let best: Vec<f64> = rows
        .iter()
        .map(|r| {
            label_rows
                .iter()
                .map(|e| linalg::dot(e, r))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let gap_at = |q: &[f64], t: f64| {
        rows.iter()
            .zip(&best)
            .map(|(r, b)| t * linalg::dot(q, r) - b)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut out = Vec::with_capacity(count);
    for v in 0..count {
        let mut q = rng.unit_vector(h.ncols());
        if gap_at(&q, 0.0) > -margin {
            return Err(Error::invalid(format!(
                "no interfering token can stay {margin} below every row's best label logit"
            )));
        }
        if rows.iter().all(|r| linalg::dot(&q, r) <= 0.0) {
            q.iter_mut().for_each(|x| *x = -*x);
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut grow = 0;
        while gap_at(&q, hi) <= -margin {
            lo = hi;
            hi *= 2.0;
            grow += 1;
            if grow > 200 {
                return Err(Error::invalid(format!("interfering token {v} never binds")));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gap_at(&q, mid) <= -margin {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        out.push(q.iter().map(|x| lo * x).collect());
    }
    Ok(out)
}

fn view(label_rows: Vec<Vec<f64>>, extra: Vec<Vec<f64>>) -> Result<UnembeddingView> {
    let m = label_rows.len();
    let mut all = label_rows;
    all.extend(extra);
    let names: Vec<String> = (0..all.len())
        .map(|r| {
            if r < m {
                format!("label_{r}")
            } else {
                format!("other_{}", r - m)
            }
        })
        .collect();
    let d = all[0].len();
    let matrix = DMatrix::from_fn(all.len(), d, |i, j| all[i][j]);
    UnembeddingView::new(
        matrix,
        (0..all.len()).collect(),
        names,
        (0..m).collect(),
        UnembeddingScope::Full,
    )
}

/// Draws the rows, then the interfering token directions.
///
/// Label tokens are `E_y = R μ_y`, `R` the rotation by `e_diff_angle` in the
/// plane of the unit inter-mean direction `μ̂ = (μ_0 − μ_1)/‖·‖` and its
/// [`orthogonal_partner`]; hence `E_0 − E_1 = R (μ_0 − μ_1)` makes exactly
/// that angle with `μ̂`. Token ids are `0..num_labels` for labels, then the
/// interfering tokens.
pub fn gen_instance(spec: &SyntheticSpec) -> Result<(LabeledMatrix, UnembeddingView)> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    let (rows, labels) = gaussian_rows(
        spec.n,
        &spec.cluster_means,
        spec.cluster_cov_scale,
        &mut rng,
    );
    let diff: Vec<f64> = spec.cluster_means[0]
        .iter()
        .zip(&spec.cluster_means[1])
        .map(|(a, b)| a - b)
        .collect();
    let label_rows: Vec<Vec<f64>> = if spec.d == 1 {
        spec.cluster_means.clone()
    } else {
        let a = linalg::normalized(&diff)
            .ok_or_else(|| Error::invalid("clusters 0 and 1 share a mean"))?;
        let b = orthogonal_partner(&a);
        spec.cluster_means
            .iter()
            .map(|mu| rotate_in_plane(mu, &a, &b, spec.e_diff_angle))
            .collect()
    };
    let extra = add_interference(
        &label_rows,
        &rows,
        spec.interference.count,
        spec.interference.margin,
        &mut rng,
    )?;
    let m = LabeledMatrix::new(rows, labels, 0)?;
    Ok((m, view(label_rows, extra)?))
}

/// Inputs for [`gen_equality_instance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EqualitySpec {
    pub n: usize,
    pub d: usize,
    pub separation: f64,
    pub cluster_cov_scale: f64,
    pub interference_count: usize,
    pub seed: u64,
}

/// A binary instance built to meet both equality conditions.
///
/// Draws a random unit mean direction `r̂`, then the rows of clusters at
/// `±(separation/2) r̂`, then the interfering directions. `S*` is computed
/// exactly (sweep for `d = 2`, cell enumeration otherwise) and among the
/// maximizers the one farthest from every row's boundary becomes `u*`. Label
/// tokens are `E_0 = u*/2`, `E_1 = −u*/2`; interfering tokens stay below
/// half the smallest `|u*·h|/2`.
pub fn gen_equality_instance(spec: &EqualitySpec) -> Result<(LabeledMatrix, UnembeddingView)> {
    if spec.n < 4 || spec.d < 2 {
        return Err(Error::invalid("equality instances need n ≥ 4 and d ≥ 2"));
    }
    let mut rng = SplitMix64::new(spec.seed);
    let dir = rng.unit_vector(spec.d);
    let mu: Vec<f64> = dir.iter().map(|x| x * spec.separation / 2.0).collect();
    let neg: Vec<f64> = mu.iter().map(|x| -x).collect();
    let (rows, labels) = gaussian_rows(spec.n, &[mu, neg], spec.cluster_cov_scale, &mut rng);
    let m = LabeledMatrix::new(rows, labels, 0)?;

    let result = if spec.d == 2 {
        bounds::max_separability_2d(&m)?
    } else {
        bounds::max_separability_cells(
            &m,
            &CellConfig {
                record_certificate: true,
                ..CellConfig::default()
            },
        )?
    };
    if !result.is_exact() {
        return Err(Error::Degenerate(
            "rows are not in general position; S* is not exact".into(),
        ));
    }
    let h: Vec<Vec<f64>> = (0..m.n()).map(|i| linalg::row(&m.rows, i)).collect();
    let clearance = |u: &[f64]| {
        h.iter()
            .map(|r| linalg::dot(u, r).abs())
            .fold(f64::INFINITY, f64::min)
    };
    let mut u_star = result.u_star.clone();
    let mut best_clearance = clearance(&u_star);
    for u in result.certificate.iter().flatten() {
        if bounds::separability_along(&m, u)? == result.s_star {
            let c = clearance(u);
            if c > best_clearance {
                best_clearance = c;
                u_star = u.clone();
            }
        }
    }
    if best_clearance <= 0.0 {
        return Err(Error::Degenerate("every maximizer touches a row".into()));
    }
    let ea: Vec<f64> = u_star.iter().map(|x| x / 2.0).collect();
    let eb: Vec<f64> = u_star.iter().map(|x| -x / 2.0).collect();
    let label_rows = vec![ea, eb];
    let extra = add_interference(
        &label_rows,
        &m.rows,
        spec.interference_count,
        best_clearance / 4.0,
        &mut rng,
    )?;
    Ok((m, view(label_rows, extra)?))
}

/// Signal `±e₁` by label plus Gaussian noise of standard deviation
/// `noise_std` on `e₂ … e_{noise_dims+1}`. Label tokens are `±e₁`; each
/// noise axis is also a token, so large noise steals the argmax while a
/// rank-1 reconstruction keeps only the signal axis.
pub fn gen_noisy_signal(
    n: usize,
    noise_dims: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(LabeledMatrix, UnembeddingView)> {
    let d = noise_dims + 1;
    let mut rng = SplitMix64::new(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut rows = DMatrix::zeros(n, d);
    for i in 0..n {
        rows[(i, 0)] = if labels[i] == 0 { 1.0 } else { -1.0 };
        for j in 1..d {
            rows[(i, j)] = noise_std * rng.normal();
        }
    }
    let mut e1 = vec![0.0; d];
    e1[0] = 1.0;
    let label_rows = vec![e1.clone(), e1.iter().map(|x| -x).collect()];
    let extra: Vec<Vec<f64>> = (1..d)
        .map(|j| {
            let mut v = vec![0.0; d];
            v[j] = 1.0;
            v
        })
        .collect();
    Ok((
        LabeledMatrix::new(rows, labels, 0)?,
        view(label_rows, extra)?,
    ))
}

/// Per-layer cluster separation and angle to the label axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSchedule {
    pub separation: Vec<f64>,
    pub angle: Vec<f64>,
}

impl PhaseSchedule {
    /// Separation ramps linearly from 0 to `plateau` over the first
    /// `ramp_layers` layers, then stays; the angle is `π/2` before `onset`,
    /// `π/6` at `onset` and `final_angle` afterwards.
    pub fn canonical(
        num_layers: usize,
        ramp_layers: usize,
        plateau: f64,
        onset: usize,
        final_angle: f64,
    ) -> Self {
        let separation = (0..=num_layers)
            .map(|l| {
                if l >= ramp_layers {
                    plateau
                } else {
                    plateau * l as f64 / ramp_layers as f64
                }
            })
            .collect();
        let angle = (0..=num_layers)
            .map(|l| match l.cmp(&onset) {
                std::cmp::Ordering::Less => FRAC_PI_2,
                std::cmp::Ordering::Equal => std::f64::consts::FRAC_PI_6.max(final_angle),
                std::cmp::Ordering::Greater => final_angle,
            })
            .collect();
        PhaseSchedule { separation, angle }
    }

    /// Same separation ramp, angle fixed at `π/2`.
    pub fn zero_rotation(num_layers: usize, ramp_layers: usize, plateau: f64) -> Self {
        let mut s = Self::canonical(num_layers, ramp_layers, plateau, num_layers + 1, FRAC_PI_2);
        s.angle = vec![FRAC_PI_2; num_layers + 1];
        s
    }

    /// First layer whose angle is below `π/2`.
    pub fn onset(&self) -> Option<usize> {
        self.angle.iter().position(|&a| a < FRAC_PI_2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseProfileSpec {
    pub n: usize,
    pub d: usize,
    pub noise_std: f64,
    pub schedule: PhaseSchedule,
    /// Extra non-label tokens with small random rows.
    #[serde(default)]
    pub extra_tokens: usize,
    #[serde(default = "default_setting")]
    pub setting: Setting,
    pub seed: u64,
}

fn default_setting() -> Setting {
    Setting {
        mode: Mode::ZeroShot,
        num_demos: 0,
        demo_selection: DemoSelection::Random,
        label_style: LabelStyle::Natural,
    }
}

/// A multi-layer binary dump following `schedule`.
///
/// Noise `z` (`n × d`, row by row) is drawn once and shared by every layer;
/// then the extra token rows are drawn. Layer `l` holds
/// `±(s_l/2)(cos θ_l e₁ + sin θ_l e₂) + noise_std · z`, sign by label
/// (row `i` has label `i mod 2`), with `cos(π/2)` taken as exactly 0. Label
/// tokens are `E_0 = e₁`, `E_1 = −e₁`, so along the label axis every layer
/// with `θ = π/2` is bit-identical.
pub fn gen_phase_profile(spec: &PhaseProfileSpec) -> Result<HiddenStateDump> {
    let s = &spec.schedule;
    if s.separation.len() != s.angle.len() || s.separation.is_empty() {
        return Err(Error::invalid(
            "schedule needs equally long, nonempty separation and angle lists",
        ));
    }
    if spec.n < 4 || spec.d < 2 {
        return Err(Error::invalid("phase profiles need n ≥ 4 and d ≥ 2"));
    }
    let mut rng = SplitMix64::new(spec.seed);
    let z: Vec<f64> = (0..spec.n * spec.d).map(|_| rng.normal()).collect();
    let extra: Vec<Vec<f64>> = (0..spec.extra_tokens)
        .map(|_| {
            rng.unit_vector(spec.d)
                .into_iter()
                .map(|x| 0.1 * x)
                .collect()
        })
        .collect();

    let labels: Vec<usize> = (0..spec.n).map(|i| i % 2).collect();
    let layers: Vec<Vec<f32>> = s
        .separation
        .iter()
        .zip(&s.angle)
        .map(|(&sep, &theta)| {
            let (sin, cos) = if theta == FRAC_PI_2 {
                (1.0, 0.0)
            } else {
                theta.sin_cos()
            };
            let mut out = Vec::with_capacity(spec.n * spec.d);
            for i in 0..spec.n {
                let sign = if labels[i] == 0 { 1.0 } else { -1.0 };
                for j in 0..spec.d {
                    let mean = match j {
                        0 => sign * sep / 2.0 * cos,
                        1 => sign * sep / 2.0 * sin,
                        _ => 0.0,
                    };
                    out.push((mean + spec.noise_std * z[i * spec.d + j]) as f32);
                }
            }
            out
        })
        .collect();

    let mut unembed: Vec<f32> = Vec::new();
    let mut e1 = vec![0.0f32; spec.d];
    e1[0] = 1.0;
    unembed.extend(&e1);
    unembed.extend(e1.iter().map(|x| -x));
    for row in &extra {
        unembed.extend(row.iter().map(|&x| x as f32));
    }
    let vocab = 2 + spec.extra_tokens;
    let mut strings = vec!["label_0".to_string(), "label_1".to_string()];
    strings.extend((0..spec.extra_tokens).map(|v| format!("other_{v}")));

    let dump = HiddenStateDump {
        manifest: RunManifest {
            schema_version: SCHEMA_VERSION,
            model_name: "synthetic".into(),
            dataset_name: "phase_profile".into(),
            setting: spec.setting.clone(),
            num_layers: layers.len() - 1,
            hidden_dim: spec.d,
            num_queries: spec.n,
            labels: vec!["label_0".into(), "label_1".into()],
            query_label_ids: labels,
            label_token_ids: vec![0, 1],
            vocab_size: vocab,
            unembedding_scope: UnembeddingScope::Full,
            subset_token_ids: None,
            post_norm: None,
        },
        layers,
        unembedding: Some(Unembedding {
            rows: unembed,
            token_strings: Some(strings),
        }),
        attention: None,
        head_outputs: None,
    };
    dump.validate()?;
    Ok(dump)
}

/// Wraps one instance as a single-layer dump (values rounded to `f32`).
pub fn instance_dump(m: &LabeledMatrix, e: &UnembeddingView) -> Result<HiddenStateDump> {
    let labels = m.label_set();
    let num_labels = labels.last().map_or(0, |l| l + 1);
    let layer: Vec<f32> = (0..m.n())
        .flat_map(|i| (0..m.d()).map(move |j| (i, j)))
        .map(|(i, j)| m.rows[(i, j)] as f32)
        .collect();
    let unembed: Vec<f32> = (0..e.vocab_len())
        .flat_map(|r| (0..e.dim()).map(move |j| (r, j)))
        .map(|(r, j)| e.matrix[(r, j)] as f32)
        .collect();
    let vocab_size = e.token_ids.iter().max().map_or(0, |t| t + 1);
    let full = e.token_ids.iter().enumerate().all(|(r, &t)| r == t);
    let dump = HiddenStateDump {
        manifest: RunManifest {
            schema_version: SCHEMA_VERSION,
            model_name: "synthetic".into(),
            dataset_name: "instance".into(),
            setting: default_setting(),
            num_layers: 0,
            hidden_dim: m.d(),
            num_queries: m.n(),
            labels: (0..num_labels).map(|y| format!("label_{y}")).collect(),
            query_label_ids: m.labels.clone(),
            label_token_ids: (0..num_labels)
                .map(|y| e.label_row(y).map(|r| e.token_ids[r]))
                .collect::<Result<_>>()?,
            vocab_size,
            unembedding_scope: if full {
                UnembeddingScope::Full
            } else {
                UnembeddingScope::Subset
            },
            subset_token_ids: (!full).then(|| e.token_ids.clone()),
            post_norm: None,
        },
        layers: vec![layer],
        unembedding: Some(Unembedding {
            rows: unembed,
            token_strings: Some(e.token_strings.clone()),
        }),
        attention: None,
        head_outputs: None,
    };
    dump.validate()?;
    Ok(dump)
}

/// What `synth gen` reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    Instance(SyntheticSpec),
    Equality(EqualitySpec),
    PhaseProfile(PhaseProfileSpec),
}

pub fn generate(spec: &GeneratorSpec) -> Result<HiddenStateDump> {
    match spec {
        GeneratorSpec::Instance(s) => {
            let (m, e) = gen_instance(s)?;
            instance_dump(&m, &e)
        }
        GeneratorSpec::Equality(s) => {
            let (m, e) = gen_equality_instance(s)?;
            instance_dump(&m, &e)
        }
        GeneratorSpec::PhaseProfile(s) => gen_phase_profile(s),
    }
}
