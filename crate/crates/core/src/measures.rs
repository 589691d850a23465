//! Separability and alignment measures on one layer's hidden states.
//!
//! Every measure is defined for two labels. On a multiclass matrix each
//! unordered label pair is measured on its own rows and the results are
//! averaged without weights ([`aggregate_pairwise`]).
//!
//! Within a pair `(a, b)` with `a < b`, label `a` plays the role of `A` and
//! the label direction is `(E_a − E_b) / ‖E_a − E_b‖`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dump::{LabeledMatrix, UnembeddingView};
use crate::error::{Error, Result};
use crate::linalg::{self, ThinSvd};
use crate::logistic::{self, ClassifierConfig};

/// Floor on the pooled standard deviation in [`mean_alignment`].
pub const MEAN_ALIGNMENT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureName {
    SeparabilityScore,
    OutputAlignment,
    SingularAlignment,
    VarianceAlignment,
    MeanAlignment,
    CompositeAlignment,
    EffectiveDimension,
    /// Variance alignment divided by the total variance. An extension; not
    /// one of the seven core measures.
    VarianceAlignmentNormalized,
}

impl MeasureName {
    pub const CORE: [MeasureName; 7] = [
        MeasureName::SeparabilityScore,
        MeasureName::OutputAlignment,
        MeasureName::SingularAlignment,
        MeasureName::VarianceAlignment,
        MeasureName::MeanAlignment,
        MeasureName::CompositeAlignment,
        MeasureName::EffectiveDimension,
    ];

    pub const ALL: [MeasureName; 8] = [
        MeasureName::SeparabilityScore,
        MeasureName::OutputAlignment,
        MeasureName::SingularAlignment,
        MeasureName::VarianceAlignment,
        MeasureName::MeanAlignment,
        MeasureName::CompositeAlignment,
        MeasureName::EffectiveDimension,
        MeasureName::VarianceAlignmentNormalized,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MeasureName::SeparabilityScore => "separability_score",
            MeasureName::OutputAlignment => "output_alignment",
            MeasureName::SingularAlignment => "singular_alignment",
            MeasureName::VarianceAlignment => "variance_alignment",
            MeasureName::MeanAlignment => "mean_alignment",
            MeasureName::CompositeAlignment => "composite_alignment",
            MeasureName::EffectiveDimension => "effective_dimension",
            MeasureName::VarianceAlignmentNormalized => "variance_alignment_normalized",
        }
    }

    /// Whether the measure reads the unembedding matrix.
    pub fn needs_unembedding(self) -> bool {
        !matches!(
            self,
            MeasureName::SeparabilityScore | MeasureName::EffectiveDimension
        )
    }
}

impl fmt::Display for MeasureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MeasureName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MeasureName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown measure {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Binary,
    PairwiseMean,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Binary => "binary",
            Aggregation::PairwiseMean => "pairwise_mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairValue {
    pub label_a: usize,
    pub label_b: usize,
    pub value: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureValue {
    pub name: MeasureName,
    pub value: f64,
    pub layer_index: usize,
    pub aggregation: Aggregation,
    /// Set when the value could not be computed as defined: an ε floor bound,
    /// or the measure is undefined on this input and `value` is 0.
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_values: Option<Vec<PairValue>>,
}

impl MeasureValue {
    fn binary(name: MeasureName, m: &LabeledMatrix, s: Scalar) -> Self {
        MeasureValue {
            name,
            value: s.value,
            layer_index: m.layer_index,
            aggregation: Aggregation::Binary,
            degenerate: s.degenerate,
            pair_values: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Scalar {
    value: f64,
    degenerate: bool,
}

impl Scalar {
    fn exact(value: f64) -> Self {
        Scalar {
            value,
            degenerate: false,
        }
    }

    /// Undefined measures are reported as 0 with the flag set.
    fn undefined() -> Self {
        Scalar {
            value: 0.0,
            degenerate: true,
        }
    }
}

/// Unit vector along `E_a − E_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDirection {
    pub vector: Vec<f64>,
    pub pair: (usize, usize),
}

impl LabelDirection {
    pub fn new(vector: &[f64], pair: (usize, usize)) -> Result<Self> {
        let vector = linalg::normalized(vector)
            .ok_or_else(|| Error::Degenerate("label direction is the zero vector".into()))?;
        Ok(Self { vector, pair })
    }

    pub fn from_unembedding(e: &UnembeddingView, a: usize, b: usize) -> Result<Self> {
        let ea = e.row(e.label_row(a)?);
        let eb = e.row(e.label_row(b)?);
        let diff: Vec<f64> = ea.iter().zip(&eb).map(|(x, y)| x - y).collect();
        Self::new(&diff, (a, b)).map_err(|_| {
            Error::Degenerate(format!(
                "labels {a} and {b} have identical unembedding rows"
            ))
        })
    }
}

/// Inputs shared by the pairwise drivers.
#[derive(Debug, Clone, Copy)]
pub struct MeasureContext<'a> {
    pub unembedding: Option<&'a UnembeddingView>,
    pub seed: u64,
    pub classifier: ClassifierConfig,
    /// How many leading singular vectors singular alignment considers.
    pub singular_top: usize,
}

impl<'a> MeasureContext<'a> {
    pub fn new(unembedding: Option<&'a UnembeddingView>, seed: u64) -> Self {
        Self {
            unembedding,
            seed,
            classifier: ClassifierConfig::default(),
            singular_top: 2,
        }
    }
}

fn require_binary(m: &LabeledMatrix, pair: (usize, usize)) -> Result<()> {
    let labels = m.label_set();
    if labels.len() != 2 || !labels.contains(&pair.0) || !labels.contains(&pair.1) {
        return Err(Error::invalid(format!(
            "expected rows labeled exactly {} and {}, found labels {labels:?}",
            pair.0, pair.1
        )));
    }
    Ok(())
}

fn check_dim(m: &LabeledMatrix, v: &[f64]) -> Result<()> {
    if v.len() != m.d() {
        return Err(Error::invalid(format!(
            "direction has {} entries, hidden states have {}",
            v.len(),
            m.d()
        )));
    }
    Ok(())
}

/// Held-out accuracy of a logistic classifier on a stratified 50/50 split.
pub fn separability_score(
    m: &LabeledMatrix,
    seed: u64,
    cfg: &ClassifierConfig,
) -> Result<MeasureValue> {
    let acc = logistic::held_out_accuracy(m, seed, cfg)?;
    Ok(MeasureValue::binary(
        MeasureName::SeparabilityScore,
        m,
        Scalar::exact(acc),
    ))
}

/// The unembedding row with the largest logit for every hidden state.
/// Ties go to the lowest token id. Logits are sequential dot products.
pub fn logit_lens_predictions(m: &LabeledMatrix, e: &UnembeddingView) -> Result<Vec<usize>> {
    if e.dim() != m.d() {
        return Err(Error::invalid(format!(
            "unembedding has dimension {}, hidden states have {}",
            e.dim(),
            m.d()
        )));
    }
    let e_rows: Vec<Vec<f64>> = (0..e.vocab_len()).map(|r| e.row(r)).collect();
    let h_rows: Vec<Vec<f64>> = (0..m.n()).map(|i| linalg::row(&m.rows, i)).collect();
    use rayon::prelude::*;
    Ok(h_rows
        .par_iter()
        .map(|h| {
            let mut best = 0;
            let mut best_score = linalg::dot(&e_rows[0], h);
            for (r, er) in e_rows.iter().enumerate().skip(1) {
                let s = linalg::dot(er, h);
                if s > best_score || (s == best_score && e.token_ids[r] < e.token_ids[best]) {
                    best = r;
                    best_score = s;
                }
            }
            best
        })
        .collect())
}

fn accuracy_of(
    predictions: &[usize],
    rows: &[usize],
    m: &LabeledMatrix,
    e: &UnembeddingView,
) -> f64 {
    let correct = rows
        .iter()
        .filter(|&&i| predictions[i] == e.label_rows[m.labels[i]])
        .count();
    correct as f64 / rows.len() as f64
}

/// Logit-lens accuracy: the fraction of rows whose argmax token over every
/// unembedding row is their own label's token. Works for any label count.
pub fn output_alignment(m: &LabeledMatrix, e: &UnembeddingView) -> Result<MeasureValue> {
    for y in m.label_set() {
        e.label_row(y)?;
    }
    let pred = logit_lens_predictions(m, e)?;
    let all: Vec<usize> = (0..m.n()).collect();
    Ok(MeasureValue::binary(
        MeasureName::OutputAlignment,
        m,
        Scalar::exact(accuracy_of(&pred, &all, m, e)),
    ))
}

/// Centered spectrum of one binary slice plus its projections on the label
/// direction. Shared by the alignment measures.
struct Geometry {
    svd: ThinSvd,
    zero_spread: bool,
}

impl Geometry {
    fn new(m: &LabeledMatrix, top: usize) -> Geometry {
        let (centered, _) = linalg::center(&m.rows);
        let svd = ThinSvd::leading(&centered, top);
        let smax = svd.singular_values.first().copied().unwrap_or(0.0);
        Geometry {
            zero_spread: linalg::is_zero_spread(smax, &m.rows),
            svd,
        }
    }

    fn singular_alignment(&self, dir: &[f64], top: usize) -> Scalar {
        if self.zero_spread {
            return Scalar::undefined();
        }
        let usable = self.svd.rank().min(top).min(self.svd.v.ncols());
        if usable == 0 {
            return Scalar::undefined();
        }
        let best = (0..usable)
            .map(|j| linalg::dot(&self.svd.right_vector(j), dir).abs())
            .fold(0.0, f64::max);
        Scalar::exact(best.min(1.0))
    }

    fn effective_dimension(&self) -> Scalar {
        if self.zero_spread {
            return Scalar::undefined();
        }
        effective_dimension_of(&self.svd.singular_values)
    }
}

/// `(Σσ²)² / Σσ⁴`.
pub fn participation_ratio(singular_values: &[f64]) -> f64 {
    let s2: f64 = singular_values.iter().map(|s| s * s).sum();
    let s4: f64 = singular_values.iter().map(|s| (s * s) * (s * s)).sum();
    s2 * s2 / s4
}

fn effective_dimension_of(singular_values: &[f64]) -> Scalar {
    let ratio = participation_ratio(singular_values);
    if ratio.is_finite() {
        Scalar::exact(ratio)
    } else {
        Scalar::undefined()
    }
}

struct Projected {
    /// Population variance of all projections.
    variance: f64,
    mean_alignment: Scalar,
}

fn project(m: &LabeledMatrix, dir: &LabelDirection) -> Projected {
    let p = linalg::project_rows(&m.rows, &dir.vector);
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let variance = p.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;

    let stats = |label: usize| {
        let vals: Vec<f64> = p
            .iter()
            .zip(&m.labels)
            .filter(|(_, &y)| y == label)
            .map(|(x, _)| *x)
            .collect();
        let c = vals.len() as f64;
        let mu = vals.iter().sum::<f64>() / c;
        let var = vals.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / c;
        (c, mu, var)
    };
    let (na, mu_a, var_a) = stats(dir.pair.0);
    let (nb, mu_b, var_b) = stats(dir.pair.1);
    let pooled_sd = ((na * var_a + nb * var_b) / (na + nb)).sqrt();
    let floored = pooled_sd < MEAN_ALIGNMENT_EPS;
    let mean_alignment = Scalar {
        value: (mu_a - mu_b) / pooled_sd.max(MEAN_ALIGNMENT_EPS),
        degenerate: floored,
    };
    Projected {
        variance,
        mean_alignment,
    }
}

/// Largest `|cos|` between the label direction and the top-`r` right
/// singular vectors of the centered matrix.
pub fn singular_alignment(
    m: &LabeledMatrix,
    dir: &LabelDirection,
    r: usize,
) -> Result<MeasureValue> {
    check_dim(m, &dir.vector)?;
    let s = Geometry::new(m, r).singular_alignment(&dir.vector, r);
    if s.degenerate {
        return Err(Error::Degenerate(
            "singular alignment needs rows that are not all identical".into(),
        ));
    }
    Ok(MeasureValue::binary(MeasureName::SingularAlignment, m, s))
}

/// `dirᵀ (H̄ᵀH̄ / n) dir`: the population variance of the projections.
pub fn variance_alignment(m: &LabeledMatrix, dir: &LabelDirection) -> Result<MeasureValue> {
    check_dim(m, &dir.vector)?;
    let v = project_variance(m, dir);
    Ok(MeasureValue::binary(
        MeasureName::VarianceAlignment,
        m,
        Scalar::exact(v),
    ))
}

fn project_variance(m: &LabeledMatrix, dir: &LabelDirection) -> f64 {
    let p = linalg::project_rows(&m.rows, &dir.vector);
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    p.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Variance alignment divided by the trace of `H̄ᵀH̄ / n`.
pub fn variance_alignment_normalized(
    m: &LabeledMatrix,
    dir: &LabelDirection,
) -> Result<MeasureValue> {
    check_dim(m, &dir.vector)?;
    let (centered, _) = linalg::center(&m.rows);
    let total = centered.norm_squared() / m.n() as f64;
    let s = normalized_variance(project_variance(m, dir), total, m);
    Ok(MeasureValue::binary(
        MeasureName::VarianceAlignmentNormalized,
        m,
        s,
    ))
}

fn normalized_variance(variance: f64, total: f64, m: &LabeledMatrix) -> Scalar {
    let scale = m.rows.norm_squared() / m.n() as f64;
    if total <= linalg::ZERO_SPREAD_RTOL * linalg::ZERO_SPREAD_RTOL * scale || total == 0.0 {
        Scalar::undefined()
    } else {
        Scalar::exact((variance / total).min(1.0))
    }
}

/// Projected gap between the label means over the pooled projected standard
/// deviation (population convention, floored at [`MEAN_ALIGNMENT_EPS`]).
pub fn mean_alignment(m: &LabeledMatrix, dir: &LabelDirection) -> Result<MeasureValue> {
    check_dim(m, &dir.vector)?;
    require_binary(m, dir.pair)?;
    Ok(MeasureValue::binary(
        MeasureName::MeanAlignment,
        m,
        project(m, dir).mean_alignment,
    ))
}

/// Variance alignment times mean alignment.
pub fn composite_alignment(m: &LabeledMatrix, dir: &LabelDirection) -> Result<MeasureValue> {
    let v = variance_alignment(m, dir)?;
    let mu = mean_alignment(m, dir)?;
    Ok(MeasureValue::binary(
        MeasureName::CompositeAlignment,
        m,
        Scalar {
            value: v.value * mu.value,
            degenerate: mu.degenerate,
        },
    ))
}

/// Participation ratio of the centered singular values.
pub fn effective_dimension(m: &LabeledMatrix) -> Result<MeasureValue> {
    let s = Geometry::new(m, 0).effective_dimension();
    if s.degenerate {
        return Err(Error::Degenerate(
            "effective dimension needs rows that are not all identical".into(),
        ));
    }
    Ok(MeasureValue::binary(MeasureName::EffectiveDimension, m, s))
}

fn label_pairs(m: &LabeledMatrix) -> Result<Vec<(usize, usize)>> {
    let labels = m.label_set();
    if labels.len() < 2 {
        return Err(Error::invalid(format!(
            "pairwise measures need at least 2 labels, found {}",
            labels.len()
        )));
    }
    let mut pairs = Vec::new();
    for (i, &a) in labels.iter().enumerate() {
        for &b in &labels[i + 1..] {
            pairs.push((a, b));
        }
    }
    Ok(pairs)
}

fn unembedding<'a>(ctx: &MeasureContext<'a>, name: MeasureName) -> Result<&'a UnembeddingView> {
    ctx.unembedding
        .ok_or_else(|| Error::invalid(format!("{name} needs an unembedding matrix")))
}

/// Value of one measure on a binary slice. `Degenerate` errors become a
/// flagged zero.
fn pair_scalar(
    slice: &LabeledMatrix,
    pair: (usize, usize),
    name: MeasureName,
    ctx: &MeasureContext<'_>,
) -> Result<Scalar> {
    let result = match name {
        MeasureName::SeparabilityScore => {
            separability_score(slice, ctx.seed, &ctx.classifier).map(to_scalar)
        }
        MeasureName::OutputAlignment => {
            output_alignment(slice, unembedding(ctx, name)?).map(to_scalar)
        }
        MeasureName::EffectiveDimension => effective_dimension(slice).map(to_scalar),
        _ => {
            let dir = LabelDirection::from_unembedding(unembedding(ctx, name)?, pair.0, pair.1);
            dir.and_then(|dir| match name {
                MeasureName::SingularAlignment => singular_alignment(slice, &dir, ctx.singular_top),
                MeasureName::VarianceAlignment => variance_alignment(slice, &dir),
                MeasureName::VarianceAlignmentNormalized => {
                    variance_alignment_normalized(slice, &dir)
                }
                MeasureName::MeanAlignment => mean_alignment(slice, &dir),
                MeasureName::CompositeAlignment => composite_alignment(slice, &dir),
                _ => unreachable!(),
            })
            .map(to_scalar)
        }
    };
    match result {
        Err(Error::Degenerate(_)) => Ok(Scalar::undefined()),
        other => other,
    }
}

fn to_scalar(v: MeasureValue) -> Scalar {
    Scalar {
        value: v.value,
        degenerate: v.degenerate,
    }
}

fn assemble(
    name: MeasureName,
    layer_index: usize,
    pairs: &[(usize, usize)],
    values: Vec<Scalar>,
) -> MeasureValue {
    if pairs.len() == 1 {
        return MeasureValue {
            name,
            value: values[0].value,
            layer_index,
            aggregation: Aggregation::Binary,
            degenerate: values[0].degenerate,
            pair_values: None,
        };
    }
    let mean = values.iter().map(|s| s.value).sum::<f64>() / values.len() as f64;
    MeasureValue {
        name,
        value: mean,
        layer_index,
        aggregation: Aggregation::PairwiseMean,
        degenerate: values.iter().any(|s| s.degenerate),
        pair_values: Some(
            pairs
                .iter()
                .zip(&values)
                .map(|(&(a, b), s)| PairValue {
                    label_a: a,
                    label_b: b,
                    value: s.value,
                    degenerate: s.degenerate,
                })
                .collect(),
        ),
    }
}

/// Computes `name` on every unordered label pair and averages.
///
/// A binary input yields the direct value with `aggregation = binary`.
/// Pairs where the measure is undefined contribute 0 and mark the result
/// degenerate.
pub fn aggregate_pairwise(
    m: &LabeledMatrix,
    name: MeasureName,
    ctx: &MeasureContext<'_>,
) -> Result<MeasureValue> {
    let pairs = label_pairs(m)?;
    let values = pairs
        .iter()
        .map(|&(a, b)| pair_scalar(&m.slice_pair(a, b)?, (a, b), name, ctx))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(name, m.layer_index, &pairs, values))
}

/// Several measures at once, sharing the per-pair SVD and logit-lens pass.
/// Gives the same values as calling [`aggregate_pairwise`] per measure.
pub fn measure_suite(
    m: &LabeledMatrix,
    names: &[MeasureName],
    ctx: &MeasureContext<'_>,
) -> Result<Vec<MeasureValue>> {
    let pairs = label_pairs(m)?;
    let e = match names.iter().find(|n| n.needs_unembedding()) {
        Some(&name) => Some(unembedding(ctx, name)?),
        None => None,
    };
    let predictions = match (e, names.contains(&MeasureName::OutputAlignment)) {
        (Some(e), true) => {
            for y in m.label_set() {
                e.label_row(y)?;
            }
            Some(logit_lens_predictions(m, e)?)
        }
        _ => None,
    };
    let needs_svd = names.iter().any(|n| {
        matches!(
            n,
            MeasureName::SingularAlignment | MeasureName::EffectiveDimension
        )
    });

    let mut table: Vec<Vec<Scalar>> = vec![Vec::with_capacity(pairs.len()); names.len()];
    for &(a, b) in &pairs {
        let keep: Vec<usize> = (0..m.n())
            .filter(|&i| m.labels[i] == a || m.labels[i] == b)
            .collect();
        let slice = m.slice_pair(a, b)?;
        let geometry = needs_svd.then(|| Geometry::new(&slice, ctx.singular_top));
        // `None` when no alignment measure is requested; `Some(None)` when
        // the two label rows coincide.
        let dir = match e {
            Some(e) => match LabelDirection::from_unembedding(e, a, b) {
                Ok(dir) => Some(Some(dir)),
                Err(Error::Degenerate(_)) => Some(None),
                Err(err) => return Err(err),
            },
            None => None,
        };
        let projected = match &dir {
            Some(Some(dir)) => Some(project(&slice, dir)),
            _ => None,
        };
        for (k, &name) in names.iter().enumerate() {
            let s = match name {
                MeasureName::SeparabilityScore => pair_scalar(&slice, (a, b), name, ctx)?,
                MeasureName::OutputAlignment => {
                    let pred = predictions.as_ref().expect("computed above");
                    Scalar::exact(accuracy_of(pred, &keep, m, e.expect("checked")))
                }
                MeasureName::EffectiveDimension => geometry
                    .as_ref()
                    .expect("computed above")
                    .effective_dimension(),
                _ => match (&dir, &projected) {
                    (Some(Some(dir)), Some(p)) => match name {
                        MeasureName::SingularAlignment => geometry
                            .as_ref()
                            .expect("computed above")
                            .singular_alignment(&dir.vector, ctx.singular_top),
                        MeasureName::VarianceAlignment => Scalar::exact(p.variance),
                        MeasureName::VarianceAlignmentNormalized => {
                            let (centered, _) = linalg::center(&slice.rows);
                            let total = centered.norm_squared() / slice.n() as f64;
                            normalized_variance(p.variance, total, &slice)
                        }
                        MeasureName::MeanAlignment => p.mean_alignment,
                        MeasureName::CompositeAlignment => Scalar {
                            value: p.variance * p.mean_alignment.value,
                            degenerate: p.mean_alignment.degenerate,
                        },
                        _ => unreachable!(),
                    },
                    (Some(None), _) => Scalar::undefined(),
                    _ => {
                        unreachable!("direction exists whenever an alignment measure is requested")
                    }
                },
            };
            table[k].push(s);
        }
    }
    Ok(names
        .iter()
        .zip(table)
        .map(|(&name, values)| assemble(name, m.layer_index, &pairs, values))
        .collect())
}
