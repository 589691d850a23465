//! Singular-direction decoding, layer-to-layer retention and low-rank
//! denoising.

use serde::{Deserialize, Serialize};

use crate::dump::{LabeledMatrix, UnembeddingScope, UnembeddingView};
use crate::error::{Error, Result};
use crate::linalg::{self, ThinSvd};
use crate::measures;

/// Ranks offered for denoising sweeps.
pub const DENOISE_RANKS: [usize; 4] = [1, 2, 5, 10];
pub const DEFAULT_RETENTION_RANK: usize = 10;
pub const DEFAULT_RETAINED: usize = 3;
pub const DEFAULT_FILTERED: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Plus,
    Minus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token_id: usize,
    pub token: String,
    pub score: f64,
}

/// Tokens whose unembedding rows have the largest inner product with
/// `sign · direction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedDirection {
    pub direction: Vec<f64>,
    pub sign: Sign,
    pub top_tokens: Vec<TokenScore>,
    /// `subset` means only the stored part of the vocabulary was ranked.
    pub scope: UnembeddingScope,
}

/// Top-`k` tokens for `+v` and for `−v`.
///
/// The `+v` ranking orders every row by score descending, then token id
/// ascending. The `−v` ranking is that full order reversed, so on equal
/// scores the higher token id comes first.
pub fn decode_direction(
    v: &[f64],
    e: &UnembeddingView,
    k: usize,
) -> Result<(DecodedDirection, DecodedDirection)> {
    if v.len() != e.dim() {
        return Err(Error::invalid(format!(
            "direction has {} entries, unembedding has dimension {}",
            v.len(),
            e.dim()
        )));
    }
    if linalg::norm(v) == 0.0 {
        return Err(Error::invalid("cannot decode the zero vector"));
    }
    let scores: Vec<f64> = (0..e.vocab_len())
        .map(|r| linalg::dot(&e.row(r), v))
        .collect();
    let mut order: Vec<usize> = (0..e.vocab_len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .total_cmp(&scores[i])
            .then(e.token_ids[i].cmp(&e.token_ids[j]))
    });
    let k = k.min(order.len());
    let entry = |r: usize, sign: f64| TokenScore {
        token_id: e.token_ids[r],
        token: e.token_strings[r].clone(),
        score: sign * scores[r],
    };
    let plus = DecodedDirection {
        direction: v.to_vec(),
        sign: Sign::Plus,
        top_tokens: order[..k].iter().map(|&r| entry(r, 1.0)).collect(),
        scope: e.scope,
    };
    let minus = DecodedDirection {
        direction: v.iter().map(|x| -x).collect(),
        sign: Sign::Minus,
        top_tokens: order
            .iter()
            .rev()
            .take(k)
            .map(|&r| entry(r, -1.0))
            .collect(),
        scope: e.scope,
    };
    Ok((plus, minus))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedIndex {
    pub index: usize,
    pub plus: DecodedDirection,
    pub minus: DecodedDirection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub layer_from: usize,
    pub layer_to: usize,
    pub requested_rank: usize,
    /// Rank actually used after clipping to both layers' numerical ranks.
    pub rank: usize,
    /// `‖row_j of V_{prev,r}ᵀ V_{next,r} V_{next,r}ᵀ‖₂` for `j < rank`.
    pub row_norms: Vec<f64>,
    /// Indices with the largest norms, largest first.
    pub retained: Vec<usize>,
    /// Indices with the smallest norms, smallest first.
    pub filtered: Vec<usize>,
    /// Decoded previous-layer singular vectors for every retained or
    /// filtered index; empty without an unembedding.
    pub decoded: Vec<DecodedIndex>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetentionConfig {
    pub rank: usize,
    pub retained: usize,
    pub filtered: usize,
    /// Tokens per decoded direction.
    pub top_k: usize,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RETENTION_RANK,
            retained: DEFAULT_RETAINED,
            filtered: DEFAULT_FILTERED,
            top_k: 10,
        }
    }
}

/// How much of each leading singular direction of `prev` survives in the
/// leading `r`-dimensional right singular subspace of `next`.
///
/// `M = V_{prev,r}ᵀ V_{next,r} V_{next,r}ᵀ` is `r × d`; row `j` is the
/// projection of the `j`-th previous direction onto the next span, so its
/// norm lies in `[0, 1]`.
pub fn retention_analysis(
    prev: &LabeledMatrix,
    next: &LabeledMatrix,
    e: Option<&UnembeddingView>,
    cfg: &RetentionConfig,
) -> Result<RetentionReport> {
    if prev.n() != next.n() || prev.d() != next.d() {
        return Err(Error::invalid(format!(
            "layers differ in shape: {}×{} vs {}×{}",
            prev.n(),
            prev.d(),
            next.n(),
            next.d()
        )));
    }
    let svd_prev = ThinSvd::direct(&linalg::center(&prev.rows).0, false);
    let svd_next = ThinSvd::direct(&linalg::center(&next.rows).0, false);
    let r = cfg.rank.min(svd_prev.rank()).min(svd_next.rank());
    let mut warnings = Vec::new();
    if r < cfg.rank {
        warnings.push(format!(
            "rank clipped from {} to {r} (layer ranks {} and {})",
            cfg.rank,
            svd_prev.rank(),
            svd_next.rank()
        ));
    }
    let vp = svd_prev.v.columns(0, r);
    let vn = svd_next.v.columns(0, r);
    let m = vp.transpose() * vn * vn.transpose();
    let row_norms: Vec<f64> = (0..r).map(|j| m.row(j).norm()).collect();

    let mut by_norm: Vec<usize> = (0..r).collect();
    by_norm.sort_by(|&i, &j| row_norms[j].total_cmp(&row_norms[i]).then(i.cmp(&j)));
    let retained: Vec<usize> = by_norm.iter().copied().take(cfg.retained).collect();
    let mut ascending: Vec<usize> = (0..r).collect();
    ascending.sort_by(|&i, &j| row_norms[i].total_cmp(&row_norms[j]).then(i.cmp(&j)));
    let filtered: Vec<usize> = ascending.iter().copied().take(cfg.filtered).collect();

    let mut decoded = Vec::new();
    if let Some(e) = e {
        let mut indices: Vec<usize> = retained.iter().chain(&filtered).copied().collect();
        indices.sort_unstable();
        indices.dedup();
        for j in indices {
            let (plus, minus) = decode_direction(&svd_prev.right_vector(j), e, cfg.top_k)?;
            decoded.push(DecodedIndex {
                index: j,
                plus,
                minus,
            });
        }
    }
    Ok(RetentionReport {
        layer_from: prev.layer_index,
        layer_to: next.layer_index,
        requested_rank: cfg.rank,
        rank: r,
        row_norms,
        retained,
        filtered,
        decoded,
        warnings,
    })
}

/// Rank-`r` reconstruction of the centered rows plus the mean row. Labels
/// and layer index are kept.
pub fn denoise(m: &LabeledMatrix, r: usize) -> Result<LabeledMatrix> {
    let (centered, mean) = linalg::center(&m.rows);
    let svd = ThinSvd::direct(&centered, true);
    let r = r.min(svd.singular_values.len());
    let u = svd.u.as_ref().expect("requested U");
    let mut out = nalgebra::DMatrix::zeros(m.n(), m.d());
    for j in 0..r {
        let s = svd.singular_values[j];
        out += (u.column(j) * s) * svd.v.column(j).transpose();
    }
    for (c, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(mean[c]);
    }
    m.with_rows(out)
}

/// Output alignment after denoising minus output alignment before.
pub fn denoising_gain(m: &LabeledMatrix, r: usize, e: &UnembeddingView) -> Result<f64> {
    let before = measures::output_alignment(m, e)?.value;
    let after = measures::output_alignment(&denoise(m, r)?, e)?.value;
    Ok(after - before)
}
