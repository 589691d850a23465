//! Dense helpers shared by the measure, bound and spectral modules.
//!
//! Everything runs in `f64`. Dot products are plain left-to-right sums so the
//! same inputs always produce bit-identical results, whichever routine asks.

use nalgebra::{DMatrix, DVector};

/// Matrices whose smaller side exceeds this go through the Gram route in
/// [`ThinSvd::compute`].
pub const DIRECT_SVD_MAX_DIM: usize = 256;

/// Relative size (against the Frobenius norm of the uncentered matrix) under
/// which a centered matrix is treated as identically zero.
pub const ZERO_SPREAD_RTOL: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `a / ‖a‖`, or `None` for a zero vector.
pub fn normalized(a: &[f64]) -> Option<Vec<f64>> {
    let n = norm(a);
    (n > 0.0 && n.is_finite()).then(|| a.iter().map(|x| x / n).collect())
}

/// Row `i` of a column-major matrix, copied out.
pub fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// `m · v` with each entry computed by [`dot`] over the row.
pub fn project_rows(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    assert_eq!(m.ncols(), v.len());
    let (n, d) = m.shape();
    let mut out = vec![0.0; n];
    // Column-major: accumulate column by column; each row sum still runs over
    // j = 0..d in order, so results match `dot(row(i), v)` exactly.
    for j in 0..d {
        let col = m.column(j);
        let vj = v[j];
        for (o, x) in out.iter_mut().zip(col.iter()) {
            *o += x * vj;
        }
    }
    out
}

pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// Subtracts the column mean from every row. Returns the centered matrix and
/// the mean.
pub fn center(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mean = column_means(m);
    let mut c = m.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    (c, mean)
}

/// Thin SVD `A = U Σ Vᵀ` with singular values sorted in descending order.
///
/// Small matrices use nalgebra's bidiagonal SVD directly. When both sides
/// exceed [`DIRECT_SVD_MAX_DIM`], the decomposition comes from the symmetric
/// eigenproblem of the smaller Gram matrix, which is several times faster at
/// hidden-state sizes. In that route singular vectors belonging to singular
/// values at or below [`ThinSvd::tolerance`] are left as zero columns.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: Option<DMatrix<f64>>,
    pub singular_values: Vec<f64>,
    /// Right singular vectors as columns (`d × k`).
    pub v: DMatrix<f64>,
    tol: f64,
}

impl ThinSvd {
    pub fn compute(a: &DMatrix<f64>, want_u: bool) -> ThinSvd {
        let (n, d) = a.shape();
        if n.min(d) <= DIRECT_SVD_MAX_DIM {
            Self::direct(a, want_u)
        } else {
            Self::via_gram(a, want_u, usize::MAX)
        }
    }

    /// All singular values but only the leading `r` right singular vectors
    /// (`v` is `d × min(r, k)`), without `U`. Cheaper than [`Self::compute`]
    /// on large matrices.
    pub fn leading(a: &DMatrix<f64>, r: usize) -> ThinSvd {
        let (n, d) = a.shape();
        let mut svd = if n.min(d) <= DIRECT_SVD_MAX_DIM {
            Self::direct(a, false)
        } else {
            Self::via_gram(a, false, r)
        };
        let keep = r.min(svd.v.ncols());
        if keep < svd.v.ncols() {
            svd.v = svd.v.columns(0, keep).into_owned();
        }
        svd
    }

    /// Always uses the bidiagonal SVD. Slower on large inputs but accurate
    /// for small singular values, which the Gram route is not.
    ///
    /// nalgebra's SVD occasionally returns factors that do not reconstruct
    /// the input (seen on exactly rank-deficient matrices). The result is
    /// checked and the transpose tried next, then the Gram route.
    pub fn direct(a: &DMatrix<f64>, want_u: bool) -> ThinSvd {
        if let Some(svd) = Self::bidiagonal(a) {
            return svd.keep_u(want_u);
        }
        if let Some(t) = Self::bidiagonal(&a.transpose()) {
            let ThinSvd {
                u,
                singular_values,
                v,
                tol,
            } = t;
            return ThinSvd {
                u: Some(v),
                singular_values,
                v: u.expect("computed U"),
                tol,
            }
            .keep_u(want_u);
        }
        Self::via_gram(a, want_u, usize::MAX)
    }

    fn keep_u(mut self, want_u: bool) -> ThinSvd {
        if !want_u {
            self.u = None;
        }
        self
    }

    fn bidiagonal(a: &DMatrix<f64>) -> Option<ThinSvd> {
        let (n, d) = a.shape();
        let svd = a.clone().svd(true, true);
        let k = svd.singular_values.len();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
        let v_t = svd.v_t.expect("requested V");
        let u_raw = svd.u.expect("requested U");
        let v = DMatrix::from_fn(d, k, |r, c| v_t[(order[c], r)]);
        let u = DMatrix::from_fn(n, k, |r, c| u_raw[(r, order[c])]);
        let mut rebuilt = u.clone();
        for (c, mut col) in rebuilt.column_iter_mut().enumerate() {
            col *= singular_values[c];
        }
        let err = (rebuilt * v.transpose() - a).norm();
        let scale = a.norm();
        if !(err <= 1e-10 * scale + f64::MIN_POSITIVE) {
            return None;
        }
        let smax = singular_values.first().copied().unwrap_or(0.0);
        let tol = smax * n.max(d) as f64 * f64::EPSILON;
        Some(ThinSvd {
            u: Some(u),
            singular_values,
            v,
            tol,
        })
    }

    fn via_gram(a: &DMatrix<f64>, want_u: bool, max_right: usize) -> ThinSvd {
        let (n, d) = a.shape();
        let rows_side = n <= d;
        let gram = if rows_side {
            a * a.transpose()
        } else {
            a.transpose() * a
        };
        let eig = gram.symmetric_eigen();
        let k = eig.eigenvalues.len();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let singular_values: Vec<f64> = order
            .iter()
            .map(|&i| eig.eigenvalues[i].max(0.0).sqrt())
            .collect();
        let smax = singular_values.first().copied().unwrap_or(0.0);
        // Eigenvalues carry absolute error ~ ε·σ₁², so singular values below
        // roughly √ε·σ₁ are noise.
        let tol = smax * 1e-7;
        let basis = DMatrix::from_fn(k, k, |r, c| eig.eigenvectors[(r, order[c])]);
        let inv: Vec<f64> = singular_values
            .iter()
            .map(|&s| if s > tol { 1.0 / s } else { 0.0 })
            .collect();
        let scale = |mut m: DMatrix<f64>| {
            for (c, mut col) in m.column_iter_mut().enumerate() {
                col *= inv[c];
            }
            m
        };
        let (u, v) = if rows_side {
            // basis = U (n × n); V = Aᵀ U Σ⁻¹
            let kv = max_right.min(k);
            let v = scale(a.transpose() * basis.columns(0, kv));
            (want_u.then_some(basis), v)
        } else {
            // basis = V (d × d); U = A V Σ⁻¹
            let u = want_u.then(|| scale(a * &basis));
            (u, basis)
        };
        ThinSvd {
            u,
            singular_values,
            v,
            tol,
        }
    }

    /// Singular values at or below this are treated as zero.
    pub fn tolerance(&self) -> f64 {
        self.tol
    }

    pub fn rank(&self) -> usize {
        self.singular_values
            .iter()
            .take_while(|&&s| s > self.tol)
            .count()
    }

    pub fn right_vector(&self, j: usize) -> Vec<f64> {
        self.v.column(j).iter().copied().collect()
    }
}

/// True when the centered matrix is numerically zero relative to the data.
pub fn is_zero_spread(largest_singular_value: f64, uncentered: &DMatrix<f64>) -> bool {
    let scale = uncentered.norm();
    largest_singular_value <= ZERO_SPREAD_RTOL * scale || scale == 0.0
}
