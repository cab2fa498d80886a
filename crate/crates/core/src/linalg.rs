//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::SymmetricEigen;

use crate::{Error, Mat, Result, Vector};

/// Symmetric part `(M + M^T) / 2`.
pub fn sym(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn trace_product(a: &Mat, b: &Mat) -> f64 {
    // tr(A B) without forming the product.
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub vectors: Mat,
    pub values: Vector,
}

impl Spectrum {
    pub fn of(m: &Mat) -> Self {
        let eig = SymmetricEigen::new(sym(m));
        let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let n = idx.len();
        let mut vectors = Mat::zeros(n, n);
        let mut values = Vector::zeros(n);
        for (dst, &src) in idx.iter().enumerate() {
            values[dst] = eig.eigenvalues[src];
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        Spectrum { vectors, values }
    }

    /// `V diag(f(d_j)) V^T`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        let mut scaled = self.vectors.clone();
        for (j, &d) in self.values.iter().enumerate() {
            let s = f(d);
            scaled.column_mut(j).scale_mut(s);
        }
        &scaled * self.vectors.transpose()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Clip the eigenvalues of a symmetric matrix from below at `floor`.
///
/// A matrix whose spectrum already clears the floor is returned as its
/// symmetric part, without a reconstruction round trip.
pub fn psd_project(m: &Mat, floor: f64) -> (Mat, bool) {
    let (out, _, clipped) = psd_project_spectrum(m, floor);
    (out, clipped)
}

/// [`psd_project`] that also returns the spectrum of the result.
pub fn psd_project_spectrum(m: &Mat, floor: f64) -> (Mat, Spectrum, bool) {
    let s = sym(m);
    let mut spec = Spectrum::of(&s);
    if spec.min() >= floor {
        return (s, spec, false);
    }
    spec.values.iter_mut().for_each(|d| *d = d.max(floor));
    (sym(&spec.map(|d| d)), spec, true)
}

/// `ln det` of a general square matrix via LU; errors unless the determinant
/// is strictly positive.
pub fn ln_det_positive(m: &Mat) -> Result<f64> {
    let lu = m.clone().lu();
    let det = lu.determinant();
    if !(det > 0.0) {
        return Err(Error::IllConditioned(
            "log-determinant of a matrix with non-positive determinant".into(),
        ));
    }
    // Summing log-pivots avoids overflow of the determinant itself.
    let u = lu.u();
    Ok((0..u.nrows()).map(|i| u[(i, i)].abs().ln()).sum())
}

pub fn inverse(m: &Mat) -> Result<Mat> {
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::IllConditioned("matrix is singular".into()))
}

/// `||W^T W - I||_F`.
pub fn ortho_residual(w: &Mat) -> f64 {
    let mut s = w.tr_mul(w);
    for i in 0..s.nrows() {
        s[(i, i)] -= 1.0;
    }
    s.norm()
}

/// Column index and value of the largest entry of row `r` (first on ties).
pub fn row_argmax(m: &Mat, r: usize) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, &x) in m.row(r).iter().enumerate() {
        if x > best.1 {
            best = (c, x);
        }
    }
    best
}

pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol
}
