//! Small dense complex linear-algebra helpers shared by the channel and
//! precoder code. Matrices are nalgebra types; the SVD goes through LAPACK
//! (`zgesvd`), which stays accurate on exactly rank-deficient inputs where
//! nalgebra's implicit-shift SVD can return mismatched singular pairs.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Relative singular-value threshold separating range from nullspace.
pub const NULLSPACE_REL_TOL: f64 = 1e-10;


/// One circularly-symmetric complex Gaussian sample with unit variance.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMatrix {
    // Column-major fill keeps the sample order fixed for a given seed.
    let mut m = CMatrix::zeros(rows, cols);
    for c in 0..cols {
        for r in 0..rows {
            m[(r, c)] = complex_gaussian(rng);
        }
    }
    m
}

/// Rotates `v` so that its largest-magnitude entry is real and positive.
/// Fixes the phase ambiguity of singular vectors.
pub fn fix_phase(v: &mut CVector) {
    let mut best = 0;
    let mut best_mag = -1.0;
    for (k, z) in v.iter().enumerate() {
        // Strict comparison picks the first entry among exact ties.
        if z.norm() > best_mag + 1e-14 {
            best = k;
            best_mag = z.norm();
        }
    }
    if best_mag > 0.0 {
        let rot = v[best].conj() / best_mag;
        v.iter_mut().for_each(|z| *z *= rot);
    }
}

/// Runs `zgesvd` on a copy of `a`. Returns the singular values in
/// decreasing order and, when `want_v`, the full `n x n` matrix `V^H`.
fn lapack_svd(a: &CMatrix, want_v: bool) -> Result<(Vec<f64>, Option<CMatrix>)> {
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return Ok((Vec::new(), want_v.then(|| CMatrix::identity(n, n))));
    }
    let (mi, ni) = (to_i32(m)?, to_i32(n)?);
    let mut data: Vec<Complex64> = a.as_slice().to_vec();
    let mut s = vec![0.0; k];
    let mut u = [Complex64::new(0.0, 0.0)];
    let (jobvt, ldvt) = if want_v { (b'A', ni) } else { (b'N', 1) };
    let mut vt = vec![Complex64::new(0.0, 0.0); if want_v { n * n } else { 1 }];
    let mut rwork = vec![0.0; 5 * k];
    let mut info = 0;
    let mut query = [Complex64::new(0.0, 0.0)];
    // SAFETY: every buffer is sized per the zgesvd contract for jobu = 'N'.
    unsafe {
        lapack::zgesvd(
            b'N', jobvt, mi, ni, &mut data, mi, &mut s, &mut u, 1, &mut vt, ldvt, &mut query, -1,
            &mut rwork, &mut info,
        );
    }
    if info != 0 {
        return Err(Error::SvdFailed);
    }
    let lwork = query[0].re as usize;
    let mut work = vec![Complex64::new(0.0, 0.0); lwork.max(1)];
    let lwork = to_i32(work.len())?;
    // SAFETY: as above, with the queried workspace size.
    unsafe {
        lapack::zgesvd(
            b'N', jobvt, mi, ni, &mut data, mi, &mut s, &mut u, 1, &mut vt, ldvt, &mut work,
            lwork, &mut rwork, &mut info,
        );
    }
    if info != 0 || s.iter().any(|x| !x.is_finite()) {
        return Err(Error::SvdFailed);
    }
    Ok((s, want_v.then(|| CMatrix::from_vec(n, n, vt))))
}

fn to_i32(x: usize) -> Result<i32> {
    i32::try_from(x).map_err(|_| Error::Shape(format!("dimension {x} too large for LAPACK")))
}

/// Singular values and right singular vectors, sorted by decreasing
/// singular value. Only `min(rows, cols)` pairs are returned.
pub fn right_singular_pairs(a: &CMatrix) -> Result<Vec<(f64, CVector)>> {
    Ok(full_right_singular_pairs(a)?.into_iter().take(a.nrows().min(a.ncols())).collect())
}

/// All `cols` right singular vectors; those past `min(rows, cols)` carry a
/// zero singular value.
fn full_right_singular_pairs(a: &CMatrix) -> Result<Vec<(f64, CVector)>> {
    let (s, vt) = lapack_svd(a, true)?;
    let vt = vt.ok_or(Error::SvdFailed)?;
    Ok((0..a.ncols())
        .map(|k| {
            let mut v: CVector = vt.row(k).adjoint();
            fix_phase(&mut v);
            (s.get(k).copied().unwrap_or(0.0), v)
        })
        .collect())
}

pub fn singular_values(a: &CMatrix) -> Result<Vec<f64>> {
    Ok(lapack_svd(a, false)?.0)
}

/// Numerical rank with the same relative threshold used for nullspaces.
pub fn rank(a: &CMatrix) -> Result<usize> {
    let s = singular_values(a)?;
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&x| x >= NULLSPACE_REL_TOL * top).count())
}

/// Orthonormal basis (as columns) of the right nullspace of `a`.
///
/// The right singular vectors whose singular value falls below
/// `NULLSPACE_REL_TOL * sigma_max` (or that lie past `min(rows, cols)`)
/// span the nullspace.
pub fn nullspace(a: &CMatrix) -> Result<CMatrix> {
    let (rows, cols) = a.shape();
    if rows == 0 {
        return Ok(CMatrix::identity(cols, cols));
    }
    let pairs = full_right_singular_pairs(a)?;
    let top = pairs.first().map(|p| p.0).unwrap_or(0.0);
    let basis: Vec<CVector> = pairs
        .into_iter()
        .filter(|(s, _)| top == 0.0 || *s < NULLSPACE_REL_TOL * top)
        .map(|(_, v)| v)
        .collect();
    if basis.is_empty() {
        return Ok(CMatrix::zeros(cols, 0));
    }
    Ok(CMatrix::from_columns(&basis))
}

/// Frobenius norm.
pub fn fro(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}
