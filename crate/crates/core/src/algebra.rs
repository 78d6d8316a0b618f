//! Dense real linear algebra: the matrix exponential, the real block-spectral
//! decomposition `A = V J V^{-1}`, and basis conjugation.
//!
//! `J` is block diagonal with 1x1 blocks for real eigenvalues and 2x2 blocks
//! `[[lambda, mu], [-mu, lambda]]` (with `mu > 0`) for complex pairs
//! `lambda +- i mu`. Only matrices that are diagonalizable over the complex
//! numbers are accepted; defective clusters are refused.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default relative tolerance used to cluster eigenvalues.
pub const DEFAULT_CLUSTER_TOL: f64 = 1e-8;

/// `exp(A t)`.
///
/// Scaling and squaring with a degree-13 Padé approximant (nalgebra's
/// implementation). Non-finite results are reported as [`Error::ExpOverflow`].
pub fn mat_exp(a: &Mat, t: f64) -> Result<Mat> {
    if !a.is_square() {
        return Err(Error::DimensionError(format!(
            "mat_exp needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if !t.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite time {t}")));
    }
    let scaled = a * t;
    let norm = scaled.lp_norm(1);
    if !norm.is_finite() {
        return Err(Error::ExpOverflow { norm });
    }
    // exp of a matrix with 1-norm beyond ~1.5e3 certainly exceeds f64 for some
    // inputs, but not always (skew matrices); let the result decide.
    let e = scaled.exp();
    if e.iter().all(|v| v.is_finite()) {
        Ok(e)
    } else {
        Err(Error::ExpOverflow { norm })
    }
}

/// One real block of the spectral form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralBlock {
    /// Real part of the eigenvalue.
    pub lambda: f64,
    /// Nonnegative imaginary part.
    pub mu: f64,
    /// 1 for a real eigenvalue, 2 for a complex pair.
    pub size: usize,
    /// Algebraic multiplicity of the eigenvalue cluster this block belongs to.
    pub multiplicity: usize,
}

/// Real block diagonalization `A = V J V^{-1}`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub blocks: Vec<SpectralBlock>,
    pub v: Mat,
    pub v_inv: Mat,
    /// `||V J V^{-1} - A||_F / ||A||_F`.
    pub residual: f64,
    matrix: Mat,
}

impl Spectrum {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// The matrix that was decomposed.
    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    /// Starting row/column of each block in `J`.
    pub fn offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.blocks.len());
        let mut acc = 0;
        for b in &self.blocks {
            offs.push(acc);
            acc += b.size;
        }
        offs
    }

    /// The block-diagonal matrix `J`.
    pub fn block_form(&self) -> Mat {
        let n = self.dim();
        let mut j = Mat::zeros(n, n);
        for (b, off) in self.blocks.iter().zip(self.offsets()) {
            j[(off, off)] = b.lambda;
            if b.size == 2 {
                j[(off + 1, off + 1)] = b.lambda;
                j[(off, off + 1)] = b.mu;
                j[(off + 1, off)] = -b.mu;
            }
        }
        j
    }

    /// Condition number of `V` in the Frobenius norm.
    pub fn condition(&self) -> f64 {
        self.v.norm() * self.v_inv.norm()
    }
}

struct Cluster {
    re: f64,
    im: f64,
    count: usize,
}

/// Groups eigenvalues of the closed upper half plane into clusters.
///
/// Eigenvalues with `|im| <= tol` are real; the lower half plane mirrors the
/// upper one and is skipped, but its members are counted for real clusters
/// (a defective real eigenvalue often comes back as a tiny conjugate pair).
fn cluster_eigenvalues(eigs: &[Complex<f64>], tol: f64) -> Vec<Cluster> {
    let mut pts: Vec<(f64, f64)> = eigs
        .iter()
        .map(|z| if z.im.abs() <= tol { (z.re, 0.0) } else { (z.re, z.im) })
        .filter(|&(_, im)| im >= 0.0)
        .collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));

    let mut assigned = vec![false; pts.len()];
    let mut clusters = Vec::new();
    for i in 0..pts.len() {
        if assigned[i] {
            continue;
        }
        // single-linkage closure
        let mut members = vec![i];
        assigned[i] = true;
        let mut cursor = 0;
        while cursor < members.len() {
            let (re, im) = pts[members[cursor]];
            for (j, p) in pts.iter().enumerate() {
                if !assigned[j] && (p.0 - re).hypot(p.1 - im) <= tol {
                    assigned[j] = true;
                    members.push(j);
                }
            }
            cursor += 1;
        }
        let count = members.len();
        let re = members.iter().map(|&m| pts[m].0).sum::<f64>() / count as f64;
        let im = members.iter().map(|&m| pts[m].1).sum::<f64>() / count as f64;
        clusters.push(Cluster { re, im, count });
    }
    clusters
}

/// Right singular vectors of `m` belonging to its `count` smallest singular values,
/// provided those are all below `null_tol`.
fn null_vectors(m: DMatrix<Complex<f64>>, count: usize, null_tol: f64) -> Option<Vec<DVector<Complex<f64>>>> {
    let svd = m.svd(false, true);
    let v_t = svd.v_t?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    if order.len() < count || svd.singular_values[order[count - 1]] > null_tol {
        return None;
    }
    Some(
        order[..count]
            .iter()
            .map(|&k| v_t.row(k).transpose().map(|z| z.conj()))
            .collect(),
    )
}

/// Rotates a complex vector so its largest-magnitude entry is real and positive.
fn fix_phase(v: &mut DVector<Complex<f64>>) {
    let (mut best, mut best_abs) = (0, -1.0);
    for (i, z) in v.iter().enumerate() {
        if z.norm() > best_abs + 1e-12 {
            best = i;
            best_abs = z.norm();
        }
    }
    if best_abs > 0.0 {
        let phase = v[best] / v[best].norm();
        let rot = phase.conj();
        for z in v.iter_mut() {
            *z *= rot;
        }
    }
}

/// Real block diagonalization of `a`.
///
/// `tol` is relative to `||A||_F`; eigenvalues closer than `tol * ||A||_F` are
/// treated as one cluster. A cluster whose eigenspace is smaller than its
/// multiplicity yields [`Error::DefectiveMatrix`].
pub fn spectral_decompose(a: &Mat, tol: f64) -> Result<Spectrum> {
    let n = a.nrows();
    if !a.is_square() {
        return Err(Error::DimensionError(format!("{}x{} is not square", a.nrows(), a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    let scale = a.norm();
    if n == 0 || scale == 0.0 {
        return Ok(Spectrum {
            blocks: vec![SpectralBlock { lambda: 0.0, mu: 0.0, size: 1, multiplicity: n }; n],
            v: Mat::identity(n, n),
            v_inv: Mat::identity(n, n),
            residual: 0.0,
            matrix: a.clone(),
        });
    }
    let abs_tol = tol * scale;
    let null_tol = tol.sqrt().max(1e-6) * scale;

    let eigs: Vec<Complex<f64>> = a.complex_eigenvalues().iter().copied().collect();
    let mut clusters = cluster_eigenvalues(&eigs, abs_tol);
    // descending real part, then ascending frequency
    clusters.sort_by(|x, y| y.re.total_cmp(&x.re).then(x.im.total_cmp(&y.im)));

    let ac = a.map(|v| Complex::new(v, 0.0));
    let mut blocks = Vec::with_capacity(n);
    let mut columns: Vec<Vector> = Vec::with_capacity(n);
    for c in &clusters {
        let rho = Complex::new(c.re, c.im);
        let shifted = &ac - DMatrix::<Complex<f64>>::identity(n, n) * rho;
        let vecs = null_vectors(shifted, c.count, null_tol)
            .ok_or(Error::DefectiveMatrix { re: c.re, im: c.im })?;
        for mut v in vecs {
            fix_phase(&mut v);
            if c.im == 0.0 {
                columns.push(v.map(|z| z.re));
                blocks.push(SpectralBlock { lambda: c.re, mu: 0.0, size: 1, multiplicity: c.count });
            } else {
                columns.push(v.map(|z| z.re));
                columns.push(v.map(|z| z.im));
                blocks.push(SpectralBlock { lambda: c.re, mu: c.im, size: 2, multiplicity: c.count });
            }
        }
    }
    if columns.len() != n {
        let worst = clusters.first().map(|c| (c.re, c.im)).unwrap_or((0.0, 0.0));
        return Err(Error::DefectiveMatrix { re: worst.0, im: worst.1 });
    }
    let v = Mat::from_columns(&columns);
    let v_inv = v.clone().try_inverse().ok_or_else(|| {
        let c = &clusters[0];
        Error::DefectiveMatrix { re: c.re, im: c.im }
    })?;
    let mut spec = Spectrum { blocks, v, v_inv, residual: 0.0, matrix: a.clone() };
    if spec.condition() * tol > 1.0 {
        let c = &clusters[0];
        return Err(Error::DefectiveMatrix { re: c.re, im: c.im });
    }
    let rebuilt = &spec.v * spec.block_form() * &spec.v_inv;
    spec.residual = (rebuilt - a).norm() / scale;
    if !(spec.residual <= 1e3 * tol) {
        let c = &clusters[0];
        return Err(Error::DefectiveMatrix { re: c.re, im: c.im });
    }
    Ok(spec)
}

/// `out += s * m`, in place.
pub fn add_scaled(out: &mut Mat, s: f64, m: &Mat) {
    out.zip_apply(m, |o, v| *o += s * v);
}

/// `W^{-1} M W`.
pub fn conjugate(w: &Mat, w_inv: &Mat, m: &Mat) -> Result<Mat> {
    let n = m.nrows();
    let shapes = [w.shape(), w_inv.shape(), m.shape()];
    if shapes.iter().any(|&s| s != (n, n)) {
        return Err(Error::DimensionError(format!("conjugate: shapes {shapes:?} disagree")));
    }
    Ok(w_inv * m * w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn exp_of_zero_is_identity() {
        let e = mat_exp(&Mat::zeros(2, 2), 5.0).unwrap();
        assert_eq!(e, Mat::identity(2, 2));
    }

    #[test]
    fn exp_of_rotation_generator() {
        let th = PI / 3.0;
        let a = Mat::from_row_slice(2, 2, &[0.0, th, -th, 0.0]);
        let e = mat_exp(&a, 1.0).unwrap();
        let want = Mat::from_row_slice(2, 2, &[th.cos(), th.sin(), -th.sin(), th.cos()]);
        assert_relative_eq!(e, want, epsilon = 1e-14);
    }

    #[test]
    fn exp_of_diagonal() {
        let a = Mat::from_diagonal(&Vector::from_vec(vec![1.0, -2.0]));
        let e = mat_exp(&a, 0.5).unwrap();
        assert_relative_eq!(e[(0, 0)], 0.5f64.exp(), max_relative = 1e-14);
        assert_relative_eq!(e[(1, 1)], (-1.0f64).exp(), max_relative = 1e-14);
        assert_eq!(e[(0, 1)], 0.0);
    }

    #[test]
    fn exp_overflow_is_reported() {
        let a = Mat::from_diagonal(&Vector::from_vec(vec![1.0, 0.0]));
        assert!(matches!(mat_exp(&a, 1e4), Err(Error::ExpOverflow { .. })));
    }

    #[test]
    fn diagonal_spectrum_is_trivial() {
        let a = Mat::from_diagonal(&Vector::from_vec(vec![3.0, -1.0]));
        let s = spectral_decompose(&a, DEFAULT_CLUSTER_TOL).unwrap();
        assert_eq!(s.blocks.len(), 2);
        assert_eq!((s.blocks[0].lambda, s.blocks[0].mu, s.blocks[0].size), (3.0, 0.0, 1));
        assert_relative_eq!(s.blocks[1].lambda, -1.0, epsilon = 1e-14);
        assert_relative_eq!(s.v, Mat::identity(2, 2), epsilon = 1e-14);
    }

    #[test]
    fn mathieu_generator_is_one_rotation_block() {
        let w = 2.0;
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, -w * w, 0.0]);
        let s = spectral_decompose(&a, DEFAULT_CLUSTER_TOL).unwrap();
        assert_eq!(s.blocks.len(), 1);
        let b = s.blocks[0];
        assert_eq!(b.size, 2);
        assert!(b.lambda.abs() < 1e-12);
        assert_relative_eq!(b.mu, 2.0, epsilon = 1e-12);
        let j = conjugate(&s.v, &s.v_inv, &a).unwrap();
        let want = Mat::from_row_slice(2, 2, &[0.0, w, -w, 0.0]);
        assert_relative_eq!(j, want, epsilon = 1e-12);
        assert_relative_eq!(j, s.block_form(), epsilon = 1e-12);
    }

    #[test]
    fn jordan_block_is_refused() {
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(
            spectral_decompose(&a, DEFAULT_CLUSTER_TOL),
            Err(Error::DefectiveMatrix { .. })
        ));
        let a = Mat::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            spectral_decompose(&a, DEFAULT_CLUSTER_TOL),
            Err(Error::DefectiveMatrix { .. })
        ));
    }

    #[test]
    fn repeated_semisimple_eigenvalue_is_accepted() {
        let a = Mat::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, -1.0]);
        let s = spectral_decompose(&a, DEFAULT_CLUSTER_TOL).unwrap();
        assert_eq!(s.blocks[0].multiplicity, 2);
        assert!(s.residual < 1e-14);
    }

    #[test]
    fn conjugate_identities() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let i = Mat::identity(2, 2);
        assert_eq!(conjugate(&i, &i, &m).unwrap(), m);
        let w = Mat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]);
        let w_inv = w.clone().try_inverse().unwrap();
        assert_relative_eq!(conjugate(&w, &w_inv, &i).unwrap(), i, epsilon = 1e-14);
        assert!(matches!(
            conjugate(&Mat::identity(3, 3), &i, &m),
            Err(Error::DimensionError(_))
        ));
    }
}
