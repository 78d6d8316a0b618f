//! The growth operator and the two routes to the effective matrix `B`.

use serde::{Serialize, Serializer};

use crate::algebra::{add_scaled, mat_exp, Mat, Spectrum};
use crate::error::{Error, Result};
use crate::io::mat_to_rows;
use crate::series::{conjugate_series, FourierMatrix, SeriesOptions, TermKey, TrigSeries, TrigTerm};

/// Whether `e^{-At} P(t) e^{At}` stays bounded, with the terms that break it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundednessVerdict {
    pub bounded: bool,
    pub offending_terms: Vec<TermKey>,
}

impl BoundednessVerdict {
    pub fn bounded() -> Self {
        Self { bounded: true, offending_terms: Vec::new() }
    }

    fn describe(&self) -> String {
        self.offending_terms
            .iter()
            .map(|k| format!("(a={:.6e}, b={:.6e}, k={})", k.a, k.b, k.k))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Algebraic,
    Averaged,
}

/// Effective matrix together with its derivation.
#[derive(Debug, Clone, Serialize)]
pub struct EffectiveModel {
    /// `None` when the conjugated perturbation is unbounded.
    #[serde(rename = "B", serialize_with = "serialize_opt_mat")]
    pub b: Option<Mat>,
    pub verdict: BoundednessVerdict,
    /// `e^{-At} P(t) e^{At} - B`; only the algebraic route produces it.
    #[serde(skip)]
    pub remainder: Option<TrigSeries>,
    pub method: Method,
    /// Algebraic: worst relative mismatch of the series against direct
    /// conjugation over one period. Averaged: `||B(T) - B(T/2)||`.
    pub residual: f64,
}

fn serialize_opt_mat<S: Serializer>(m: &Option<Mat>, s: S) -> std::result::Result<S::Ok, S::Error> {
    m.as_ref().map(mat_to_rows).serialize(s)
}

impl EffectiveModel {
    /// The finite `B`, or [`Error::UnboundedConjugation`].
    pub fn require_bounded(&self) -> Result<&Mat> {
        match (&self.b, self.verdict.bounded) {
            (Some(b), true) => Ok(b),
            _ => Err(Error::UnboundedConjugation(self.verdict.describe())),
        }
    }

    /// `B + R(t)`, which equals `e^{-At} P(t) e^{At}` when the remainder is known.
    pub fn conjugated(&self, t: f64) -> Option<Mat> {
        let b = self.b.as_ref()?;
        let r = self.remainder.as_ref()?;
        Some(b + r.evaluate(t))
    }
}

fn is_growth(t: &TrigTerm) -> bool {
    t.a > 0.0 || (t.a == 0.0 && (t.k != 0 || t.b == 0.0))
}

/// Splits off the non-decaying, non-oscillating part of a canonical series.
///
/// The growth part keeps terms with `a > 0`, with `a = 0, k != 0`, and the
/// constant `(0, 0, 0)` term. The series is bounded exactly when nothing but
/// the constant term is kept.
pub fn growth_operator(series: &TrigSeries) -> (TrigSeries, BoundednessVerdict) {
    let growth = series.filtered(is_growth);
    let offending_terms: Vec<TermKey> = growth
        .terms()
        .iter()
        .filter(|t| !(t.a == 0.0 && t.b == 0.0 && t.k == 0))
        .map(TrigTerm::key)
        .collect();
    let verdict = BoundednessVerdict { bounded: offending_terms.is_empty(), offending_terms };
    (growth, verdict)
}

/// `B` from the exact term expansion of `e^{-At} P(t) e^{At}`.
///
/// An unbounded verdict is not an error here; the model carries `b = None`
/// and [`EffectiveModel::require_bounded`] reports it.
pub fn effective_matrix_algebraic(spec: &Spectrum, p: &FourierMatrix, opts: &SeriesOptions) -> Result<EffectiveModel> {
    let series = conjugate_series(spec, p, opts)?;
    let (growth, verdict) = growth_operator(&series);
    let n = spec.dim();
    let b = verdict
        .bounded
        .then(|| growth.constant_term().map_or_else(|| Mat::zeros(n, n), |t| t.cos.clone()));
    let remainder = series.filtered(|t| !is_growth(t));
    let residual = series_residual(spec.matrix(), p, &series)?;
    Ok(EffectiveModel { b, verdict, remainder: Some(remainder), method: Method::Algebraic, residual })
}

/// Worst relative mismatch between the series and direct conjugation at 17
/// points spanning one period of `P`.
fn series_residual(a: &Mat, p: &FourierMatrix, series: &TrigSeries) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for j in 0..=16 {
        let t = p.period() * j as f64 / 16.0;
        let direct = mat_exp(a, -t)? * p.eval(t) * mat_exp(a, t)?;
        let diff = (series.evaluate(t) - &direct).norm();
        let scale = direct.norm().max(p.norm());
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}

/// Averaging window used when the caller does not choose one: `10^4` periods
/// of the fastest oscillation in `e^{-At} P(t) e^{At}`, 20 nodes per period.
pub fn default_averaging_window(a: &Mat, p: &FourierMatrix) -> (f64, usize) {
    let eigs = a.complex_eigenvalues();
    let max_im = eigs.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    let re_min = eigs.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
    let re_max = eigs.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    let spread = if eigs.is_empty() { 0.0 } else { re_max - re_min };
    let mut fastest = p.max_frequency() + 2.0 * max_im + spread;
    if fastest <= 0.0 {
        fastest = if a.norm() > 0.0 { a.norm() } else { 1.0 };
    }
    let periods = 1e4;
    let t = periods * 2.0 * std::f64::consts::PI / fastest;
    (t, (20.0 * periods) as usize)
}

/// `B` as the long-time average `(1/T) int_0^T e^{-At} P(t) e^{At} dt`.
///
/// Each Fourier coefficient is propagated as `G <- e^{-Ah} G e^{Ah}` across the
/// composite Simpson grid (`n_quad` is rounded up to a multiple of 4, so the
/// `T/2` average is available for the residual). The running average is
/// watched; once its norm exceeds `10^6 ||P||` the integral is declared
/// divergent.
pub fn effective_matrix_averaged(a: &Mat, p: &FourierMatrix, t_window: f64, n_quad: usize) -> Result<EffectiveModel> {
    let n = a.nrows();
    if !a.is_square() || p.dim() != n {
        return Err(Error::DimensionError(format!("A is {:?}, P is {}x{}", a.shape(), p.dim(), p.dim())));
    }
    if !(t_window > 0.0 && t_window.is_finite()) {
        return Err(Error::InvalidInput(format!("averaging window must be positive, got {t_window}")));
    }
    if p.is_zero() {
        return Ok(EffectiveModel {
            b: Some(Mat::zeros(n, n)),
            verdict: BoundednessVerdict::bounded(),
            remainder: None,
            method: Method::Averaged,
            residual: 0.0,
        });
    }
    let n_quad = n_quad.max(4).div_ceil(4) * 4;
    let h = t_window / n_quad as f64;
    // A scalar shift commutes with everything and keeps the step exponentials tame.
    let shift = a.trace() / n as f64;
    let a0 = a - Mat::identity(n, n) * shift;
    let fwd = mat_exp(&a0, h)?;
    let bwd = mat_exp(&a0, -h)?;
    let omega = p.omega();
    let guard = 1e6 * p.norm();

    let mut g: Vec<(f64, Mat, Mat)> = p
        .modes()
        .iter()
        .map(|m| (m.l as f64 * omega, m.cos.clone(), m.sin.clone()))
        .collect();
    let integrand = |g: &[(f64, Mat, Mat)], tau: f64| {
        let mut out = Mat::zeros(n, n);
        for (freq, c, s) in g {
            let (sn, cs) = (freq * tau).sin_cos();
            add_scaled(&mut out, cs, c);
            add_scaled(&mut out, sn, s);
        }
        out
    };

    // Simpson panels over node pairs; `acc` is the integral up to the last even node.
    let mut acc = Mat::zeros(n, n);
    let mut half = Mat::zeros(n, n);
    let mut left = integrand(&g, 0.0);
    let mut mid = Mat::zeros(n, n);
    for i in 1..=n_quad {
        for (_, c, s) in g.iter_mut() {
            *c = &bwd * &*c * &fwd;
            *s = &bwd * &*s * &fwd;
        }
        let tau = i as f64 * h;
        let f = integrand(&g, tau);
        if i % 2 == 1 {
            mid = f;
            continue;
        }
        acc += (&left + &mid * 4.0 + &f) * (h / 3.0);
        left = f;
        let avg_norm = acc.norm() / tau;
        if !avg_norm.is_finite() || avg_norm > guard {
            return Err(Error::DivergenceDetected { time: tau, norm: avg_norm });
        }
        if i == n_quad / 2 {
            half = acc.clone();
        }
    }
    let b = acc / t_window;
    let b_half = half / (t_window / 2.0);
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::DivergenceDetected { time: t_window, norm: f64::INFINITY });
    }
    let residual = (&b - &b_half).norm();
    Ok(EffectiveModel {
        b: Some(b),
        verdict: BoundednessVerdict::bounded(),
        remainder: None,
        method: Method::Averaged,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{spectral_decompose, Vector, DEFAULT_CLUSTER_TOL};
    use crate::series::MergeTolerance;
    use approx::assert_relative_eq;

    fn one(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    fn single(a: f64, b: f64, k: u32) -> TrigSeries {
        let t = TrigTerm { a, b, k, cos: one(1.0), sin: one(0.0) };
        TrigSeries::from_terms(1, vec![t], MergeTolerance::default(), 0.0).unwrap()
    }

    fn mathieu(omega: f64, theta: f64) -> (Mat, FourierMatrix) {
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, -omega * omega, 0.0]);
        // -w^2 cos(2 w t + theta) in the (2,1) slot
        let w2 = omega * omega;
        let cos = Mat::from_row_slice(2, 2, &[0.0, 0.0, -w2 * theta.cos(), 0.0]);
        let sin = Mat::from_row_slice(2, 2, &[0.0, 0.0, w2 * theta.sin(), 0.0]);
        (a, FourierMatrix::new(omega, 2).unwrap().with_mode(2, cos, sin).unwrap())
    }

    #[test]
    fn growth_of_constant_is_itself() {
        let (g, v) = growth_operator(&single(0.0, 0.0, 0));
        assert!(v.bounded);
        assert_eq!(g.terms().len(), 1);
    }

    #[test]
    fn decaying_term_is_removed() {
        let (g, v) = growth_operator(&single(-1.0, 0.0, 0));
        assert!(v.bounded);
        assert!(g.is_empty());
    }

    #[test]
    fn secular_term_is_unbounded() {
        let (g, v) = growth_operator(&single(0.0, 0.0, 1));
        assert!(!v.bounded);
        assert_eq!(g.terms().len(), 1);
        assert_eq!(v.offending_terms, vec![TermKey { a: 0.0, b: 0.0, k: 1 }]);
        let (_, v) = growth_operator(&single(0.0, 3.0, 0));
        assert!(v.bounded);
    }

    #[test]
    fn mathieu_closed_form() {
        for (w, th) in [(1.0, 0.0), (2.5, 0.7), (0.5, std::f64::consts::PI)] {
            let (a, p) = mathieu(w, th);
            let spec = spectral_decompose(&a, DEFAULT_CLUSTER_TOL).unwrap();
            let m = effective_matrix_algebraic(&spec, &p, &SeriesOptions::default()).unwrap();
            let (s, c) = th.sin_cos();
            let want = Mat::from_row_slice(2, 2, &[w * s, c, w * w * c, -w * s]) * -0.25;
            let b = m.require_bounded().unwrap();
            assert_relative_eq!(*b, want, epsilon = 1e-12);
            assert!(b.trace().abs() < 1e-12);
            assert_relative_eq!(b.determinant(), -w * w / 16.0, epsilon = 1e-12);
            assert!(m.residual < 1e-12);
        }
    }

    #[test]
    fn zero_perturbation() {
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let p = FourierMatrix::new(1.0, 2).unwrap();
        let spec = spectral_decompose(&a, DEFAULT_CLUSTER_TOL).unwrap();
        let m = effective_matrix_algebraic(&spec, &p, &SeriesOptions::default()).unwrap();
        assert_eq!(m.b.unwrap(), Mat::zeros(2, 2));
        let m = effective_matrix_averaged(&a, &p, 10.0, 100).unwrap();
        assert_eq!(m.b.unwrap(), Mat::zeros(2, 2));
    }

    #[test]
    fn zero_generator_averages_p() {
        let p0 = Mat::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        let p1 = Mat::from_row_slice(2, 2, &[4.0, 0.0, 1.0, 1.0]);
        let p = FourierMatrix::new(2.0, 2)
            .unwrap()
            .with_mode(0, p0.clone(), Mat::zeros(2, 2))
            .unwrap()
            .with_mode(1, p1, Mat::zeros(2, 2))
            .unwrap();
        let spec = spectral_decompose(&Mat::zeros(2, 2), DEFAULT_CLUSTER_TOL).unwrap();
        let m = effective_matrix_algebraic(&spec, &p, &SeriesOptions::default()).unwrap();
        assert_relative_eq!(m.b.unwrap(), p0, epsilon = 1e-14);
    }

    #[test]
    fn averaged_mathieu_is_close() {
        let (a, p) = mathieu(1.0, 0.0);
        let m = effective_matrix_averaged(&a, &p, 1e4 * 2.0 * std::f64::consts::PI, 200_000).unwrap();
        let want = Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]) * -0.25;
        assert!((m.b.unwrap() - want).norm() < 1e-3);
        assert!(m.residual < 1e-3);
    }

    #[test]
    fn exponential_conjugation_diverges() {
        let a = Mat::from_diagonal(&Vector::from_vec(vec![1.0, -1.0]));
        let mut c = Mat::zeros(2, 2);
        c[(1, 0)] = 1.0;
        let p = FourierMatrix::new(1.0, 2).unwrap().with_mode(0, c, Mat::zeros(2, 2)).unwrap();
        let spec = spectral_decompose(&a, DEFAULT_CLUSTER_TOL).unwrap();
        let m = effective_matrix_algebraic(&spec, &p, &SeriesOptions::default()).unwrap();
        assert!(!m.verdict.bounded);
        assert!(m.b.is_none());
        assert!(matches!(m.require_bounded(), Err(Error::UnboundedConjugation(_))));
        assert!(matches!(
            effective_matrix_averaged(&a, &p, 100.0, 4000),
            Err(Error::DivergenceDetected { .. })
        ));
    }

    #[test]
    fn model_json_shape() {
        let (a, p) = mathieu(1.0, 0.0);
        let spec = spectral_decompose(&a, DEFAULT_CLUSTER_TOL).unwrap();
        let m = effective_matrix_algebraic(&spec, &p, &SeriesOptions::default()).unwrap();
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v["method"], "algebraic");
        assert_eq!(v["verdict"]["bounded"], true);
        assert_eq!(v["B"].as_array().unwrap().len(), 2);
    }
}
