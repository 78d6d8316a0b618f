//! Matrix-valued trigonometric-exponential series.
//!
//! [`FourierMatrix`] holds a finite real Fourier series `P(t)` with base
//! frequency `omega`. [`TrigSeries`] holds the canonical expansion
//!
//! ```text
//! sum over keys (a, b, k) of  t^k e^{a t} (C cos(b t) + D sin(b t))
//! ```
//!
//! and [`conjugate_series`] produces that expansion for `e^{-At} P(t) e^{At}`
//! exactly, from the block-spectral form of `A`.

use log::warn;
use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::algebra::{add_scaled, Mat, Spectrum, DEFAULT_CLUSTER_TOL};
use crate::error::{Error, Result};
use crate::io::{mat_from_rows, mat_to_rows};

/// One Fourier mode `cos * cos(l omega t) + sin * sin(l omega t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierMode {
    pub l: u32,
    pub cos: Mat,
    pub sin: Mat,
}

/// A real matrix-valued finite Fourier series with period `2 pi / omega`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FourierMatrixJson", into = "FourierMatrixJson")]
pub struct FourierMatrix {
    omega: f64,
    dim: usize,
    modes: Vec<FourierMode>,
}

impl FourierMatrix {
    /// The zero series.
    pub fn new(omega: f64, dim: usize) -> Result<Self> {
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(Error::InvalidInput(format!("omega must be positive, got {omega}")));
        }
        Ok(Self { omega, dim, modes: Vec::new() })
    }

    pub fn with_mode(mut self, l: u32, cos: Mat, sin: Mat) -> Result<Self> {
        self.add_mode(l, cos, sin)?;
        Ok(self)
    }

    /// Adds `cos * cos(l omega t) + sin * sin(l omega t)`, merging with an
    /// existing mode of the same index.
    pub fn add_mode(&mut self, l: u32, cos: Mat, sin: Mat) -> Result<()> {
        for m in [&cos, &sin] {
            if m.shape() != (self.dim, self.dim) {
                return Err(Error::DimensionError(format!(
                    "mode {l} has shape {:?}, series is {}x{}",
                    m.shape(),
                    self.dim,
                    self.dim
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("mode {l} has non-finite entries")));
            }
        }
        if l == 0 && sin.iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidInput("mode 0 must have a zero sine coefficient".into()));
        }
        match self.modes.iter_mut().find(|m| m.l == l) {
            Some(m) => {
                m.cos += cos;
                m.sin += sin;
            }
            None => {
                self.modes.push(FourierMode { l, cos, sin });
                self.modes.sort_by_key(|m| m.l);
            }
        }
        Ok(())
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modes(&self) -> &[FourierMode] {
        &self.modes
    }

    pub fn period(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.omega
    }

    pub fn eval(&self, t: f64) -> Mat {
        let mut out = Mat::zeros(self.dim, self.dim);
        self.eval_into(t, &mut out);
        out
    }

    /// Writes `P(t)` into `out` without allocating.
    pub fn eval_into(&self, t: f64, out: &mut Mat) {
        out.fill(0.0);
        for m in &self.modes {
            let (s, c) = (m.l as f64 * self.omega * t).sin_cos();
            add_scaled(out, c, &m.cos);
            if m.l != 0 {
                add_scaled(out, s, &m.sin);
            }
        }
    }

    /// Sum of Frobenius norms of all coefficient matrices.
    pub fn norm(&self) -> f64 {
        self.modes.iter().map(|m| m.cos.norm() + m.sin.norm()).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.norm() == 0.0
    }

    /// Largest frequency present, `max l * omega` over nonzero modes.
    pub fn max_frequency(&self) -> f64 {
        self.modes
            .iter()
            .filter(|m| m.cos.norm() + m.sin.norm() > 0.0)
            .map(|m| m.l as f64 * self.omega)
            .fold(0.0, f64::max)
    }

    /// Applies `left * C * right` to every coefficient.
    pub fn transformed(&self, left: &Mat, right: &Mat) -> Result<Self> {
        let dim = left.nrows();
        if left.ncols() != self.dim || right.nrows() != self.dim || right.ncols() != dim {
            return Err(Error::DimensionError("basis change does not match series".into()));
        }
        let modes = self
            .modes
            .iter()
            .map(|m| FourierMode { l: m.l, cos: left * &m.cos * right, sin: left * &m.sin * right })
            .collect();
        Ok(Self { omega: self.omega, dim, modes })
    }

    pub fn scaled(&self, s: f64) -> Self {
        let modes = self
            .modes
            .iter()
            .map(|m| FourierMode { l: m.l, cos: &m.cos * s, sin: &m.sin * s })
            .collect();
        Self { omega: self.omega, dim: self.dim, modes }
    }

    /// Sum of two series with the same base frequency.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim || self.omega != other.omega {
            return Err(Error::DimensionError("series differ in dimension or base frequency".into()));
        }
        let mut out = self.clone();
        for m in &other.modes {
            out.add_mode(m.l, m.cos.clone(), m.sin.clone())?;
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct ModeJson {
    l: u32,
    #[serde(default)]
    cos: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    sin: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct FourierMatrixJson {
    omega: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
    modes: Vec<ModeJson>,
}

impl TryFrom<FourierMatrixJson> for FourierMatrix {
    type Error = Error;

    fn try_from(j: FourierMatrixJson) -> Result<Self> {
        let inferred = j
            .modes
            .iter()
            .flat_map(|m| [m.cos.as_ref(), m.sin.as_ref()])
            .flatten()
            .map(Vec::len)
            .next();
        let dim = j.dim.or(inferred).ok_or_else(|| {
            Error::InvalidInput("cannot infer dimension of an empty Fourier series; give \"dim\"".into())
        })?;
        let mut p = FourierMatrix::new(j.omega, dim)?;
        for m in j.modes {
            let read = |rows: Option<Vec<Vec<f64>>>| match rows {
                Some(r) => mat_from_rows(&r),
                None => Ok(Mat::zeros(dim, dim)),
            };
            p.add_mode(m.l, read(m.cos)?, read(m.sin)?)?;
        }
        Ok(p)
    }
}

impl From<FourierMatrix> for FourierMatrixJson {
    fn from(p: FourierMatrix) -> Self {
        FourierMatrixJson {
            omega: p.omega,
            dim: Some(p.dim),
            modes: p
                .modes
                .iter()
                .map(|m| ModeJson { l: m.l, cos: Some(mat_to_rows(&m.cos)), sin: Some(mat_to_rows(&m.sin)) })
                .collect(),
        }
    }
}

/// Identifies a term of a [`TrigSeries`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermKey {
    pub a: f64,
    pub b: f64,
    pub k: u32,
}

/// `t^k e^{a t} (cos * cos(b t) + sin * sin(b t))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigTerm {
    pub a: f64,
    pub b: f64,
    pub k: u32,
    pub cos: Mat,
    pub sin: Mat,
}

impl TrigTerm {
    pub fn key(&self) -> TermKey {
        TermKey { a: self.a, b: self.b, k: self.k }
    }

    pub fn constant(c: Mat) -> Self {
        let n = c.nrows();
        Self { a: 0.0, b: 0.0, k: 0, cos: c, sin: Mat::zeros(n, n) }
    }
}

/// Absolute tolerances under which rates and frequencies are identified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeTolerance {
    pub rate: f64,
    pub freq: f64,
}

impl Default for MergeTolerance {
    fn default() -> Self {
        Self { rate: 1e-12, freq: 1e-12 }
    }
}

/// Canonical term expansion: unique keys sorted by `(a, k, b)`, `b >= 0`,
/// zero-frequency terms carry no sine part, zero terms dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigSeries {
    dim: usize,
    terms: Vec<TrigTerm>,
    tol: MergeTolerance,
}

/// Groups sorted values whose distance to the group's first member is within `tol`;
/// returns the representative for each input position.
fn snap_sorted(values: &[f64], tol: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut rep: Option<f64> = None;
    for &v in values {
        match rep {
            Some(r) if (v - r).abs() <= tol => out.push(r),
            _ => {
                rep = Some(v);
                out.push(v);
            }
        }
    }
    out
}

impl TrigSeries {
    pub fn empty(dim: usize, tol: MergeTolerance) -> Self {
        Self { dim, terms: Vec::new(), tol }
    }

    /// Builds a canonical series, dropping terms whose coefficient norms are
    /// both at most `prune` (absolute).
    pub fn from_terms(dim: usize, terms: Vec<TrigTerm>, tol: MergeTolerance, prune: f64) -> Result<Self> {
        for t in &terms {
            if t.cos.shape() != (dim, dim) || t.sin.shape() != (dim, dim) {
                return Err(Error::DimensionError(format!("term shape differs from {dim}x{dim}")));
            }
            if !(t.a.is_finite() && t.b.is_finite()) {
                return Err(Error::InvalidInput("term key must be finite".into()));
            }
        }
        Ok(Self::canonicalize(dim, terms, tol, prune))
    }

    fn canonicalize(dim: usize, terms: Vec<TrigTerm>, tol: MergeTolerance, prune: f64) -> Self {
        let mut terms: Vec<TrigTerm> = terms
            .into_iter()
            .map(|mut t| {
                if t.b < 0.0 {
                    t.b = -t.b;
                    t.sin = -t.sin;
                }
                if t.a.abs() <= tol.rate {
                    t.a = 0.0;
                }
                if t.b <= tol.freq {
                    t.b = 0.0;
                }
                if t.b == 0.0 {
                    t.sin.fill(0.0);
                }
                t
            })
            .collect();

        // Snap rates globally, then frequencies within each (a, k) group.
        terms.sort_by(|x, y| x.a.total_cmp(&y.a));
        let rates = snap_sorted(&terms.iter().map(|t| t.a).collect::<Vec<_>>(), tol.rate);
        for (t, a) in terms.iter_mut().zip(rates) {
            t.a = a;
        }
        terms.sort_by(|x, y| x.a.total_cmp(&y.a).then(x.k.cmp(&y.k)).then(x.b.total_cmp(&y.b)));
        let mut start = 0;
        while start < terms.len() {
            let mut end = start + 1;
            while end < terms.len() && terms[end].a == terms[start].a && terms[end].k == terms[start].k {
                end += 1;
            }
            let freqs: Vec<f64> = terms[start..end].iter().map(|t| t.b).collect();
            for (t, b) in terms[start..end].iter_mut().zip(snap_sorted(&freqs, tol.freq)) {
                t.b = b;
            }
            start = end;
        }

        let mut merged: Vec<TrigTerm> = Vec::with_capacity(terms.len());
        for t in terms {
            match merged.last_mut() {
                Some(last) if last.key() == t.key() => {
                    last.cos += t.cos;
                    last.sin += t.sin;
                }
                _ => merged.push(t),
            }
        }
        for t in merged.iter_mut().filter(|t| t.b == 0.0) {
            t.sin.fill(0.0);
        }
        merged.retain(|t| t.cos.norm() > prune || t.sin.norm() > prune);
        Self { dim, terms: merged, tol }
    }

    /// Re-runs canonicalization; a canonical series is returned unchanged.
    pub fn canonicalized(&self) -> Self {
        Self::canonicalize(self.dim, self.terms.clone(), self.tol, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[TrigTerm] {
        &self.terms
    }

    pub fn tolerance(&self) -> MergeTolerance {
        self.tol
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// The `(0, 0, 0)` term, if present.
    pub fn constant_term(&self) -> Option<&TrigTerm> {
        self.terms.iter().find(|t| t.a == 0.0 && t.b == 0.0 && t.k == 0)
    }

    pub fn evaluate(&self, t: f64) -> Mat {
        let mut out = Mat::zeros(self.dim, self.dim);
        for term in &self.terms {
            let amp = t.powi(term.k as i32) * (term.a * t).exp();
            let (s, c) = (term.b * t).sin_cos();
            add_scaled(&mut out, amp * c, &term.cos);
            if term.b != 0.0 {
                add_scaled(&mut out, amp * s, &term.sin);
            }
        }
        out
    }

    /// `int_0^t` of the series, termwise and in closed form.
    pub fn integrate_from_zero(&self, t: f64) -> Mat {
        let mut out = Mat::zeros(self.dim, self.dim);
        for term in &self.terms {
            let z = power_exp_integral(term.k, Complex::new(term.a, term.b), t);
            add_scaled(&mut out, z.re, &term.cos);
            add_scaled(&mut out, z.im, &term.sin);
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| TrigTerm { cos: &t.cos * s, sin: &t.sin * s, ..t.clone() })
            .collect();
        Self::canonicalize(self.dim, terms, self.tol, 0.0)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionError("series dimensions differ".into()));
        }
        let terms = self.terms.iter().chain(other.terms.iter()).cloned().collect();
        Ok(Self::canonicalize(self.dim, terms, self.tol, 0.0))
    }

    /// Keeps the terms selected by `keep`.
    pub fn filtered(&self, keep: impl Fn(&TrigTerm) -> bool) -> Self {
        let terms = self.terms.iter().filter(|t| keep(t)).cloned().collect();
        Self { dim: self.dim, terms, tol: self.tol }
    }

    /// Applies `left * C * right` to every coefficient.
    pub fn transformed(&self, left: &Mat, right: &Mat) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| TrigTerm { cos: left * &t.cos * right, sin: left * &t.sin * right, ..t.clone() })
            .collect();
        Self::canonicalize(left.nrows(), terms, self.tol, 0.0)
    }

    /// Largest `|b|` among terms.
    pub fn max_frequency(&self) -> f64 {
        self.terms.iter().map(|t| t.b).fold(0.0, f64::max)
    }
}

/// `int_0^t tau^k e^{s tau} d tau` for complex `s`.
pub(crate) fn power_exp_integral(k: u32, s: Complex<f64>, t: f64) -> Complex<f64> {
    let st = s * t;
    if st.norm() < 1.0 {
        // sum_m s^m t^{k+m+1} / (m! (k+m+1))
        let mut term = Complex::new(t.powi(k as i32 + 1), 0.0);
        let mut acc = term / (k as f64 + 1.0);
        for m in 1..60 {
            term = term * st / m as f64;
            let add = term / (k as f64 + m as f64 + 1.0);
            acc += add;
            if add.norm() <= 1e-17 * acc.norm() {
                break;
            }
        }
        return acc;
    }
    let e = st.exp();
    let mut acc = (e - 1.0) / s;
    for j in 1..=k {
        acc = (e * t.powi(j as i32) - acc * j as f64) / s;
    }
    acc
}

/// Tolerances for [`conjugate_series`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesOptions {
    /// Frequencies closer than `freq_tol * omega` are identified; in particular
    /// `|mu_i +- mu_j +- l omega|` below it counts as exact resonance.
    pub freq_tol: f64,
    /// Rates closer than `rate_tol * ||A||` are identified.
    pub rate_tol: f64,
    /// Terms below `prune * ||P|| * cond(V)` are dropped.
    pub prune: f64,
    /// Resonances detuned by less than `near_resonance * omega` (but more than
    /// `freq_tol * omega`) are logged.
    pub near_resonance: f64,
}

impl Default for SeriesOptions {
    fn default() -> Self {
        Self { freq_tol: 1e-9, rate_tol: DEFAULT_CLUSTER_TOL, prune: 1e-14, near_resonance: 1e-4 }
    }
}

/// `cos * cos(freq t) + sin * sin(freq t)`, for rectangular coefficients.
struct Trig {
    freq: f64,
    cos: Mat,
    sin: Mat,
}

/// Product-to-sum for `(A cos x + B sin x)(C cos y + D sin y)`.
fn trig_product(x: &Trig, y: &Trig) -> [Trig; 2] {
    let ac = &x.cos * &y.cos;
    let bd = &x.sin * &y.sin;
    let ad = &x.cos * &y.sin;
    let bc = &x.sin * &y.cos;
    [
        Trig { freq: x.freq + y.freq, cos: (&ac - &bd) * 0.5, sin: (&ad + &bc) * 0.5 },
        Trig { freq: x.freq - y.freq, cos: (ac + bd) * 0.5, sin: (bc - ad) * 0.5 },
    ]
}

fn rotation_unit(size: usize) -> Mat {
    if size == 2 {
        Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])
    } else {
        Mat::zeros(size, size)
    }
}

/// Exact expansion of `e^{-At} P(t) e^{At}` for diagonalizable `A`.
///
/// In the block eigenbasis, block `(i, j)` of Fourier mode `l` contributes
/// terms with rate `lambda_j - lambda_i` and frequencies
/// `|+-mu_i +- mu_j +- l omega|`; coefficients come from product-to-sum
/// identities and are mapped back by `V (.) V^{-1}`.
pub fn conjugate_series(spec: &Spectrum, p: &FourierMatrix, opts: &SeriesOptions) -> Result<TrigSeries> {
    let n = spec.dim();
    if p.dim() != n {
        return Err(Error::DimensionError(format!("P is {}x{}, A is {n}x{n}", p.dim(), p.dim())));
    }
    let omega = p.omega();
    let tol = MergeTolerance {
        rate: opts.rate_tol * spec.matrix().norm().max(f64::MIN_POSITIVE),
        freq: opts.freq_tol * omega,
    };
    let prune = opts.prune * p.norm() * spec.condition();
    if p.is_zero() {
        return Ok(TrigSeries::empty(n, tol));
    }

    let offs = spec.offsets();
    let blocks = &spec.blocks;
    let mut terms: Vec<TrigTerm> = Vec::new();
    for mode in p.modes() {
        let c_eig = &spec.v_inv * &mode.cos * &spec.v;
        let s_eig = &spec.v_inv * &mode.sin * &spec.v;
        let lw = mode.l as f64 * omega;
        for (bi, (blk_i, &oi)) in blocks.iter().zip(&offs).enumerate() {
            let si = blk_i.size;
            // e^{-J_i t} = e^{-lambda_i t} (I cos mu_i t - beta_i sin mu_i t)
            let left = Trig { freq: blk_i.mu, cos: Mat::identity(si, si), sin: -rotation_unit(si) };
            for (bj, (blk_j, &oj)) in blocks.iter().zip(&offs).enumerate() {
                let sj = blk_j.size;
                let c = c_eig.view((oi, oj), (si, sj)).clone_owned();
                let s = s_eig.view((oi, oj), (si, sj)).clone_owned();
                if c.norm() + s.norm() <= prune * 1e-3 {
                    continue;
                }
                let middle = Trig { freq: lw, cos: c, sin: s };
                // e^{J_j t} = e^{lambda_j t} (I cos mu_j t + beta_j sin mu_j t)
                let right = Trig { freq: blk_j.mu, cos: Mat::identity(sj, sj), sin: rotation_unit(sj) };
                let rate = blk_j.lambda - blk_i.lambda;
                for lm in trig_product(&left, &middle) {
                    for prod in trig_product(&lm, &right) {
                        let detune = prod.freq.abs();
                        if detune > tol.freq && detune < opts.near_resonance * omega && rate.abs() <= tol.rate {
                            warn!(
                                "near-resonance between blocks {bi} and {bj} at mode {}: detuning {detune:.3e}",
                                mode.l
                            );
                        }
                        let mut cos = Mat::zeros(n, n);
                        let mut sin = Mat::zeros(n, n);
                        cos.view_mut((oi, oj), (si, sj)).copy_from(&prod.cos);
                        sin.view_mut((oi, oj), (si, sj)).copy_from(&prod.sin);
                        terms.push(TrigTerm { a: rate, b: prod.freq, k: 0, cos, sin });
                    }
                }
            }
        }
    }
    // Merge in the eigenbasis first so only one basis change per distinct key.
    let eig = TrigSeries::canonicalize(n, terms, tol, 0.0);
    let back = eig
        .terms
        .into_iter()
        .map(|t| TrigTerm { cos: &spec.v * &t.cos * &spec.v_inv, sin: &spec.v * &t.sin * &spec.v_inv, ..t })
        .collect();
    Ok(TrigSeries::canonicalize(n, back, tol, prune))
}
