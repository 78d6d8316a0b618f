//! The perturbed system, its forcing integral, the cell problem and the
//! reconstructed long-time solution, plus the first-order Floquet baseline
//! and error metrics.

use std::io::Write;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::algebra::{mat_exp, spectral_decompose, Mat, Vector, DEFAULT_CLUSTER_TOL};
use crate::error::{Error, Result};
use crate::growth::EffectiveModel;
use crate::io::{csv_row, mat_from_rows, mat_to_rows, vector_from_slice};
use crate::series::{conjugate_series, FourierMatrix, SeriesOptions};

/// One term `t^k e^{a t} (cos * cos(b t) + sin * sin(b t))` of a vector forcing.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingTerm {
    pub a: f64,
    pub b: f64,
    pub k: u32,
    pub cos: Vector,
    pub sin: Vector,
}

/// The inhomogeneity `f(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ForcingJson", into = "ForcingJson")]
pub enum ForcingSpec {
    Zero,
    Constant(Vector),
    TrigPoly(Vec<ForcingTerm>),
    /// Piecewise-linear interpolation of samples; the grid starts at 0.
    Sampled { times: Vec<f64>, values: Vec<Vector> },
}

impl ForcingSpec {
    /// Trigonometric-polynomial forcing with terms merged by key and `b >= 0`.
    pub fn trigpoly(terms: Vec<ForcingTerm>) -> Result<Self> {
        let mut out: Vec<ForcingTerm> = Vec::new();
        for mut t in terms {
            if !(t.a.is_finite() && t.b.is_finite()) || t.cos.len() != t.sin.len() {
                return Err(Error::InvalidInput("malformed forcing term".into()));
            }
            if t.b < 0.0 {
                t.b = -t.b;
                t.sin = -t.sin;
            }
            if t.b == 0.0 {
                t.sin.fill(0.0);
            }
            match out.iter_mut().find(|o| o.a == t.a && o.b == t.b && o.k == t.k) {
                Some(o) => {
                    o.cos += &t.cos;
                    o.sin += &t.sin;
                }
                None => out.push(t),
            }
        }
        let dims: Vec<usize> = out.iter().map(|t| t.cos.len()).collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::DimensionError("forcing terms differ in length".into()));
        }
        Ok(Self::TrigPoly(out))
    }

    pub fn sampled(times: Vec<f64>, values: Vec<Vector>) -> Result<Self> {
        if times.len() < 2 || times.len() != values.len() {
            return Err(Error::InvalidInput("sampled forcing needs >= 2 matching samples".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::InvalidInput("sampled forcing grid must start at t = 0".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput("sampled forcing grid must be strictly increasing".into()));
        }
        if values.iter().any(|v| v.len() != values[0].len() || v.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidInput("sampled forcing values must be finite and equal length".into()));
        }
        Ok(Self::Sampled { times, values })
    }

    /// Vector length implied by the data, if any.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Self::Zero => None,
            Self::Constant(c) => Some(c.len()),
            Self::TrigPoly(t) => t.first().map(|t| t.cos.len()),
            Self::Sampled { values, .. } => values.first().map(Vector::len),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Zero => true,
            Self::Constant(c) => c.iter().all(|&v| v == 0.0),
            Self::TrigPoly(t) => t.iter().all(|t| t.cos.iter().chain(t.sin.iter()).all(|&v| v == 0.0)),
            Self::Sampled { values, .. } => values.iter().all(|v| v.iter().all(|&x| x == 0.0)),
        }
    }

    pub fn eval(&self, t: f64, dim: usize) -> Result<Vector> {
        match self {
            Self::Zero => Ok(Vector::zeros(dim)),
            Self::Constant(c) => Ok(c.clone()),
            Self::TrigPoly(terms) => {
                let mut out = Vector::zeros(dim);
                for term in terms {
                    let amp = t.powi(term.k as i32) * (term.a * t).exp();
                    let (s, c) = (term.b * t).sin_cos();
                    out.axpy(amp * c, &term.cos, 1.0);
                    out.axpy(amp * s, &term.sin, 1.0);
                }
                Ok(out)
            }
            Self::Sampled { times, values } => {
                let last = *times.last().unwrap_or(&0.0);
                if t > last || t < times[0] {
                    return Err(Error::GridTooShort { grid_end: last, requested: t });
                }
                let i = times.partition_point(|&s| s <= t).clamp(1, times.len() - 1);
                let w = (t - times[i - 1]) / (times[i] - times[i - 1]);
                Ok(&values[i - 1] * (1.0 - w) + &values[i] * w)
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ForcingTermJson {
    #[serde(default)]
    a: f64,
    #[serde(default)]
    b: f64,
    #[serde(default)]
    k: u32,
    cos: Vec<f64>,
    #[serde(default)]
    sin: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ForcingJson {
    Zero,
    Constant { value: Vec<f64> },
    Trigpoly { terms: Vec<ForcingTermJson> },
    Sampled { times: Vec<f64>, values: Vec<Vec<f64>> },
}

impl TryFrom<ForcingJson> for ForcingSpec {
    type Error = Error;

    fn try_from(j: ForcingJson) -> Result<Self> {
        match j {
            ForcingJson::Zero => Ok(Self::Zero),
            ForcingJson::Constant { value } => Ok(Self::Constant(vector_from_slice(&value)?)),
            ForcingJson::Trigpoly { terms } => {
                let terms = terms
                    .into_iter()
                    .map(|t| {
                        let cos = vector_from_slice(&t.cos)?;
                        let sin = match t.sin {
                            Some(s) => vector_from_slice(&s)?,
                            None => Vector::zeros(cos.len()),
                        };
                        Ok(ForcingTerm { a: t.a, b: t.b, k: t.k, cos, sin })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Self::trigpoly(terms)
            }
            ForcingJson::Sampled { times, values } => {
                let values = values.iter().map(|v| vector_from_slice(v)).collect::<Result<Vec<_>>>()?;
                Self::sampled(times, values)
            }
        }
    }
}

impl From<ForcingSpec> for ForcingJson {
    fn from(f: ForcingSpec) -> Self {
        let v = |x: &Vector| x.iter().copied().collect::<Vec<f64>>();
        match f {
            ForcingSpec::Zero => Self::Zero,
            ForcingSpec::Constant(c) => Self::Constant { value: v(&c) },
            ForcingSpec::TrigPoly(terms) => Self::Trigpoly {
                terms: terms
                    .iter()
                    .map(|t| ForcingTermJson { a: t.a, b: t.b, k: t.k, cos: v(&t.cos), sin: Some(v(&t.sin)) })
                    .collect(),
            },
            ForcingSpec::Sampled { times, values } => Self::Sampled { times, values: values.iter().map(v).collect() },
        }
    }
}

/// `x' = A x + eps P(t) x + f(t)`, `x(0) = x0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SystemJson", into = "SystemJson")]
pub struct LinearSystem {
    pub a: Mat,
    pub p: FourierMatrix,
    pub epsilon: f64,
    pub f: ForcingSpec,
    pub x0: Vector,
}

impl LinearSystem {
    pub fn new(a: Mat, p: FourierMatrix, epsilon: f64, f: ForcingSpec, x0: Vector) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || n == 0 {
            return Err(Error::DimensionError(format!("A must be square and nonempty, got {:?}", a.shape())));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("A has non-finite entries".into()));
        }
        if p.dim() != n || x0.len() != n || f.dim().is_some_and(|d| d != n) {
            return Err(Error::DimensionError(format!(
                "A is {n}x{n}, P is {}x{}, x0 has {} entries, f has {:?}",
                p.dim(),
                p.dim(),
                x0.len(),
                f.dim()
            )));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidInput(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        if epsilon > 0.5 {
            warn!("epsilon = {epsilon} is not small; the homogenized model may be inaccurate");
        }
        Ok(Self { a, p, epsilon, f, x0 })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Right-hand side `A x + eps P(t) x + f(t)`.
    pub fn rhs(&self, t: f64, x: &Vector) -> Result<Vector> {
        let mut out = &self.a * x;
        if self.epsilon != 0.0 && !self.p.is_zero() {
            out += self.p.eval(t) * x * self.epsilon;
        }
        if !matches!(self.f, ForcingSpec::Zero) {
            out += self.f.eval(t, self.dim())?;
        }
        Ok(out)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::new(self.a.clone(), self.p.clone(), epsilon, self.f.clone(), self.x0.clone())
    }
}

#[derive(Serialize, Deserialize)]
struct SystemJson {
    a: Vec<Vec<f64>>,
    p: FourierMatrix,
    epsilon: f64,
    #[serde(default = "zero_forcing")]
    forcing: ForcingSpec,
    x0: Vec<f64>,
}

fn zero_forcing() -> ForcingSpec {
    ForcingSpec::Zero
}

impl TryFrom<SystemJson> for LinearSystem {
    type Error = Error;

    fn try_from(j: SystemJson) -> Result<Self> {
        LinearSystem::new(mat_from_rows(&j.a)?, j.p, j.epsilon, j.forcing, vector_from_slice(&j.x0)?)
    }
}

impl From<LinearSystem> for SystemJson {
    fn from(s: LinearSystem) -> Self {
        SystemJson {
            a: mat_to_rows(&s.a),
            p: s.p,
            epsilon: s.epsilon,
            forcing: s.f,
            x0: s.x0.iter().copied().collect(),
        }
    }
}

/// Integration bookkeeping attached to a [`Trajectory`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StepMeta {
    /// Fixed step, when the method uses one.
    pub step: Option<f64>,
    pub rel_tol: Option<f64>,
    pub steps_taken: usize,
}

/// States sampled on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub method: String,
    pub step_meta: StepMeta,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vector::len)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// CSV with header `t,x1,...,xn`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header: Vec<String> = (1..=self.dim()).map(|i| format!("x{i}")).collect();
        writeln!(w, "t,{}", header.join(","))?;
        for (t, x) in self.times.iter().zip(&self.states) {
            writeln!(w, "{}", csv_row(std::iter::once(*t).chain(x.iter().copied())))?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is ascii")
    }
}

pub(crate) fn check_grid(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::InvalidInput("time grid is empty".into()));
    }
    if !(times[0] >= 0.0) || times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("time grid must be finite and start at t >= 0".into()));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("time grid must be strictly increasing".into()));
    }
    Ok(())
}

/// `n + 1` equally spaced points on `[0, t_end]`.
pub fn uniform_grid(t_end: f64, n: usize) -> Vec<f64> {
    let n = n.max(1);
    (0..=n).map(|i| t_end * i as f64 / n as f64).collect()
}

/// Evaluator for `q(t) = int_0^t e^{-A tau} f(tau) d tau`.
///
/// Smooth forcings are folded into an augmented linear system
/// `u' = A u + H z, z' = S z` whose exponential yields `u(t) = e^{At} q(t)`
/// exactly, resonant or not. Sampled forcing is integrated exactly per
/// interpolation interval the same way, with cumulative sums cached at knots.
#[derive(Debug, Clone)]
pub struct ForcingIntegral {
    a: Mat,
    kind: IntegralKind,
}

#[derive(Debug, Clone)]
enum IntegralKind {
    Zero,
    /// Augmented generator and the initial generator state.
    Generated { big: Mat, z0: Vector },
    Sampled { times: Vec<f64>, values: Vec<Vector>, cumulative: Vec<Vector> },
}

impl ForcingIntegral {
    pub fn new(a: &Mat, f: &ForcingSpec) -> Result<Self> {
        let n = a.nrows();
        if f.dim().is_some_and(|d| d != n) {
            return Err(Error::DimensionError(format!("forcing has {:?} entries, A is {n}x{n}", f.dim())));
        }
        let kind = match f {
            _ if f.is_zero() && !matches!(f, ForcingSpec::Sampled { .. }) => IntegralKind::Zero,
            ForcingSpec::Zero => IntegralKind::Zero,
            ForcingSpec::Constant(c) => {
                let mut big = Mat::zeros(n + 1, n + 1);
                big.view_mut((0, 0), (n, n)).copy_from(a);
                big.view_mut((0, n), (n, 1)).copy_from(c);
                IntegralKind::Generated { big, z0: unit(n + 1, n) }
            }
            ForcingSpec::TrigPoly(terms) => trigpoly_generator(a, terms),
            ForcingSpec::Sampled { times, values } => {
                let mut cumulative = vec![Vector::zeros(n)];
                for i in 1..times.len() {
                    let piece = linear_piece(a, times[i - 1], times[i] - times[i - 1], &values[i - 1], &values[i])?;
                    cumulative.push(&cumulative[i - 1] + piece);
                }
                IntegralKind::Sampled { times: times.clone(), values: values.clone(), cumulative }
            }
        };
        Ok(Self { a: a.clone(), kind })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, IntegralKind::Zero)
    }

    pub fn at(&self, t: f64) -> Result<Vector> {
        let n = self.a.nrows();
        if t == 0.0 {
            return Ok(Vector::zeros(n));
        }
        match &self.kind {
            IntegralKind::Zero => Ok(Vector::zeros(n)),
            IntegralKind::Generated { big, z0 } => {
                let u = (mat_exp(big, t)? * z0).rows(0, n).into_owned();
                Ok(mat_exp(&self.a, -t)? * u)
            }
            IntegralKind::Sampled { times, values, cumulative } => {
                let last = *times.last().unwrap_or(&0.0);
                if t > last || t < 0.0 {
                    return Err(Error::GridTooShort { grid_end: last, requested: t });
                }
                let i = times.partition_point(|&s| s <= t).clamp(1, times.len() - 1);
                let (t0, t1) = (times[i - 1], times[i]);
                if t == t0 {
                    return Ok(cumulative[i - 1].clone());
                }
                let w = (t - t0) / (t1 - t0);
                let f_end = &values[i - 1] * (1.0 - w) + &values[i] * w;
                Ok(&cumulative[i - 1] + linear_piece(&self.a, t0, t - t0, &values[i - 1], &f_end)?)
            }
        }
    }
}

fn unit(n: usize, i: usize) -> Vector {
    let mut v = Vector::zeros(n);
    v[i] = 1.0;
    v
}

/// `int_{t0}^{t0+h} e^{-A tau} f(tau) d tau` for `f` linear from `f0` to `f1`.
fn linear_piece(a: &Mat, t0: f64, h: f64, f0: &Vector, f1: &Vector) -> Result<Vector> {
    let n = a.nrows();
    let slope = (f1 - f0) / h;
    // u' = A u + f0 z1 + slope z2, z1' = 0, z2' = z1, so u(h) = e^{Ah} int_0^h e^{-As} f(t0+s) ds.
    let mut big = Mat::zeros(n + 2, n + 2);
    big.view_mut((0, 0), (n, n)).copy_from(a);
    big.view_mut((0, n), (n, 1)).copy_from(f0);
    big.view_mut((0, n + 1), (n, 1)).copy_from(&slope);
    big[(n + 1, n)] = 1.0;
    let u = (mat_exp(&big, h)? * unit(n + 2, n)).rows(0, n).into_owned();
    Ok(mat_exp(a, -(t0 + h))? * u)
}

/// Generator state for `sum_k t^k e^{at}(c cos bt + s sin bt)`.
///
/// For each term, states `t^j/j! e^{at} cos(bt)` and (when `b > 0`) the sine
/// partner for `j = 0..=k` form a Jordan chain of rotation blocks.
fn trigpoly_generator(a: &Mat, terms: &[crate::homogenize::ForcingTerm]) -> IntegralKind {
    let n = a.nrows();
    let extra: usize = terms.iter().map(|t| (t.k as usize + 1) * if t.b > 0.0 { 2 } else { 1 }).sum();
    let m = n + extra;
    let mut big = Mat::zeros(m, m);
    big.view_mut((0, 0), (n, n)).copy_from(a);
    let mut z0 = Vector::zeros(m);
    let mut off = n;
    for t in terms {
        let width = if t.b > 0.0 { 2 } else { 1 };
        for j in 0..=t.k as usize {
            let c = off + j * width;
            big[(c, c)] = t.a;
            if width == 2 {
                big[(c + 1, c + 1)] = t.a;
                big[(c, c + 1)] = -t.b;
                big[(c + 1, c)] = t.b;
            }
            if j > 0 {
                let prev = c - width;
                big[(c, prev)] = 1.0;
                if width == 2 {
                    big[(c + 1, prev + 1)] = 1.0;
                }
            }
        }
        z0[off] = 1.0;
        let top = off + t.k as usize * width;
        let fact: f64 = (1..=t.k).map(f64::from).product();
        big.view_mut((0, top), (n, 1)).copy_from(&(&t.cos * fact));
        if width == 2 {
            big.view_mut((0, top + 1), (n, 1)).copy_from(&(&t.sin * fact));
        }
        off += (t.k as usize + 1) * width;
    }
    IntegralKind::Generated { big, z0 }
}

/// `int_0^t e^{-A tau} f(tau) d tau`.
pub fn forcing_integral(a: &Mat, f: &ForcingSpec, t: f64) -> Result<Vector> {
    ForcingIntegral::new(a, f)?.at(t)
}

/// Evaluates `e^{-At} P(t) e^{At}`, from the model's exact expansion when
/// it has one and by direct exponentials otherwise.
struct Conjugator<'a> {
    model: &'a EffectiveModel,
    system: &'a LinearSystem,
}

impl Conjugator<'_> {
    fn at(&self, t: f64) -> Result<Mat> {
        match self.model.conjugated(t) {
            Some(m) => Ok(m),
            None => Ok(mat_exp(&self.system.a, -t)? * self.system.p.eval(t) * mat_exp(&self.system.a, t)?),
        }
    }
}

/// `F(t) = e^{-At} P(t) e^{At} q(t)`, the cell-problem source.
pub fn cell_rhs(model: &EffectiveModel, system: &LinearSystem, t: f64) -> Result<Vector> {
    model.require_bounded()?;
    let q = forcing_integral(&system.a, &system.f, t)?;
    if q.iter().all(|&v| v == 0.0) {
        return Ok(q);
    }
    Ok(Conjugator { model, system }.at(t)? * q)
}

// 7-point Gauss / 15-point Kronrod nodes on [-1, 1] (nonnegative half).
const GK_X: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const GK_WK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const GK_WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// Kronrod estimate and `|Kronrod - Gauss|` of a vector integral on `[lo, hi]`.
fn gauss_kronrod<F>(g: &mut F, lo: f64, hi: f64) -> Result<(Vector, f64)>
where
    F: FnMut(f64) -> Result<Vector>,
{
    let c = 0.5 * (lo + hi);
    let r = 0.5 * (hi - lo);
    let center = g(c)?;
    let mut kron = &center * GK_WK[7];
    let mut gauss = &center * GK_WG[3];
    for i in 0..7 {
        let sum = g(c - r * GK_X[i])? + g(c + r * GK_X[i])?;
        kron.axpy(GK_WK[i], &sum, 1.0);
        if i % 2 == 1 {
            gauss.axpy(GK_WG[i / 2], &sum, 1.0);
        }
    }
    let err = (&kron - &gauss).norm() * r;
    Ok((kron * r, err))
}

/// Adaptive bisection of one panel until the local error meets `tol`.
fn adaptive_panel<F>(g: &mut F, lo: f64, hi: f64, tol: f64, depth: u32) -> Result<Vector>
where
    F: FnMut(f64) -> Result<Vector>,
{
    let (val, err) = gauss_kronrod(g, lo, hi)?;
    if err <= tol || depth == 0 || hi - lo <= 1e-12 * hi.abs().max(1.0) {
        return Ok(val);
    }
    let mid = 0.5 * (lo + hi);
    Ok(adaptive_panel(g, lo, mid, 0.5 * tol, depth - 1)? + adaptive_panel(g, mid, hi, 0.5 * tol, depth - 1)?)
}

/// Relative tolerance of the cell convolution quadrature.
const CELL_TOL: f64 = 1e-10;

/// Solves `Omega' = eps B Omega + eps F(t)`, `Omega(0) = omega0`, on `times`.
///
/// Without forcing this is `e^{eps B t} omega0`. Otherwise
/// `Omega(t) = e^{eps B t}(omega0 + int_0^t e^{-eps B tau} eps F(tau) d tau)`,
/// with the integral accumulated interval by interval using adaptive
/// Gauss-Kronrod panels no wider than half the fastest oscillation period.
pub fn solve_cell(model: &EffectiveModel, system: &LinearSystem, omega0: &Vector, times: &[f64]) -> Result<Trajectory> {
    let b = model.require_bounded()?;
    check_grid(times)?;
    let n = system.dim();
    if omega0.len() != n {
        return Err(Error::DimensionError(format!("omega0 has {} entries, system is {n}", omega0.len())));
    }
    let eb = b * system.epsilon;
    let qint = ForcingIntegral::new(&system.a, &system.f)?;
    let mut states = Vec::with_capacity(times.len());
    let meta = StepMeta { step: None, rel_tol: Some(CELL_TOL), steps_taken: 0 };
    if qint.is_zero() || system.epsilon == 0.0 {
        for &t in times {
            states.push(if t == 0.0 { omega0.clone() } else { mat_exp(&eb, t)? * omega0 });
        }
        return Ok(Trajectory { times: times.to_vec(), states, method: "cell-closed-form".into(), step_meta: meta });
    }

    let conj = Conjugator { model, system };
    let eps = system.epsilon;
    let mut calls = 0usize;
    let mut g = |tau: f64| -> Result<Vector> {
        calls += 1;
        let q = qint.at(tau)?;
        Ok(mat_exp(&eb, -tau)? * (conj.at(tau)? * q) * eps)
    };

    let eigs = system.a.complex_eigenvalues();
    let max_im = eigs.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    let fastest = (system.p.max_frequency() + 2.0 * max_im + forcing_frequency(&system.f)).max(1e-12);
    let max_panel = std::f64::consts::PI / fastest;
    let span = *times.last().unwrap_or(&0.0);

    // Coarse pass to fix an absolute scale for the tolerance.
    let mut edges = vec![0.0];
    for &t in times {
        let from = *edges.last().unwrap();
        if t > from {
            let pieces = ((t - from) / max_panel).ceil().max(1.0) as usize;
            for k in 1..=pieces {
                edges.push(if k == pieces { t } else { from + (t - from) * k as f64 / pieces as f64 });
            }
        }
    }
    let mut coarse = Vec::with_capacity(edges.len());
    let mut scale = omega0.norm();
    for w in edges.windows(2) {
        let (val, err) = gauss_kronrod(&mut g, w[0], w[1])?;
        scale += val.norm();
        coarse.push((val, err));
    }
    let scale = scale.max(f64::MIN_POSITIVE);

    let mut acc = omega0.clone();
    let mut panel = 0;
    for &t in times {
        while panel + 1 < edges.len() && edges[panel + 1] <= t {
            let (lo, hi) = (edges[panel], edges[panel + 1]);
            let tol = CELL_TOL * scale * (hi - lo) / span.max(f64::MIN_POSITIVE);
            let (val, err) = &coarse[panel];
            if *err <= tol {
                acc += val;
            } else {
                acc += adaptive_panel(&mut g, lo, hi, tol, 30)?;
            }
            panel += 1;
        }
        states.push(if t == 0.0 { acc.clone() } else { mat_exp(&eb, t)? * &acc });
    }
    let meta = StepMeta { steps_taken: calls, ..meta };
    Ok(Trajectory { times: times.to_vec(), states, method: "cell-quadrature".into(), step_meta: meta })
}

fn forcing_frequency(f: &ForcingSpec) -> f64 {
    match f {
        ForcingSpec::TrigPoly(terms) => terms.iter().map(|t| t.b).fold(0.0, f64::max),
        _ => 0.0,
    }
}

/// The scaled-frame pieces behind an effective solution: `Omega(t)` and `q(t)`.
#[derive(Debug, Clone)]
pub struct ScaledFrame {
    pub a: Mat,
    pub cell: Vec<Vector>,
    pub forcing: Vec<Vector>,
}

/// `x~(t) = e^{At} (Omega(t) + q(t))` on `times`, with `Omega(0) = x0`.
pub fn effective_solution(system: &LinearSystem, model: &EffectiveModel, times: &[f64]) -> Result<(Trajectory, ScaledFrame)> {
    let cell = solve_cell(model, system, &system.x0, times)?;
    let horizon = 1.0 / system.epsilon;
    if times.last().is_some_and(|&t| t > horizon) {
        warn!("grid extends past the validity horizon 1/eps = {horizon:.3e}");
    }
    let qint = ForcingIntegral::new(&system.a, &system.f)?;
    let mut states = Vec::with_capacity(times.len());
    let mut forcing = Vec::with_capacity(times.len());
    for (&t, omega) in times.iter().zip(&cell.states) {
        let q = qint.at(t)?;
        let x = if t == 0.0 { omega + &q } else { mat_exp(&system.a, t)? * (omega + &q) };
        states.push(x);
        forcing.push(q);
    }
    let traj = Trajectory {
        times: times.to_vec(),
        states,
        method: format!("effective-{:?}", model.method).to_lowercase(),
        step_meta: cell.step_meta,
    };
    Ok((traj, ScaledFrame { a: system.a.clone(), cell: cell.states, forcing }))
}

/// Folds a constant or periodic forcing into the matrices through an extra
/// state `z` with `z' = 0`, `z(0) = 1`.
///
/// Constant parts go into a new column of `A`; oscillating parts at
/// multiples of the base frequency go into a new column of `P` (divided by
/// `eps`, so `eps P` carries them unchanged).
pub fn augment_forcing(system: &LinearSystem) -> Result<LinearSystem> {
    let n = system.dim();
    let mut a = Mat::zeros(n + 1, n + 1);
    a.view_mut((0, 0), (n, n)).copy_from(&system.a);
    let mut p = FourierMatrix::new(system.p.omega(), n + 1)?;
    for m in system.p.modes() {
        p.add_mode(m.l, pad(&m.cos), pad(&m.sin))?;
    }
    let mut column = |c: &Vector, s: &Vector, b: f64| -> Result<()> {
        if b == 0.0 {
            let mut col = a.view_mut((0, n), (n, 1));
            col += c;
            return Ok(());
        }
        let omega = system.p.omega();
        let l = (b / omega).round();
        if l < 1.0 || (b - l * omega).abs() > 1e-9 * b {
            return Err(Error::UnsupportedForcing(format!(
                "frequency {b} is not a multiple of the base frequency {omega}"
            )));
        }
        if system.epsilon == 0.0 {
            return Err(Error::UnsupportedForcing("periodic forcing needs epsilon > 0 to enter P".into()));
        }
        let mut cm = Mat::zeros(n + 1, n + 1);
        let mut sm = Mat::zeros(n + 1, n + 1);
        cm.view_mut((0, n), (n, 1)).copy_from(&(c / system.epsilon));
        sm.view_mut((0, n), (n, 1)).copy_from(&(s / system.epsilon));
        p.add_mode(l as u32, cm, sm)
    };
    match &system.f {
        ForcingSpec::Zero => {}
        ForcingSpec::Constant(c) => column(c, &Vector::zeros(n), 0.0)?,
        ForcingSpec::TrigPoly(terms) => {
            for t in terms {
                if t.a != 0.0 || t.k != 0 {
                    return Err(Error::UnsupportedForcing(format!(
                        "term with rate {} and power {} is not periodic",
                        t.a, t.k
                    )));
                }
                column(&t.cos, &t.sin, t.b)?;
            }
        }
        ForcingSpec::Sampled { .. } => {
            return Err(Error::UnsupportedForcing("sampled forcing cannot be made autonomous".into()))
        }
    }
    let mut x0 = Vector::zeros(n + 1);
    x0.rows_mut(0, n).copy_from(&system.x0);
    x0[n] = 1.0;
    LinearSystem::new(a, p, system.epsilon, ForcingSpec::Zero, x0)
}

fn pad(m: &Mat) -> Mat {
    let n = m.nrows();
    let mut out = Mat::zeros(n + 1, n + 1);
    out.view_mut((0, 0), (n, n)).copy_from(m);
    out
}

/// First-order perturbative Floquet approximation.
///
/// `Phi_1(t) = e^{At} int_0^t e^{-A tau} P(tau) e^{A tau} d tau` comes from the
/// termwise antiderivative of the conjugation series; beyond one period the
/// one-period map is raised to the number of elapsed periods.
pub fn floquet_approx(system: &LinearSystem, times: &[f64]) -> Result<Trajectory> {
    if !system.f.is_zero() {
        return Err(Error::NonzeroForcing);
    }
    check_grid(times)?;
    let spec = spectral_decompose(&system.a, DEFAULT_CLUSTER_TOL)?;
    let series = conjugate_series(&spec, &system.p, &SeriesOptions::default())?;
    let eps = system.epsilon;
    let period = system.p.period();
    let one_period = |s: f64| -> Result<Mat> {
        let e = mat_exp(&system.a, s)?;
        let phi1 = &e * series.integrate_from_zero(s);
        Ok(e + phi1 * eps)
    };
    let mono = one_period(period)?;
    let mut power = Mat::identity(system.dim(), system.dim());
    let mut periods_done = 0u64;
    let mut states = Vec::with_capacity(times.len());
    for &t in times {
        let k = (t / period).floor() as u64;
        while periods_done < k {
            power = &mono * power;
            periods_done += 1;
        }
        let s = t - k as f64 * period;
        states.push(one_period(s)? * &power * &system.x0);
    }
    info!("floquet baseline used {periods_done} monodromy steps");
    Ok(Trajectory {
        times: times.to_vec(),
        states,
        method: "floquet-first-order".into(),
        step_meta: StepMeta::default(),
    })
}

/// Error of an approximation against a reference on the same grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorMetrics {
    pub max_plain: f64,
    pub rms_plain: f64,
    /// `E(t) = e^{-At}(x_ref(t) - x~(t))`.
    pub max_scaled: f64,
    pub rms_scaled: f64,
    /// `max ||Omega|| + max ||q||`.
    pub normalizer: f64,
    pub normalized_max_scaled: f64,
    pub normalized_rms_scaled: f64,
    /// Plain error over `max ||x_ref||`.
    pub normalized_max_plain: f64,
}

pub fn error_report(approx: &Trajectory, reference: &Trajectory, frame: &ScaledFrame) -> Result<ErrorMetrics> {
    if approx.times.len() != reference.times.len()
        || approx.times.iter().zip(&reference.times).any(|(x, y)| (x - y).abs() > 1e-12 * x.abs().max(1.0))
    {
        return Err(Error::GridMismatch(format!(
            "{} vs {} points or differing times",
            approx.times.len(),
            reference.times.len()
        )));
    }
    if frame.cell.len() != approx.times.len() || frame.forcing.len() != approx.times.len() {
        return Err(Error::GridMismatch("scaled frame does not match the grid".into()));
    }
    let m = approx.times.len().max(1) as f64;
    let (mut max_p, mut sq_p, mut max_s, mut sq_s, mut ref_max) = (0.0f64, 0.0, 0.0f64, 0.0, 0.0f64);
    for ((&t, x), r) in approx.times.iter().zip(&approx.states).zip(&reference.states) {
        let d = r - x;
        let plain = d.norm();
        let scaled = if t == 0.0 { plain } else { (mat_exp(&frame.a, -t)? * d).norm() };
        max_p = max_p.max(plain);
        sq_p += plain * plain;
        max_s = max_s.max(scaled);
        sq_s += scaled * scaled;
        ref_max = ref_max.max(r.norm());
    }
    let max_norm = |v: &[Vector]| v.iter().map(Vector::norm).fold(0.0, f64::max);
    let normalizer = max_norm(&frame.cell) + max_norm(&frame.forcing);
    let div = |x: f64, by: f64| if by > 0.0 { x / by } else { x };
    Ok(ErrorMetrics {
        max_plain: max_p,
        rms_plain: (sq_p / m).sqrt(),
        max_scaled: max_s,
        rms_scaled: (sq_s / m).sqrt(),
        normalizer,
        normalized_max_scaled: div(max_s, normalizer),
        normalized_rms_scaled: div((sq_s / m).sqrt(), normalizer),
        normalized_max_plain: div(max_p, ref_max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::growth::effective_matrix_algebraic;
    use approx::assert_relative_eq;

    fn scalar(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    fn mathieu(omega: f64, eps: f64, f: ForcingSpec, x0: [f64; 2]) -> LinearSystem {
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, -omega * omega, 0.0]);
        let c = Mat::from_row_slice(2, 2, &[0.0, 0.0, -omega * omega, 0.0]);
        let p = FourierMatrix::new(omega, 2).unwrap().with_mode(2, c, Mat::zeros(2, 2)).unwrap();
        LinearSystem::new(a, p, eps, f, Vector::from_row_slice(&x0)).unwrap()
    }

    fn model(sys: &LinearSystem) -> EffectiveModel {
        let spec = spectral_decompose(&sys.a, DEFAULT_CLUSTER_TOL).unwrap();
        effective_matrix_algebraic(&spec, &sys.p, &SeriesOptions::default()).unwrap()
    }

    /// Composite Simpson oracle for `int_0^t e^{-A tau} f(tau) d tau`.
    fn simpson(a: &Mat, f: &ForcingSpec, t: f64, n: usize) -> Vector {
        let h = t / n as f64;
        let mut acc = Vector::zeros(a.nrows());
        for i in 0..=n {
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            let tau = i as f64 * h;
            acc += mat_exp(a, -tau).unwrap() * f.eval(tau, a.nrows()).unwrap() * w;
        }
        acc * (h / 3.0)
    }

    #[test]
    fn forcing_integral_trivial_cases() {
        assert_eq!(forcing_integral(&scalar(2.0), &ForcingSpec::Zero, 4.0).unwrap(), Vector::zeros(1));
        let c = ForcingSpec::Constant(Vector::from_row_slice(&[2.0, -1.0]));
        let q = forcing_integral(&Mat::zeros(2, 2), &c, 3.0).unwrap();
        assert_relative_eq!(q, Vector::from_row_slice(&[6.0, -3.0]), epsilon = 1e-14);
        let one = ForcingSpec::Constant(Vector::from_element(1, 1.0));
        for t in [0.1, 1.0, 5.0] {
            let q = forcing_integral(&scalar(-1.0), &one, t).unwrap();
            assert_relative_eq!(q[0], t.exp() - 1.0, max_relative = 1e-13);
        }
    }

    #[test]
    fn forcing_integral_trigpoly_matches_quadrature() {
        let a = Mat::from_row_slice(2, 2, &[-0.2, 1.3, -1.3, -0.2]);
        let f = ForcingSpec::trigpoly(vec![
            ForcingTerm {
                a: -0.1,
                b: 2.0,
                k: 1,
                cos: Vector::from_row_slice(&[1.0, 0.5]),
                sin: Vector::from_row_slice(&[0.0, -1.0]),
            },
            // resonant with A's rotation
            ForcingTerm {
                a: 0.0,
                b: 1.3,
                k: 0,
                cos: Vector::from_row_slice(&[0.3, 0.0]),
                sin: Vector::from_row_slice(&[0.0, 0.7]),
            },
            ForcingTerm { a: 0.0, b: 0.0, k: 2, cos: Vector::from_row_slice(&[0.1, 0.1]), sin: Vector::zeros(2) },
        ])
        .unwrap();
        let t = 4.5;
        let q = forcing_integral(&a, &f, t).unwrap();
        assert_relative_eq!(q, simpson(&a, &f, t, 4000), max_relative = 1e-10);
    }

    #[test]
    fn sampled_forcing_linear_interpolation_is_exact() {
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let times = vec![0.0, 0.5, 1.7, 3.0];
        let values: Vec<Vector> = times.iter().map(|&t| Vector::from_row_slice(&[1.0 + t, -2.0 * t])).collect();
        let f = ForcingSpec::sampled(times, values).unwrap();
        // f is exactly linear, so compare with the trigpoly form of the same function.
        let g = ForcingSpec::trigpoly(vec![
            ForcingTerm { a: 0.0, b: 0.0, k: 0, cos: Vector::from_row_slice(&[1.0, 0.0]), sin: Vector::zeros(2) },
            ForcingTerm { a: 0.0, b: 0.0, k: 1, cos: Vector::from_row_slice(&[1.0, -2.0]), sin: Vector::zeros(2) },
        ])
        .unwrap();
        for t in [0.3, 0.5, 2.2, 3.0] {
            assert_relative_eq!(
                forcing_integral(&a, &f, t).unwrap(),
                forcing_integral(&a, &g, t).unwrap(),
                epsilon = 1e-13
            );
        }
        assert!(matches!(forcing_integral(&a, &f, 3.5), Err(Error::GridTooShort { .. })));
    }

    #[test]
    fn cell_rhs_vanishes_without_forcing_and_at_zero() {
        let sys = mathieu(1.0, 0.01, ForcingSpec::Zero, [1.0, 0.0]);
        let m = model(&sys);
        assert_eq!(cell_rhs(&m, &sys, 3.0).unwrap(), Vector::zeros(2));
        let sys = mathieu(1.0, 0.01, ForcingSpec::Constant(Vector::from_row_slice(&[0.0, 1.0])), [0.0, 0.0]);
        assert_eq!(cell_rhs(&m, &sys, 0.0).unwrap(), Vector::zeros(2));
        assert!(cell_rhs(&m, &sys, 1.0).unwrap().norm() > 0.0);
    }

    #[test]
    fn homogeneous_cell_is_matrix_exponential() {
        let sys = mathieu(2.0, 0.05, ForcingSpec::Zero, [1.0, 0.0]);
        let m = model(&sys);
        let times = uniform_grid(10.0, 7);
        let cell = solve_cell(&m, &sys, &sys.x0, &times).unwrap();
        let eb = m.b.as_ref().unwrap() * 0.05;
        for (t, s) in times.iter().zip(&cell.states) {
            assert_relative_eq!(*s, mat_exp(&eb, *t).unwrap() * &sys.x0, epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_b_source_integrates_directly() {
        // A = 0 and P = C cos t give B = 0 and F = C g tau cos tau.
        let g = Vector::from_row_slice(&[1.0, -2.0]);
        let c = Mat::from_row_slice(2, 2, &[0.0, 1.0, 3.0, 0.0]);
        let p = FourierMatrix::new(1.0, 2).unwrap().with_mode(1, c.clone(), Mat::zeros(2, 2)).unwrap();
        let x0 = Vector::from_row_slice(&[0.5, 0.5]);
        let sys = LinearSystem::new(Mat::zeros(2, 2), p, 0.1, ForcingSpec::Constant(g.clone()), x0.clone()).unwrap();
        let m = model(&sys);
        assert_eq!(m.b.as_ref().unwrap(), &Mat::zeros(2, 2));
        let times = [0.0, 1.0, 7.5];
        let cell = solve_cell(&m, &sys, &x0, &times).unwrap();
        for (t, s) in times.iter().zip(&cell.states) {
            let want = &x0 + &c * &g * (0.1 * (t * t.sin() + t.cos() - 1.0));
            assert_relative_eq!(*s, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn effective_solution_without_perturbation_is_free_flow() {
        let a = Mat::from_row_slice(2, 2, &[-0.1, 2.0, -2.0, -0.1]);
        let sys = LinearSystem::new(
            a.clone(),
            FourierMatrix::new(1.0, 2).unwrap(),
            0.01,
            ForcingSpec::Zero,
            Vector::from_row_slice(&[1.0, 2.0]),
        )
        .unwrap();
        let m = model(&sys);
        let times = uniform_grid(5.0, 10);
        let (traj, _) = effective_solution(&sys, &m, &times).unwrap();
        assert_eq!(traj.states[0], sys.x0);
        for (t, x) in times.iter().zip(&traj.states) {
            assert_relative_eq!(*x, mat_exp(&a, *t).unwrap() * &sys.x0, epsilon = 1e-13);
        }
    }

    #[test]
    fn mathieu_effective_solution_closed_form() {
        let (w, eps) = (1.0, 0.01);
        let sys = mathieu(w, eps, ForcingSpec::Zero, [1.0, 0.0]);
        let m = model(&sys);
        let times = uniform_grid(50.0, 20);
        let (traj, _) = effective_solution(&sys, &m, &times).unwrap();
        for (t, x) in times.iter().zip(&traj.states) {
            // Omega = (cosh(s), -w sinh(s)) with s = eps w t / 4, then rotated by e^{At}
            let s = eps * w * t / 4.0;
            let (om0, om1) = (s.cosh(), -w * s.sinh());
            let (sn, cs) = (w * t).sin_cos();
            let want = Vector::from_row_slice(&[cs * om0 + sn / w * om1, -w * sn * om0 + cs * om1]);
            assert_relative_eq!(*x, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn forced_cell_matches_direct_quadrature() {
        let sys = mathieu(1.0, 0.02, ForcingSpec::Constant(Vector::from_row_slice(&[0.0, 1.0])), [0.0, 0.0]);
        let m = model(&sys);
        let times = vec![0.0, 3.0, 10.0, 25.0];
        let cell = solve_cell(&m, &sys, &sys.x0, &times).unwrap();
        // Simpson on the defining integral, fine grid.
        let eb = m.b.as_ref().unwrap() * sys.epsilon;
        for (t, s) in times.iter().zip(&cell.states) {
            let n = 20_000;
            let h = t / n as f64;
            let mut acc = Vector::zeros(2);
            if *t > 0.0 {
                for i in 0..=n {
                    let tau = i as f64 * h;
                    let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                    let f = cell_rhs(&m, &sys, tau).unwrap();
                    acc += mat_exp(&eb, t - tau).unwrap() * f * (w * sys.epsilon);
                }
                acc *= h / 3.0;
            }
            assert_relative_eq!(*s, acc, epsilon = 1e-9, max_relative = 1e-8);
        }
    }

    #[test]
    fn augmented_scalar_system() {
        let sys = LinearSystem::new(
            scalar(-1.0),
            FourierMatrix::new(1.0, 1).unwrap(),
            0.1,
            ForcingSpec::Constant(Vector::from_element(1, 1.0)),
            Vector::from_element(1, 0.5),
        )
        .unwrap();
        let aug = augment_forcing(&sys).unwrap();
        assert_eq!(aug.a, Mat::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, 0.0]));
        assert_eq!(aug.x0, Vector::from_row_slice(&[0.5, 1.0]));
        assert!(matches!(aug.f, ForcingSpec::Zero));
        let sampled =
            ForcingSpec::sampled(vec![0.0, 1.0], vec![Vector::from_element(1, 0.0), Vector::from_element(1, 1.0)])
                .unwrap();
        let bad = LinearSystem { f: sampled, ..sys };
        assert!(matches!(augment_forcing(&bad), Err(Error::UnsupportedForcing(_))));
    }

    #[test]
    fn augmented_periodic_forcing_enters_p() {
        let f = ForcingSpec::trigpoly(vec![ForcingTerm {
            a: 0.0,
            b: 2.0,
            k: 0,
            cos: Vector::from_row_slice(&[0.0, 3.0]),
            sin: Vector::from_row_slice(&[1.0, 0.0]),
        }])
        .unwrap();
        let sys = mathieu(1.0, 0.1, f, [1.0, 0.0]);
        let aug = augment_forcing(&sys).unwrap();
        let x = Vector::from_row_slice(&[0.3, -0.2, 1.0]);
        for t in [0.0, 0.4, 2.0] {
            let full = aug.rhs(t, &x).unwrap();
            let orig = sys.rhs(t, &x.rows(0, 2).into_owned()).unwrap();
            assert_relative_eq!(full.rows(0, 2).into_owned(), orig, epsilon = 1e-13);
            assert_eq!(full[2], 0.0);
        }
        let off = ForcingSpec::trigpoly(vec![ForcingTerm {
            a: 0.0,
            b: 1.5,
            k: 0,
            cos: Vector::from_row_slice(&[0.0, 1.0]),
            sin: Vector::zeros(2),
        }])
        .unwrap();
        let sys = mathieu(1.0, 0.1, off, [1.0, 0.0]);
        assert!(matches!(augment_forcing(&sys), Err(Error::UnsupportedForcing(_))));
    }

    #[test]
    fn floquet_without_perturbation_and_first_period() {
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, -4.0, 0.0]);
        let sys = LinearSystem::new(
            a.clone(),
            FourierMatrix::new(1.0, 2).unwrap(),
            0.1,
            ForcingSpec::Zero,
            Vector::from_row_slice(&[1.0, 0.0]),
        )
        .unwrap();
        let times = uniform_grid(20.0, 13);
        let tr = floquet_approx(&sys, &times).unwrap();
        for (t, x) in times.iter().zip(&tr.states) {
            assert_relative_eq!(*x, mat_exp(&a, *t).unwrap() * &sys.x0, epsilon = 1e-11);
        }
        let sys = mathieu(1.0, 0.1, ForcingSpec::Zero, [1.0, 0.5]);
        let t = 2.0;
        let tr = floquet_approx(&sys, &[t]).unwrap();
        // one-interval expansion by Simpson quadrature of the conjugation
        let n = 4000;
        let h = t / n as f64;
        let mut integral = Mat::zeros(2, 2);
        for i in 0..=n {
            let tau = i as f64 * h;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            integral += mat_exp(&sys.a, -tau).unwrap() * sys.p.eval(tau) * mat_exp(&sys.a, tau).unwrap() * w;
        }
        integral *= h / 3.0;
        let e = mat_exp(&sys.a, t).unwrap();
        let want = (&e + &e * integral * 0.1) * &sys.x0;
        assert_relative_eq!(tr.states[0], want, epsilon = 1e-11);
        let forced = mathieu(1.0, 0.1, ForcingSpec::Constant(Vector::from_row_slice(&[0.0, 1.0])), [1.0, 0.0]);
        assert!(matches!(floquet_approx(&forced, &[1.0]), Err(Error::NonzeroForcing)));
    }

    #[test]
    fn error_report_of_identical_trajectories_is_zero() {
        let sys = mathieu(1.0, 0.01, ForcingSpec::Zero, [1.0, 0.0]);
        let m = model(&sys);
        let times = uniform_grid(10.0, 10);
        let (traj, frame) = effective_solution(&sys, &m, &times).unwrap();
        let r = error_report(&traj, &traj, &frame).unwrap();
        assert_eq!(r.max_plain, 0.0);
        assert_eq!(r.normalized_max_scaled, 0.0);
        let short = Trajectory { times: times[..3].to_vec(), states: traj.states[..3].to_vec(), ..traj.clone() };
        assert!(matches!(error_report(&short, &traj, &frame), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn system_json_round_trip() {
        let sys = mathieu(1.0, 0.01, ForcingSpec::Constant(Vector::from_row_slice(&[0.0, 1.0])), [1.0, 0.0]);
        let txt = serde_json::to_string(&sys).unwrap();
        let back: LinearSystem = serde_json::from_str(&txt).unwrap();
        assert_eq!(back, sys);
        let bad = r#"{"a": [[0.0]], "p": {"omega": 1.0, "dim": 1, "modes": []}, "epsilon": 0.1, "x0": [1.0, 2.0]}"#;
        assert!(serde_json::from_str::<LinearSystem>(bad).is_err());
    }

    #[test]
    fn trajectory_csv_format() {
        let tr = Trajectory {
            times: vec![0.0, 0.5],
            states: vec![Vector::from_row_slice(&[1.0, 0.0]), Vector::from_row_slice(&[0.1, -2.0])],
            method: "test".into(),
            step_meta: StepMeta::default(),
        };
        let csv = tr.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,x1,x2");
        assert_eq!(lines[1], "0,1.0000000000000000e0,0");
        assert_eq!(lines.len(), 3);
    }
}
