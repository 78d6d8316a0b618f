//! A bank of identical RLC circuits sharing one periodically modulated
//! capacitor: system builders, the coupling transform, the effective block
//! and the growth threshold.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::algebra::{Mat, Vector};
use crate::error::{Error, Result};
use crate::homogenize::{uniform_grid, ForcingSpec, LinearSystem};
use crate::integrate::{integrate_reference, log_linear_rate};
use crate::series::FourierMatrix;

/// `n` identical circuits (inductance `l`, capacitance `c`, resistance `r`)
/// coupled through a shared capacitor `c_bar (1 - eta cos(2 omega t))`.
///
/// Units follow the normalized formulas: `epsilon = eta / (l c_bar)` and
/// `gamma = r / l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitBank {
    pub n: usize,
    pub l: f64,
    pub c: f64,
    pub c_bar: f64,
    pub r: f64,
    pub eta: f64,
    /// Drive frequency; the resonant one when absent.
    #[serde(default)]
    pub omega: Option<f64>,
}

impl CircuitBank {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.l, self.c, self.c_bar].iter().all(|v| *v > 0.0 && v.is_finite());
        if self.n == 0 || !positive || !(self.r >= 0.0) || !(self.eta >= 0.0) || !self.r.is_finite() {
            return Err(Error::InvalidInput(format!("invalid circuit bank {self:?}")));
        }
        if self.omega.is_some_and(|w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidInput("omega must be positive".into()));
        }
        if self.eta >= 0.1 {
            warn!("eta = {} is not small; first-order modulation model is crude", self.eta);
        }
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        self.r / self.l
    }

    pub fn epsilon(&self) -> f64 {
        self.eta / (self.l * self.c_bar)
    }

    /// The given drive frequency, or the resonant one.
    pub fn drive_frequency(&self) -> Result<f64> {
        match self.omega {
            Some(w) => Ok(w),
            None => resonant_frequency(self),
        }
    }
}

/// `sqrt(1/(L C) + n/(L Cbar) - R^2/(4 L^2))`.
pub fn resonant_frequency(bank: &CircuitBank) -> Result<f64> {
    let radicand = 1.0 / (bank.l * bank.c) + bank.n as f64 / (bank.l * bank.c_bar) - bank.gamma().powi(2) / 4.0;
    if radicand <= 0.0 {
        return Err(Error::OverdampedBank(radicand));
    }
    Ok(radicand.sqrt())
}

/// Charge-form model with state `[I_1, I_1', ..., I_n, I_n']`.
///
/// The initial state is `U e_1` (all currents 1, derivatives 0), which
/// excites only the collective mode.
pub fn build_bank(bank: &CircuitBank) -> Result<LinearSystem> {
    bank.validate()?;
    let n = bank.n;
    let omega = bank.drive_frequency()?;
    let shared = 1.0 / (bank.l * bank.c_bar);
    let mut a = Mat::zeros(2 * n, 2 * n);
    let mut q = Mat::zeros(2 * n, 2 * n);
    for i in 0..n {
        a[(2 * i, 2 * i + 1)] = 1.0;
        a[(2 * i + 1, 2 * i)] = -1.0 / (bank.l * bank.c) - shared;
        a[(2 * i + 1, 2 * i + 1)] = -bank.gamma();
        for j in 0..n {
            if i != j {
                a[(2 * i + 1, 2 * j)] = -shared;
            }
            q[(2 * i + 1, 2 * j)] = 1.0;
        }
    }
    let p = FourierMatrix::new(omega, 2 * n)?.with_mode(2, q, Mat::zeros(2 * n, 2 * n))?;
    let (u, _) = coupling_transform(n);
    let x0 = u.column(0).into_owned();
    LinearSystem::new(a, p, bank.epsilon(), ForcingSpec::Zero, x0)
}

/// Block transform separating the collective mode (first block) from the
/// `n - 1` difference modes.
pub fn coupling_transform(n: usize) -> (Mat, Mat) {
    let mut u = Mat::zeros(2 * n, 2 * n);
    let mut u_inv = Mat::zeros(2 * n, 2 * n);
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        for j in 0..n {
            let uij = if i == 0 || j == 0 || i != j {
                1.0
            } else {
                -(n as f64 - 1.0)
            };
            let vij = if i == 0 || j == 0 {
                inv_n
            } else if i == j {
                -inv_n
            } else {
                0.0
            };
            for d in 0..2 {
                u[(2 * i + d, 2 * j + d)] = uij;
                u_inv[(2 * i + d, 2 * j + d)] = vij;
            }
        }
    }
    (u, u_inv)
}

/// Closed-form effective block of the collective mode at resonance.
pub fn effective_delta(bank: &CircuitBank) -> Result<Mat> {
    bank.validate()?;
    let resonant = resonant_frequency(bank)?;
    let omega = bank.omega.unwrap_or(resonant);
    if (omega - resonant).abs() > 1e-9 * resonant {
        return Err(Error::NotAtResonance { given: omega, resonant });
    }
    let g = bank.gamma();
    let w2 = omega * omega;
    Ok(Mat::from_row_slice(
        2,
        2,
        &[g / (8.0 * w2), 1.0 / (4.0 * w2), -(g * g - 4.0 * w2) / (16.0 * w2), -g / (8.0 * w2)],
    ))
}

/// `n U diag(Delta, 0, ..., 0) U^{-1}`.
pub fn predicted_effective_matrix(bank: &CircuitBank) -> Result<Mat> {
    let delta = effective_delta(bank)?;
    let n = bank.n;
    let (u, u_inv) = coupling_transform(n);
    let mut d = Mat::zeros(2 * n, 2 * n);
    d.view_mut((0, 0), (2, 2)).copy_from(&delta);
    Ok(u * d * u_inv * n as f64)
}

/// Growth verdict and homogenized exponent of the collective mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Threshold {
    pub grows: bool,
    /// `eps n / (4 omega) - gamma / 2`.
    pub margin: f64,
}

/// `grows` iff `eps n / omega > 2 gamma`.
pub fn super_resonance_threshold(bank: &CircuitBank) -> Result<Threshold> {
    bank.validate()?;
    let omega = bank.drive_frequency()?;
    let eps = bank.epsilon();
    let n = bank.n as f64;
    let g = bank.gamma();
    Ok(Threshold { grows: eps * n / omega > 2.0 * g, margin: eps * n / (4.0 * omega) - g / 2.0 })
}

/// Outcome of a brute-force growth-rate fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthCheck {
    pub fitted_rate: f64,
    pub predicted_rate: f64,
    pub grows: bool,
    /// Sign of the fitted rate agrees with the threshold verdict.
    pub consistent: bool,
    pub t_end: f64,
}

/// Integrates the charge-form bank from its default state and fits the
/// growth rate of `log ||x||` over the second half of
/// `[0, horizon_factor / (eps n / (4 omega) + gamma / 2)]`.
pub fn verify_growth(bank: &CircuitBank, horizon_factor: f64) -> Result<GrowthCheck> {
    let sys = build_bank(bank)?;
    verify_growth_from(bank, horizon_factor, &sys.x0)
}

/// [`verify_growth`] from a caller-chosen initial state.
pub fn verify_growth_from(bank: &CircuitBank, horizon_factor: f64, x0: &Vector) -> Result<GrowthCheck> {
    let mut sys = build_bank(bank)?;
    if x0.len() != sys.dim() {
        return Err(Error::DimensionError(format!("x0 has {} entries, bank has {}", x0.len(), sys.dim())));
    }
    sys.x0 = x0.clone();
    let th = super_resonance_threshold(bank)?;
    let omega = bank.drive_frequency()?;
    let scale = bank.epsilon() * bank.n as f64 / (4.0 * omega) + bank.gamma() / 2.0;
    let fitted_rate = fit_rate(&sys, horizon_factor, scale, omega)?;
    let predicted_rate = if bank.eta == 0.0 { -bank.gamma() / 2.0 } else { th.margin };
    Ok(GrowthCheck {
        fitted_rate,
        predicted_rate,
        grows: th.grows,
        consistent: (fitted_rate > 0.0) == th.grows,
        t_end: horizon_factor / scale,
    })
}

/// Least-squares rate of `log ||x(t)||` over the second half of the horizon.
fn fit_rate(sys: &LinearSystem, horizon_factor: f64, rate_scale: f64, omega: f64) -> Result<f64> {
    if !(horizon_factor > 0.0 && rate_scale > 0.0) {
        return Err(Error::InvalidInput("growth horizon needs a positive rate scale".into()));
    }
    let t_end = horizon_factor / rate_scale;
    let periods = t_end * omega / (2.0 * std::f64::consts::PI);
    let points = ((periods * 16.0).ceil() as usize).clamp(2000, 400_000);
    let times = uniform_grid(t_end, points);
    let tr = integrate_reference(sys, &times, 1e-9)?;
    let half = times.len() / 2;
    let norms: Vec<f64> = tr.states[half..].iter().map(Vector::norm).collect();
    log_linear_rate(&times[half..], &norms).ok_or_else(|| Error::InvalidInput("trajectory decayed to zero".into()))
}

/// Model using `d/dt (C(t) V_1) = sum I_i` for the shared capacitor, with
/// state `[V_1, V_{2,1}, I_1, ..., V_{2,n}, I_n]` and `epsilon = eta`.
///
/// Returns the system together with a transform `U` (and `U^{-1}`) that
/// block-diagonalizes `A` into a 1x1 block, the 2x2 collective block and
/// `n - 1` copies of the single-circuit block `E`. The free scalar in `U`
/// is fixed to 1. The initial state is the first collective coordinate.
pub fn build_bank_constitutive(bank: &CircuitBank) -> Result<(LinearSystem, Mat, Mat)> {
    bank.validate()?;
    let n = bank.n;
    let dim = 2 * n + 1;
    let omega = bank.drive_frequency()?;
    let (l, c, cb) = (bank.l, bank.c, bank.c_bar);
    let v2 = |i: usize| 1 + 2 * i;
    let cur = |i: usize| 2 + 2 * i;

    let mut a = Mat::zeros(dim, dim);
    let mut pc = Mat::zeros(dim, dim);
    let mut ps = Mat::zeros(dim, dim);
    ps[(0, 0)] = -2.0 * omega;
    for i in 0..n {
        a[(0, cur(i))] = 1.0 / cb;
        a[(v2(i), cur(i))] = 1.0 / c;
        a[(cur(i), 0)] = -1.0 / l;
        a[(cur(i), v2(i))] = -1.0 / l;
        a[(cur(i), cur(i))] = -bank.gamma();
        pc[(0, cur(i))] = 1.0 / cb;
    }
    let p = FourierMatrix::new(omega, dim)?.with_mode(2, pc, ps)?;

    let b2 = a[(0, 2)];
    let d2 = a[(2, 0)];
    let (e12, e21) = (a[(1, 2)], a[(2, 1)]);
    let nf = n as f64;
    let zeta = nf * b2 * d2 + e12 * e21;
    if zeta == 0.0 || !zeta.is_finite() {
        return Err(Error::SingularCouplingData);
    }
    let lambda = 1.0;

    let mut u = Mat::zeros(dim, dim);
    let mut u_inv = Mat::zeros(dim, dim);
    u[(0, 0)] = -e21 / d2 * lambda;
    u[(0, 1)] = b2 / e12 * nf;
    u_inv[(0, 0)] = -d2 * e12 / (zeta * lambda);
    u_inv[(1, 0)] = d2 * e12 / zeta;
    for i in 0..n {
        // collective columns / rows
        u[(v2(i), 0)] = lambda;
        u[(v2(i), 1)] = 1.0;
        u[(cur(i), 2)] = 1.0;
        u_inv[(0, v2(i))] = b2 * d2 / (zeta * lambda);
        u_inv[(1, v2(i))] = e12 * e21 / (zeta * nf);
        u_inv[(2, cur(i))] = 1.0 / nf;
        // difference modes pair circuit k >= 1 with block k
        for k in 1..n {
            let sign_u = if i == 0 {
                -1.0
            } else if i == k {
                1.0
            } else {
                0.0
            };
            let val_inv = if i == k { 1.0 - 1.0 / nf } else { -1.0 / nf };
            for d in 0..2 {
                u[(v2(i) + d, v2(k) + d)] = sign_u;
                u_inv[(v2(k) + d, v2(i) + d)] = val_inv;
            }
        }
    }
    let x0 = u.column(1).into_owned();
    let sys = LinearSystem::new(a, p, bank.eta, ForcingSpec::Zero, x0)?;
    Ok((sys, u, u_inv))
}

/// Fitted growth rate of the constitutive model from its default state.
pub fn verify_growth_constitutive(bank: &CircuitBank, horizon_factor: f64) -> Result<f64> {
    let (sys, _, _) = build_bank_constitutive(bank)?;
    let omega = bank.drive_frequency()?;
    let scale = bank.epsilon() * bank.n as f64 / (4.0 * omega) + bank.gamma() / 2.0;
    fit_rate(&sys, horizon_factor, scale, omega)
}

/// Frobenius mass of `m` outside the diagonal blocks of the given sizes.
pub fn off_block_mass(m: &Mat, sizes: &[usize]) -> f64 {
    let mut owner = Vec::with_capacity(m.nrows());
    for (b, &s) in sizes.iter().enumerate() {
        owner.extend(std::iter::repeat_n(b, s));
    }
    let mut acc = 0.0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if owner.get(i) != owner.get(j) {
                acc += m[(i, j)] * m[(i, j)];
            }
        }
    }
    acc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{spectral_decompose, DEFAULT_CLUSTER_TOL};
    use approx::assert_relative_eq;

    fn bank(n: usize, r: f64, eta: f64) -> CircuitBank {
        CircuitBank { n, l: 1.0, c: 1.0, c_bar: 1.0, r, eta, omega: None }
    }

    #[test]
    fn resonant_frequency_examples() {
        assert_relative_eq!(resonant_frequency(&bank(3, 0.0, 0.01)).unwrap(), 2.0);
        assert_relative_eq!(resonant_frequency(&bank(1, 2.0, 0.01)).unwrap(), 1.0);
        assert!(matches!(resonant_frequency(&bank(1, 10.0, 0.01)), Err(Error::OverdampedBank(_))));
    }

    #[test]
    fn single_circuit_has_no_coupling() {
        let b = bank(1, 0.3, 0.01);
        let sys = build_bank(&b).unwrap();
        assert_eq!(sys.a, Mat::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.3]));
    }

    #[test]
    fn two_circuit_frequencies() {
        let sys = build_bank(&bank(2, 0.0, 0.01)).unwrap();
        let spec = spectral_decompose(&sys.a, DEFAULT_CLUSTER_TOL).unwrap();
        let mut mus: Vec<f64> = spec.blocks.iter().map(|b| b.mu).collect();
        mus.sort_by(f64::total_cmp);
        assert_relative_eq!(mus[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(mus[1], 3f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn transform_is_inverse_and_decouples() {
        for n in [1, 2, 3, 5] {
            let (u, u_inv) = coupling_transform(n);
            assert_relative_eq!(&u * &u_inv, Mat::identity(2 * n, 2 * n), epsilon = 1e-12);
            let b = bank(n, 0.2, 0.01);
            let sys = build_bank(&b).unwrap();
            let ad = &u_inv * &sys.a * &u;
            assert!(off_block_mass(&ad, &vec![2; n]) < 1e-12);
            let pd = &u_inv * &sys.p.modes()[0].cos * &u;
            let mut want = Mat::zeros(2 * n, 2 * n);
            want[(1, 0)] = n as f64;
            assert_relative_eq!(pd, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn delta_closed_form() {
        // gamma = 0, omega = 2: L = C = Cbar = 1, n = 3
        let d = effective_delta(&bank(3, 0.0, 0.01)).unwrap();
        assert_relative_eq!(d, Mat::from_row_slice(2, 2, &[0.0, 1.0 / 16.0, 0.25, 0.0]), epsilon = 1e-15);
        let off = CircuitBank { omega: Some(2.5), ..bank(3, 0.0, 0.01) };
        assert!(matches!(effective_delta(&off), Err(Error::NotAtResonance { .. })));
    }

    #[test]
    fn threshold_examples() {
        let t = super_resonance_threshold(&bank(3, 0.0, 0.01)).unwrap();
        assert!(t.grows);
        let edge = CircuitBank { n: 2, l: 1.0, c: 1.0, c_bar: 1.0, r: 0.5, eta: 0.5, omega: Some(1.0) };
        let t = super_resonance_threshold(&edge).unwrap();
        assert!(!t.grows);
        assert_eq!(t.margin, 0.0);
        let big = CircuitBank { n: 1000, l: 1.0, c: 1.0, c_bar: 1.0, r: 0.4, eta: 1e-3, omega: Some(1.0) };
        let t = super_resonance_threshold(&big).unwrap();
        assert!(t.grows);
        assert_relative_eq!(t.margin, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn undriven_bank_decays_at_half_gamma() {
        let b = bank(2, 0.2, 0.0);
        let check = verify_growth(&b, 6.0).unwrap();
        assert!((check.fitted_rate + 0.1).abs() < 0.2 * 0.1, "{check:?}");
        assert!(check.consistent);
    }

    #[test]
    fn constitutive_transform() {
        for n in [2, 3, 5] {
            let b = CircuitBank { n, l: 1.3, c: 0.7, c_bar: 2.0, r: 0.1, eta: 0.01, omega: None };
            let (sys, u, u_inv) = build_bank_constitutive(&b).unwrap();
            assert_relative_eq!(&u * &u_inv, Mat::identity(2 * n + 1, 2 * n + 1), epsilon = 1e-12);
            let ad = &u_inv * &sys.a * &u;
            let mut sizes = vec![1, 2];
            sizes.extend(std::iter::repeat_n(2, n - 1));
            assert!(off_block_mass(&ad, &sizes) < 1e-10);
            let lead = ad.view((0, 0), (3, 3)).clone_owned();
            let want = Mat::from_row_slice(
                3,
                3,
                &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0 / b.c, 0.0, -(b.c_bar + n as f64 * b.c) / (b.c_bar * b.l), -b.gamma()],
            );
            assert_relative_eq!(lead, want, epsilon = 1e-12);
            // the collective block rotates at the resonant frequency
            let e = lead.view((1, 1), (2, 2)).clone_owned().complex_eigenvalues();
            assert_relative_eq!(e[0].im.abs(), resonant_frequency(&b).unwrap(), epsilon = 1e-12);
            for m in sys.p.modes() {
                for coef in [&m.cos, &m.sin] {
                    let pd = &u_inv * coef * &u;
                    let lead_sq = pd.view((0, 0), (3, 3)).norm_squared();
                    assert!((pd.norm_squared() - lead_sq).abs() < 1e-20);
                }
            }
        }
    }
}
