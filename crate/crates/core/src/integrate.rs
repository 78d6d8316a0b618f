//! Brute-force integrators used as the reference for every approximation.

use crate::algebra::Vector;
use crate::error::{Error, Result};
use crate::homogenize::{check_grid, LinearSystem, StepMeta, Trajectory};

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Fifth-order weights are the last row of A; these are fifth minus fourth order.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Adaptive Dormand-Prince 5(4) solution of the full system on `times`.
///
/// The step is controlled on a mixed error scale
/// `rel_tol * max(|y_i|, |y_new_i|, max_so_far ||y||_inf)`, and steps are
/// shortened to land exactly on every requested time, so no interpolation
/// enters the output.
pub fn integrate_reference(system: &LinearSystem, times: &[f64], rel_tol: f64) -> Result<Trajectory> {
    check_grid(times)?;
    if !(1e-13..=1e-3).contains(&rel_tol) {
        return Err(Error::InvalidInput(format!("rel_tol must lie in [1e-13, 1e-3], got {rel_tol}")));
    }
    let t_end = *times.last().unwrap();
    let n = system.dim();
    let mut t = 0.0;
    let mut y = system.x0.clone();
    let mut k: Vec<Vector> = vec![Vector::zeros(n); 7];
    k[0] = system.rhs(t, &y)?;
    let mut y_scale = y.amax();

    let rate = system.a.norm() + system.epsilon * system.p.norm() + system.p.max_frequency();
    let mut h = if rate > 0.0 { 0.01 / rate } else { t_end.max(1.0) * 1e-2 };
    let h_min = 1e-14 * t_end.max(f64::MIN_POSITIVE);
    let mut steps = 0usize;
    let mut states = Vec::with_capacity(times.len());

    for &target in times {
        while t < target {
            let remaining = target - t;
            let landing = h >= remaining * (1.0 - 1e-12);
            let step = if landing { remaining } else { h };
            if step < h_min {
                return Err(Error::StepUnderflow { time: t, step });
            }
            for s in 1..7 {
                let mut ys = y.clone();
                for (j, kj) in k.iter().enumerate().take(s) {
                    if A[s][j] != 0.0 {
                        ys.axpy(step * A[s][j], kj, 1.0);
                    }
                }
                k[s] = system.rhs(t + C[s] * step, &ys)?;
            }
            let mut y_new = y.clone();
            for (j, kj) in k.iter().enumerate().take(6) {
                if A[6][j] != 0.0 {
                    y_new.axpy(step * A[6][j], kj, 1.0);
                }
            }
            let mut err: f64 = 0.0;
            for i in 0..n {
                let mut e = 0.0;
                for (s, ks) in k.iter().enumerate() {
                    e += E[s] * ks[i];
                }
                let sc = rel_tol * y[i].abs().max(y_new[i].abs()).max(y_scale).max(f64::MIN_POSITIVE);
                err = err.max((step * e).abs() / sc);
            }
            if !err.is_finite() {
                h = step * 0.2;
                continue;
            }
            if err <= 1.0 {
                t = if landing { target } else { t + step };
                y = y_new;
                y_scale = y_scale.max(y.amax());
                // FSAL: the last stage is the derivative at the new point.
                k[0] = k[6].clone();
                steps += 1;
                let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                // Do not let a short landing step shrink the working step.
                h = if landing { h.max(step * grow) } else { step * grow };
            } else {
                h = step * (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            }
        }
        states.push(y.clone());
    }
    Ok(Trajectory {
        times: times.to_vec(),
        states,
        method: "dormand-prince-5(4)".into(),
        step_meta: StepMeta { step: None, rel_tol: Some(rel_tol), steps_taken: steps },
    })
}

/// Piecewise-constant modulation `(epsilon, theta)` on `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleWindow {
    pub start: f64,
    pub end: f64,
    pub epsilon: f64,
    pub theta: f64,
}

/// Modulation schedule for [`velocity_verlet`]; windows are sorted and may not overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    windows: Vec<ScheduleWindow>,
}

impl Schedule {
    pub fn new(mut windows: Vec<ScheduleWindow>) -> Result<Self> {
        windows.sort_by(|a, b| a.start.total_cmp(&b.start));
        if windows.iter().any(|w| !(w.end > w.start) || !w.epsilon.is_finite() || !w.theta.is_finite()) {
            return Err(Error::InvalidInput("schedule windows need end > start and finite values".into()));
        }
        if windows.windows(2).any(|p| p[1].start < p[0].end) {
            return Err(Error::InvalidInput("schedule windows overlap".into()));
        }
        Ok(Self { windows })
    }

    /// One window covering `[0, t_end]`.
    pub fn constant(epsilon: f64, theta: f64, t_end: f64) -> Self {
        Self { windows: vec![ScheduleWindow { start: 0.0, end: t_end * (1.0 + 1e-12) + 1e-300, epsilon, theta }] }
    }

    pub fn at(&self, t: f64) -> Result<(f64, f64)> {
        let i = self.windows.partition_point(|w| w.start <= t);
        match i.checked_sub(1).map(|i| &self.windows[i]) {
            Some(w) if t < w.end => Ok((w.epsilon, w.theta)),
            _ => Err(Error::ScheduleGap(t)),
        }
    }
}

/// Acceleration of `x'' + omega^2 (1 + eps cos(2 omega t + theta)) x = 0`.
fn mathieu_force(omega: f64, eps: f64, theta: f64, t: f64, x: f64) -> f64 {
    -omega * omega * (1.0 + eps * (2.0 * omega * t + theta).cos()) * x
}

/// One kick-drift-kick step. The stiffness is evaluated at both ends of the
/// step with the step's own `(eps, theta)`.
pub fn verlet_step(omega: f64, eps: f64, theta: f64, t: f64, x: f64, v: f64, dt: f64) -> (f64, f64) {
    let v_half = v + 0.5 * dt * mathieu_force(omega, eps, theta, t, x);
    let x_new = x + dt * v_half;
    let v_new = v_half + 0.5 * dt * mathieu_force(omega, eps, theta, t + dt, x_new);
    (x_new, v_new)
}

/// Velocity-Verlet integration of the modulated oscillator; state `[x, v]`.
///
/// The schedule is looked up at each step's midpoint `t_n + dt/2`, so the
/// step that straddles a window boundary belongs to the window holding most
/// of it. The last step is shortened to end at `t_end`.
pub fn velocity_verlet(
    omega: f64,
    schedule: &Schedule,
    x0: f64,
    v0: f64,
    dt: f64,
    t_end: f64,
) -> Result<Trajectory> {
    if !(dt > 0.0 && t_end >= 0.0 && omega > 0.0) {
        return Err(Error::InvalidInput(format!("need dt > 0, t_end >= 0, omega > 0; got {dt}, {t_end}, {omega}")));
    }
    let steps = (t_end / dt - 1e-9).ceil().max(0.0) as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let (mut x, mut v) = (x0, v0);
    times.push(0.0);
    states.push(Vector::from_row_slice(&[x, v]));
    for i in 0..steps {
        let t = i as f64 * dt;
        let h = dt.min(t_end - t);
        let (eps, theta) = schedule.at(t + 0.5 * h)?;
        (x, v) = verlet_step(omega, eps, theta, t, x, v, h);
        times.push(if i + 1 == steps { t_end } else { (i + 1) as f64 * dt });
        states.push(Vector::from_row_slice(&[x, v]));
    }
    Ok(Trajectory {
        times,
        states,
        method: "velocity-verlet".into(),
        step_meta: StepMeta { step: Some(dt), rel_tol: None, steps_taken: steps },
    })
}

/// Least-squares slope of `ln(values)` against `times`; non-positive values are skipped.
pub fn log_linear_rate(times: &[f64], values: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(_, &v)| v > 0.0 && v.is_finite())
        .map(|(&t, &v)| (t, v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - tm) * (p.0 - tm)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::Mat;
    use crate::homogenize::{uniform_grid, ForcingSpec};
    use crate::series::FourierMatrix;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn free(a: Mat, x0: &[f64]) -> LinearSystem {
        let n = a.nrows();
        LinearSystem::new(a, FourierMatrix::new(1.0, n).unwrap(), 0.0, ForcingSpec::Zero, Vector::from_row_slice(x0))
            .unwrap()
    }

    #[test]
    fn constant_solution() {
        let sys = free(Mat::zeros(2, 2), &[3.0, -1.0]);
        let tr = integrate_reference(&sys, &uniform_grid(10.0, 5), 1e-10).unwrap();
        assert!(tr.states.iter().all(|s| *s == sys.x0));
    }

    #[test]
    fn rotation_half_turn() {
        let sys = free(Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]), &[1.0, 0.0]);
        let tr = integrate_reference(&sys, &[0.0, PI], 1e-10).unwrap();
        assert_relative_eq!(tr.states[1], Vector::from_row_slice(&[-1.0, 0.0]), epsilon = 1e-9);
    }

    #[test]
    fn exponential_growth_relative_accuracy() {
        let sys = free(Mat::from_element(1, 1, 0.7), &[1.0]);
        let tr = integrate_reference(&sys, &uniform_grid(20.0, 4), 1e-12).unwrap();
        for (t, s) in tr.times.iter().zip(&tr.states) {
            assert_relative_eq!(s[0], (0.7 * t).exp(), max_relative = 1e-10);
        }
    }

    #[test]
    fn bad_tolerance_and_grid() {
        let sys = free(Mat::zeros(1, 1), &[1.0]);
        assert!(integrate_reference(&sys, &[0.0, 1.0], 1e-2).is_err());
        assert!(integrate_reference(&sys, &[0.0, 2.0, 1.0], 1e-8).is_err());
    }

    #[test]
    fn verlet_free_oscillator_amplitude() {
        let w = 3.0;
        let tr = velocity_verlet(w, &Schedule::constant(0.0, 0.0, 100.0), 1.0, 0.0, 0.1 / w, 100.0).unwrap();
        for s in &tr.states {
            let amp = (s[0] * s[0] + s[1] * s[1] / (w * w)).sqrt();
            assert!((amp - 1.0).abs() < 2e-3);
        }
        assert_relative_eq!(*tr.times.last().unwrap(), 100.0);
    }

    #[test]
    fn log_rate_of_exponential() {
        let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let v: Vec<f64> = t.iter().map(|t| 3.0 * (-0.25 * t).exp()).collect();
        assert_relative_eq!(log_linear_rate(&t, &v).unwrap(), -0.25, epsilon = 1e-12);
        assert!(log_linear_rate(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn schedule_gap_is_reported() {
        let sched = Schedule::new(vec![ScheduleWindow { start: 0.0, end: 1.0, epsilon: 0.1, theta: 0.0 }]).unwrap();
        assert!(matches!(velocity_verlet(1.0, &sched, 1.0, 0.0, 0.1, 2.0), Err(Error::ScheduleGap(_))));
        assert!(Schedule::new(vec![
            ScheduleWindow { start: 0.0, end: 1.0, epsilon: 0.1, theta: 0.0 },
            ScheduleWindow { start: 0.5, end: 2.0, epsilon: 0.1, theta: 0.0 },
        ])
        .is_err());
    }
}
