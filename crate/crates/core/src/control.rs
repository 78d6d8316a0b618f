//! Mathieu closed forms and amplitude control by switching the phase and
//! depth of a parametric modulation.

use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::algebra::{Mat, Vector};
use crate::error::{Error, Result};
use crate::homogenize::{uniform_grid, ForcingSpec, LinearSystem, StepMeta, Trajectory};
use crate::integrate::{integrate_reference, verlet_step};
use crate::io::csv_row;
use crate::series::FourierMatrix;

/// `x'' + omega^2 (1 + eps cos(2 omega t + theta)) x = f_2(t)` as a first-order system.
pub fn mathieu_system(omega: f64, theta: f64, epsilon: f64, f: ForcingSpec, x0: [f64; 2]) -> Result<LinearSystem> {
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(Error::InvalidInput(format!("omega must be positive, got {omega}")));
    }
    let w2 = omega * omega;
    let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, -w2, 0.0]);
    let (s, c) = theta.sin_cos();
    let cos = Mat::from_row_slice(2, 2, &[0.0, 0.0, -w2 * c, 0.0]);
    let sin = Mat::from_row_slice(2, 2, &[0.0, 0.0, w2 * s, 0.0]);
    let p = FourierMatrix::new(omega, 2)?.with_mode(2, cos, sin)?;
    LinearSystem::new(a, p, epsilon, f, Vector::from_row_slice(&x0))
}

/// The Mathieu effective matrix and its exponential in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct MathieuEffective {
    pub omega: f64,
    pub theta: f64,
    pub b: Mat,
}

impl MathieuEffective {
    /// `exp(eps B t)`. `B` is traceless with `B^2 = (omega/4)^2 I`.
    pub fn exp_eps_bt(&self, epsilon: f64, t: f64) -> Mat {
        let s = epsilon * self.omega * t / 4.0;
        Mat::identity(2, 2) * s.cosh() + &self.b * (s.sinh() * 4.0 / self.omega)
    }
}

pub fn mathieu_effective(omega: f64, theta: f64) -> MathieuEffective {
    let (s, c) = theta.sin_cos();
    let b = Mat::from_row_slice(2, 2, &[omega * s, c, omega * omega * c, -omega * s]) * -0.25;
    MathieuEffective { omega, theta, b }
}

/// Modulation phase under which the homogenized amplitude decays as
/// `exp(-eps omega t / 4)` from `(x0, v0)`.
pub fn decay_phase(x0: f64, v0: f64, omega: f64) -> Result<f64> {
    if x0 == 0.0 && v0 == 0.0 {
        return Err(Error::ZeroState);
    }
    let b = v0 / omega;
    Ok(2.0 * (x0 - b).atan2(x0 + b))
}

/// Phase under which the homogenized amplitude grows as `exp(eps omega t / 4)`.
pub fn growth_phase(x0: f64, v0: f64, omega: f64) -> Result<f64> {
    if x0 == 0.0 && v0 == 0.0 {
        return Err(Error::ZeroState);
    }
    let b = v0 / omega;
    Ok(2.0 * (x0 + b).atan2(b - x0))
}

/// `sqrt(x^2 + v^2 / omega^2)`.
pub fn amplitude(x: f64, v: f64, omega: f64) -> f64 {
    (x * x + v * v / (omega * omega)).sqrt()
}

/// Target amplitude `f(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TargetSpec {
    /// Ascending coefficients `c0 + c1 t + c2 t^2 + ...`.
    Polynomial { coeffs: Vec<f64> },
    /// Linear interpolation; held constant outside the grid.
    Sampled { times: Vec<f64>, values: Vec<f64> },
}

impl TargetSpec {
    /// `scale * prod (t - root) + offset` in coefficient form.
    pub fn from_roots(roots: &[f64], scale: f64, offset: f64) -> Self {
        let mut coeffs = vec![scale];
        for &r in roots {
            let mut next = vec![0.0; coeffs.len() + 1];
            for (i, &c) in coeffs.iter().enumerate() {
                next[i + 1] += c;
                next[i] -= r * c;
            }
            coeffs = next;
        }
        coeffs[0] += offset;
        Self::Polynomial { coeffs }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Self::Polynomial { coeffs } if coeffs.is_empty() || coeffs.iter().any(|c| !c.is_finite()) => {
                Err(Error::InvalidInput("polynomial target needs finite coefficients".into()))
            }
            Self::Sampled { times, values }
                if times.is_empty()
                    || times.len() != values.len()
                    || times.windows(2).any(|w| !(w[1] > w[0]))
                    || values.iter().any(|v| !v.is_finite()) =>
            {
                Err(Error::InvalidInput("sampled target needs a strictly increasing grid and finite values".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Self::Polynomial { coeffs } => coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c),
            Self::Sampled { times, values } => {
                if t <= times[0] {
                    return values[0];
                }
                if t >= *times.last().unwrap() {
                    return *values.last().unwrap();
                }
                let i = times.partition_point(|&s| s <= t);
                let w = (t - times[i - 1]) / (times[i] - times[i - 1]);
                values[i - 1] * (1.0 - w) + values[i] * w
            }
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            Self::Polynomial { coeffs } => coeffs
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (i, &c)| acc * t + i as f64 * c),
            Self::Sampled { times, values } => {
                if t < times[0] || t > *times.last().unwrap() || times.len() < 2 {
                    return 0.0;
                }
                let i = times.partition_point(|&s| s <= t).clamp(1, times.len() - 1);
                (values[i] - values[i - 1]) / (times[i] - times[i - 1])
            }
        }
    }
}

fn default_m() -> f64 {
    2.0
}

fn default_gain() -> f64 {
    1.0
}

/// Inputs of [`run_control`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub omega: f64,
    /// Window width in carrier periods-over-2pi: `H = m / omega`.
    #[serde(default = "default_m")]
    pub m: f64,
    pub target: TargetSpec,
    pub t_end: f64,
    pub x0: f64,
    pub v0: f64,
    /// Integrator step; `0.1 / omega` when absent.
    #[serde(default)]
    pub dt: Option<f64>,
    /// Multiplies `|log r| / (omega H)`. 1 is the plain rule,
    /// whose window gain is `r^{1/4}`; 4 makes the gain `r`.
    #[serde(default = "default_gain")]
    pub gain_exponent: f64,
}

impl ControlConfig {
    pub fn new(omega: f64, target: TargetSpec, t_end: f64, x0: f64, v0: f64) -> Self {
        Self { omega, m: default_m(), target, t_end, x0, v0, dt: None, gain_exponent: default_gain() }
    }

    pub fn window(&self) -> f64 {
        self.m / self.omega
    }

    pub fn step(&self) -> f64 {
        self.dt.unwrap_or(0.1 / self.omega)
    }
}

/// Decision taken at the start of one window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowRecord {
    pub index: usize,
    pub start: f64,
    pub r: f64,
    pub epsilon: f64,
    /// Phase in window-local time (as the rule computes it).
    pub theta: f64,
}

/// Result of [`run_control`].
#[derive(Debug, Clone)]
pub struct ControlTrace {
    pub windows: Vec<WindowRecord>,
    /// State `[x, v]` at every integrator step.
    pub trajectory: Trajectory,
    pub amplitude: Vec<f64>,
    pub target: Vec<f64>,
    /// Window of the step that produced each sample (0 for the initial one).
    pub window_of_sample: Vec<usize>,
}

impl ControlTrace {
    /// Root-mean-square of `(amplitude - target) / target` over samples in `[t0, t1]`.
    pub fn rms_relative_error(&self, t0: f64, t1: f64) -> f64 {
        let errs: Vec<f64> = self
            .trajectory
            .times
            .iter()
            .zip(self.amplitude.iter().zip(&self.target))
            .filter(|(t, _)| **t >= t0 && **t <= t1)
            .map(|(_, (a, f))| (a - f) / f)
            .collect();
        if errs.is_empty() {
            return 0.0;
        }
        (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt()
    }

    /// CSV with header `t,x,v,amplitude,target,window,epsilon,theta`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,x,v,amplitude,target,window,epsilon,theta")?;
        for i in 0..self.trajectory.len() {
            let s = &self.trajectory.states[i];
            let win = self.window_of_sample[i];
            let rec = self.windows.get(win);
            let head = csv_row([self.trajectory.times[i], s[0], s[1], self.amplitude[i], self.target[i]]);
            let tail = csv_row([rec.map_or(0.0, |r| r.epsilon), rec.map_or(0.0, |r| r.theta)]);
            writeln!(w, "{head},{win},{tail}")?;
        }
        Ok(())
    }
}

/// Windowed amplitude control of the Mathieu oscillator.
///
/// At the start of each window of width `H = m / omega`, with `a = x` and
/// `b = v / omega`, the ratio `r = f(t + H) / sqrt(a^2 + b^2)` selects
/// `eps = g |log r| / (omega H)` and the growth phase
/// `2 atan2(a + b, b - a)` when `r >= 1`, the decay phase
/// `2 atan2(a - b, a + b)` otherwise. The phase refers to time measured from
/// the window start. Steps are assigned to the window containing their midpoint.
pub fn run_control(cfg: &ControlConfig) -> Result<ControlTrace> {
    if !(cfg.omega > 0.0 && cfg.m > 0.0 && cfg.t_end > 0.0 && cfg.step() > 0.0 && cfg.gain_exponent.is_finite()) {
        return Err(Error::InvalidInput("control needs omega, m, t_end, dt > 0".into()));
    }
    cfg.target.validate()?;
    let omega = cfg.omega;
    let h_win = cfg.window();
    let dt = cfg.step();
    check_slow_target(cfg);

    let steps = (cfg.t_end / dt - 1e-9).ceil().max(0.0) as usize;
    let (mut x, mut v) = (cfg.x0, cfg.v0);
    let mut times = vec![0.0];
    let mut states = vec![Vector::from_row_slice(&[x, v])];
    let mut window_of_sample = vec![0];
    let mut windows: Vec<WindowRecord> = Vec::new();
    let mut current: Option<(usize, f64, f64)> = None;

    for k in 0..steps {
        let t = k as f64 * dt;
        let h = dt.min(cfg.t_end - t);
        let win = ((t + 0.5 * h) / h_win).floor() as usize;
        if current.is_none_or(|c| c.0 != win) {
            let rec = window_decision(cfg, win, t, x, v)?;
            // Shift the window-local phase to absolute time.
            let theta_abs = rec.theta - 2.0 * omega * t;
            current = Some((win, rec.epsilon, theta_abs));
            windows.push(rec);
        }
        let (_, eps, theta) = current.unwrap();
        (x, v) = verlet_step(omega, eps, theta, t, x, v, h);
        times.push(if k + 1 == steps { cfg.t_end } else { (k + 1) as f64 * dt });
        states.push(Vector::from_row_slice(&[x, v]));
        window_of_sample.push(windows.len() - 1);
    }

    let amplitude = states.iter().map(|s| amplitude(s[0], s[1], omega)).collect();
    let target = times.iter().map(|&t| cfg.target.eval(t)).collect();
    Ok(ControlTrace {
        windows,
        trajectory: Trajectory {
            times,
            states,
            method: "velocity-verlet-control".into(),
            step_meta: StepMeta { step: Some(dt), rel_tol: None, steps_taken: steps },
        },
        amplitude,
        target,
        window_of_sample,
    })
}

fn window_decision(cfg: &ControlConfig, index: usize, t: f64, x: f64, v: f64) -> Result<WindowRecord> {
    let omega = cfg.omega;
    let h_win = cfg.window();
    let goal = cfg.target.eval(t + h_win);
    if !(goal > 0.0) {
        return Err(Error::NonpositiveTarget { time: t + h_win, value: goal });
    }
    let (a, b) = (x, v / omega);
    let amp = a.hypot(b);
    if amp == 0.0 {
        return Err(Error::ZeroState);
    }
    let r = goal / amp;
    let epsilon = cfg.gain_exponent * r.ln().abs() / (omega * h_win);
    let theta = if r >= 1.0 { 2.0 * (a + b).atan2(b - a) } else { 2.0 * (a - b).atan2(a + b) };
    Ok(WindowRecord { index, start: t, r, epsilon, theta })
}

/// Logs when the target varies quickly against the carrier.
fn check_slow_target(cfg: &ControlConfig) {
    let n = 200;
    for i in 0..=n {
        let t = cfg.t_end * i as f64 / n as f64;
        let f = cfg.target.eval(t);
        let df = cfg.target.derivative(t);
        if f <= 0.0 {
            continue;
        }
        if (df / f).abs() / cfg.omega > 0.1 || df.abs() / cfg.omega > 0.1 {
            warn!(
                "target changes fast relative to omega at t = {t:.4}: |f'/f|/omega = {:.3e}, |f'|/omega = {:.3e}",
                (df / f).abs() / cfg.omega,
                df.abs() / cfg.omega
            );
            return;
        }
    }
}

/// Mathieu oscillator started at rest and pushed by a constant force
/// `(0, delta)`, integrated by the reference solver.
pub fn simulate_ignition(omega: f64, epsilon: f64, delta: f64, t_end: f64) -> Result<Trajectory> {
    let f = ForcingSpec::Constant(Vector::from_row_slice(&[0.0, delta]));
    let sys = mathieu_system(omega, 0.0, epsilon, f, [0.0, 0.0])?;
    let per_period = 20.0 * t_end * omega / (2.0 * std::f64::consts::PI);
    let n = (per_period.ceil() as usize).max(200);
    integrate_reference(&sys, &uniform_grid(t_end, n), 1e-10)
}
