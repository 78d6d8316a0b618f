use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use temphom::algebra::DEFAULT_CLUSTER_TOL;
use temphom::circuits::{
    build_bank, effective_delta, resonant_frequency, super_resonance_threshold, verify_growth_constitutive,
    verify_growth_from,
};
use temphom::growth::{default_averaging_window, effective_matrix_algebraic, effective_matrix_averaged};
use temphom::io::mat_to_rows;
use temphom::{
    effective_solution, error_report, floquet_approx, integrate_reference, run_control, spectral_decompose,
    uniform_grid, EffectiveModel, Error, LinearSystem, SeriesOptions, Trajectory, Vector,
};

use crate::output::{to_json, write_json, write_with};
use crate::scenario::Scenario;
use crate::Failure;

pub struct Ctx<'a> {
    pub scenario: Scenario,
    pub out: &'a Path,
    pub jobs: usize,
    pub seed: u64,
}

fn algebraic(sys: &LinearSystem) -> temphom::Result<EffectiveModel> {
    let spec = spectral_decompose(&sys.a, DEFAULT_CLUSTER_TOL)?;
    effective_matrix_algebraic(&spec, &sys.p, &SeriesOptions::default())
}

fn averaged(sys: &LinearSystem) -> temphom::Result<EffectiveModel> {
    let (t, n) = default_averaging_window(&sys.a, &sys.p);
    effective_matrix_averaged(&sys.a, &sys.p, t, n)
}

/// Algebraic model, or the averaged one when `A` is not diagonalizable.
fn bounded_model(sys: &LinearSystem) -> Result<EffectiveModel, Failure> {
    let model = match algebraic(sys) {
        Err(Error::DefectiveMatrix { .. }) => averaged(sys).map_err(|e| match e {
            Error::DivergenceDetected { .. } => Failure::Unbounded(e.to_string()),
            e => e.into(),
        })?,
        other => other?,
    };
    model.require_bounded()?;
    Ok(model)
}

/// Runs the closures one after another, or on two threads when `jobs > 1`.
fn both<A: Send, B: Send>(jobs: usize, a: impl FnOnce() -> A + Send, b: impl FnOnce() -> B + Send) -> (A, B) {
    if jobs > 1 {
        std::thread::scope(|s| {
            let h = s.spawn(a);
            let rb = b();
            (h.join().expect("worker thread"), rb)
        })
    } else {
        (a(), b())
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed().as_secs_f64())
}

fn grid(ctx: &Ctx, sys: &LinearSystem) -> Result<Vec<f64>, Failure> {
    let t_end = ctx.scenario.run.t_end_for(sys.epsilon).map_err(Failure::Input)?;
    Ok(uniform_grid(t_end, ctx.scenario.run.n_points()))
}

fn model_json(m: &temphom::Result<EffectiveModel>) -> Value {
    match m {
        Ok(m) => json!({
            "B": m.b.as_ref().map(mat_to_rows),
            "bounded": m.verdict.bounded,
            "residual": m.residual,
        }),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

/// Prints `B` from both routes with the boundedness verdict.
pub fn effective(ctx: &Ctx) -> Result<(), Failure> {
    let sys = ctx.scenario.system()?;
    let alg = match algebraic(&sys) {
        Err(e) if !matches!(e, Error::DefectiveMatrix { .. }) => return Err(e.into()),
        r => r,
    };
    let verdict = alg.as_ref().ok().map(|m| m.verdict.clone());
    // averaging an unbounded conjugation only confirms the divergence
    let avg = match &verdict {
        Some(v) if !v.bounded => None,
        _ => Some(averaged(&sys)),
    };
    let difference = match (&alg, &avg) {
        (Ok(x), Some(Ok(y))) => x.b.as_ref().zip(y.b.as_ref()).map(|(x, y)| (x - y).norm()),
        _ => None,
    };
    let (t_window, n_quad) = default_averaging_window(&sys.a, &sys.p);
    let bounded = match (&verdict, &avg) {
        (Some(v), _) => v.bounded,
        (None, Some(Err(Error::DivergenceDetected { .. }))) => false,
        _ => true,
    };
    let report = json!({
        "dim": sys.dim(),
        "bounded": bounded,
        "offending_terms": verdict.as_ref().map(|v| &v.offending_terms),
        "algebraic": model_json(&alg),
        "averaged": avg.as_ref().map(|m| {
            let mut v = model_json(m);
            v["t_window"] = json!(t_window);
            v["n_quad"] = json!(n_quad);
            v
        }),
        "difference": difference,
    });
    print!("{}", to_json(&report));
    write_json(ctx.out, "effective.json", &report)?;
    if !bounded {
        return Err(Failure::Unbounded("conjugated perturbation grows".into()));
    }
    match avg {
        Some(Err(e)) => Err(e.into()),
        _ => Ok(()),
    }
}

/// Writes the reference and effective trajectories with their error metrics.
pub fn simulate(ctx: &Ctx) -> Result<(), Failure> {
    let sys = ctx.scenario.system()?;
    let model = bounded_model(&sys)?;
    let times = grid(ctx, &sys)?;
    let rel_tol = ctx.scenario.run.rel_tol();
    let (reference, effective) = both(
        ctx.jobs,
        || integrate_reference(&sys, &times, rel_tol),
        || effective_solution(&sys, &model, &times),
    );
    let reference = reference?;
    let (approx, frame) = effective?;
    let metrics = error_report(&approx, &reference, &frame)?;
    write_with(ctx.out, "reference.csv", |w| reference.write_csv(w))?;
    write_with(ctx.out, "effective.csv", |w| approx.write_csv(w))?;
    let report = json!({
        "epsilon": sys.epsilon,
        "t_end": times.last(),
        "n_points": times.len(),
        "method": model.method,
        "rel_tol": rel_tol,
        "reference_steps": reference.step_meta.steps_taken,
        "metrics": metrics,
    });
    write_json(ctx.out, "error.json", &report)?;
    print!("{}", to_json(&report));
    Ok(())
}

pub fn control(ctx: &Ctx) -> Result<(), Failure> {
    let cfg = ctx.scenario.control.as_ref().ok_or_else(|| Failure::Input("scenario has no `control` section".into()))?;
    let trace = run_control(cfg)?;
    let [t0, t1] = ctx.scenario.run.error_window.unwrap_or([0.0, cfg.t_end]);
    write_with(ctx.out, "control.csv", |w| trace.write_csv(w))?;
    let summary = json!({
        "omega": cfg.omega,
        "windows": trace.windows.len(),
        "steps": trace.trajectory.len(),
        "error_window": [t0, t1],
        "rms_relative_error": trace.rms_relative_error(t0, t1),
        "final_amplitude": trace.amplitude.last(),
        "final_target": trace.target.last(),
    });
    write_json(ctx.out, "control_summary.json", &summary)?;
    print!("{}", to_json(&summary));
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CircuitAction {
    Analyze,
    Verify,
}

pub fn circuits(ctx: &Ctx, action: CircuitAction, random_x0: bool) -> Result<(), Failure> {
    let (bank, constitutive) = ctx
        .scenario
        .bank()
        .ok_or_else(|| Failure::Input("circuits needs an rlc-bank or rlc-constitutive builder".into()))?;
    bank.validate()?;
    let omega = bank.drive_frequency()?;
    let th = super_resonance_threshold(bank)?;
    let sys = build_bank(bank)?;
    let b = algebraic(&sys)?;
    let mut report = json!({
        "model": if constitutive { "constitutive" } else { "charge" },
        "n": bank.n,
        "omega": omega,
        "resonant_omega": resonant_frequency(bank).ok(),
        "gamma": bank.gamma(),
        "epsilon": bank.epsilon(),
        "grows": th.grows,
        "margin": th.margin,
        "B": b.b.as_ref().map(mat_to_rows),
        "Delta": effective_delta(bank).ok().map(|d| mat_to_rows(&d)),
    });
    if action == CircuitAction::Verify {
        let hf = ctx.scenario.run.horizon_factor();
        if constitutive {
            let rate = verify_growth_constitutive(bank, hf)?;
            report["fitted_rate"] = json!(rate);
            report["consistent"] = json!((rate > 0.0) == th.grows);
        } else {
            let x0 = if random_x0 {
                let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
                Vector::from_fn(sys.dim(), |_, _| rng.gen_range(-1.0..1.0))
            } else {
                sys.x0.clone()
            };
            let chk = verify_growth_from(bank, hf, &x0)?;
            report["fitted_rate"] = json!(chk.fitted_rate);
            report["predicted_rate"] = json!(chk.predicted_rate);
            report["consistent"] = json!(chk.consistent);
            report["t_end"] = json!(chk.t_end);
            report["x0"] = json!(if random_x0 { "random" } else { "collective" });
        }
    }
    write_json(ctx.out, "circuits.json", &report)?;
    print!("{}", to_json(&report));
    Ok(())
}

#[derive(Serialize)]
struct MethodReport {
    normalized_max_scaled: f64,
    normalized_max_plain: f64,
    max_plain: f64,
    seconds: f64,
}

pub fn compare_floquet(ctx: &Ctx) -> Result<(), Failure> {
    let sys = ctx.scenario.system()?;
    if !sys.f.is_zero() {
        return Err(Error::NonzeroForcing.into());
    }
    let model = bounded_model(&sys)?;
    let times = grid(ctx, &sys)?;
    let rel_tol = ctx.scenario.run.rel_tol();
    let (reference, (effective, floquet)) = both(
        ctx.jobs,
        || timed(|| integrate_reference(&sys, &times, rel_tol)),
        || (timed(|| effective_solution(&sys, &model, &times)), timed(|| floquet_approx(&sys, &times))),
    );
    let (reference, t_ref) = (reference.0?, reference.1);
    let ((approx, frame), t_eff) = (effective.0?, effective.1);
    let (flo, t_flo) = (floquet.0?, floquet.1);
    let rep = |tr: &Trajectory, secs: f64| -> Result<MethodReport, Failure> {
        let m = error_report(tr, &reference, &frame)?;
        Ok(MethodReport {
            normalized_max_scaled: m.normalized_max_scaled,
            normalized_max_plain: m.normalized_max_plain,
            max_plain: m.max_plain,
            seconds: secs,
        })
    };
    let report = json!({
        "epsilon": sys.epsilon,
        "t_end": times.last(),
        "n_points": times.len(),
        "effective": rep(&approx, t_eff)?,
        "floquet": rep(&flo, t_flo)?,
        "reference": { "seconds": t_ref, "steps": reference.step_meta.steps_taken },
    });
    write_json(ctx.out, "compare.json", &report)?;
    print!("{}", to_json(&report));
    Ok(())
}
