//! Central-difference gradient checking against the tape adjoints.

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::TensorBuf;

/// Step and tolerance settings. Relative error is
/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub tol: f64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

fn evaluate<F>(f: &F, params: &[TensorBuf]) -> Result<f64>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Shape(format!(
            "grad check needs a scalar computation, got {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compares every analytic gradient entry of `f` against
/// `(f(θ+h) − f(θ−h)) / 2h`.
pub fn run_grad_check<F>(f: F, params: &[TensorBuf], cfg: GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).clone();
    let grads = tape.backward(out)?;

    let again = evaluate(&f, params)?;
    if again.to_bits() != base.data()[0].to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two forward passes gave {} and {again}",
            base.data()[0]
        )));
    }

    let mut work: Vec<TensorBuf> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    let mut worst = 0.0f64;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + cfg.h;
            let up = evaluate(&f, &work)?;
            work[pi].data_mut()[k] = orig - cfg.h;
            let down = evaluate(&f, &work)?;
            work[pi].data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * cfg.h);
            let a = analytic.data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        worst = worst.max(max_rel);
        reports.push(ParamCheck {
            index: pi,
            entries: params[pi].len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }

    Ok(GradCheckReport {
        params: reports,
        max_rel_err: worst,
        tol: cfg.tol,
        passed: worst < cfg.tol,
    })
}
