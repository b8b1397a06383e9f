//! Central finite-difference verification of tape gradients.

use ndarray::Array2;
use rayon::prelude::*;

use super::tape::{GradFault, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub coordinates: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradChecker {
    pub h: f64,
    pub fault: Option<GradFault>,
}

impl GradChecker {
    pub fn new(h: f64) -> Self {
        GradChecker { h, fault: None }
    }

    pub fn with_fault(mut self, fault: Option<GradFault>) -> Self {
        self.fault = fault;
        self
    }

    /// Checks `f` with respect to every coordinate of every input matrix.
    ///
    /// `f` receives a fresh tape and the inputs recorded as parameters, and
    /// must return a 1x1 root. Numeric evaluations use isolated tapes and run
    /// in parallel over coordinates.
    pub fn check<F>(&self, f: F, inputs: &[Array2<f64>]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
    {
        if !(self.h > 0.0) {
            return Err(Error::NonFinite(format!("step h must be positive, got {}", self.h)));
        }
        let mut tape = Tape::with_fault(self.fault);
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let root = f(&mut tape, &vars)?;
        let base = tape.value(root)[[0, 0]];
        if !base.is_finite() {
            return Err(Error::NonFinite(format!("f(x) = {base}")));
        }
        tape.backward(root)?;
        let analytic: Vec<Array2<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();

        let coords: Vec<(usize, (usize, usize))> = inputs
            .iter()
            .enumerate()
            .flat_map(|(k, x)| x.indexed_iter().map(move |(ij, _)| (k, ij)))
            .collect();

        let eval = |k: usize, ij: (usize, usize), delta: f64| -> Result<f64> {
            let mut shifted = inputs.to_vec();
            shifted[k][ij] += delta;
            let mut t = Tape::new();
            let vs: Vec<Var> = shifted.into_iter().map(|x| t.param(x)).collect();
            let r = f(&mut t, &vs)?;
            let v = t.value(r)[[0, 0]];
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite(format!("f at input {k} {ij:?} {delta:+e} = {v}")))
            }
        };

        let h = self.h;
        let errors: Vec<f64> = coords
            .par_iter()
            .map(|&(k, ij)| {
                let numeric = (eval(k, ij, h)? - eval(k, ij, -h)?) / (2.0 * h);
                let a = analytic[k][ij];
                Ok((a - numeric).abs() / a.abs().max(1.0))
            })
            .collect::<Result<_>>()?;

        Ok(GradCheckReport {
            max_rel_error: errors.into_iter().fold(0.0, f64::max),
            coordinates: coords.len(),
        })
    }
}

/// Max relative error between the tape gradient of `f` at `x` and its
/// central-difference estimate with step `h`.
pub fn finite_difference_check<F>(f: F, x: &Array2<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    GradChecker::new(h)
        .check(|t, vs| f(t, vs[0]), std::slice::from_ref(x))
        .map(|r| r.max_rel_error)
}
