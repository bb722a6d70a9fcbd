//! Central finite-difference verification of tape gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor in the relative error, so that coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |analytic_i − numeric_i| / max(|analytic_i|, |numeric_i|, REL_ERR_FLOOR)`
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    fn merge(&mut self, other: GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.coords_checked += other.coords_checked;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::dim("grad_check", format!("function output has shape {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Check `d f / d x` at `point` for a scalar-valued `f`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(point), eps)
}

/// Check the gradient with respect to every input in `points`.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = pts.iter().map(|p| t.leaf(p.clone())).collect();
        let o = f(&mut t, &vs)?;
        scalar_of(&t, o)
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor> = points.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zero(*v);
        for i in 0..points[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[i];
            report.merge(GradCheckReport {
                max_rel_err: relative_error(a, numeric),
                max_abs_err: (a - numeric).abs(),
                coords_checked: 1,
            });
        }
    }
    Ok(report)
}

/// Check gradients with respect to selected parameter coordinates
/// `(name, flat index)` of a model whose forward pass is `f`.
pub fn grad_check_params<F>(
    ps: &ParamStore,
    coords: &[(String, usize)],
    f: F,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, ps)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let lookup: std::collections::HashMap<&str, Var> = tape.params().collect();
    let mut work = ps.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        coords_checked: 0,
    };
    for (name, idx) in coords {
        let a = lookup
            .get(name.as_str())
            .and_then(|v| grads.raw(*v))
            .map_or(0.0, |g| g[*idx]);
        let orig = ps
            .get(name)
            .ok_or_else(|| Error::Validation(format!("unknown parameter `{name}`")))?
            .data()[*idx];
        let mut eval = |x: f64| -> Result<f64> {
            work.get_mut(name).expect("exists").data_mut()[*idx] = x;
            let mut t = Tape::new();
            let o = f(&mut t, &work)?;
            scalar_of(&t, o)
        };
        let fp = eval(orig + eps)?;
        let fm = eval(orig - eps)?;
        eval(orig)?;
        let numeric = (fp - fm) / (2.0 * eps);
        report.merge(GradCheckReport {
            max_rel_err: relative_error(a, numeric),
            max_abs_err: (a - numeric).abs(),
            coords_checked: 1,
        });
    }
    Ok(report)
}
