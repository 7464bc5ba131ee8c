//! Central finite-difference comparison for the hand-written adjoints.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of the backward code it checks.

use super::{Graph, Tensor, Var};
use crate::error::{invalid, Result};

pub const STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-5;
/// Floor of the relative-error denominator, per unit of `max(1, |f|)`.
/// Central differences at [`STEP`] carry roundoff of order
/// `1e-16·|f| / STEP`, so gradient entries much smaller than the floor are
/// effectively held to an absolute `REL_TOL · SCALE_FLOOR · max(1, |f|)`.
pub const SCALE_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub worst_rel: f64,
    /// Worst `|analytic − numeric|`.
    pub worst_abs: f64,
    pub entries: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst_rel < REL_TOL
    }

    fn record(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let diff = (analytic - numeric).abs();
        let mag = analytic.abs().max(numeric.abs()).max(floor);
        if diff.is_finite() {
            self.worst_rel = self.worst_rel.max(diff / mag);
            self.worst_abs = self.worst_abs.max(diff);
        } else {
            self.worst_rel = f64::INFINITY;
            self.worst_abs = f64::INFINITY;
        }
        self.entries += 1;
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.worst_rel = self.worst_rel.max(other.worst_rel);
        self.worst_abs = self.worst_abs.max(other.worst_abs);
        self.entries += other.entries;
    }
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return invalid(format!("gradcheck target has shape {:?}", g.shape(out)));
    }
    Ok((g, vars, out))
}

/// Checks the gradient of the scalar `f(inputs)` with respect to the inputs
/// selected by `wrt` (all of them when `wrt` is `None`).
pub fn check_selected<F>(inputs: &[Tensor<f64>], wrt: Option<&[usize]>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, vars, out) = evaluate(inputs, &f)?;
    let grads = g.backward(out)?;
    let floor = SCALE_FLOOR * g.value(out).data()[0].abs().max(1.0);
    let all: Vec<usize> = (0..inputs.len()).collect();
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for &i in wrt.unwrap_or(&all) {
        let analytic = grads.wrt(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let (gp, _, op) = evaluate(&work, &f)?;
            let plus = gp.value(op).data()[0];
            work[i].data_mut()[j] = orig - STEP;
            let (gm, _, om) = evaluate(&work, &f)?;
            let minus = gm.value(om).data()[0];
            work[i].data_mut()[j] = orig;
            report.record(a, (plus - minus) / (2.0 * STEP), floor);
        }
    }
    Ok(report)
}

pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_selected(inputs, None, f)
}

/// Reduces a tensor to a scalar through fixed pseudo-random weights so that
/// every output entry contributes a distinct amount.
pub fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let n = g.value(x).len();
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let w: Vec<f64> = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            0.5 + (state >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    let shape = g.shape(x).to_vec();
    let wv = g.input(Tensor::new(&shape, w)?);
    let prod = g.mul(x, wv)?;
    Ok(g.sum(prod))
}
