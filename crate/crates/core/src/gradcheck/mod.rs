//! Central finite-difference gradient checking.

use alloc::vec::Vec;

use rand::RngCore;

use crate::nn::{ParamId, ParamStore, Session};
use crate::{Result, Tape, Tensor, Var};

mod suite;

pub use suite::{grad_check_suite, BlockResult, BLOCKS, SUITE_TOLERANCE};

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floor(a, b, 1e-8)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err_floor(a: f64, b: f64, floor: f64) -> f64 {
    libm::fabs(a - b) / libm::fabs(a).max(libm::fabs(b)).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`
    Central,
    /// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`
    Central4,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub h: f64,
    pub stencil: Stencil,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl FdOptions {
    /// Two-point central differences, floor 1e-8.
    pub fn central(h: f64) -> Self {
        FdOptions {
            h,
            stencil: Stencil::Central,
            floor: 1e-8,
        }
    }

    /// Fourth-order stencil with floor 1e-6, for deep compositions where
    /// two-point truncation and roundoff (about `ε·|f|/h`) reach 1e-10 and
    /// would dominate near-zero gradient entries.
    pub fn precise(h: f64) -> Self {
        FdOptions {
            h,
            stencil: Stencil::Central4,
            floor: 1e-6,
        }
    }
}

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(input, flat coordinate)` where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Checks the gradient of a scalar function of several tensors.
///
/// `f` builds the scalar on the given tape from leaves holding `inputs`.
/// Analytic gradients come from one backward pass (optionally multiplied by
/// `analytic_scale`, which exists to test the checker itself); numeric ones
/// from the stencil in `opts`, one coordinate at a time.
pub fn check_gradients_with<F>(f: F, inputs: &[Tensor], opts: FdOptions, analytic_scale: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.iter().map(|x| x * analytic_scale).collect(),
            None => alloc::vec![0.0; t.numel()],
        })
        .collect();
    drop(tape);

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let h = opts.h;
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            let mut at = |k: f64| -> Result<f64> {
                work[i].data_mut()[j] = orig + k * h;
                eval(&work)
            };
            let numeric = match opts.stencil {
                Stencil::Central => (at(1.0)? - at(-1.0)?) / (2.0 * h),
                Stencil::Central4 => {
                    let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
                }
            };
            work[i].data_mut()[j] = orig;
            let err = rel_err_floor(grads[j], numeric, opts.floor);
            report.coordinates += 1;
            if err > report.max_rel_err || report.coordinates == 1 {
                report.max_rel_err = err;
                report.worst = (i, j);
                report.analytic = grads[j];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Two-point central differences with step `h`.
pub fn check_gradients_scaled<F>(f: F, inputs: &[Tensor], h: f64, analytic_scale: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_gradients_with(f, inputs, FdOptions::central(h), analytic_scale)
}

pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_gradients_scaled(f, inputs, h, 1.0)
}

/// Checks a module: gradients w.r.t. `inputs` and the parameters `params`,
/// which are bound as tape variables holding `values` in place of their
/// stored tensors. `f` runs on a session over `store`; with `train_seed` the
/// session is in training mode with a freshly seeded generator on every
/// evaluation, so stochastic layers draw identical masks.
#[allow(clippy::too_many_arguments)]
pub fn check_module<F>(
    store: &ParamStore,
    params: &[ParamId],
    values: &[Tensor],
    inputs: &[Tensor],
    train_seed: Option<u64>,
    opts: FdOptions,
    analytic_scale: f64,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let n = inputs.len();
    let mut all = inputs.to_vec();
    all.extend_from_slice(values);
    check_gradients_with(
        |tape, vars| {
            let mut rng = train_seed.map(crate::seeded_rng);
            let rng = rng.as_mut().map(|r| r as &mut dyn RngCore);
            let mut s = Session::on_tape(core::mem::take(tape), store, rng);
            for (&id, &v) in params.iter().zip(&vars[n..]) {
                s.bind(id, v);
            }
            let out = f(&mut s, &vars[..n]);
            *tape = s.finish().tape;
            out
        },
        &all,
        opts,
        analytic_scale,
    )
}

/// Single-input form; returns the maximum relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_gradients(|t, v| f(t, v[0]), core::slice::from_ref(x), h).map(|r| r.max_rel_err)
}
