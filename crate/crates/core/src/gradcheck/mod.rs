//! Central-difference verification of analytic gradients.

mod suite;

pub use suite::{
    model_grad_check, run_suite, SuiteEntry, SuiteOptions, SuiteReport, LAYER_TOLERANCE,
    MODEL_TOLERANCE,
};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, OpKind, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|a − n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Which coordinates of each input get perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// At most this many coordinates per input, chosen with the given seed.
    Sample(usize, u64),
}

/// Worst coordinate found by a check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// `(analytic, numeric)` at the worst coordinate.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Knobs for [`grad_check_with`].
#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub h: f64,
    pub coords: Coords,
    /// Fault injection: scales the backward rule of this op kind.
    pub corrupt: Option<OpKind>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            coords: Coords::All,
            corrupt: None,
        }
    }
}

pub(crate) fn pick_coords(n: usize, coords: Coords, salt: u64) -> Vec<usize> {
    match coords {
        Coords::Sample(k, seed) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9));
            let mut idx = sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

impl GradCheckReport {
    pub(crate) fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            worst_values: None,
            checked: 0,
        }
    }

    pub(crate) fn record(&mut self, input: usize, coord: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = err;
            self.worst = Some((input, coord));
            self.worst_values = Some((analytic, numeric));
        }
    }
}

/// Compares `backward` against central differences with step `h` for every
/// (selected) coordinate of every input. `f` must return a scalar.
pub fn grad_check_inputs<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    coords: Coords,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(
        f,
        inputs,
        &CheckOptions {
            h,
            coords,
            corrupt: None,
        },
    )
}

pub fn grad_check_with<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: &CheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let h = opts.h;
    let mut g = Graph::new();
    if let Some(kind) = opts.corrupt {
        g.corrupt_backward(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item()?.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let mut grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| grads.take(v).expect("every input is a param"))
        .collect();

    let mut report = GradCheckReport::new();
    let mut work = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        for c in pick_coords(a.numel(), opts.coords, i as u64) {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + h;
            let fp = eval(&f, &work)?;
            work[i].data_mut()[c] = orig - h;
            let fm = eval(&f, &work)?;
            work[i].data_mut()[c] = orig;
            report.record(i, c, a.data()[c], (fp - fm) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Single-input convenience form; returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let r = grad_check_inputs(|g, v| f(g, v[0]), std::slice::from_ref(x), h, Coords::All)?;
    Ok(r.max_rel_error)
}
