//! Central finite-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::{KagsError, Result};
use crate::par;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub mod suite;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
const PERTURB_CHUNK: usize = 512;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest relative-error floor applied to any element.
    pub floor: f64,
    pub element_count: usize,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<24} {:>6} elements  max rel err {:.3e}  max abs err {:.3e}  {}",
            self.op_name,
            self.element_count,
            self.max_rel_error,
            self.max_abs_error,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Scalar-valued forward function: builds a graph from the registered inputs.
pub trait ScalarFn: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var> + Sync {}
impl<F> ScalarFn for F where F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var> + Sync {}

/// Value of `f` and the largest intermediate magnitude of its graph.
fn evaluate<F: ScalarFn>(f: &F, params: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<(f64, f64)> {
    let mut g = Graph::new(params);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let v = g.value(root);
    if v.numel() != 1 {
        return Err(KagsError::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok((v.data()[0], g.max_abs_value()))
}

#[derive(Clone, Copy)]
enum Slot {
    Input(usize),
    Param(ParamId),
}

/// Rounding quanta of `f` that a central difference cannot resolve; sets the
/// relative-error floor.
pub const NOISE_QUANTA: f64 = 32.0;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many elements of each tensor, chosen at random.
    pub sample_per_tensor: Option<usize>,
    pub sample_seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: DEFAULT_STEP,
            tol: DEFAULT_TOL,
            sample_per_tensor: None,
            sample_seed: 0,
        }
    }
}

/// Spacing of f64 values near `x`.
fn ulp(x: f64) -> f64 {
    let x = x.abs().max(f64::MIN_POSITIVE);
    (x.log2().floor() - 52.0).exp2()
}

/// Compares analytic gradients of `f` with respect to every element of every
/// input tensor and trainable parameter against `(f(x+h) − f(x−h)) / 2h`.
pub fn grad_check_finite_diff<F: ScalarFn>(
    op_name: &str,
    f: F,
    params: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let opts = CheckOptions {
        step,
        tol,
        ..CheckOptions::default()
    };
    grad_check_with(op_name, f, params, inputs, &opts)
}

/// Like [`grad_check_finite_diff`], optionally on a seeded sample of each
/// tensor's elements.
///
/// The relative error of one element is `|a − n| / max(|a|, |n|, floor)`.
/// Rounding in `f` is set by its largest intermediate value `v`, so the
/// numeric derivative is only known to quanta of `ulp(v)/2h`. Elements below
/// `NOISE_QUANTA` quanta divided by `tol` cannot be resolved to `tol`
/// relative precision; the floor holds them to an absolute error of
/// `NOISE_QUANTA` quanta instead.
pub fn grad_check_with<F: ScalarFn>(
    op_name: &str,
    f: F,
    params: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    opts: &CheckOptions,
) -> Result<GradCheckReport> {
    let (step, tol) = (opts.step, opts.tol);
    if !(step > 0.0) {
        return Err(KagsError::Precondition(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let base = evaluate(&f, params, inputs)?;
    let again = evaluate(&f, params, inputs)?;
    if base.0.to_bits() != again.0.to_bits() {
        return Err(KagsError::Oracle(format!(
            "{op_name}: function is not deterministic ({} vs {})",
            base.0, again.0
        )));
    }

    let mut g = Graph::new(params);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.sample_seed);
    let mut pick = |n: usize| -> Vec<usize> {
        match opts.sample_per_tensor {
            Some(cap) if cap < n => {
                let mut idx = rand::seq::index::sample(&mut rng, n, cap).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        }
    };
    let mut slots = Vec::new();
    let mut analytic = Vec::new();
    for (i, (&v, t)) in vars.iter().zip(inputs).enumerate() {
        let grad = g.grad(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
        for e in pick(grad.len()) {
            slots.push((Slot::Input(i), e));
            analytic.push(grad[e]);
        }
    }
    let param_grads = g.take_param_grads();
    for id in params.ids() {
        let entry = params.entry(id);
        if !entry.trainable {
            continue;
        }
        let n = entry.value.numel();
        let grad = param_grads[id.index()]
            .as_ref()
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        for e in pick(n) {
            slots.push((Slot::Param(id), e));
            analytic.push(grad[e]);
        }
    }

    // Parameter perturbations work on one store copy per chunk, restoring
    // each element after use.
    let chunks: Vec<std::ops::Range<usize>> = (0..slots.len())
        .step_by(PERTURB_CHUNK)
        .map(|s| s..(s + PERTURB_CHUNK).min(slots.len()))
        .collect();
    // (derivative estimate, its rounding quantum) per element
    let numeric: Vec<Result<Vec<(f64, f64)>>> = par::map(&chunks, |range| {
        let mut ps = params.clone();
        let mut xs = inputs.to_vec();
        let mut out = Vec::with_capacity(range.len());
        for &(slot, e) in &slots[range.clone()] {
            let mut shifted = |delta: f64| -> Result<(f64, f64)> {
                match slot {
                    Slot::Input(i) => {
                        let orig = xs[i].data()[e];
                        xs[i].data_mut()[e] = orig + delta;
                        let v = evaluate(&f, params, &xs);
                        xs[i].data_mut()[e] = orig;
                        v
                    }
                    Slot::Param(id) => {
                        let orig = ps.get(id).data()[e];
                        ps.get_mut(id).data_mut()[e] = orig + delta;
                        let v = evaluate(&f, &ps, inputs);
                        ps.get_mut(id).data_mut()[e] = orig;
                        v
                    }
                }
            };
            let (plus, big_p) = shifted(step)?;
            let (minus, big_m) = shifted(-step)?;
            let quantum = ulp(big_p.max(big_m)) / (2.0 * step);
            out.push(((plus - minus) / (2.0 * step), quantum));
        }
        Ok(out)
    });
    let numeric: Vec<(f64, f64)> = numeric.into_iter().collect::<Result<Vec<_>>>()?.concat();

    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut floor = 1e-8f64;
    for (a, &(n, quantum)) in analytic.iter().zip(&numeric) {
        let elem_floor = (NOISE_QUANTA * quantum / tol).max(1e-8);
        floor = floor.max(elem_floor);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(elem_floor);
        max_abs = max_abs.max((a - n).abs());
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        floor,
        element_count: analytic.len(),
        passed: max_rel < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let params = ParamStore::new();
        let x = Tensor::from_rows(&[&[0.5, -1.5, 2.0], &[3.0, 0.1, -0.7]]);
        let r = grad_check_finite_diff(
            "sum_sq",
            |g: &mut Graph<'_, f64>, v: &[Var]| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            &params,
            &[x],
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-6, "{r}");
        assert_eq!(r.element_count, 6);
    }

    #[test]
    fn missing_gradient_path_is_caught() {
        // the constant copy hides half of d/dx (x·x) from the tape
        let params = ParamStore::new();
        let x = Tensor::from_rows(&[&[0.5, -1.5, 2.0]]);
        let r = grad_check_finite_diff(
            "detached",
            |g: &mut Graph<'_, f64>, v: &[Var]| {
                let c = g.constant(g.value(v[0]).clone());
                let p = g.mul(v[0], c)?;
                g.sum(p)
            },
            &params,
            &[x],
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_error - 0.5).abs() < 1e-6, "{r}");
    }

    #[test]
    fn zero_step_is_rejected() {
        let params = ParamStore::new();
        let err = grad_check_finite_diff(
            "x",
            |g: &mut Graph<'_, f64>, v: &[Var]| g.sum(v[0]),
            &params,
            &[Tensor::zeros(&[1, 1])],
            0.0,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, KagsError::Precondition(_)));
    }

    #[test]
    fn nondeterminism_is_detected() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let params = ParamStore::new();
        let err = grad_check_finite_diff(
            "flaky",
            |g: &mut Graph<'_, f64>, v: &[Var]| {
                let k = calls.fetch_add(1, Ordering::Relaxed) as f64;
                let s = g.sum(v[0])?;
                g.scale(s, 1.0 + k)
            },
            &params,
            &[Tensor::full(&[1, 2], 1.0)],
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, KagsError::Oracle(_)));
    }
}
