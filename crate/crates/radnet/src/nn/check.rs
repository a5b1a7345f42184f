//! Finite-difference verification of analytic gradients.
//!
//! Used by the unit tests of every operation and layer, and by the acceptance
//! suite to certify the loss gradients end to end. The builder's output is
//! scalarized by a fixed random projection so every output coordinate
//! influences the check.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::IxDyn;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::tape::{Arr, Tape, T};

/// Uniform random tensor in `[lo, hi)`, deterministic in `seed`.
pub fn random_arr(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Arr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Arr::from_shape_simple_fn(IxDyn(shape), || rng.random_range(lo..hi))
}

/// Result of one gradient comparison.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Largest scaled disagreement `|a - f| / max(1, |a|, |f|)` over all
    /// coordinates of all inputs.
    pub max_err: f64,
    /// Input name and flat coordinate where it occurred.
    pub worst: Option<(String, usize)>,
}

/// Compares analytic gradients against central finite differences.
///
/// `f` builds the graph from the bound inputs; its output may have any shape
/// and is reduced to a scalar with a fixed random projection.
pub fn gradcheck_report(
    inputs: &[(&str, Arr)],
    eps: f64,
    f: impl Fn(&Tape, &HashMap<String, T>) -> T,
) -> GradReport {
    let proj_of = |out: &T| random_arr(out.shape(), -1.0, 1.0, 0x9e3779b9);

    let eval = |vals: &HashMap<String, Arr>| -> f64 {
        let tape = Tape::inference();
        let bound: HashMap<String, T> =
            vals.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect();
        let out = f(&tape, &bound);
        let proj = proj_of(&out);
        (&*out.v * &proj).sum()
    };

    // analytic pass
    let tape = Tape::new();
    let mut bound = HashMap::new();
    for (name, v) in inputs {
        bound.insert((*name).to_owned(), tape.param(name, Rc::new(v.clone())));
    }
    let out = f(&tape, &bound);
    let proj = tape.constant(proj_of(&out));
    let loss = tape.sum_all(&tape.mul(&out, &proj));
    let grads = tape.backward(&loss).expect("gradcheck backward");

    // numeric pass
    let base: HashMap<String, Arr> =
        inputs.iter().map(|(k, v)| ((*k).to_owned(), v.clone())).collect();
    let mut max_err = 0.0f64;
    let mut worst = None;
    for (name, v) in inputs {
        // normalize layout: backward may hand back permuted-stride arrays,
        // and the flat index below must mean the same logical coordinate on
        // both sides of the comparison
        let analytic = grads
            .get(name)
            .map(|g| g.as_standard_layout().into_owned())
            .unwrap_or_else(|| Arr::zeros(IxDyn(v.shape())));
        let n = v.len();
        for idx in 0..n {
            let mut hi = base.clone();
            let mut lo = base.clone();
            {
                let slot = hi.get_mut(*name).unwrap().as_slice_memory_order_mut().unwrap();
                slot[idx] += eps;
            }
            {
                let slot = lo.get_mut(*name).unwrap().as_slice_memory_order_mut().unwrap();
                slot[idx] -= eps;
            }
            let fd = (eval(&hi) - eval(&lo)) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[idx];
            let err = (a - fd).abs() / 1.0f64.max(a.abs()).max(fd.abs());
            if err > max_err {
                max_err = err;
                worst = Some(((*name).to_owned(), idx));
            }
        }
    }
    GradReport { max_err, worst }
}

/// Asserts the analytic and finite-difference gradients agree to `tol`.
pub fn gradcheck(
    inputs: &[(&str, Arr)],
    tol: f64,
    f: impl Fn(&Tape, &HashMap<String, T>) -> T,
) {
    let report = gradcheck_report(inputs, 1e-5, f);
    assert!(
        report.max_err <= tol,
        "gradient mismatch {:.3e} > {tol:.0e} at {:?}",
        report.max_err,
        report.worst
    );
}

/// Gradient check over every trainable parameter of a store, driving the real
/// `forward` path of layers (including parameter binding).
///
/// `build` runs the forward pass and returns any-shaped output; it is
/// scalarized with a fixed random projection. Expensive in the number of
/// parameter scalars; use desk-scale layers.
pub fn gradcheck_store_report(
    store: &mut crate::nn::ParamStore,
    eps: f64,
    build: impl Fn(&Tape, &crate::nn::ParamStore) -> T,
) -> GradReport {
    let proj_of = |out: &T| random_arr(out.shape(), -1.0, 1.0, 0x9e3779b9);

    // analytic
    let tape = Tape::new();
    let out = build(&tape, store);
    let proj = tape.constant(proj_of(&out));
    let loss = tape.sum_all(&tape.mul(&out, &proj));
    let grads = tape.backward(&loss).expect("gradcheck backward");
    drop(loss);
    drop(tape);

    let eval = |store: &crate::nn::ParamStore| -> f64 {
        let tape = Tape::inference();
        let out = build(&tape, store);
        let proj = proj_of(&out);
        (&*out.v * &proj).sum()
    };

    let mut max_err = 0.0f64;
    let mut worst = None;
    let names = store.names("");
    for name in &names {
        if store.is_trainable(name) != Some(true) {
            continue;
        }
        let analytic = grads
            .get(name)
            .map(|g| g.as_standard_layout().into_owned())
            .unwrap_or_else(|| Arr::zeros(store.get(name).unwrap().raw_dim()));
        let n = store.get(name).unwrap().len();
        for idx in 0..n {
            store.update(name, |v| v.as_slice_mut().unwrap()[idx] += eps).unwrap();
            let hi = eval(store);
            store.update(name, |v| v.as_slice_mut().unwrap()[idx] -= 2.0 * eps).unwrap();
            let lo = eval(store);
            store.update(name, |v| v.as_slice_mut().unwrap()[idx] += eps).unwrap();
            let fd = (hi - lo) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[idx];
            let err = (a - fd).abs() / 1.0f64.max(a.abs()).max(fd.abs());
            if err > max_err {
                max_err = err;
                worst = Some((name.clone(), idx));
            }
        }
    }
    GradReport { max_err, worst }
}

/// Asserting wrapper around [`gradcheck_store_report`].
pub fn gradcheck_store(
    store: &mut crate::nn::ParamStore,
    tol: f64,
    build: impl Fn(&Tape, &crate::nn::ParamStore) -> T,
) {
    let report = gradcheck_store_report(store, 1e-5, build);
    assert!(
        report.max_err <= tol,
        "gradient mismatch {:.3e} > {tol:.0e} at {:?}",
        report.max_err,
        report.worst
    );
}
