//! Central-difference gradient validation.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Bound, Graph, Mat, Var};
use super::tensor::TensorBundle;

pub const FD_STEP: f64 = 1e-4;
pub const FD_COORDS: usize = 50;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Worst coordinate as (index, analytic, numeric).
    pub worst: Option<(usize, f64, f64)>,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients from
/// turning rounding noise into huge ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compare `f`'s analytic gradient at `params` with central differences on up
/// to 50 coordinates chosen with `seed`. `f` returns `(value, gradient)`.
pub fn finite_diff_grad_check<F>(mut f: F, params: &[f64], tolerance: f64, seed: u64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "gradient length");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<usize> = if params.len() <= FD_COORDS {
        (0..params.len()).collect()
    } else {
        sample(&mut rng, params.len(), FD_COORDS).into_vec()
    };
    let mut x = params.to_vec();
    let mut max_rel_error: f64 = 0.0;
    let mut worst = None;
    for &i in &coords {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let plus = f(&x).0;
        x[i] = orig - FD_STEP;
        let minus = f(&x).0;
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = relative_error(analytic[i], numeric);
        if err > max_rel_error || worst.is_none() {
            max_rel_error = max_rel_error.max(err);
            worst = Some((i, analytic[i], numeric));
        }
    }
    GradCheckReport {
        passed: max_rel_error < tolerance,
        max_rel_error,
        coords_checked: coords.len(),
        worst,
    }
}

/// Run [`finite_diff_grad_check`] over every gradient-carrying tensor of
/// `bundle` (running statistics excluded). `build` records a scalar loss using
/// the bound parameters.
pub fn check_graph_gradients<B>(bundle: &TensorBundle, build: B, tolerance: f64, seed: u64) -> GradCheckReport
where
    B: Fn(&mut Graph, &Bound) -> Var,
{
    let trainable: Vec<bool> = bundle
        .entries()
        .iter()
        .map(|(n, _)| !n.contains("running_"))
        .collect();
    let base: Vec<Mat> = bundle.entries().iter().map(|(_, t)| Mat::from_tensor(t)).collect();
    let flat: Vec<f64> = base
        .iter()
        .zip(&trainable)
        .filter(|(_, t)| **t)
        .flat_map(|(m, _)| m.data.iter().copied())
        .collect();
    let names: Vec<String> = bundle.entries().iter().map(|(n, _)| n.clone()).collect();

    let eval = |x: &[f64]| {
        let mut g = Graph::new();
        let mut offset = 0;
        let mut mats = Vec::with_capacity(base.len());
        for (m, &t) in base.iter().zip(&trainable) {
            if t {
                let mut m = m.clone();
                let n = m.data.len();
                m.data.copy_from_slice(&x[offset..offset + n]);
                offset += n;
                mats.push((m, true));
            } else {
                mats.push((m.clone(), false));
            }
        }
        let bound = Bound::from_leaves(&mut g, &names, mats);
        let loss = build(&mut g, &bound);
        let grads = g.backward(loss);
        let mut flat_grad = Vec::with_capacity(x.len());
        for ((v, m), &t) in bound.vars().iter().zip(&base).zip(&trainable) {
            if !t {
                continue;
            }
            match grads.get(*v) {
                Some(gm) => flat_grad.extend_from_slice(&gm.data),
                None => flat_grad.extend(std::iter::repeat_n(0.0, m.data.len())),
            }
        }
        (g.value(loss).data[0], flat_grad)
    };
    finite_diff_grad_check(eval, &flat, tolerance, seed)
}
