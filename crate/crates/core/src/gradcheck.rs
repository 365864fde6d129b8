//! Central finite-difference checks for graph gradients (double precision).

use crate::autograd::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Relative error `||a - n|| / max(||a||, ||n||)` between analytic and
/// numeric gradient vectors; `0` when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

/// Checks gradients of `f` with respect to each of `inputs`; returns the
/// worst relative error over inputs.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    step: f64,
    f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::detached();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::detached();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.of(vars[k]) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; x.len()],
        };
        let mut numeric = vec![0.0; x.len()];
        let mut work = inputs.to_vec();
        for i in 0..x.len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = eval(&work);
            work[k].data_mut()[i] = orig - step;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            numeric[i] = (up - down) / (2.0 * step);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Checks gradients of a loss built from a parameter store with respect to
/// every parameter; returns the worst relative error over parameters.
pub fn check_params(
    store: &ParamStore<f64>,
    step: f64,
    f: impl Fn(&mut Graph<'_, f64>) -> Var,
) -> f64 {
    let grads = {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        g.backward(out).into_param_grads(store.len())
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        let analytic: Vec<f64> = match &grads[id.index()] {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; store.get(id).len()],
        };
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let up = {
                let mut g = Graph::inference(&work);
                let out = f(&mut g);
                g.value(out).data()[0]
            };
            work.get_mut(id).data_mut()[i] = orig - step;
            let down = {
                let mut g = Graph::inference(&work);
                let out = f(&mut g);
                g.value(out).data()[0]
            };
            work.get_mut(id).data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        if std::env::var_os("GRADCHECK_DEBUG").is_some() {
            eprintln!("{}: {:e}", store.name(id), relative_error(&analytic, &numeric));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}
