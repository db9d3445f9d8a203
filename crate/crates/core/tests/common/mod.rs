#![allow(dead_code)]

use maulab::numerics::{Graph, ParamStore, Var};

/// Central finite-difference gradient of `f` with respect to every scalar
/// of `store`, in registration order.
pub fn finite_difference<F>(store: &ParamStore, step: f64, f: F) -> Vec<Vec<f64>>
where
    F: Fn(&ParamStore) -> f64,
{
    let mut work = store.clone();
    let mut out = Vec::new();
    for id in store.ids() {
        let n = store.get(id).numel();
        let mut g = vec![0.0; n];
        for i in 0..n {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let plus = f(&work);
            work.get_mut(id).data_mut()[i] = orig - step;
            let minus = f(&work);
            work.get_mut(id).data_mut()[i] = orig;
            g[i] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// `|a − n| / max(|a|, |n|, floor)`; the floor only matters for
/// gradients that are numerically zero.
pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Largest relative error between the tape's analytic gradients and
/// finite differences of the same loss builder.
pub fn max_grad_error<F>(store: &ParamStore, build: F) -> (f64, String)
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let analytic = g.backward(loss).unwrap().param_grads(store);
    let numeric = finite_difference(store, 1e-5, |s| {
        let mut g = Graph::new();
        let l = build(&mut g, s);
        g.value(l).item()
    });
    let mut worst = (0.0, String::new());
    for (id, num) in store.ids().zip(&numeric) {
        for (i, (&a, &n)) in analytic.get(id).data().iter().zip(num).enumerate() {
            let e = rel_error(a, n, 1e-6);
            if e > worst.0 {
                worst = (e, format!("{}[{i}] analytic {a:e} numeric {n:e}", store.name(id)));
            }
        }
    }
    worst
}
