//! Finite-difference oracles shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub fn random_store(specs: &[(&str, &[usize])], seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids = specs
        .iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            store.add(*name, Tensor::new(shape, data))
        })
        .collect();
    (store, ids)
}

fn eval(store: &ParamStore, build: &impl Fn(&mut Graph) -> Var) -> f64 {
    let mut g = Graph::new(store);
    let l = build(&mut g);
    g.value(l).item()
}

/// Relative error with a small absolute floor on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences (step 1e-5) against the tape for every trainable scalar.
pub fn check_param_grads(store: &ParamStore, build: impl Fn(&mut Graph) -> Var) {
    check_param_grads_tol(store, build, 1e-5, 1e-6)
}

pub fn check_param_grads_tol(store: &ParamStore, build: impl Fn(&mut Graph) -> Var, h: f64, tol: f64) {
    let grads = {
        let mut g = Graph::new(store);
        let l = build(&mut g);
        g.backward(l)
    };
    let mut work = store.clone();
    for id in store.ids().filter(|&id| store.wants_grad(id)) {
        let n = store.get(id).numel();
        for i in 0..n {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&work, &build);
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&work, &build);
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
            let err = rel_err(analytic, numeric);
            assert!(
                err < tol,
                "{}[{}]: analytic {} numeric {} (rel {:.3e})",
                store.param(id).name,
                i,
                analytic,
                numeric,
                err
            );
        }
    }
}
