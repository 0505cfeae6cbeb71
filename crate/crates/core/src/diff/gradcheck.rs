//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DiffError, Graph, ParamStore, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn scalar_of(g: &Graph, y: Var) -> Result<f64, DiffError> {
    if g.value(y).numel() != 1 {
        return Err(DiffError::NonScalar(g.shape(y).to_vec()));
    }
    Ok(g.item(y))
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences over every coordinate of `x`.
pub fn check_gradient<F>(f: F, x: &Tensor) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, DiffError>,
{
    let eval = |t: Tensor| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let v = g.input(t);
        let y = f(&mut g, v)?;
        scalar_of(&g, y)
    };

    let mut g = Graph::new();
    let v = g.input(x.clone());
    let y = f(&mut g, v)?;
    scalar_of(&g, y)?;
    g.backward(y)?;
    let analytic = g.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same check against the trainable parameters of a store. At most
/// `per_param` seeded coordinates are probed in each tensor so whole models
/// stay affordable.
pub fn check_param_gradients<F>(store: &mut ParamStore, f: F, per_param: usize, seed: u64) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, DiffError>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    scalar_of(&g, y)?;
    g.backward(y)?;
    g.accumulate_param_grads(store);
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.get(id).value.numel();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_param).into_vec()
        };
        for i in coords {
            let analytic = store.get(id).grad.data()[i];
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let mut gp = Graph::new();
            let yp = f(&mut gp, store)?;
            let fp = gp.item(yp);
            store.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let mut gm = Graph::new();
            let ym = f(&mut gm, store)?;
            let fm = gm.item(ym);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    store.zero_grad();
    Ok(worst)
}
