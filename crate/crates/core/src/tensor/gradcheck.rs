use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Options for [`grad_check_with`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub perturbation: f64,
    /// Check every `stride`-th entry of each parameter (1 = all entries).
    pub stride: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            perturbation: 1e-5,
            stride: 1,
        }
    }
}

/// Compare tape gradients with central differences over every parameter
/// entry. Returns `max |analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(store: &mut ParamStore, perturbation: f64, f: F) -> Result<f64>
where
    F: FnMut(&mut Graph<'_>) -> Result<Var>,
{
    grad_check_with(
        store,
        GradCheckOptions {
            perturbation,
            stride: 1,
        },
        f,
    )
}

pub fn grad_check_with<F>(store: &mut ParamStore, opts: GradCheckOptions, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Graph<'_>) -> Result<Var>,
{
    let h = opts.perturbation;
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Validation(format!(
            "perturbation {h} outside [1e-7, 1e-4]"
        )));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        let grads = g.backward(loss)?;
        let mut out: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        for (id, gr) in grads.param_grads() {
            out[id.index()].copy_from_slice(gr.data());
        }
        out
    };

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        let v = g.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::numeric("loss is not finite during gradient check"));
        }
        Ok(v)
    };

    let ids: Vec<_> = store.ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.value(id).len();
        for j in (0..n).step_by(opts.stride.max(1)) {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig - h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id.index()][j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_at_three() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0));
        let err = grad_check(&mut store, 1e-5, |g| {
            let v = g.param(x);
            let s = g.square(v);
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
        let mut g = Graph::with_params(&store);
        let v = g.param(x);
        let s = g.square(v);
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(v).unwrap().data()[0], 6.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.5));
        let mut g = Graph::with_params(&store);
        let v = g.param(x);
        let z = g.scale(v, 0.0);
        let c = g.add_scalar(z, 4.0);
        let l = g.sum(c);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(v).unwrap().data()[0], 0.0);
        let err = grad_check(&mut store, 1e-5, |g| {
            let v = g.param(x);
            let z = g.scale(v, 0.0);
            let c = g.add_scalar(z, 4.0);
            Ok(g.sum(c))
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn perturbation_range_enforced() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.0));
        let r = grad_check(&mut store, 1e-2, |g| {
            let v = g.param(x);
            Ok(g.sum(v))
        });
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.0));
        let r = grad_check(&mut store, 1e-5, |g| {
            let v = g.param(x);
            let s = g.scale(v, f64::INFINITY);
            Ok(g.sum(s))
        });
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
