//! Central-difference verification of reverse-mode gradients.

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Largest `|analytic − numeric| / max(1, |numeric|)` over every parameter
/// element, where `numeric` is the central difference with step `h`.
///
/// `loss` builds the scalar loss on a fresh graph over the given store.
pub fn finite_diff_check<F>(params: &ParamStore, h: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step h must be positive, got {h}")));
    }
    let analytic = {
        let mut g = Graph::new(params);
        let out = loss(&mut g)?;
        let value = g.value(out).item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {value}")));
        }
        g.backward(out)?.into_dense(params)
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let out = loss(&mut g)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    let mut work = params.clone();
    let mut worst = 0.0f64;
    for id in params.ids() {
        for k in 0..params.get(id).numel() {
            let orig = params.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id.0].data()[k];
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(3.0)).unwrap();
        let err = finite_diff_check(&store, 1e-6, |g| {
            let v = g.param(w);
            Ok(g.mul(v, v)?)
        })
        .unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn relu_at_one() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(1.0)).unwrap();
        let err = finite_diff_check(&store, 1e-6, |g| {
            let v = g.param(w);
            Ok(g.relu(v))
        })
        .unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(finite_diff_check(&store, 0.0, |g| Ok(g.param(w))).is_err());
        let err = finite_diff_check(&store, 1e-6, |g| {
            let v = g.param(w);
            Ok(g.scale(v, f64::INFINITY))
        });
        assert!(matches!(err, Err(Error::Numeric(_))));
    }
}
