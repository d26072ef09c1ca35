//! Central finite-difference gradient checking.

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Precision at which loss values enter the finite-difference quotient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    /// Loss values are rounded to `f32` before differencing.
    F32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares the analytic gradient of a scalar loss against
/// `(f(x + eps) - f(x - eps)) / (2 eps)` for every element of every
/// gradient-requiring parameter in `store`.
///
/// The error per element is `|analytic - numeric| / max(1, |analytic|)`.
/// `store` is restored to its original values on return.
pub fn grad_check<F, E>(store: &mut ParamStore, eps: f64, precision: Precision, mut loss_fn: F) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, E>,
    E: From<TensorError>,
{
    let saved_grads: Vec<Option<Vec<f64>>> = store.iter().map(|(_, t)| t.grad().map(<[f64]>::to_vec)).collect();
    store.zero_grads();
    let analytic = {
        let mut g = Graph::new();
        let out = loss_fn(&mut g, store)?;
        let value = g.value(out);
        if value.numel() != 1 {
            return Err(TensorError::NotScalar(value.shape().to_vec()).into());
        }
        if !value.data()[0].is_finite() {
            return Err(TensorError::NonFinite(format!("loss = {}", value.data()[0])).into());
        }
        let grads = g.backward(out).map_err(E::from)?;
        g.accumulate_param_grads(&grads, store, 1.0).map_err(E::from)?;
        store
            .iter()
            .map(|(_, t)| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect::<Vec<_>>()
    };

    let mut eval = |store: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new();
        let out = loss_fn(&mut g, store)?;
        let v = g.item(out).map_err(E::from)?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite(format!("loss = {v}")).into());
        }
        Ok(match precision {
            Precision::F64 => v,
            Precision::F32 => v as f32 as f64,
        })
    };

    let ids: Vec<_> = store.ids().collect();
    let mut report = GradCheckReport { params: Vec::new() };
    for id in ids {
        if !store.get(id).requires_grad() {
            continue;
        }
        let mut worst: f64 = 0.0;
        let n = store.get(id).numel();
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic[id.index()][i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
        report.params.push(ParamCheck {
            name: store.name(id).to_string(),
            elements: n,
            max_rel_err: worst,
        });
    }

    store.zero_grads();
    for (id, saved) in store.ids().collect::<Vec<_>>().into_iter().zip(saved_grads) {
        if let Some(g) = saved {
            store.get_mut(id).accumulate_grad(&g, 1.0).map_err(E::from)?;
        }
    }
    Ok(report)
}
