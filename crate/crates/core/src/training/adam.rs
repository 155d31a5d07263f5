use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParameterStore;
use crate::tensor::Tensor;

/// Adam moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed steps.
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    /// Zero moments shaped like `store`, β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: BTreeMap<String, Tensor> = store
            .iter()
            .map(|(p, t)| (p.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
///
/// All gradients are checked before anything is modified, so a failed call
/// leaves both the store and the state untouched.
pub fn adam_step(
    store: &mut ParameterStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (path, p) in store.iter() {
        let g = grads.get(path).ok_or_else(|| Error::MissingGrad { path: path.clone() })?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient of `{path}` is {:?}, parameter is {:?}", g.shape(), p.shape()),
            ));
        }
        if !state.m.contains_key(path) || !state.v.contains_key(path) {
            return Err(Error::Usage(format!("optimizer state has no moments for `{path}`")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (path, p) in store.iter_mut() {
        let g = &grads[path];
        let m = state.m.get_mut(path).expect("checked above");
        let v = state.v.get_mut(path).expect("checked above");
        for (((w, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(v));
        s
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut s = scalar_store(0.7);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &grad(0.0), &mut st, 1e-3).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[0.7]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn missing_gradient_names_path() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s);
        let err = adam_step(&mut s, &BTreeMap::new(), &mut st, 1e-3).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn constant_gradient_steps_by_lr() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s);
        let mut prev = 0.0;
        for _ in 0..200 {
            adam_step(&mut s, &grad(3.0), &mut st, 1e-2).unwrap();
            let w = s.get("w").unwrap().data()[0];
            assert!(((prev - w) - 1e-2).abs() < 1e-6);
            prev = w;
        }
    }
}
