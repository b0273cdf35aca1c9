//! Adam optimizer over named parameter sets.

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub struct AdamState<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: IndexMap<String, ArrayD<T>>,
    v: IndexMap<String, ArrayD<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    /// One bias-corrected Adam update. Gradients are read, not consumed.
    pub fn step(
        &mut self,
        params: &mut IndexMap<String, ArrayD<T>>,
        grads: &IndexMap<String, ArrayD<T>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of_f64(self.beta1), T::of_f64(self.beta2));
        let one = T::one();
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::MissingGrad(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            m.zip_mut_with(g, |mi, &gi| *mi = b1 * *mi + (one - b1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = b2 * *vi + (one - b2) * gi * gi);
            let (lr, eps) = (self.lr, self.eps);
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|pi, &mi, &vi| {
                let mhat = mi.as_f64() / bc1;
                let vhat = vi.as_f64() / bc2;
                *pi = T::of_f64(pi.as_f64() - lr * mhat / (vhat.sqrt() + eps));
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn single(v: f64) -> IndexMap<String, ArrayD<f64>> {
        let mut m = IndexMap::new();
        m.insert("p".to_string(), ArrayD::from_elem(IxDyn(&[1]), v));
        m
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = single(1.0);
        let grads = single(1.0);
        let mut st = AdamState::new(0.1);
        st.step(&mut params, &grads).unwrap();
        let p = params["p"][[0]];
        assert!((p - 0.9).abs() < 1e-6, "{p}");
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut params = single(2.5);
        let grads = single(0.0);
        let mut st = AdamState::new(0.1);
        st.step(&mut params, &grads).unwrap();
        assert_eq!(params["p"][[0]], 2.5);
    }

    #[test]
    fn converges_on_quadratic() {
        // minimize (p - 3)^2 from p = 0
        let mut params = single(0.0);
        let mut st = AdamState::new(0.1);
        for _ in 0..100 {
            let p = params["p"][[0]];
            let grads = single(2.0 * (p - 3.0));
            st.step(&mut params, &grads).unwrap();
        }
        let p = params["p"][[0]];
        assert!((p - 3.0).abs() < 0.1, "{p}");
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut params = single(1.0);
        let grads = IndexMap::new();
        let mut st = AdamState::new(0.1);
        let err = st.step(&mut params, &grads).unwrap_err();
        assert!(err.to_string().contains('p'));
    }
}
