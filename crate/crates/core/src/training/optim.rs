use std::collections::BTreeMap;

use super::TrainError;
use crate::nn::{Model, Scalar, Tensor};

/// One elementwise RMSprop update:
/// `v = rho v + (1 - rho) g^2`, `theta -= lr g / (sqrt(v) + eps)`.
pub fn rmsprop_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    v: &mut [T],
    lr: f64,
    rho: f64,
    eps: f64,
) -> Result<(), TrainError> {
    if theta.len() != grad.len() || theta.len() != v.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "parameter {} / gradient {} / state {} lengths differ",
            theta.len(),
            grad.len(),
            v.len()
        )));
    }
    let (lr, rho, eps) = (T::lit(lr), T::lit(rho), T::lit(eps));
    let one_minus = T::one() - rho;
    for ((p, &g), s) in theta.iter_mut().zip(grad).zip(v.iter_mut()) {
        *s = rho * *s + one_minus * g * g;
        *p = *p - lr * g / (s.sqrt() + eps);
    }
    Ok(())
}

/// Per-parameter RMSprop state keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct RmsProp<T> {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    state: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(learning_rate: f64, rho: f64, epsilon: f64) -> Self {
        Self { learning_rate, rho, epsilon, state: BTreeMap::new() }
    }

    pub fn state(&self, name: &str) -> Option<&[T]> {
        self.state.get(name).map(Vec::as_slice)
    }

    /// Applies `grads` to the matching parameters of `model`.
    pub fn step(&mut self, model: &mut Model<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<(), TrainError> {
        for (name, g) in grads {
            let p = model
                .param_mut(name)
                .ok_or_else(|| TrainError::ShapeMismatch(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(TrainError::ShapeMismatch(format!("{name}: {:?} vs {:?}", p.shape(), g.shape())));
            }
            let v = self.state.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            rmsprop_update(p.data_mut(), g.data(), v, self.learning_rate, self.rho, self.epsilon)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_update() {
        let (mut p, mut v) = ([0.0f64], [0.0f64]);
        rmsprop_update(&mut p, &[1.0], &mut v, 0.001, 0.9, 0.0).unwrap();
        assert!((v[0] - 0.1).abs() < 1e-15);
        // -0.001 / sqrt(0.1)
        assert!((p[0] + 0.0031623).abs() < 1e-7, "{}", p[0]);
    }

    #[test]
    fn zero_gradient_only_decays_state() {
        let (mut p, mut v) = ([1.5f64, -2.0], [0.4f64, 0.0]);
        rmsprop_update(&mut p, &[0.0, 0.0], &mut v, 0.001, 0.9, 1e-7).unwrap();
        assert_eq!(p, [1.5, -2.0]);
        assert!((v[0] - 0.36).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let (mut p, mut v) = ([0.0f32; 2], [0.0f32; 2]);
        assert!(matches!(rmsprop_update(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0), Err(TrainError::ShapeMismatch(_))));
    }

    #[test]
    fn tensors_update_independently() {
        let (mut a, mut va) = ([1.0f64], [0.0f64]);
        let (mut b, mut vb) = ([1.0f64], [0.0f64]);
        rmsprop_update(&mut a, &[2.0], &mut va, 0.01, 0.9, 1e-7).unwrap();
        rmsprop_update(&mut b, &[0.0], &mut vb, 0.01, 0.9, 1e-7).unwrap();
        assert_eq!(b, [1.0]);
        assert!(a[0] < 1.0);
    }

    proptest! {
        #[test]
        fn state_stays_nonnegative(grads in proptest::collection::vec(-1e3f64..1e3, 1..64), rho in 0.0f64..1.0) {
            let mut p = vec![0.0; grads.len()];
            let mut v = vec![0.0; grads.len()];
            for _ in 0..3 {
                rmsprop_update(&mut p, &grads, &mut v, 0.001, rho, 1e-7).unwrap();
                prop_assert!(v.iter().all(|&x| x >= 0.0));
            }
        }
    }
}
