use super::{Element, Tensor, TensorError};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for a parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

impl Adam {
    /// One bias-corrected update. Gradients are checked before anything is
    /// modified, so a failed step leaves params and state untouched.
    pub fn step<T: Element>(
        &self,
        state: &mut AdamState<T>,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
    ) -> Result<(), TensorError> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(TensorError::Shape {
                op: "adam_step",
                detail: format!(
                    "{} params, {} grads, {} state slots",
                    params.len(),
                    grads.len(),
                    state.m.len()
                ),
            });
        }
        for (index, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != state.m[index].shape() {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    detail: format!("param {index}: {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            if !g.all_finite() {
                return Err(TensorError::NonFiniteGradient { index });
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let c1 = T::from_f64(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        let one = T::one();
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_signed_lr() {
        let opt = Adam {
            lr: 0.01,
            ..Adam::default()
        };
        let mut p = vec![Tensor::<f64>::from_vec([1, 1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap()];
        let g = vec![Tensor::from_vec([1, 1, 1, 3], vec![0.3, -5.0, 1e-3]).unwrap()];
        let mut st = AdamState::new(&p);
        opt.step(&mut st, &mut p, &g).unwrap();
        let expect = [0.99, 1.01, 0.99];
        for (a, b) in p[0].data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let opt = Adam::default();
        let mut p = vec![Tensor::<f32>::full([2, 1, 1, 2], 0.7)];
        let before = p.clone();
        let g = vec![Tensor::zeros([2, 1, 1, 2])];
        let mut st = AdamState::new(&p);
        opt.step(&mut st, &mut p, &g).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let opt = Adam::default();
        let mut p = vec![Tensor::<f64>::zeros([1, 1, 1, 1]), Tensor::zeros([1, 1, 1, 1])];
        let g = vec![Tensor::zeros([1, 1, 1, 1]), Tensor::scalar(f64::NAN)];
        let mut st = AdamState::new(&p);
        assert_eq!(
            opt.step(&mut st, &mut p, &g).unwrap_err(),
            TensorError::NonFiniteGradient { index: 1 }
        );
        assert_eq!(st.step, 0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let opt = Adam::default();
            let mut p = vec![Tensor::<f32>::full([1, 1, 2, 2], 0.1)];
            let mut st = AdamState::new(&p);
            for k in 0..10 {
                let g = vec![Tensor::full([1, 1, 2, 2], (k as f32 * 0.7).sin())];
                opt.step(&mut st, &mut p, &g).unwrap();
            }
            (p, st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }
}
