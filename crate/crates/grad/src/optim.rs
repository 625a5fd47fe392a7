use crate::{Float, Tensor};

/// Adam with bias correction. Moments are kept per parameter slot, so a slot must
/// always receive the same tensor across steps.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        assert_eq!(
            self.m.len(),
            params.len(),
            "parameter set changed between steps"
        );
        self.step += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let bc1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (one - b1) * gv;
                v[j] = b2 * v[j] + (one - b2) * gv * gv;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Tensor::<f64>::new(vec![2], vec![1.0, -1.0]);
        let g = Tensor::<f64>::new(vec![2], vec![3.0, -0.5]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut p], &[&g]);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameter_bit_identical() {
        let mut p = Tensor::<f64>::new(vec![3], vec![0.25, 1.5, -2.0]);
        let before = p.clone();
        let g = Tensor::<f64>::zeros(&[3]);
        let mut opt = Adam::new(0.5);
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[&g]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::<f64>::new(vec![1], vec![5.0]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = Tensor::new(vec![1], vec![2.0 * (p.data()[0] - 2.0)]);
            opt.step(&mut [&mut p], &[&g]);
        }
        assert!((p.data()[0] - 2.0).abs() < 1e-2);
    }
}
