use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - T::lit(self.beta1.powf(self.t as f64));
        let c2 = T::one() - T::lit(self.beta2.powf(self.t as f64));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
