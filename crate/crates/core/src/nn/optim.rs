use super::{Scalar, Tensor};

/// Plain SGD with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        let lr = T::of(self.lr);
        if self.momentum == 0.0 {
            for (p, g) in params.iter_mut().zip(grads) {
                for (w, d) in p.data.iter_mut().zip(&g.data) {
                    *w = *w - lr * *d;
                }
            }
            return;
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(&g.shape)).collect();
        }
        let mu = T::of(self.momentum);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, d), vel) in p.data.iter_mut().zip(&g.data).zip(&mut v.data) {
                *vel = mu * *vel + *d;
                *w = *w - lr * *vel;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(&g.shape)).collect();
            self.v = grads.iter().map(|g| Tensor::zeros(&g.shape)).collect();
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t));
        let c2 = T::of(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, d), mi), vi) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                *mi = b1 * *mi + (T::one() - b1) * *d;
                *vi = b2 * *vi + (T::one() - b2) * *d * *d;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
