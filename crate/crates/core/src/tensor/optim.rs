use super::{ParamSet, Real};

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. `grads[i]` belongs to the i-th parameter; `None`
    /// means the parameter took no part in the loss.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Vec<T>>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let c1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::from_f64(self.lr), T::from_f64(self.eps));
        let one = T::one();
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(Some(g)) = grads.get(i) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (one - b1) * g[k];
                v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
