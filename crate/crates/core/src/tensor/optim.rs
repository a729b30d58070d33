use super::{FeatureMatrix, Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adaptive-moment descent with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<FeatureMatrix>,
    v: Vec<FeatureMatrix>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<FeatureMatrix> =
            store.iter().map(|(_, _, p)| FeatureMatrix::zeros(p.rows(), p.cols())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient only receive weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let keys: Vec<_> = store.keys().collect();
        for key in keys {
            let param = store.get_mut(key);
            let m = self.m[key.0].data_mut();
            let v = self.v[key.0].data_mut();
            let g = grads.get(key);
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.insert("x", FeatureMatrix::from_vec(1, 2, vec![3.0, -2.0]).unwrap());
        let mut opt = AdamW::new(&store, AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() });
        for _ in 0..500 {
            let grads = {
                let mut t = Tape::new(&store);
                let v = t.param(x);
                let sq = t.mul(v, v).unwrap();
                let s = t.sum_all(sq);
                t.backward(s).unwrap()
            };
            opt.step(&mut store, &grads);
        }
        assert!(store.get(x).data().iter().all(|v| v.abs() < 1e-2), "{:?}", store.get(x));
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut store = ParamStore::new();
        let x = store.insert("x", FeatureMatrix::from_vec(1, 2, vec![3.0, -2.0]).unwrap());
        let before = store.clone();
        let mut opt = AdamW::new(&store, AdamWConfig { lr: 0.0, ..Default::default() });
        let mut g = Gradients::zeros_like(&store);
        g.accumulate(&{
            let mut t = Tape::new(&store);
            let v = t.param(x);
            let s = t.sum_all(v);
            t.backward(s).unwrap()
        });
        opt.step(&mut store, &g);
        assert_eq!(store, before);
    }
}
