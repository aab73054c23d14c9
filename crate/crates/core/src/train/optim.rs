use crate::autodiff::{ParamGrads, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamW {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `θ ← θ − lr·wd·θ`, then the bias-corrected Adam update.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &ParamGrads,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, store has {}, gradients {}",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let AdamWConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.get(id).data();
            let theta = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..theta.len() {
                theta[i] -= lr * weight_decay * theta[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
