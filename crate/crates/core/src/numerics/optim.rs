use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

/// Decoupled-weight-decay Adam settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
}

/// Cosine decay from `peak` to `min` after a linear warmup. `progress` and
/// `warmup` are in epochs (fractional progress allowed).
pub fn cosine_lr(progress: f64, total: f64, warmup: f64, peak: f64, min: f64) -> f64 {
    if warmup > 0.0 && progress < warmup {
        return peak * (progress + 1.0).min(warmup) / warmup;
    }
    let span = (total - warmup).max(1e-12);
    let t = ((progress - warmup) / span).clamp(0.0, 1.0);
    min + 0.5 * (peak - min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// One update at learning rate `lr`. `lr_scale(name)` multiplies the rate
    /// per parameter (layer-wise decay); weight decay skips vectors.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        lr_scale: impl Fn(&str) -> f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let decay = if p.shape().len() >= 2 { self.cfg.weight_decay } else { 0.0 };
            let rate = lr * lr_scale(name);
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
                let mhat = st.m[i] / c1;
                let vhat = st.v[i] / c2;
                *w -= rate * (mhat / (vhat.sqrt() + self.cfg.eps) + decay * *w);
            }
        }
        params.bump_version();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(0.0, 10.0, 0.0, 1.0, 0.1) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(10.0, 10.0, 0.0, 1.0, 0.1) - 0.1).abs() < 1e-12);
        assert!(cosine_lr(0.0, 10.0, 2.0, 1.0, 0.1) < 1.0);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::full(&[2, 2], 0.5));
        let before = params.clone();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::full(&[2, 2], 3.0));
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            min_lr: 0.0,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.05,
            warmup_epochs: 0,
        });
        opt.update(&mut params, &grads, 0.0, |_| 1.0);
        assert_eq!(params.get("w").unwrap(), before.get("w").unwrap());
    }
}
