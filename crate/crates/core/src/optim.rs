use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamKey;
use crate::error::{DgadError, Result};
use crate::networks::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state for the parameters of one or more [`ParamStore`]s.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    /// First and second moments keyed like the gradients.
    pub moments: BTreeMap<ParamKey, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, stores: &[&ParamStore<T>]) -> Self {
        let mut moments = BTreeMap::new();
        for s in stores {
            for (i, p) in s.params.iter().enumerate() {
                let z = Tensor::zeros(p.value.shape());
                moments.insert((s.group, i), (z.clone(), z));
            }
        }
        Adam {
            config,
            step: 0,
            moments,
        }
    }

    /// One bias-corrected update of every parameter that has a gradient.
    pub fn update(&mut self, stores: &mut [&mut ParamStore<T>], grads: &BTreeMap<ParamKey, Tensor<T>>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let lr = T::lit(c.learning_rate * (1.0 - c.beta2.powf(t)).sqrt() / (1.0 - c.beta1.powf(t)));
        let (b1, b2, eps) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        for (key, grad) in grads {
            let store = stores
                .iter_mut()
                .find(|s| s.group == key.0)
                .ok_or_else(|| DgadError::InvalidArgument(format!("no store for {key:?}")))?;
            let param = &mut store.params[key.1].value;
            let (m, v) = self
                .moments
                .get_mut(key)
                .ok_or_else(|| DgadError::InvalidArgument(format!("no moments for {key:?}")))?;
            param.expect_same_shape(grad)?;
            for (((p, &g), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                *p -= lr * *mi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamGroup;
    use crate::networks::{NetConfig, Networks};

    #[test]
    fn first_step_moves_each_weight_by_learning_rate() {
        let cfg = NetConfig {
            image_size: 8,
            image_channels: 1,
            latent_channels: 2,
            base_width: 1,
            ..Default::default()
        };
        let mut nets = Networks::<f64>::new(&cfg, 0).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &[&nets.encoder.store]);
        let before = nets.encoder.store.clone();
        let mut grads = BTreeMap::new();
        let shape = before.params[0].value.shape().to_vec();
        grads.insert((ParamGroup::Encoder, 0), Tensor::full(&shape, 0.3));
        adam.update(&mut [&mut nets.encoder.store], &grads).unwrap();
        let after = &nets.encoder.store;
        for (a, b) in after.params[0].value.data().iter().zip(before.params[0].value.data()) {
            assert!(((b - a) - 1e-4).abs() < 1e-9);
        }
        assert_eq!(after.params[1], before.params[1]);
    }
}
