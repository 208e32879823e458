use serde::{Deserialize, Serialize};

use crate::model::params::{ParamGroup, ParamStore};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// AdamW hyperparameters shared by both parameter groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Decoupled decay, applied to matrices only (not biases, norms).
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping. Config files
    /// write `false` for `None`.
    #[serde(default = "default_clip", deserialize_with = "clip_or_false", serialize_with = "clip_as_false")]
    pub max_grad_norm: Option<f64>,
}

fn clip_as_false<S: serde::Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(n) => s.serialize_f64(*n),
        None => s.serialize_bool(false),
    }
}

fn clip_or_false<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Clip {
        Norm(f64),
        Flag(bool),
    }
    match Option::<Clip>::deserialize(d)? {
        None | Some(Clip::Flag(false)) => Ok(None),
        Some(Clip::Norm(v)) => Ok(Some(v)),
        Some(Clip::Flag(true)) => Err(serde::de::Error::custom("max_grad_norm takes a number or `false`")),
    }
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_wd() -> f64 {
    0.0
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_wd(),
            max_grad_norm: default_clip(),
        }
    }
}

/// AdamW state for every parameter of a store.
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    cfg: AdamWConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: i32,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<S>) -> Self {
        let zeros = |p: &crate::model::Param<S>| vec![S::zero(); p.value.numel()];
        Self {
            cfg,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }

    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[Tensor<S>], lr_pretrained: f64, lr_new: f64) -> f64 {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt();
        let clip = match self.cfg.max_grad_norm {
            Some(max) if norm > max => max / (norm + 1e-6),
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step);
        let bc2 = 1.0 - b2.powi(self.step);
        let (b1s, b2s, eps, clip_s) = (S::lit(b1), S::lit(b2), S::lit(self.cfg.eps), S::lit(clip));
        for (i, g) in grads.iter().enumerate() {
            let group = params.param(i).group;
            let decay = params.param(i).value.rank() >= 2;
            let lr = match group {
                ParamGroup::Pretrained => lr_pretrained,
                ParamGroup::New => lr_new,
            };
            let step_size = S::lit(lr / bc1);
            let bc2_sqrt = S::lit(bc2.sqrt());
            let shrink = S::lit(1.0 - lr * self.cfg.weight_decay);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = params.tensor_mut(i).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j] * clip_s;
                m[j] = b1s * m[j] + (S::one() - b1s) * gj;
                v[j] = b2s * v[j] + (S::one() - b2s) * gj * gj;
                if decay {
                    w[j] *= shrink;
                }
                w[j] -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap(), ParamGroup::Pretrained);
        store.add("n", Tensor::from_f64(&[1], &[0.0]).unwrap(), ParamGroup::New);
        let cfg = AdamWConfig {
            max_grad_norm: None,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        let grads = vec![
            Tensor::from_f64(&[2], &[0.5, -2.0]).unwrap(),
            Tensor::from_f64(&[1], &[3.0]).unwrap(),
        ];
        opt.step(&mut store, &grads, 0.1, 0.2);
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
        assert!((store.get("n").unwrap().data()[0] + 0.2).abs() < 1e-6);
    }

    #[test]
    fn zero_rate_leaves_weights() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_f64(&[2, 1], &[1.0, -1.0]).unwrap(), ParamGroup::Pretrained);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.1, ..AdamWConfig::default() }, &store);
        let before = store.clone();
        opt.step(&mut store, &[Tensor::from_f64(&[2, 1], &[1.0, 1.0]).unwrap()], 0.0, 0.0);
        assert_eq!(store, before);
    }

    #[test]
    fn clip_disabled_by_false_and_round_trips() {
        let cfg: AdamWConfig = serde_json::from_str(r#"{"max_grad_norm": false}"#).unwrap();
        assert_eq!(cfg.max_grad_norm, None);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<AdamWConfig>(&text).unwrap(), cfg);
        let cfg: AdamWConfig = serde_json::from_str(r#"{"max_grad_norm": 0.5}"#).unwrap();
        assert_eq!(cfg.max_grad_norm, Some(0.5));
        assert!(serde_json::from_str::<AdamWConfig>(r#"{"max_grad_norm": true}"#).is_err());
    }
}
