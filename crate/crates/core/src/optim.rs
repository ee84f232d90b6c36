//! Adam with bias correction, and the component freeze machinery.

use std::collections::{BTreeMap, BTreeSet};

use crate::autograd::Grads;
use crate::error::{Error, Result};
use crate::params::{Component, ParamSet};

#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: BTreeMap<String, Vec<f32>>,
    pub second_moment: BTreeMap<String, Vec<f32>>,
    pub step_count: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    /// Zero moments for every currently trainable parameter.
    pub fn new(params: &ParamSet, lr: f32) -> Self {
        let mut s = Self {
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        for (name, e) in params.iter().filter(|(_, e)| e.trainable) {
            s.first_moment.insert(name.clone(), vec![0.0; e.tensor.numel()]);
            s.second_moment.insert(name.clone(), vec![0.0; e.tensor.numel()]);
        }
        s
    }

    fn drop_entry(&mut self, name: &str) {
        self.first_moment.remove(name);
        self.second_moment.remove(name);
    }

    /// One Adam update. Gradients for non-trainable parameters are ignored;
    /// trainable parameters without a gradient keep their value and moments.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads<f32>) -> Result<()> {
        for name in grads.keys() {
            if !params.contains(name) {
                return Err(Error::UnknownParam(name.clone()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        for (name, g) in grads {
            let entry = params.get_mut(name).expect("checked above");
            if !entry.trainable {
                continue;
            }
            let m = self
                .first_moment
                .get_mut(name)
                .ok_or_else(|| Error::MissingMoment(name.clone()))?;
            let v = self
                .second_moment
                .get_mut(name)
                .ok_or_else(|| Error::MissingMoment(name.clone()))?;
            let p = entry.tensor.data_mut();
            if m.len() != p.len() || g.numel() != p.len() {
                return Err(Error::shape("adam_step", format!("`{name}` moment/grad/param sizes differ")));
            }
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] as f64 / bc1;
                let v_hat = v[i] as f64 / bc2;
                p[i] -= (self.lr as f64 * m_hat / (v_hat.sqrt() + self.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut Grads<f32>, max_norm: f32) -> f32 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Mark every parameter of the listed components non-trainable and drop
/// their optimizer state.
pub fn freeze(params: &mut ParamSet, components: &[Component], state: Option<&mut AdamState>) -> Result<()> {
    let present: BTreeSet<Component> = params.components().into_iter().collect();
    if let Some(c) = components.iter().find(|c| !present.contains(c)) {
        return Err(Error::UnknownComponent(c.to_string()));
    }
    let mut frozen = Vec::new();
    for (name, e) in params.iter_mut() {
        if components.contains(&e.component) {
            e.trainable = false;
            frozen.push(name.clone());
        }
    }
    if let Some(s) = state {
        for name in frozen {
            s.drop_entry(&name);
        }
    }
    Ok(())
}

/// Make exactly the listed components trainable; everything else is frozen.
pub fn train_only(params: &mut ParamSet, components: &[Component]) -> Result<()> {
    let present: BTreeSet<Component> = params.components().into_iter().collect();
    if let Some(c) = components.iter().find(|c| !present.contains(c)) {
        return Err(Error::UnknownComponent(c.to_string()));
    }
    params.set_trainable_where(|_, c| components.contains(&c));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_params(value: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![1], vec![value]).unwrap(), Component::Backbone);
        p.insert("e", Tensor::new(vec![1], vec![value]).unwrap(), Component::Expert(0));
        p
    }

    fn grads(pairs: &[(&str, f32)]) -> Grads<f32> {
        pairs
            .iter()
            .map(|(n, g)| (n.to_string(), Tensor::new(vec![1], vec![*g]).unwrap()))
            .collect()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = scalar_params(1.5);
        let mut s = AdamState::new(&p, 0.1);
        s.step(&mut p, &grads(&[("w", 0.0), ("e", 0.0)])).unwrap();
        assert_eq!(p.tensor("w").unwrap().data(), &[1.5]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn first_step_matches_bias_corrected_formula() {
        let mut p = scalar_params(0.0);
        let mut s = AdamState::new(&p, 0.1);
        s.step(&mut p, &grads(&[("w", 2.0)])).unwrap();
        let expected = -0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.tensor("w").unwrap().data()[0] as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn frozen_param_is_bit_identical() {
        let mut p = scalar_params(0.3);
        let mut s = AdamState::new(&p, 0.1);
        freeze(&mut p, &[Component::Expert(0)], Some(&mut s)).unwrap();
        let before = p.tensor("e").unwrap().clone();
        for _ in 0..100 {
            s.step(&mut p, &grads(&[("w", 1.0), ("e", 5.0)])).unwrap();
        }
        assert!(p.tensor("e").unwrap().bit_eq(&before));
        assert_ne!(p.tensor("w").unwrap().data()[0], 0.3);
        assert!(!s.first_moment.contains_key("e"));
    }

    #[test]
    fn missing_moment_is_an_error() {
        let mut p = scalar_params(0.0);
        let mut s = AdamState::new(&p, 0.1);
        s.first_moment.remove("w");
        assert!(matches!(
            s.step(&mut p, &grads(&[("w", 1.0)])),
            Err(Error::MissingMoment(_))
        ));
    }

    #[test]
    fn freeze_validates_components() {
        let mut p = scalar_params(0.0);
        assert!(matches!(
            freeze(&mut p, &[Component::Router], None),
            Err(Error::UnknownComponent(_))
        ));
        freeze(&mut p, &[], None).unwrap();
        assert!(p.iter().all(|(_, e)| e.trainable));
    }
}
