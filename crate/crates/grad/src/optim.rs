//! Adam optimizer with decoupled-from-nothing, classic L2 weight decay
//! (decay folded into the gradient before the moment updates).

use crate::nn::VarStore;
use crate::tensor::Tensor;
use std::collections::HashMap;

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: HashMap<String, Slot>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, state: HashMap::new() }
    }

    /// Apply one update per named gradient, in the order given.
    pub fn step(&mut self, vs: &mut VarStore, grads: &[(String, Tensor)]) {
        for (name, g) in grads {
            let mut p = vs.get(name).clone();
            assert_eq!(p.shape(), g.shape(), "grad shape mismatch for {name}");
            let n = p.numel();
            let slot = self.state.entry(name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            slot.t += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
            let pd = p.data_mut();
            for i in 0..n {
                let gi = g.data()[i] + self.weight_decay * pd[i];
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * gi;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            vs.set(name, p);
        }
    }

    /// Optimizer moments as named tensors (`adam.<param>.m` / `.v` / `.t`),
    /// for checkpointing.
    pub fn export(&self) -> Vec<(String, Tensor)> {
        let mut names: Vec<&String> = self.state.keys().collect();
        names.sort();
        let mut out = Vec::new();
        for name in names {
            let slot = &self.state[name];
            out.push((format!("adam.{name}.m"), Tensor::new(&[slot.m.len()], slot.m.clone())));
            out.push((format!("adam.{name}.v"), Tensor::new(&[slot.v.len()], slot.v.clone())));
            out.push((format!("adam.{name}.t"), Tensor::scalar(slot.t as f64)));
        }
        out
    }

    pub fn import(&mut self, entries: &[(String, Tensor)]) {
        for (name, t) in entries {
            let Some(rest) = name.strip_prefix("adam.") else { continue };
            let (param, field) = rest.rsplit_once('.').expect("malformed adam state name");
            let slot = self.state.entry(param.to_string()).or_insert_with(|| Slot {
                m: Vec::new(),
                v: Vec::new(),
                t: 0,
            });
            match field {
                "m" => slot.m = t.data().to_vec(),
                "v" => slot.v = t.data().to_vec(),
                "t" => slot.t = t.item() as u64,
                other => panic!("unknown adam field {other}"),
            }
        }
    }
}
