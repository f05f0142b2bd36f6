//! Parameter store, per-step session, and layer building blocks.
//!
//! Parameters live in a [`VarStore`] keyed by dotted path names. Each
//! training step opens a fresh [`Sess`], binds the parameters it touches as
//! graph leaves (or constants when frozen), and hands back named gradients
//! for the optimizer. Layers own only their parameter names, so the same
//! layer can run in any number of independent sessions.

use crate::graph::{Grads, Graph, Id};
use crate::kernels::{ConvSpec, Exec};
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::{BTreeMap, HashMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarKind {
    Param,
    Buffer,
}

/// Named tensors: trainable parameters plus non-trainable buffers
/// (normalization running statistics).
#[derive(Default)]
pub struct VarStore {
    entries: BTreeMap<String, (VarKind, Tensor)>,
}

impl VarStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, kind: VarKind, t: Tensor) {
        let prev = self.entries.insert(name.to_string(), (kind, t));
        assert!(prev.is_none(), "duplicate variable {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown variable {name}")).1
    }

    pub fn kind(&self, name: &str) -> VarKind {
        self.entries.get(name).unwrap_or_else(|| panic!("unknown variable {name}")).0
    }

    pub fn set(&mut self, name: &str, t: Tensor) {
        let slot = self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown variable {name}"));
        assert_eq!(slot.1.shape(), t.shape(), "shape mismatch setting {name}");
        slot.1 = t;
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Deterministic (sorted) iteration over all entries.
    pub fn iter(&self) -> impl Iterator<Item = (&str, VarKind, &Tensor)> {
        self.entries.iter().map(|(n, (k, t))| (n.as_str(), *k, t))
    }

    /// Total number of trainable scalar parameters.
    pub fn num_params(&self) -> usize {
        self.entries
            .values()
            .filter(|(k, _)| *k == VarKind::Param)
            .map(|(_, t)| t.numel())
            .sum()
    }
}

/// How a layer participates in one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Mode {
    /// Bind parameters as differentiable leaves.
    pub trainable: bool,
    /// Normalize with batch statistics instead of running statistics.
    pub batch_stats: bool,
    /// Push running-statistic updates for the caller to apply after the step.
    pub update_stats: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode { trainable: true, batch_stats: true, update_stats: true };
    pub const EVAL: Mode = Mode { trainable: false, batch_stats: false, update_stats: false };
    /// Frozen weights but batch statistics — a discriminator evaluated
    /// inside a generator step.
    pub const FROZEN_BATCH: Mode = Mode { trainable: false, batch_stats: true, update_stats: false };
}

/// One forward/backward pass: a graph plus the variable bindings made in it.
pub struct Sess<'a> {
    pub g: Graph,
    vs: &'a VarStore,
    by_name: HashMap<String, (Id, bool)>,
    bound: Vec<(String, Id)>,
    buffer_updates: Vec<(String, Tensor)>,
}

impl<'a> Sess<'a> {
    pub fn new(vs: &'a VarStore, exec: Exec) -> Self {
        Self {
            g: Graph::new(exec),
            vs,
            by_name: HashMap::new(),
            bound: Vec::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &VarStore {
        self.vs
    }

    /// Bind a stored variable into the graph. Repeated binds return the same
    /// node so weight-sharing (and gradient accumulation across uses) is
    /// automatic.
    pub fn var(&mut self, name: &str, trainable: bool) -> Id {
        if let Some(&(id, bound_trainable)) = self.by_name.get(name) {
            assert_eq!(
                bound_trainable, trainable,
                "{name} bound both trainable and frozen in one session"
            );
            return id;
        }
        let value = self.vs.get(name).clone();
        let id = if trainable { self.g.leaf(value) } else { self.g.constant(value) };
        self.by_name.insert(name.to_string(), (id, trainable));
        if trainable {
            self.bound.push((name.to_string(), id));
        }
        id
    }

    /// Latest pending value for a buffer, falling back to the store.
    pub fn buffer_value(&self, name: &str) -> Tensor {
        self.buffer_updates
            .iter()
            .rev()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| self.vs.get(name).clone())
    }

    pub fn push_buffer_update(&mut self, name: &str, t: Tensor) {
        self.buffer_updates.push((name.to_string(), t));
    }

    /// Apply pending buffer updates to the store (call after the step).
    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Gradients of every trainable variable bound in this session, in
    /// first-bind order.
    pub fn named_grads(&self, grads: &Grads) -> Vec<(String, Tensor)> {
        self.bound
            .iter()
            .filter_map(|(n, id)| grads.get(*id).map(|g| (n.clone(), g.clone())))
            .collect()
    }
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// 3-d convolution layer. Weight [Co,Ci,Kt,Kh,Kw], fan-in-scaled init.
pub struct Conv3d {
    w: String,
    b: Option<String>,
    spec: ConvSpec,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vs: &mut VarStore,
        rng: &mut impl Rng,
        path: &str,
        ci: usize,
        co: usize,
        k: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        bias: bool,
    ) -> Self {
        let std = he_std(ci * k[0] * k[1] * k[2]);
        let w = format!("{path}.weight");
        vs.add(&w, VarKind::Param, Tensor::randn(&[co, ci, k[0], k[1], k[2]], std, rng));
        let b = bias.then(|| {
            let b = format!("{path}.bias");
            vs.add(&b, VarKind::Param, Tensor::zeros(&[co]));
            b
        });
        Self { w, b, spec: ConvSpec::new(stride, pad) }
    }

    pub fn forward(&self, s: &mut Sess, x: Id, mode: Mode) -> Id {
        let w = s.var(&self.w, mode.trainable);
        let b = self.b.as_ref().map(|n| s.var(n, mode.trainable));
        s.g.conv3d(x, w, b, self.spec)
    }
}

/// 2-d convolution on [N,C,H,W], implemented as a depth-1 3-d convolution.
pub struct Conv2d {
    inner: Conv3d,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vs: &mut VarStore,
        rng: &mut impl Rng,
        path: &str,
        ci: usize,
        co: usize,
        k: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
        bias: bool,
    ) -> Self {
        Self {
            inner: Conv3d::new(
                vs,
                rng,
                path,
                ci,
                co,
                [1, k[0], k[1]],
                [1, stride[0], stride[1]],
                [0, pad[0], pad[1]],
                bias,
            ),
        }
    }

    pub fn forward(&self, s: &mut Sess, x: Id, mode: Mode) -> Id {
        let sh = s.g.shape(x).to_vec();
        assert_eq!(sh.len(), 4, "Conv2d expects [N,C,H,W], got {sh:?}");
        let x5 = s.g.reshape(x, &[sh[0], sh[1], 1, sh[2], sh[3]]);
        let y5 = self.inner.forward(s, x5, mode);
        let ys = s.g.shape(y5).to_vec();
        s.g.reshape(y5, &[ys[0], ys[1], ys[3], ys[4]])
    }
}

/// Transposed 3-d convolution layer. Weight [Ci,Co,Kt,Kh,Kw].
pub struct ConvT3d {
    w: String,
    b: Option<String>,
    spec: ConvSpec,
    out_pad: [usize; 3],
}

impl ConvT3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vs: &mut VarStore,
        rng: &mut impl Rng,
        path: &str,
        ci: usize,
        co: usize,
        k: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        out_pad: [usize; 3],
        bias: bool,
    ) -> Self {
        let std = he_std(ci * k[0] * k[1] * k[2]);
        let w = format!("{path}.weight");
        vs.add(&w, VarKind::Param, Tensor::randn(&[ci, co, k[0], k[1], k[2]], std, rng));
        let b = bias.then(|| {
            let b = format!("{path}.bias");
            vs.add(&b, VarKind::Param, Tensor::zeros(&[co]));
            b
        });
        Self { w, b, spec: ConvSpec::new(stride, pad), out_pad }
    }

    pub fn forward(&self, s: &mut Sess, x: Id, mode: Mode) -> Id {
        let w = s.var(&self.w, mode.trainable);
        let b = self.b.as_ref().map(|n| s.var(n, mode.trainable));
        s.g.convt3d(x, w, b, self.spec, self.out_pad)
    }
}

/// Fully connected layer. Weight [out, in].
pub struct Linear {
    w: String,
    b: String,
}

impl Linear {
    pub fn new(vs: &mut VarStore, rng: &mut impl Rng, path: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = format!("{path}.weight");
        let b = format!("{path}.bias");
        vs.add(&w, VarKind::Param, Tensor::randn(&[fan_out, fan_in], he_std(fan_in), rng));
        vs.add(&b, VarKind::Param, Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn forward(&self, s: &mut Sess, x: Id, mode: Mode) -> Id {
        let w = s.var(&self.w, mode.trainable);
        let b = s.var(&self.b, mode.trainable);
        let y = s.g.matmul(x, w, false, true);
        s.g.add_row(y, b)
    }
}

/// Batch normalization over channel dim 1, any input rank >= 2.
pub struct BatchNorm {
    gamma: String,
    beta: String,
    rm: String,
    rv: String,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(vs: &mut VarStore, path: &str, c: usize) -> Self {
        Self::with_gamma(vs, path, c, 1.0)
    }

    /// `gamma_init = 0.0` makes the layer start as a constant `beta`,
    /// which turns a residual branch into an exact identity at init.
    pub fn with_gamma(vs: &mut VarStore, path: &str, c: usize, gamma_init: f64) -> Self {
        let gamma = format!("{path}.gamma");
        let beta = format!("{path}.beta");
        let rm = format!("{path}.running_mean");
        let rv = format!("{path}.running_var");
        vs.add(&gamma, VarKind::Param, Tensor::full(&[c], gamma_init));
        vs.add(&beta, VarKind::Param, Tensor::zeros(&[c]));
        vs.add(&rm, VarKind::Buffer, Tensor::zeros(&[c]));
        vs.add(&rv, VarKind::Buffer, Tensor::full(&[c], 1.0));
        Self { gamma, beta, rm, rv, eps: 1e-5, momentum: 0.1 }
    }

    pub fn forward(&self, s: &mut Sess, x: Id, mode: Mode) -> Id {
        let gamma = s.var(&self.gamma, mode.trainable);
        let beta = s.var(&self.beta, mode.trainable);
        if mode.batch_stats {
            let per: usize = {
                let sh = s.g.shape(x);
                sh[0] * sh[2..].iter().product::<usize>()
            };
            let (y, mean, var) = s.g.batch_norm_train(x, gamma, beta, self.eps);
            if mode.update_stats {
                let unbias = if per > 1 { per as f64 / (per as f64 - 1.0) } else { 1.0 };
                let old_m = s.buffer_value(&self.rm);
                let old_v = s.buffer_value(&self.rv);
                let mom = self.momentum;
                let new_m = Tensor::from_fn(old_m.shape(), |i| {
                    (1.0 - mom) * old_m.data()[i] + mom * mean[i]
                });
                let new_v = Tensor::from_fn(old_v.shape(), |i| {
                    (1.0 - mom) * old_v.data()[i] + mom * var[i] * unbias
                });
                s.push_buffer_update(&self.rm, new_m);
                s.push_buffer_update(&self.rv, new_v);
            }
            y
        } else {
            let rm = s.store().get(&self.rm).data().to_vec();
            let rv = s.store().get(&self.rv).data().to_vec();
            s.g.batch_norm_eval(x, gamma, beta, self.eps, &rm, &rv)
        }
    }
}

/// 2-d average pooling on [N,C,H,W] via the 3-d kernel.
pub fn avgpool2d(g: &mut Graph, x: Id, k: [usize; 2], s: [usize; 2]) -> Id {
    let sh = g.shape(x).to_vec();
    assert_eq!(sh.len(), 4, "avgpool2d expects [N,C,H,W]");
    let x5 = g.reshape(x, &[sh[0], sh[1], 1, sh[2], sh[3]]);
    let y5 = g.avgpool3d(x5, [1, k[0], k[1]], [1, s[0], s[1]]);
    let ys = g.shape(y5).to_vec();
    g.reshape(y5, &[ys[0], ys[1], ys[3], ys[4]])
}

/// 2-d max pooling on [N,C,H,W] via the 3-d kernel.
pub fn maxpool2d(g: &mut Graph, x: Id, k: [usize; 2], s: [usize; 2]) -> Id {
    let sh = g.shape(x).to_vec();
    assert_eq!(sh.len(), 4, "maxpool2d expects [N,C,H,W]");
    let x5 = g.reshape(x, &[sh[0], sh[1], 1, sh[2], sh[3]]);
    let y5 = g.maxpool3d(x5, [1, k[0], k[1]], [1, s[0], s[1]]);
    let ys = g.shape(y5).to_vec();
    g.reshape(y5, &[ys[0], ys[1], ys[3], ys[4]])
}
