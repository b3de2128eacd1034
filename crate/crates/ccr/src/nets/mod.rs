//! Network building blocks: a named parameter store, the binder that
//! maps stored parameters into a graph exactly once per pass, weight
//! init, and the conv/batch-norm layers shared by the encoder, the
//! decoders and the projector heads.

mod model;

pub use model::{CheckpointMeta, MultiTaskNet, NetConfig, ProjectorSet, TaskOutput};

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Index of a parameter in its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Owns every tensor of a model: trainable weights and running
/// statistics alike, in registration order. Registration order is load
/// bearing; it fixes both the init draw sequence and the checkpoint
/// layout.
#[derive(Debug, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("parameter {:?} registered twice", name)));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Materializes a zero gradient buffer on every trainable tensor,
    /// so the optimizer sees a gradient even for parameters that took
    /// no part in this step's graph (an unselected projector, say).
    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            if t.requires_grad {
                t.zero_grad();
            }
        }
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad).map(|t| t.numel()).sum()
    }
}

/// Maps parameters into one graph, each at most once, so that a tensor
/// used twice (a shared projector applied to two sources) contributes a
/// single leaf whose gradient accumulates across both uses. A frozen
/// binder binds everything as constants: no tape, no gradients, which
/// is what evaluation and feature probing want.
pub struct Binder {
    vars: Vec<Option<Var>>,
    frozen: bool,
}

impl Binder {
    pub fn new(store: &ParamStore) -> Self {
        Binder { vars: vec![None; store.len()], frozen: false }
    }

    pub fn frozen(store: &ParamStore) -> Self {
        Binder { vars: vec![None; store.len()], frozen: true }
    }

    pub fn var(&mut self, g: &mut Graph, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = store.get(id);
        let v = if self.frozen {
            g.constant(t.shape(), t.data().to_vec()).expect("stored tensor is self-consistent")
        } else {
            g.leaf(t)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Everything bound so far, in store order.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|var| (ParamId(i), var)))
    }
}

/// Adds each bound parameter's graph gradient into its store tensor.
/// Parameters that never entered the graph are left alone (the trainer
/// pre-materializes zeros for them).
pub fn collect_grads(g: &Graph, store: &mut ParamStore, binder: &Binder) {
    for (id, var) in binder.bound() {
        if let Some(grad) = g.grad(var) {
            if store.get(id).requires_grad {
                store.get_mut(id).accumulate_grad(grad);
            }
        }
    }
}

/// Kaiming-uniform init: uniform on [-b, b] with b = sqrt(6 / fan_in).
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape/len consistent by construction")
}

/// A conv layer's parameter handles.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Result<Self> {
        let w = kaiming_uniform(&[cout, cin, k, k], cin * k * k, rng).with_grad();
        let b = Tensor::zeros(&[cout]).with_grad();
        Ok(Conv {
            w: store.register(&format!("{name}.w"), w)?,
            b: store.register(&format!("{name}.b"), b)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, binder: &mut Binder, store: &ParamStore, x: Var) -> Result<Var> {
        let w = binder.var(g, store, self.w);
        let b = binder.var(g, store, self.b);
        g.conv2d(x, w, b)
    }
}

pub const BN_EPS: f64 = 1e-5;
/// Weight kept by the old running estimate at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.register(&format!("{name}.gamma"), Tensor::full(&[c], 1.0).with_grad())?,
            beta: store.register(&format!("{name}.beta"), Tensor::zeros(&[c]).with_grad())?,
            running_mean: store.register(&format!("{name}.rmean"), Tensor::zeros(&[c]))?,
            running_var: store.register(&format!("{name}.rvar"), Tensor::full(&[c], 1.0))?,
        })
    }

    /// Training mode normalizes by batch statistics and folds them into
    /// the running estimates; eval mode uses the running estimates and
    /// mutates nothing.
    pub fn apply(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        store: &mut ParamStore,
        x: Var,
        training: bool,
    ) -> Result<Var> {
        let gamma = binder.var(g, store, self.gamma);
        let beta = binder.var(g, store, self.beta);
        if training {
            let y = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
            let (mean, var_biased) = g.bn_batch_stats(y).expect("training bn saves stats");
            let s = g.shape(x);
            let n = (s[0] * s[2] * s[3]) as f64;
            let bessel = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let (mean, var_biased) = (mean.to_vec(), var_biased.to_vec());
            let rm = store.get_mut(self.running_mean).data_mut();
            for (r, m) in rm.iter_mut().zip(&mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            let rv = store.get_mut(self.running_var).data_mut();
            for (r, v) in rv.iter_mut().zip(&var_biased) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * (v * bessel);
            }
            Ok(y)
        } else {
            let rmean = store.get(self.running_mean).data().to_vec();
            let rvar = store.get(self.running_var).data().to_vec();
            g.batch_norm_eval(x, gamma, beta, &rmean, &rvar, BN_EPS)
        }
    }
}

/// conv -> batch norm -> relu, the only block shape the toy nets use.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        Ok(ConvBlock {
            conv: Conv::new(store, rng, &format!("{name}.conv"), cin, cout, 3)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    pub fn apply(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        store: &mut ParamStore,
        x: Var,
        training: bool,
    ) -> Result<Var> {
        let x = self.conv.apply(g, binder, store, x)?;
        let x = self.bn.apply(g, binder, store, x, training)?;
        Ok(g.relu(x))
    }
}

/// The projector head: 1x1 conv -> relu -> 1x1 conv -> batch norm,
/// followed by per-pixel L2 normalization onto the unit sphere.
#[derive(Debug, Clone)]
pub struct Projector {
    pub conv1: Conv,
    pub conv2: Conv,
    pub bn: BatchNorm,
}

impl Projector {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_feat: usize,
        c_proj: usize,
    ) -> Result<Self> {
        Ok(Projector {
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), c_feat, c_proj, 1)?,
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), c_proj, c_proj, 1)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_proj)?,
        })
    }

    pub fn apply(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        store: &mut ParamStore,
        x: Var,
        training: bool,
    ) -> Result<Var> {
        let x = self.conv1.apply(g, binder, store, x)?;
        let x = g.relu(x);
        let x = self.conv2.apply(g, binder, store, x)?;
        let x = self.bn.apply(g, binder, store, x, training)?;
        g.l2_normalize_pixels(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn duplicate_registration_fails() {
        let mut store = ParamStore::new();
        store.register("x", Tensor::zeros(&[1])).unwrap();
        assert!(store.register("x", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn binder_reuses_the_same_var() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::full(&[2], 3.0).with_grad()).unwrap();
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let v1 = binder.var(&mut g, &store, id);
        let v2 = binder.var(&mut g, &store, id);
        assert_eq!(v1, v2);
        assert_eq!(binder.bound().count(), 1);
    }

    #[test]
    fn frozen_binder_produces_constants() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::full(&[2], 3.0).with_grad()).unwrap();
        let mut g = Graph::new();
        let mut binder = Binder::frozen(&store);
        let v = binder.var(&mut g, &store, id);
        assert!(!g.requires_grad(v));
    }

    #[test]
    fn shared_parameter_grads_accumulate_across_uses() {
        // One weight used by two branches; d/dw (w*a + w*b) = a + b.
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::full(&[1], 2.0).with_grad()).unwrap();
        store.zero_grads();
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let w = binder.var(&mut g, &store, id);
        let a = g.constant(&[1], vec![3.0]).unwrap();
        let b = g.constant(&[1], vec![4.0]).unwrap();
        let wa = g.mul(w, a).unwrap();
        let wb = g.mul(w, b).unwrap();
        let loss = g.add(wa, wb).unwrap();
        g.backward(loss).unwrap();
        collect_grads(&g, &mut store, &binder);
        assert_eq!(store.get(id).grad.as_deref(), Some(&[7.0][..]));
    }

    #[test]
    fn kaiming_bound_is_respected() {
        let mut rng = stream_rng(1, 0);
        let t = kaiming_uniform(&[8, 4, 3, 3], 4 * 9, &mut rng);
        let bound = (6.0 / 36.0f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        // Not degenerate.
        assert!(t.data().iter().any(|v| v.abs() > bound * 0.1));
    }

    #[test]
    fn batch_norm_updates_running_stats_only_in_training() {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(2, 0);
        let _ = rng.gen::<u64>();
        let bn = BatchNorm::new(&mut store, "bn", 2).unwrap();
        let x = Tensor::new(&[1, 2, 1, 2], vec![1.0, 3.0, -2.0, 2.0]).unwrap();

        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let xv = g.leaf(&x);
        bn.apply(&mut g, &mut binder, &mut store, xv, false).unwrap();
        assert_eq!(store.get(bn.running_mean).data(), &[0.0, 0.0]);

        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let xv = g.leaf(&x);
        bn.apply(&mut g, &mut binder, &mut store, xv, true).unwrap();
        // Channel means 2.0 and 0.0, folded in with weight 0.1.
        let rm = store.get(bn.running_mean).data();
        assert!((rm[0] - 0.2).abs() < 1e-12 && rm[1].abs() < 1e-12);
        let rv = store.get(bn.running_var).data();
        // Biased var 1.0 and 4.0, Bessel factor 2/1 = 2, so 0.9 + 0.1 * 2v.
        assert!((rv[0] - (0.9 + 0.2)).abs() < 1e-12);
        assert!((rv[1] - (0.9 + 0.8)).abs() < 1e-12);
    }

    #[test]
    fn projector_output_is_unit_norm() {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(3, 0);
        let proj = Projector::new(&mut store, &mut rng, "proj", 4, 3).unwrap();
        let data: Vec<f64> = (0..4 * 4).map(|i| (i as f64) * 0.3 - 2.0).collect();
        let x = Tensor::new(&[1, 4, 2, 2], data).unwrap();
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let xv = g.leaf(&x);
        let y = proj.apply(&mut g, &mut binder, &mut store, xv, true).unwrap();
        let v = g.value(y);
        for p in 0..4 {
            let sq: f64 = (0..3).map(|c| v[c * 4 + p] * v[c * 4 + p]).sum();
            assert!((sq.sqrt() - 1.0).abs() < 1e-9);
        }
    }
}
