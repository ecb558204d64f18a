//! Named parameter storage, Adam, and graph binding.

use std::collections::BTreeMap;

use crate::graph::{Grads, Graph, NodeId};
use crate::tensor::Tensor;

/// Named tensors in sorted order. Names are dot-separated paths
/// ("generator.block3.conv1.weight"); prefixes select parameter groups.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), t).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn set(&mut self, name: &str, t: Tensor) {
        self.map.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.map.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// FNV-1a over the little-endian bytes of every tensor under `prefix`,
    /// in name order. Used for freeze contracts, not security.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in &self.map {
            if !name.starts_with(prefix) {
                continue;
            }
            mix(name.as_bytes());
            for v in t.data() {
                mix(&v.to_le_bytes());
            }
        }
        h
    }
}

/// Adam with per-parameter first/second moment state keyed by name.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, AdamSlot>,
}

struct AdamSlot {
    m: Tensor,
    v: Tensor,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        for (name, grad) in grads {
            let param = store.get_mut(name);
            assert_eq!(param.shape(), grad.shape(), "grad shape for {name}");
            let slot = self.state.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: Tensor::zeros(grad.shape()),
                v: Tensor::zeros(grad.shape()),
                t: 0,
            });
            slot.t += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            for ((p, m), (v, g)) in param
                .data_mut()
                .iter_mut()
                .zip(slot.m.data_mut())
                .zip(slot.v.data_mut().iter_mut().zip(grad.data()))
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    /// Flatten optimizer state into named tensors (for checkpoints).
    pub fn export_state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, slot) in &self.state {
            out.push((format!("adam.m.{name}"), slot.m.clone()));
            out.push((format!("adam.v.{name}"), slot.v.clone()));
            out.push((format!("adam.t.{name}"), Tensor::scalar(slot.t as f64)));
        }
        out
    }

    pub fn import_state(&mut self, tensors: &BTreeMap<String, Tensor>) {
        self.state.clear();
        for (key, t) in tensors {
            if let Some(name) = key.strip_prefix("adam.m.") {
                let v = tensors
                    .get(&format!("adam.v.{name}"))
                    .expect("adam state missing v")
                    .clone();
                let step = tensors
                    .get(&format!("adam.t.{name}"))
                    .expect("adam state missing t")
                    .item() as u64;
                self.state.insert(name.to_string(), AdamSlot { m: t.clone(), v, t: step });
            }
        }
    }
}

/// A [`Graph`] bound to a [`ParamStore`]: parameters enter the tape lazily,
/// as trainable leaves or frozen constants depending on the predicate.
pub struct ModelGraph<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: BTreeMap<String, NodeId>,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
}

impl<'a> ModelGraph<'a> {
    pub fn new(store: &'a ParamStore, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Self { g: Graph::new(), store, bound: BTreeMap::new(), trainable: Box::new(trainable) }
    }

    /// Bind everything as frozen (pure inference).
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, |_| false)
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let t = self.store.get(name).clone();
        let id = if (self.trainable)(name) { self.g.leaf(t) } else { self.g.constant(t) };
        self.bound.insert(name.to_string(), id);
        id
    }

    /// Pre-register an existing node as the binding for `name` (used by
    /// gradient checks that own the leaves).
    pub fn bind_external(&mut self, name: &str, id: NodeId) {
        self.bound.insert(name.to_string(), id);
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        (self.trainable)(name)
    }

    /// Exchange the wrapped graph with an external one. Lets callers that
    /// already hold a [`Graph`] (e.g. gradient checkers) run module forward
    /// functions that expect a [`ModelGraph`]; node ids stay valid.
    pub fn swap_graph(&mut self, g: &mut Graph) {
        std::mem::swap(&mut self.g, g);
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Collect per-name gradients after a backward pass. In debug builds,
    /// asserts the frozen set really received no gradient.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.bound {
            match grads.get(id) {
                Some(g) => {
                    debug_assert!(
                        (self.trainable)(name),
                        "gradient reached frozen parameter {name}"
                    );
                    out.insert(name.clone(), g.clone());
                }
                None => {}
            }
        }
        out
    }
}

/// Prefix-set predicate used for per-stage trainable manifests.
#[derive(Clone, Debug, Default)]
pub struct PrefixFilter {
    prefixes: Vec<String>,
}

impl PrefixFilter {
    pub fn new(prefixes: &[&str]) -> Self {
        Self { prefixes: prefixes.iter().map(|s| s.to_string()).collect() }
    }

    pub fn push(&mut self, prefix: &str) {
        self.prefixes.push(prefix.to_string());
    }

    pub fn matches(&self, name: &str) -> bool {
        self.prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }
}
