//! Named parameter tensors with gradient accumulators and an Adam optimizer.

use std::collections::BTreeMap;
use std::collections::HashMap;

use super::tape::{Id, Tape};
use super::tensor::Tensor;

/// Parameters plus same-shaped gradient slots. BTreeMap keeps iteration
/// order deterministic, which the checkpoint format and the determinism
/// guarantees rely on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
    adam_m: BTreeMap<String, Tensor>,
    adam_v: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter {name}"
        );
        self.grads.insert(name.to_string(), Tensor::zeros(tensor.shape().to_vec()));
        self.adam_m.insert(name.to_string(), Tensor::zeros(tensor.shape().to_vec()));
        self.adam_v.insert(name.to_string(), Tensor::zeros(tensor.shape().to_vec()));
        self.params.insert(name.to_string(), tensor);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self.grads[name]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn n_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) {
        let slot = self.grads.get_mut(name).expect("grad slot");
        assert_eq!(slot.shape(), grad.shape(), "grad shape for {name}");
        for (a, &b) in slot.data_mut().iter_mut().zip(grad.data()) {
            *a += b;
        }
    }

    /// Global gradient L2 norm.
    pub fn grad_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.data())
            .map(|&v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// One Adam update over all parameters, with global-norm gradient
    /// clipping. Gradients are zeroed afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let norm = self.grad_norm();
        let scale = if norm > cfg.clip_norm && cfg.clip_norm > 0.0 {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        let names: Vec<String> = self.params.keys().cloned().collect();
        for name in names {
            let grad = self.grads.get(&name).unwrap().clone();
            let m = self.adam_m.get_mut(&name).unwrap();
            for (mi, &gi) in m.data_mut().iter_mut().zip(grad.data()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi * scale;
            }
            let m = self.adam_m[&name].clone();
            let v = self.adam_v.get_mut(&name).unwrap();
            for (vi, &gi) in v.data_mut().iter_mut().zip(grad.data()) {
                let gs = gi * scale;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gs * gs;
            }
            let v = self.adam_v[&name].clone();
            let p = self.params.get_mut(&name).unwrap();
            for i in 0..p.len() {
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                p.data_mut()[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        self.zero_grads();
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 10.0,
        }
    }
}

/// A tape bound to a parameter store: parameters appear as memoized leaf
/// nodes, and `backward_into` routes their gradients back to the store.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    param_ids: HashMap<String, Id>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Graph<'a> {
        Graph {
            tape: Tape::new(),
            store,
            param_ids: HashMap::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Id {
        if let Some(&id) = self.param_ids.get(name) {
            return id;
        }
        let id = self.tape.leaf(self.store.get(name).clone());
        self.param_ids.insert(name.to_string(), id);
        id
    }

    pub fn input(&mut self, t: Tensor) -> Id {
        self.tape.leaf(t)
    }

    pub fn value(&self, id: Id) -> &Tensor {
        self.tape.value(id)
    }

    /// Backward from a scalar root, accumulating parameter gradients into
    /// the store.
    pub fn backward_into(&self, root: Id, store: &mut ParamStore) {
        let grads = self.tape.backward(root);
        for (name, &id) in &self.param_ids {
            store.accumulate_grad(name, &grads[id]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_parameters_against_gradient() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![1, 2], vec![1.0, -1.0]));
        store.accumulate_grad("w", &Tensor::new(vec![1, 2], vec![1.0, -1.0]));
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        store.adam_step(&cfg);
        let w = store.get("w");
        assert!(w.data()[0] < 1.0);
        assert!(w.data()[1] > -1.0);
    }

    #[test]
    fn graph_param_gradient_flows() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![2, 1], vec![2.0, 3.0]));
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![1, 2], vec![5.0, 7.0]));
        let w = g.param("w");
        let y = g.tape.matmul(x, w);
        let loss = g.tape.sum_all(y);
        let mut store2 = store.clone();
        g.backward_into(loss, &mut store2);
        assert_eq!(store2.grad("w").data(), &[5.0, 7.0]);
    }
}
