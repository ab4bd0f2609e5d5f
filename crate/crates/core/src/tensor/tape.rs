//! Wengert tape: reverse-mode differentiation over the small op set the
//! crate actually uses (affine layers, SiLU/ReLU/tanh, concatenation, sums,
//! squared error, sigmoid-BCE).
//!
//! Leaves are either constants or named parameters snapshotted from a
//! [`ParamStore`]; after `backward` the tape can report gradients for any
//! node (inputs included — classifier steering and embedding inversion need
//! input gradients) and write parameter gradients back into the store.

use std::collections::HashMap;

use super::mlp::Activation;
use super::{NumArray, ParamStore};
use crate::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Concat(Vec<NodeId>),
    Affine { x: NodeId, w: NodeId, b: Option<NodeId>, n_in: usize, n_out: usize },
    Act { x: NodeId, kind: Activation },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    SumSq(NodeId),
    BceLogit { logit: NodeId, y: f64, pos_weight: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
    requires: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    // name -> node, so repeated lookups share one leaf per parameter
    named: HashMap<String, NodeId>,
    params: Vec<(NodeId, String)>,
    ran_backward: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>, requires: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires });
        self.nodes.len() - 1
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    /// Constant leaf: participates in the forward pass, receives no gradient.
    pub fn constant(&mut self, value: &[f64]) -> NodeId {
        self.push(Op::Leaf, value.to_vec(), false)
    }

    /// Differentiable input leaf (e.g. the latent for classifier steering).
    pub fn input(&mut self, value: &[f64]) -> NodeId {
        self.push(Op::Leaf, value.to_vec(), true)
    }

    /// Named parameter leaf snapshotted from a store. Repeated calls with the
    /// same name return the same node. When `trainable` is false the value
    /// still enters the graph but no gradient is tracked for it.
    pub fn param(&mut self, store: &ParamStore, name: &str, trainable: bool) -> NodeId {
        if let Some(&id) = self.named.get(name) {
            return id;
        }
        let value = store.value(name).data.clone();
        let id = self.push(Op::Leaf, value, trainable);
        self.named.insert(name.to_string(), id);
        if trainable {
            self.params.push((id, name.to_string()));
        }
        id
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut value = Vec::new();
        let mut requires = false;
        for &p in parts {
            value.extend_from_slice(&self.nodes[p].value);
            requires |= self.requires(p);
        }
        self.push(Op::Concat(parts.to_vec()), value, requires)
    }

    /// `y = x W + b` with `x: [n_in]`, `w: [n_in, n_out]`, `b: [n_out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, n_in: usize, n_out: usize) -> NodeId {
        debug_assert_eq!(self.nodes[x].value.len(), n_in);
        debug_assert_eq!(self.nodes[w].value.len(), n_in * n_out);
        let mut y = match b {
            Some(b) => self.nodes[b].value.clone(),
            None => vec![0.0; n_out],
        };
        {
            let xs = &self.nodes[x].value;
            let ws = &self.nodes[w].value;
            for i in 0..n_in {
                let xi = xs[i];
                if xi == 0.0 {
                    continue;
                }
                let row = &ws[i * n_out..(i + 1) * n_out];
                for j in 0..n_out {
                    y[j] += xi * row[j];
                }
            }
        }
        let requires =
            self.requires(x) || self.requires(w) || b.map(|b| self.requires(b)).unwrap_or(false);
        self.push(Op::Affine { x, w, b, n_in, n_out }, y, requires)
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let value: Vec<f64> = self.nodes[x]
            .value
            .iter()
            .map(|&v| match kind {
                Activation::Silu => v * sigmoid(v),
                Activation::Relu => v.max(0.0),
                Activation::Tanh => v.tanh(),
            })
            .collect();
        let requires = self.requires(x);
        self.push(Op::Act { x, kind }, value, requires)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.len(), self.nodes[b].value.len());
        let value = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x + y)
            .collect();
        let requires = self.requires(a) || self.requires(b);
        self.push(Op::Add(a, b), value, requires)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.len(), self.nodes[b].value.len());
        let value = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x - y)
            .collect();
        let requires = self.requires(a) || self.requires(b);
        self.push(Op::Sub(a, b), value, requires)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.nodes[x].value.iter().map(|v| v * c).collect();
        let requires = self.requires(x);
        self.push(Op::Scale(x, c), value, requires)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = vec![self.nodes[x].value.iter().sum()];
        let requires = self.requires(x);
        self.push(Op::Sum(x), value, requires)
    }

    pub fn sum_sq(&mut self, x: NodeId) -> NodeId {
        let value = vec![self.nodes[x].value.iter().map(|v| v * v).sum()];
        let requires = self.requires(x);
        self.push(Op::SumSq(x), value, requires)
    }

    /// Binary cross-entropy on a single logit with target `y` and a weight on
    /// the positive term.
    pub fn bce_with_logits(&mut self, logit: NodeId, y: f64, pos_weight: f64) -> NodeId {
        assert_eq!(self.nodes[logit].value.len(), 1, "bce expects a scalar logit");
        let z = self.nodes[logit].value[0];
        let loss = pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z);
        let requires = self.requires(logit);
        self.push(Op::BceLogit { logit, y, pos_weight }, vec![loss], requires)
    }

    /// Reverse pass from a scalar loss node. Fills per-node gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss >= self.nodes.len() {
            return Err(Error::Tape("backward called before any forward pass".into()));
        }
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss node has {} elements, expected a scalar",
                self.nodes[loss].value.len()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let g = match self.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {
                    self.grads[id] = Some(g);
                    continue;
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p].value.len();
                        if self.requires(p) {
                            self.accumulate(p, &g[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
                Op::Affine { x, w, b, n_in, n_out } => {
                    if self.requires(x) {
                        let mut gx = vec![0.0; n_in];
                        let ws = &self.nodes[w].value;
                        for i in 0..n_in {
                            let row = &ws[i * n_out..(i + 1) * n_out];
                            gx[i] = row.iter().zip(&g).map(|(wj, gj)| wj * gj).sum();
                        }
                        self.accumulate(x, &gx);
                    }
                    if self.requires(w) {
                        let mut gw = vec![0.0; n_in * n_out];
                        let xs = &self.nodes[x].value;
                        for i in 0..n_in {
                            let xi = xs[i];
                            if xi == 0.0 {
                                continue;
                            }
                            for j in 0..n_out {
                                gw[i * n_out + j] = xi * g[j];
                            }
                        }
                        self.accumulate(w, &gw);
                    }
                    if let Some(b) = b {
                        if self.requires(b) {
                            self.accumulate(b, &g);
                        }
                    }
                }
                Op::Act { x, kind } => {
                    if self.requires(x) {
                        let gx: Vec<f64> = self.nodes[x]
                            .value
                            .iter()
                            .zip(&g)
                            .map(|(&v, &gy)| {
                                let d = match kind {
                                    Activation::Silu => {
                                        let s = sigmoid(v);
                                        s + v * s * (1.0 - s)
                                    }
                                    Activation::Relu => {
                                        if v > 0.0 {
                                            1.0
                                        } else {
                                            0.0
                                        }
                                    }
                                    Activation::Tanh => 1.0 - v.tanh() * v.tanh(),
                                };
                                d * gy
                            })
                            .collect();
                        self.accumulate(x, &gx);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires(a) {
                        self.accumulate(a, &g);
                    }
                    if self.requires(b) {
                        self.accumulate(b, &g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires(a) {
                        self.accumulate(a, &g);
                    }
                    if self.requires(b) {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        self.accumulate(b, &neg);
                    }
                }
                Op::Scale(x, c) => {
                    if self.requires(x) {
                        let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                        self.accumulate(x, &gx);
                    }
                }
                Op::Sum(x) => {
                    if self.requires(x) {
                        let gx = vec![g[0]; self.nodes[x].value.len()];
                        self.accumulate(x, &gx);
                    }
                }
                Op::SumSq(x) => {
                    if self.requires(x) {
                        let gx: Vec<f64> =
                            self.nodes[x].value.iter().map(|v| 2.0 * v * g[0]).collect();
                        self.accumulate(x, &gx);
                    }
                }
                Op::BceLogit { logit, y, pos_weight } => {
                    if self.requires(logit) {
                        let z = self.nodes[logit].value[0];
                        let s = sigmoid(z);
                        let dz = pos_weight * y * (s - 1.0) + (1.0 - y) * s;
                        self.accumulate(logit, &[dz * g[0]]);
                    }
                }
            }
        }
        self.ran_backward = true;
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: &[f64]) {
        match &mut self.grads[id] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
            slot => *slot = Some(g.to_vec()),
        }
    }

    /// Gradient of the last backward pass with respect to a node.
    pub fn grad(&self, id: NodeId) -> Result<Vec<f64>> {
        if !self.ran_backward {
            return Err(Error::Tape("grad requested before backward".into()));
        }
        Ok(self.grads[id]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.nodes[id].value.len()]))
    }

    /// Overwrite every grad slot in the store: parameters that appeared on the
    /// tape get their gradient, all others get zero.
    pub fn write_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        if !self.ran_backward {
            return Err(Error::Tape("write_param_grads before backward".into()));
        }
        store.zero_grads();
        for (id, name) in &self.params {
            let g = self.grad(*id)?;
            store.grad_mut(name).data.copy_from_slice(&g);
        }
        Ok(())
    }

    /// Convenience view of a node's value as a [`NumArray`] vector.
    pub fn value_array(&self, id: NodeId) -> NumArray {
        NumArray::vector(self.nodes[id].value.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn backward_before_forward_fails() {
        let mut tape = Tape::new();
        assert!(tape.backward(0).is_err());
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut store = ParamStore::new();
        store.insert("w", NumArray::vector(vec![3.0, -1.0, 2.5]));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w", true);
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        tape.write_param_grads(&mut store).unwrap();
        assert_eq!(store.grad("w").data, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_half_norm_sq_is_w() {
        let mut store = ParamStore::new();
        store.insert("w", NumArray::vector(vec![3.0, -1.0, 2.5]));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w", true);
        let ss = tape.sum_sq(w);
        let loss = tape.scale(ss, 0.5);
        tape.backward(loss).unwrap();
        tape.write_param_grads(&mut store).unwrap();
        assert_eq!(store.grad("w").data, vec![3.0, -1.0, 2.5]);
    }

    #[test]
    fn unused_params_get_zero_grads() {
        let mut store = ParamStore::new();
        store.insert("used", NumArray::vector(vec![1.0]));
        store.insert("unused", NumArray::vector(vec![5.0, 5.0]));
        let mut tape = Tape::new();
        let w = tape.param(&store, "used", true);
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        tape.write_param_grads(&mut store).unwrap();
        assert_eq!(store.grad("unused").data, vec![0.0, 0.0]);
    }

    #[test]
    fn saturated_bce_gradient_vanishes() {
        let mut tape = Tape::new();
        let logit = tape.input(&[40.0]);
        let loss = tape.bce_with_logits(logit, 1.0, 1.0);
        tape.backward(loss).unwrap();
        let g = tape.grad(logit).unwrap();
        assert!(g[0].abs() < 1e-15, "gradient {} should be ~0", g[0]);
    }

    #[test]
    fn bce_matches_closed_form() {
        let mut tape = Tape::new();
        let logit = tape.input(&[0.3]);
        let loss = tape.bce_with_logits(logit, 1.0, 2.0);
        let expected = 2.0 * (1.0 + (-0.3f64).exp()).ln();
        assert!((tape.value(loss)[0] - expected).abs() < 1e-12);
        tape.backward(loss).unwrap();
        let g = tape.grad(logit).unwrap();
        let s = 1.0 / (1.0 + (-0.3f64).exp());
        assert!((g[0] - 2.0 * (s - 1.0)).abs() < 1e-12);
    }

    // Central finite differences on a random 3-layer net; the independent
    // oracle for every tape gradient.
    #[test]
    fn grads_match_finite_differences() {
        let arch = [4usize, 8, 8, 3];
        let mut store = ParamStore::new();
        super::super::mlp::init_mlp_params(&mut store, "net.", &arch, 1234);
        let mut rng = rng::stream(99, "fd");
        let x: Vec<f64> = rng::randn_vec(&mut rng, 4);
        let target: Vec<f64> = rng::randn_vec(&mut rng, 3);

        let loss_of = |store: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let input = tape.constant(&x);
            let out = super::super::mlp::forward_mlp_on_tape(
                &mut tape,
                store,
                &|_| true,
                input,
                &arch,
                Activation::Silu,
                "net.",
            )
            .unwrap();
            let t = tape.constant(&target);
            let diff = tape.sub(out, t);
            let loss = tape.sum_sq(diff);
            tape.value(loss)[0]
        };

        let mut tape = Tape::new();
        let input = tape.constant(&x);
        let out = super::super::mlp::forward_mlp_on_tape(
            &mut tape,
            &store,
            &|_| true,
            input,
            &arch,
            Activation::Silu,
            "net.",
        )
        .unwrap();
        let t = tape.constant(&target);
        let diff = tape.sub(out, t);
        let loss = tape.sum_sq(diff);
        tape.backward(loss).unwrap();
        tape.write_param_grads(&mut store).unwrap();

        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        let h = 1e-5;
        let mut checked = 0;
        for name in &names {
            let n = store.value(name).len();
            for k in 0..n.min(6) {
                let orig = store.value(name).data[k];
                store.value_mut(name).data[k] = orig + h;
                let lp = loss_of(&store);
                store.value_mut(name).data[k] = orig - h;
                let lm = loss_of(&store);
                store.value_mut(name).data[k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = store.grad(name).data[k];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4,
                    "{name}[{k}]: fd {fd} vs tape {an}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 32);
    }
}
