//! Plain fully-connected forward passes, with and without a tape.

use serde::{Deserialize, Serialize};

use super::{NodeId, NumArray, ParamStore, Tape};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = if v >= 0.0 { 1.0 / (1.0 + (-v).exp()) } else { v.exp() / (1.0 + v.exp()) };
                v * s
            }
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }
}

/// Insert `{prefix}layer{i}.w` / `.b` entries for each consecutive pair in
/// `arch`. Weights are N(0, 1/sqrt(fan_in)) from a per-entry named stream, so
/// initialization is reproducible entry by entry; biases start at zero.
pub fn init_mlp_params(store: &mut ParamStore, prefix: &str, arch: &[usize], master_seed: u64) {
    assert!(arch.len() >= 2, "arch needs at least input and output sizes");
    for i in 0..arch.len() - 1 {
        let (n_in, n_out) = (arch[i], arch[i + 1]);
        let wname = format!("{prefix}layer{i}.w");
        let mut r = rng::stream(master_seed, &format!("init/{wname}"));
        let scale = 1.0 / (n_in as f64).sqrt();
        let w: Vec<f64> = rng::randn_vec(&mut r, n_in * n_out).iter().map(|v| v * scale).collect();
        store.insert(wname, NumArray::new(vec![n_in, n_out], w));
        store.insert(format!("{prefix}layer{i}.b"), NumArray::zeros(vec![n_out]));
    }
}

fn layer_entry<'a>(
    store: &'a ParamStore,
    name: &str,
    expect: &[usize],
) -> Result<&'a NumArray> {
    if !store.contains(name) {
        return Err(Error::invalid(format!("missing parameter entry `{name}`")));
    }
    let arr = store.value(name);
    arr.check_shape(expect, name)?;
    Ok(arr)
}

/// Forward pass of an MLP stored under `prefix`, activation between layers
/// (none on the output). Inference-only: no gradients are recorded.
pub fn forward_mlp(
    store: &ParamStore,
    input: &NumArray,
    arch: &[usize],
    act: Activation,
    prefix: &str,
) -> Result<NumArray> {
    input.check_shape(&[arch[0]], "mlp input")?;
    let mut cur = input.data.clone();
    for i in 0..arch.len() - 1 {
        let (n_in, n_out) = (arch[i], arch[i + 1]);
        let w = layer_entry(store, &format!("{prefix}layer{i}.w"), &[n_in, n_out])?;
        let b = layer_entry(store, &format!("{prefix}layer{i}.b"), &[n_out])?;
        let mut next = b.data.clone();
        for r in 0..n_in {
            let xv = cur[r];
            if xv == 0.0 {
                continue;
            }
            let row = &w.data[r * n_out..(r + 1) * n_out];
            for c in 0..n_out {
                next[c] += xv * row[c];
            }
        }
        if i + 2 < arch.len() {
            next.iter_mut().for_each(|v| *v = act.apply(*v));
        }
        cur = next;
    }
    Ok(NumArray::vector(cur))
}

/// Same forward pass recorded on a tape. `trainable` decides which entries
/// become differentiable leaves.
pub fn forward_mlp_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    trainable: &dyn Fn(&str) -> bool,
    input: NodeId,
    arch: &[usize],
    act: Activation,
    prefix: &str,
) -> Result<NodeId> {
    if tape.value(input).len() != arch[0] {
        return Err(Error::ShapeMismatch {
            context: format!("{prefix}layer0 input"),
            expected: vec![arch[0]],
            got: vec![tape.value(input).len()],
        });
    }
    let mut cur = input;
    for i in 0..arch.len() - 1 {
        let (n_in, n_out) = (arch[i], arch[i + 1]);
        let wname = format!("{prefix}layer{i}.w");
        let bname = format!("{prefix}layer{i}.b");
        layer_entry(store, &wname, &[n_in, n_out])?;
        layer_entry(store, &bname, &[n_out])?;
        let w = tape.param(store, &wname, trainable(&wname));
        let b = tape.param(store, &bname, trainable(&bname));
        cur = tape.affine(cur, w, Some(b), n_in, n_out);
        if i + 2 < arch.len() {
            cur = tape.activation(cur, act);
        }
    }
    Ok(cur)
}
