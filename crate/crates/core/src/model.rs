//! Shared building blocks for the learned components: parameter binding,
//! initialization and input featurization.

use crate::geom::Vec3;
use occa_autodiff::{Graph, ParamStore, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Trainable passes bind parameters as graph leaves; frozen passes read
/// them as constants so the same forward code serves both. The shard
/// variant records its own bindings so several shards can train against a
/// shared read-only store in parallel (gradients are merged afterwards in
/// a fixed shard order).
pub enum Binder<'a> {
    Train(&'a mut ParamStore),
    Frozen(&'a ParamStore),
    Shard { store: &'a ParamStore, bindings: Vec<(String, Tensor)> },
}

impl<'a> Binder<'a> {
    pub fn shard(store: &'a ParamStore) -> Self {
        Binder::Shard { store, bindings: Vec::new() }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Tensor {
        match self {
            Binder::Train(store) => store.bind(g, name),
            Binder::Frozen(store) => store.frozen(name),
            Binder::Shard { store, bindings } => {
                let t = g.leaf(&store.frozen(name));
                bindings.push((name.to_string(), t.clone()));
                t
            }
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Binder::Train(store) => store,
            Binder::Frozen(store) => store,
            Binder::Shard { store, .. } => store,
        }
    }

    /// Sum this shard's parameter gradients out of its graph.
    pub fn shard_grads(&self, g: &Graph) -> std::collections::HashMap<String, Vec<f32>> {
        let mut out: std::collections::HashMap<String, Vec<f32>> = std::collections::HashMap::new();
        if let Binder::Shard { bindings, .. } = self {
            for (name, t) in bindings {
                if let Some(grad) = g.grad(t) {
                    let acc = out.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
                    for (a, b) in acc.iter_mut().zip(grad.iter()) {
                        *a += *b;
                    }
                }
            }
        }
        out
    }
}

/// He-style uniform init.
pub fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in as f32).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Register a linear layer `name.w` [in,out] + `name.b` [out].
pub fn register_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) {
    store.register(&format!("{}.w", name), &[fan_in, fan_out], he_uniform(rng, fan_in, fan_in * fan_out));
    store.register(&format!("{}.b", name), &[fan_out], vec![0.0; fan_out]);
}

/// Register a zero-initialized linear layer (heads that must start inert).
pub fn register_linear_zero(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) {
    store.register(&format!("{}.w", name), &[fan_in, fan_out], vec![0.0; fan_in * fan_out]);
    store.register(&format!("{}.b", name), &[fan_out], vec![0.0; fan_out]);
}

/// Register a 3×3 conv layer `name.w` [out,in,3,3] + `name.b` [out].
pub fn register_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_ch: usize,
    out_ch: usize,
) {
    let fan_in = in_ch * 9;
    store.register(
        &format!("{}.w", name),
        &[out_ch, in_ch, 3, 3],
        he_uniform(rng, fan_in, out_ch * fan_in),
    );
    store.register(&format!("{}.b", name), &[out_ch], vec![0.0; out_ch]);
}

/// Register an all-zero conv layer.
pub fn register_conv_zero(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) {
    store.register(&format!("{}.w", name), &[out_ch, in_ch, 3, 3], vec![0.0; out_ch * in_ch * 9]);
    store.register(&format!("{}.b", name), &[out_ch], vec![0.0; out_ch]);
}

/// conv2d with the named parameters.
pub fn conv(g: &mut Graph, binder: &mut Binder, name: &str, x: &Tensor) -> Tensor {
    let w = binder.get(g, &format!("{}.w", name));
    let b = binder.get(g, &format!("{}.b", name));
    g.conv2d(x, &w, Some(&b))
}

/// x [B,in] · w + b broadcast over rows.
pub fn linear(g: &mut Graph, binder: &mut Binder, name: &str, x: &Tensor) -> Tensor {
    let w = binder.get(g, &format!("{}.w", name));
    let b = binder.get(g, &format!("{}.b", name));
    let h = g.matmul(x, &w);
    let bt = g.tile_rows(&b, x.shape()[0]);
    g.add(&h, &bt)
}

/// Sinusoidal positional encoding of 3D points: per coordinate the
/// normalized value plus sin/cos at `freqs` octaves. Output [B, 3*(1+2F)].
pub fn positional_encoding(points: &[Vec3], freqs: usize, scale: f32) -> Tensor {
    let dim = 3 * (1 + 2 * freqs);
    let mut data = Vec::with_capacity(points.len() * dim);
    for p in points {
        for c in [p.x, p.y, p.z] {
            let v = c / scale;
            data.push(v);
            for l in 0..freqs {
                let arg = v * std::f32::consts::PI * (1 << l) as f32;
                data.push(arg.sin());
                data.push(arg.cos());
            }
        }
    }
    Tensor::from_vec(data, &[points.len(), dim])
}

/// Sinusoidal encoding of unit directions at `freqs` octaves, with the raw
/// direction included. Output row width 3*(1+2F).
pub fn direction_encoding(dirs: &[Vec3], freqs: usize) -> Tensor {
    positional_encoding(dirs, freqs, 1.0)
}
