//! Parameter storage, layer building blocks, and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`] across steps; each step binds them as
//! leaves on a fresh tape through a [`Ctx`]. After backward, gradients are
//! collected per parameter id and applied in id order so updates are
//! deterministic regardless of how the forward pass was scheduled.

use std::cell::RefCell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub usize);

#[derive(Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    /// Adam first/second moment state.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Param {
    pub fn shape(&self) -> Shape {
        if self.rows == 0 {
            Shape::Vector(self.cols)
        } else {
            Shape::Matrix(self.rows, self.cols)
        }
    }
}

/// All trainable arrays of a model, in registration order.
#[derive(Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, shape: Shape, data: Vec<f64>) -> ParamId {
        assert_eq!(shape.numel(), data.len(), "param {name}: shape/data mismatch");
        let (rows, cols) = match shape {
            Shape::Vector(n) => (0, n),
            Shape::Matrix(r, c) => (r, c),
        };
        let n = data.len();
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            rows,
            cols,
            data,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Fresh zeroed gradient accumulator, one slot per parameter.
    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            grads: self.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    /// One Adam update. `step` counts updates starting at 1 (bias correction).
    pub fn adam_step(&mut self, grads: &ParamGrads, cfg: &AdamConfig, step: u64) {
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let bc1 = 1.0 - b1.powi(step as i32);
        let bc2 = 1.0 - b2.powi(step as i32);
        for (p, g) in self.params.iter_mut().zip(grads.grads.iter()) {
            for i in 0..p.data.len() {
                let gi = g[i];
                p.m[i] = b1 * p.m[i] + (1.0 - b1) * gi;
                p.v[i] = b2 * p.v[i] + (1.0 - b2) * gi * gi;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                p.data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter gradient accumulator with a fixed reduction order.
pub struct ParamGrads {
    grads: Vec<Vec<f64>>,
}

impl ParamGrads {
    /// Add `other` into `self`, slot by slot in id order.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(other.grads.iter()) {
            for (ai, &bi) in a.iter_mut().zip(b.iter()) {
                *ai += bi;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .fold(0.0f64, |acc, &v| acc.max(v.abs()))
    }
}

/// Binds store parameters onto one tape, caching leaves so every use of a
/// parameter shares a single node (gradients accumulate correctly).
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    store: &'t ParamStore,
    bound: RefCell<Vec<Option<Tensor<'t>>>>,
    overrides: Vec<(ParamId, Tensor<'t>)>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Ctx {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            overrides: Vec::new(),
        }
    }

    /// Substitute a tape tensor for a parameter (used by gradient checks).
    pub fn with_override(mut self, id: ParamId, t: Tensor<'t>) -> Self {
        self.overrides.push((id, t));
        self
    }

    pub fn param(&self, id: ParamId) -> Tensor<'t> {
        if let Some(&(_, t)) = self.overrides.iter().find(|(oid, _)| *oid == id) {
            return t;
        }
        if let Some(t) = self.bound.borrow()[id.0] {
            return t;
        }
        let p = self.store.get(id);
        let t = self
            .tape
            .leaf(p.data.clone(), p.shape(), true)
            .expect("param shape consistent");
        self.bound.borrow_mut()[id.0] = Some(t);
        t
    }

    /// Collect gradients for every bound parameter into `acc` (id order).
    pub fn collect_grads(&self, grads: &crate::tensor::Gradients, acc: &mut ParamGrads) {
        let bound = self.bound.borrow();
        for (i, slot) in bound.iter().enumerate() {
            if let Some(t) = slot {
                if let Some(g) = grads.get(*t) {
                    let dst = &mut acc.grads[i];
                    for (d, &s) in dst.iter_mut().zip(g.iter()) {
                        *d += s;
                    }
                }
            }
        }
    }
}

// Initializers. Box-Muller keeps us off an extra distribution dependency.

pub fn randn(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

pub fn normal_init(rng: &mut impl Rng, std: f64, n: usize) -> Vec<f64> {
    (0..n).map(|_| std * randn(rng)).collect()
}

/// Dense layer `y = x W + b`.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            Shape::Matrix(fan_in, fan_out),
            xavier(rng, fan_in, fan_out, fan_in * fan_out),
        );
        let b = bias.then(|| {
            store.add(&format!("{name}.b"), Shape::Vector(fan_out), vec![0.0; fan_out])
        });
        Linear { w, b }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Tensor<'t>) -> Result<Tensor<'t>> {
        let y = x.matmul(ctx.param(self.w))?;
        match self.b {
            Some(b) => y.add_row(ctx.param(b)),
            None => Ok(y),
        }
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(&format!("{name}.gamma"), Shape::Vector(dim), vec![1.0; dim]),
            beta: store.add(&format!("{name}.beta"), Shape::Vector(dim), vec![0.0; dim]),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Tensor<'t>) -> Result<Tensor<'t>> {
        x.layer_norm(ctx.param(self.gamma), ctx.param(self.beta), 1e-5)
    }
}

/// Multi-head attention with separate query and key/value sources.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Contract(format!(
                "attention: dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, true, rng),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, true, rng),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, true, rng),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, true, rng),
            heads,
            dim,
        })
    }

    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        queries: Tensor<'t>,
        keys_values: Tensor<'t>,
    ) -> Result<Tensor<'t>> {
        let q = self.wq.forward(ctx, queries)?;
        let k = self.wk.forward(ctx, keys_values)?;
        let v = self.wv.forward(ctx, keys_values)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let qh = q.slice_cols(s, e)?;
            let kh = k.slice_cols(s, e)?;
            let vh = v.slice_cols(s, e)?;
            let scores = qh.matmul(kh.transpose()?)?.scale(scale);
            let attn = scores.softmax(1)?;
            head_outs.push(attn.matmul(vh)?);
        }
        let merged = crate::tensor::concat(&head_outs, 1)?;
        self.wo.forward(ctx, merged)
    }
}

pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        FeedForward {
            l1: Linear::new(store, &format!("{name}.l1"), dim, hidden, true, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, dim, true, rng),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Tensor<'t>) -> Result<Tensor<'t>> {
        self.l2.forward(ctx, self.l1.forward(ctx, x)?.relu())
    }
}

/// Pre-norm transformer encoder layer (self-attention + FFN with residuals).
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_hidden, rng),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Tensor<'t>) -> Result<Tensor<'t>> {
        let n1 = self.norm1.forward(ctx, x)?;
        let x = x.add(self.attn.forward(ctx, n1, n1)?)?;
        let n2 = self.norm2.forward(ctx, x)?;
        x.add(self.ff.forward(ctx, n2)?)
    }
}

/// Pre-norm transformer decoder layer: query self-attention, cross-attention
/// onto the encoder memory, then FFN.
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_hidden, rng),
        })
    }

    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        x: Tensor<'t>,
        memory: Tensor<'t>,
    ) -> Result<Tensor<'t>> {
        let n1 = self.norm1.forward(ctx, x)?;
        let x = x.add(self.self_attn.forward(ctx, n1, n1)?)?;
        let n2 = self.norm2.forward(ctx, x)?;
        let x = x.add(self.cross_attn.forward(ctx, n2, memory)?)?;
        let n3 = self.norm3.forward(ctx, x)?;
        x.add(self.ff.forward(ctx, n3)?)
    }
}

/// Stack of dense layers with ReLU between them (heads use this).
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Tensor<'t>) -> Result<Tensor<'t>> {
        let mut out = x;
        for (i, layer) in self.layers.iter().enumerate() {
            out = layer.forward(ctx, out)?;
            if i + 1 < self.layers.len() {
                out = out.relu();
            }
        }
        Ok(out)
    }
}

/// Sinusoidal encoding for one scalar position, filling `dim` slots.
pub fn sin_cos_encoding(pos: f64, dim: usize, base: f64) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = base.powf(-(2.0 * i as f64) / dim as f64);
        out[2 * i] = (pos * freq).sin();
        out[2 * i + 1] = (pos * freq).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Shape, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_forward_matches_hand_math() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", 2, 2, true, &mut rng);
        store.get_mut(lin.w).data = vec![1.0, 2.0, 3.0, 4.0];
        store.get_mut(lin.b.unwrap()).data = vec![0.5, -0.5];
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.leaf(vec![1.0, 1.0], Shape::Matrix(1, 2), false).unwrap();
        let y = lin.forward(&ctx, x).unwrap();
        assert_eq!(y.value(), vec![4.5, 5.5]);
    }

    #[test]
    fn attention_single_token_weight_is_one() {
        // One query, one key: softmax over a single score must be exactly 1,
        // so the output equals Wo(Wv kv) + bias regardless of the score value.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let q = tape
            .leaf((0..8).map(|i| i as f64 * 0.1).collect(), Shape::Matrix(1, 8), false)
            .unwrap();
        let kv = tape
            .leaf((0..8).map(|i| 0.3 - i as f64 * 0.05).collect(), Shape::Matrix(1, 8), false)
            .unwrap();
        let out = attn.forward(&ctx, q, kv).unwrap();
        let direct = attn
            .wo
            .forward(&ctx, attn.wv.forward(&ctx, kv).unwrap())
            .unwrap();
        for (a, b) in out.value().iter().zip(direct.value().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_layer_grad_check() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = EncoderLayer::new(&mut store, "enc", 8, 2, 16, &mut rng).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..24).map(|_| rng2.gen_range(-1.0..1.0)).collect();
        let err = grad_check(
            |tape, leaf| {
                let ctx = Ctx::new(tape, &store);
                let m = leaf.reshape(Shape::Matrix(3, 8))?;
                Ok(layer.forward(&ctx, m)?.mul(m)?.sum())
            },
            &x,
            Shape::Vector(24),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
        use rand::Rng;
    }

    #[test]
    fn adam_moves_toward_minimum() {
        let mut store = ParamStore::new();
        let p = store.add("x", Shape::Vector(1), vec![5.0]);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        for step in 1..=200 {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store);
            let x = ctx.param(p);
            let loss = x.mul(x).unwrap().sum();
            let grads = loss.backward().unwrap();
            let mut acc = store.zero_grads();
            ctx.collect_grads(&grads, &mut acc);
            store.adam_step(&acc, &cfg, step);
        }
        assert!(store.get(p).data[0].abs() < 0.05);
    }

    #[test]
    fn ctx_caches_a_single_leaf_per_param() {
        let mut store = ParamStore::new();
        let p = store.add("w", Shape::Vector(2), vec![2.0, 3.0]);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let a = ctx.param(p);
        let b = ctx.param(p);
        // Used twice: gradient must accumulate on one node.
        let loss = a.mul(b).unwrap().sum();
        let grads = loss.backward().unwrap();
        let mut acc = store.zero_grads();
        ctx.collect_grads(&grads, &mut acc);
        assert_eq!(acc.get(p), &[4.0, 6.0]);
    }

    #[test]
    fn param_order_is_registration_order() {
        let mut store = ParamStore::new();
        store.add("a", Shape::Vector(1), vec![0.0]);
        store.add("b", Shape::Vector(1), vec![0.0]);
        let names: Vec<&str> = store.iter().map(|(_, p)| p.name.as_str()).collect();
        assert_eq!(names, vec!["a", "b"]);
    }
}
