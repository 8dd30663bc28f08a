//! Parameter storage, layers and the optimizer.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Graph, Mat, Var};

/// Named parameter blocks, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|m| m.len()).sum()
    }
}

/// A forward pass: the tape plus the parameter leaves bound so far.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: HashMap::new(),
        }
    }

    /// Leaf for parameter `name`, bound once per pass.
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = self.g.param(value);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Gradients of the last backward pass for every parameter touched by it.
    /// Parameters never bound get no entry.
    pub fn param_grads(&self) -> BTreeMap<String, Mat> {
        self.bound
            .iter()
            .map(|(name, &v)| (name.clone(), self.g.grad_or_zeros(v)))
            .collect()
    }
}

fn he_normal(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: f64) -> Mat {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        Self::with_gain(store, rng, name, input, output, 1.0)
    }

    pub fn with_gain(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        output: usize,
        gain: f64,
    ) -> Self {
        store.insert(format!("{name}.w"), he_normal(rng, input, output, gain));
        store.insert(format!("{name}.b"), Array2::zeros((1, output)));
        Self {
            name: name.to_string(),
            input,
            output,
            bias: true,
        }
    }

    /// Affine map without a bias, for layers followed by normalization.
    pub fn no_bias(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        store.insert(format!("{name}.w"), he_normal(rng, input, output, 1.0));
        Self {
            name: name.to_string(),
            input,
            output,
            bias: false,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.p(&self.weight_name());
        let h = ctx.g.matmul(x, w);
        if !self.bias {
            return h;
        }
        let b = ctx.p(&self.bias_name());
        ctx.g.add_row(h, b)
    }
}

/// Per-feature standardization over the rows of the current pass, with a
/// learned scale and shift. No running statistics are kept, so training and
/// inference compute identical functions.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
}

pub const BN_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        store.insert(format!("{name}.gamma"), Array2::ones((1, width)));
        store.insert(format!("{name}.beta"), Array2::zeros((1, width)));
        Self {
            name: name.to_string(),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let gamma = ctx.p(&format!("{}.gamma", self.name));
        let beta = ctx.p(&format!("{}.beta", self.name));
        let n = ctx.g.normalize_cols(x, BN_EPS);
        let n = ctx.g.mul_row(n, gamma);
        ctx.g.add_row(n, beta)
    }
}

/// Stack of affine -> batch-norm -> rectifier layers shared across rows.
#[derive(Clone, Debug)]
pub struct SharedMlp {
    layers: Vec<(Linear, BatchNorm)>,
}

impl SharedMlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        widths: &[usize],
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input;
        for (i, &w) in widths.iter().enumerate() {
            let lin = Linear::no_bias(store, rng, &format!("{name}.{i}.fc"), fan_in, w);
            let bn = BatchNorm::new(store, &format!("{name}.{i}.bn"), w);
            layers.push((lin, bn));
            fan_in = w;
        }
        Self { layers }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|(l, _)| l.output).unwrap_or(0)
    }

    pub fn forward(&self, ctx: &mut Ctx, mut x: Var) -> Var {
        for (lin, bn) in &self.layers {
            x = lin.forward(ctx, x);
            x = bn.forward(ctx, x);
            x = ctx.g.relu(x);
        }
        x
    }
}

/// Single-head scaled dot-product cross-attention with a residual connection:
/// `out = query + softmax(Q K^T / sqrt(d)) V`.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub dim: usize,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Self {
        Self {
            query: Linear::with_gain(store, rng, &format!("{name}.q"), dim, dim, 0.5),
            key: Linear::with_gain(store, rng, &format!("{name}.k"), dim, dim, 0.5),
            value: Linear::with_gain(store, rng, &format!("{name}.v"), dim, dim, 0.5),
            dim,
        }
    }

    /// Attention weights, `rows(queries) x rows(memory)`.
    pub fn weights(&self, ctx: &mut Ctx, queries: Var, memory: Var) -> Var {
        let q = self.query.forward(ctx, queries);
        let k = self.key.forward(ctx, memory);
        let logits = ctx.g.matmul_t(q, k);
        let logits = ctx.g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        ctx.g.softmax_rows(logits)
    }

    pub fn forward(&self, ctx: &mut Ctx, queries: Var, memory: Var) -> Var {
        let attn = self.weights(ctx, queries, memory);
        let v = self.value.forward(ctx, memory);
        let mixed = ctx.g.matmul(attn, v);
        ctx.g.add(queries, mixed)
    }
}

/// Training-only projection `d -> d -> d/2` (affine, rectifier, affine).
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl ProjectionHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.0"), dim, dim),
            out: Linear::new(store, rng, &format!("{name}.1"), dim, out_dim),
        }
    }

    pub fn output_width(&self) -> usize {
        self.out.output
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.hidden.forward(ctx, x);
        let h = ctx.g.relu(h);
        self.out.forward(ctx, h)
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub first: BTreeMap<String, Mat>,
    pub second: BTreeMap<String, Mat>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient entry.
    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Mat>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(param) = store.get_mut(name) else {
                continue;
            };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.dim()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.dim()));
            let decay = 1.0 - lr * self.weight_decay;
            ndarray::Zip::from(param)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p * decay - lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_with_zero_values_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let attn = CrossAttention::new(&mut store, &mut rng, "a", 4);
        store.get_mut("a.v.w").unwrap().fill(0.0);
        let mut ctx = Ctx::new(&store);
        let q = ctx.g.constant(Array2::from_shape_fn((3, 4), |(i, j)| {
            (i * 4 + j) as f64 * 0.1
        }));
        let m = ctx
            .g
            .constant(Array2::from_shape_fn((2, 4), |(i, j)| (i + j) as f64));
        let out = attn.forward(&mut ctx, q, m);
        assert_eq!(ctx.g.value(out), ctx.g.value(q));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("p", array![[1.0, -1.0]]);
        let mut opt = AdamW::new(0.0);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), array![[0.5, -2.0]]);
        opt.update(&mut store, &grads, 0.1);
        let p = store.get("p").unwrap();
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut store = ParamStore::new();
        store.insert("p", array![[2.0]]);
        let mut opt = AdamW::new(0.5);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), array![[0.0]]);
        opt.update(&mut store, &grads, 0.1);
        assert!((store.get("p").unwrap()[[0, 0]] - 2.0 * 0.95).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_output_is_standardized() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let mut ctx = Ctx::new(&store);
        let x = ctx
            .g
            .constant(array![[1.0, 10.0], [3.0, 20.0], [5.0, 60.0]]);
        let y = bn.forward(&mut ctx, x);
        let y = ctx.g.value(y);
        for col in y.columns() {
            assert!(col.sum().abs() < 1e-9);
            assert!((col.mapv(|v| v * v).sum() / 3.0 - 1.0).abs() < 1e-4);
        }
    }
}
