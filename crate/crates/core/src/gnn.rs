//! Graph network building blocks on top of the [`autodiff`](crate::autodiff)
//! tape: named parameter storage, dense layers, attention blocks with a
//! self-reinforced stream, edge pooling, the attribute parser, multiplicative
//! infusion and the decomposed output heads.
//!
//! Layers only hold parameter names and widths. A forward pass binds the
//! [`ParamStore`] to a [`Tape`] through a [`Binding`], which also maps the
//! resulting gradients back to parameter slots.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Index, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::mesh::{GraphTopology, MeshGraph};
use crate::tensor::Tensor;

/// Negative slope of the attention logits' LeakyReLU.
pub const ATTENTION_SLOPE: f64 = 0.2;

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return invalid(format!("duplicate parameter {name}"));
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(self.names.len() - 1)
    }

    /// Registers a `rows × cols` tensor drawn from `U(−√(1/fan_in), √(1/fan_in))`.
    pub fn insert_uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::from_vec(rows, cols, data)?)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces the values of every parameter present in `other` with the
    /// same shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, value) in other.iter() {
            let Some(slot) = self.get_mut(name) else {
                return invalid(format!("unexpected parameter {name}"));
            };
            if slot.shape() != value.shape() {
                return invalid(format!("parameter {name}: shape {:?} vs {:?}", value.shape(), slot.shape()));
            }
            *slot = value.clone();
        }
        if other.len() != self.len() {
            let missing: Vec<&str> = self.names.iter().filter(|n| other.get(n).is_none()).map(String::as_str).collect();
            return invalid(format!("missing parameters: {}", missing.join(", ")));
        }
        Ok(())
    }
}

/// Lazily places parameters of a [`ParamStore`] on a tape.
pub struct Binding<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'s> Binding<'s> {
    /// With `trainable`, parameters become gradient-carrying variables.
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn param(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        let idx = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::Validation(format!("unknown parameter {name}")))?;
        if let Some(v) = self.vars[idx] {
            return Ok(v);
        }
        let value = self.store.tensors[idx].clone();
        let v = if self.trainable {
            tape.variable(value)
        } else {
            tape.constant(value)
        };
        self.vars[idx] = Some(v);
        Ok(v)
    }

    /// Gradients aligned with the store order; unused parameters get zeros.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(self.store.tensors())
            .map(|(v, t)| {
                v.and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

fn check_width(tape: &Tape, x: Var, width: usize, what: &str) -> Result<()> {
    let cols = tape.shape(x)[1];
    if cols != width {
        return invalid(format!("{what} expects width {width}, got {cols}"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, output: usize) -> Result<Self> {
        if input == 0 || output == 0 {
            return invalid(format!("dense layer {name} with zero width"));
        }
        store.insert_uniform(format!("{name}.weight"), input, output, input, rng)?;
        store.insert(format!("{name}.bias"), Tensor::zeros(1, output))?;
        Ok(Self {
            name: name.to_string(),
            input,
            output,
        })
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, x: Var) -> Result<Var> {
        check_width(tape, x, self.input, &self.name)?;
        let w = bind.param(tape, &format!("{}.weight", self.name))?;
        let b = bind.param(tape, &self.bias_name())?;
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Stack of dense layers; `hidden` follows every layer but the last, which
/// is followed by `last`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    pub last: Activation,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, widths: &[usize], hidden: Activation, last: Activation) -> Result<Self> {
        if widths.is_empty() {
            return invalid(format!("{name} has no layers"));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input;
        for (k, &w) in widths.iter().enumerate() {
            layers.push(Dense::new(store, rng, &format!("{name}.{k}"), prev, w)?);
            prev = w;
        }
        Ok(Self { layers, hidden, last })
    }

    pub fn input(&self) -> usize {
        self.layers[0].input
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.layers.len();
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bind, h)?;
            h = if k + 1 == n { self.last } else { self.hidden }.apply(tape, h)?;
        }
        Ok(h)
    }
}

/// Splits a block width into the self stream and `heads` aggregation streams:
/// half of the width is the self stream, the rest is shared by the heads.
pub fn block_split(width: usize, heads: usize) -> Result<(usize, usize)> {
    if heads == 0 || width == 0 || !width.is_multiple_of(2 * heads) {
        return invalid(format!("block width {width} is not divisible into a self stream and {heads} heads"));
    }
    Ok((width / 2, width / (2 * heads)))
}

/// Graph-attention block with a self-reinforced stream.
///
/// Output = `act([x·W_s + b_s, head_1, …, head_H])` where head `h` is the
/// attention-weighted sum of `x_j·W_h` over the 1-ring of a node including
/// itself, with logits `LeakyReLU(a_dstᵀ W_h x_i + a_srcᵀ W_h x_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatBlock {
    pub name: String,
    pub input: usize,
    pub self_width: usize,
    pub heads: usize,
    pub head_width: usize,
    pub activation: Activation,
}

impl GatBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        self_width: usize,
        heads: usize,
        head_width: usize,
        activation: Activation,
    ) -> Result<Self> {
        if input == 0 || self_width == 0 || heads == 0 || head_width == 0 {
            return invalid(format!("attention block {name} with zero width"));
        }
        store.insert_uniform(format!("{name}.self.weight"), input, self_width, input, rng)?;
        store.insert(format!("{name}.self.bias"), Tensor::zeros(1, self_width))?;
        for h in 0..heads {
            store.insert_uniform(format!("{name}.head{h}.weight"), input, head_width, input, rng)?;
            store.insert_uniform(format!("{name}.head{h}.att_dst"), head_width, 1, head_width, rng)?;
            store.insert_uniform(format!("{name}.head{h}.att_src"), head_width, 1, head_width, rng)?;
        }
        Ok(Self {
            name: name.to_string(),
            input,
            self_width,
            heads,
            head_width,
            activation,
        })
    }

    /// Block of total `width` split by [`block_split`].
    pub fn with_width(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, width: usize, heads: usize, activation: Activation) -> Result<Self> {
        let (self_width, head_width) = block_split(width, heads)?;
        Self::new(store, rng, name, input, self_width, heads, head_width, activation)
    }

    pub fn output(&self) -> usize {
        self.self_width + self.heads * self.head_width
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, x: Var, topology: &GraphTopology) -> Result<Var> {
        check_width(tape, x, self.input, &self.name)?;
        let n = topology.node_count();
        if tape.shape(x)[0] != n {
            return invalid(format!("{}: {} rows for {n} nodes", self.name, tape.shape(x)[0]));
        }
        let ws = bind.param(tape, &format!("{}.self.weight", self.name))?;
        let bs = bind.param(tape, &format!("{}.self.bias", self.name))?;
        let s = tape.matmul(x, ws)?;
        let mut parts = vec![tape.add_row(s, bs)?];
        for h in 0..self.heads {
            let w = bind.param(tape, &format!("{}.head{h}.weight", self.name))?;
            let a_dst = bind.param(tape, &format!("{}.head{h}.att_dst", self.name))?;
            let a_src = bind.param(tape, &format!("{}.head{h}.att_src", self.name))?;
            let z = tape.matmul(x, w)?;
            let sd = tape.matmul(z, a_dst)?;
            let ss = tape.matmul(z, a_src)?;
            let ld = tape.gather_rows(sd, &topology.dst)?;
            let ls = tape.gather_rows(ss, &topology.src)?;
            let logits = tape.add(ld, ls)?;
            let logits = tape.leaky_relu(logits, ATTENTION_SLOPE)?;
            let att = tape.segment_softmax(logits, &topology.dst, n)?;
            let zs = tape.gather_rows(z, &topology.src)?;
            let msg = tape.mul_col(zs, att)?;
            parts.push(tape.segment_sum(msg, &topology.dst, n)?);
        }
        let y = tape.concat(&parts)?;
        self.activation.apply(tape, y)
    }
}

/// Result of one edge-pooling step.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolRecord {
    /// Contracted edges `(u, v)`, `u < v`, in contraction order.
    pub contracted: Vec<(usize, usize)>,
    /// Pooled node of every original node.
    pub mapping: Index,
    pub original: Arc<GraphTopology>,
    pub pooled: Arc<GraphTopology>,
}

impl PoolRecord {
    pub fn original_count(&self) -> usize {
        self.original.node_count()
    }

    pub fn pooled_count(&self) -> usize {
        self.pooled.node_count()
    }
}

/// Greedy edge contraction guided by a learned edge score.
///
/// The score of edge `{u, v}` is `tanh(½·w·([f_u, f_v] + [f_v, f_u]) + b)`,
/// so it does not depend on endpoint order. Edges are contracted in
/// descending score order (ties by lowest endpoint indices), skipping edges
/// with an already merged endpoint, until at most `⌈N/2⌉` nodes remain. A
/// merged node carries the endpoint mean scaled by `1 + score`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgePool {
    pub name: String,
    pub width: usize,
}

impl EdgePool {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize) -> Result<Self> {
        store.insert_uniform(format!("{name}.w_first"), width, 1, 2 * width, rng)?;
        store.insert_uniform(format!("{name}.w_second"), width, 1, 2 * width, rng)?;
        store.insert(format!("{name}.bias"), Tensor::zeros(1, 1))?;
        Ok(Self {
            name: name.to_string(),
            width,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, x: Var, topology: &Arc<GraphTopology>) -> Result<(Var, PoolRecord)> {
        check_width(tape, x, self.width, &self.name)?;
        let n = topology.node_count();
        if n < 2 {
            return invalid(format!("{}: cannot pool a graph with {n} node(s)", self.name));
        }
        let w1 = bind.param(tape, &format!("{}.w_first", self.name))?;
        let w2 = bind.param(tape, &format!("{}.w_second", self.name))?;
        let b = bind.param(tape, &format!("{}.bias", self.name))?;
        let w = tape.add(w1, w2)?;
        let node_score = tape.matmul(x, w)?;

        let ns = tape.value(node_score).data().to_vec();
        let mut scored: Vec<(f64, usize, usize)> = topology.edges.iter().map(|&(u, v)| (ns[u] + ns[v], u, v)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let mut gap = f64::INFINITY;
        for pair in scored.windows(2) {
            gap = gap.min(0.5 * (pair[0].0 - pair[1].0));
        }
        tape.note_margin(gap);

        let target = n.div_ceil(2);
        let mut partner: Vec<Option<usize>> = vec![None; n];
        let mut count = n;
        let mut contracted = Vec::new();
        for &(_, u, v) in &scored {
            if count <= target {
                break;
            }
            if partner[u].is_some() || partner[v].is_some() {
                continue;
            }
            partner[u] = Some(v);
            partner[v] = Some(u);
            contracted.push((u, v));
            count -= 1;
        }
        for &(u, v) in &contracted {
            tape.note_branch(((u as u64) << 32) | v as u64);
        }

        // clusters ordered by their lowest member
        let mut mapping = vec![usize::MAX; n];
        let mut first = Vec::with_capacity(count);
        let mut second = Vec::with_capacity(count);
        let mut merged = Vec::with_capacity(count);
        for i in 0..n {
            if mapping[i] != usize::MAX {
                continue;
            }
            let id = first.len();
            mapping[i] = id;
            first.push(i);
            match partner[i] {
                Some(j) => {
                    mapping[j] = id;
                    second.push(j);
                    merged.push(1.0);
                }
                None => {
                    second.push(i);
                    merged.push(0.0);
                }
            }
        }
        let first: Index = first.into();
        let second: Index = second.into();
        let mask = tape.constant(Tensor::column_vector(&merged));

        let sa = tape.gather_rows(node_score, &first)?;
        let sb = tape.gather_rows(node_score, &second)?;
        let raw = tape.add(sa, sb)?;
        let raw = tape.scalar_mul(raw, 0.5)?;
        let raw = tape.add_row(raw, b)?;
        let score = tape.tanh(raw)?;
        let score = tape.mul(score, mask)?;
        let scale = tape.add_scalar(score, 1.0)?;
        let xa = tape.gather_rows(x, &first)?;
        let xb = tape.gather_rows(x, &second)?;
        let mean = tape.add(xa, xb)?;
        let mean = tape.scalar_mul(mean, 0.5)?;
        let pooled_x = tape.mul_col(mean, scale)?;

        let pooled_edges: Vec<(usize, usize)> = topology.edges.iter().map(|&(u, v)| (mapping[u], mapping[v])).collect();
        let pooled = Arc::new(GraphTopology::from_edges(count, &pooled_edges)?);
        Ok((
            pooled_x,
            PoolRecord {
                contracted,
                mapping: mapping.into(),
                original: topology.clone(),
                pooled,
            },
        ))
    }
}

/// Copies every pooled node's features back to its original members.
pub fn unpool(tape: &mut Tape, x: Var, record: &PoolRecord) -> Result<Var> {
    if tape.shape(x)[0] != record.pooled_count() {
        return invalid(format!(
            "unpool: {} rows for a record of {} pooled nodes",
            tape.shape(x)[0],
            record.pooled_count()
        ));
    }
    tape.gather_rows(x, &record.mapping)
}

/// Elementwise product of every node feature row with a shared encoding.
pub fn infuse_var(tape: &mut Tape, encoding: Var, x: Var) -> Result<Var> {
    let (e, f) = (tape.shape(encoding), tape.shape(x));
    if e[0] != 1 || e[1] != f[1] {
        return invalid(format!("encoding of shape {e:?} cannot infuse features of width {}", f[1]));
    }
    tape.mul_row(x, encoding)
}

/// Magnitude branch: ReLU after every layer, ending in width 1.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeHead(pub Mlp);

impl MagnitudeHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, widths: &[usize], final_bias: f64) -> Result<Self> {
        if widths.last() != Some(&1) {
            return invalid(format!("magnitude head widths {widths:?} must end in 1"));
        }
        let mlp = Mlp::new(store, rng, name, input, widths, Activation::Relu, Activation::Relu)?;
        let bias = mlp.layers.last().expect("nonempty").bias_name();
        store.get_mut(&bias).expect("just inserted").data_mut()[0] = final_bias;
        Ok(Self(mlp))
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, x: Var) -> Result<Var> {
        self.0.forward(tape, bind, x)
    }
}

/// Direction branch: Tanh after every layer, then row normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionHead(pub Mlp);

impl DirectionHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, widths: &[usize]) -> Result<Self> {
        if widths.last() != Some(&3) {
            return invalid(format!("direction head widths {widths:?} must end in 3"));
        }
        Ok(Self(Mlp::new(store, rng, name, input, widths, Activation::Tanh, Activation::Tanh)?))
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, x: Var) -> Result<Var> {
        let h = self.0.forward(tape, bind, x)?;
        tape.l2_normalize_rows(h)
    }
}

/// Undecomposed displacement head: Tanh hidden layers, linear 3-wide output.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead(pub Mlp);

impl LinearHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, widths: &[usize]) -> Result<Self> {
        if widths.last() != Some(&3) {
            return invalid(format!("displacement head widths {widths:?} must end in 3"));
        }
        Ok(Self(Mlp::new(store, rng, name, input, widths, Activation::Tanh, Activation::Identity)?))
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, x: Var) -> Result<Var> {
        self.0.forward(tape, bind, x)
    }
}

/// Encodes `(α, β, θ)` into a per-feature gain for the first detail block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeParser {
    pub mlp: Mlp,
    pub alpha_dim: usize,
    pub beta_dim: usize,
    pub theta_dim: usize,
}

impl AttributeParser {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dims: [usize; 3], widths: &[usize]) -> Result<Self> {
        let input = dims.iter().sum();
        Ok(Self {
            mlp: Mlp::new(store, rng, name, input, widths, Activation::Relu, Activation::Relu)?,
            alpha_dim: dims[0],
            beta_dim: dims[1],
            theta_dim: dims[2],
        })
    }

    pub fn input(&self) -> usize {
        self.alpha_dim + self.beta_dim + self.theta_dim
    }

    pub fn output(&self) -> usize {
        self.mlp.output()
    }

    /// Concatenated attribute row `[α, β, θ]` after a length check.
    pub fn attributes(&self, alpha: &[f64], beta: &[f64], theta: &[f64]) -> Result<Tensor> {
        if alpha.len() != self.alpha_dim || beta.len() != self.beta_dim || theta.len() != self.theta_dim {
            return invalid(format!(
                "attribute lengths ({}, {}, {}) differ from ({}, {}, {})",
                alpha.len(),
                beta.len(),
                theta.len(),
                self.alpha_dim,
                self.beta_dim,
                self.theta_dim
            ));
        }
        Ok(Tensor::row_vector(&[alpha, beta, theta].concat()))
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut Binding, attributes: Var) -> Result<Var> {
        self.mlp.forward(tape, bind, attributes)
    }
}

/// Evaluates one attention block on a graph without recording gradients.
pub fn gat_block(graph: &MeshGraph, block: &GatBlock, store: &ParamStore) -> Result<MeshGraph> {
    let mut tape = Tape::new();
    let mut bind = Binding::new(store, false);
    let x = tape.constant(graph.features.clone());
    let y = block.forward(&mut tape, &mut bind, x, &graph.topology)?;
    MeshGraph::new(tape.value(y).clone(), graph.topology.clone())
}

pub fn edge_pool(graph: &MeshGraph, pool: &EdgePool, store: &ParamStore) -> Result<(MeshGraph, PoolRecord)> {
    let mut tape = Tape::new();
    let mut bind = Binding::new(store, false);
    let x = tape.constant(graph.features.clone());
    let (y, record) = pool.forward(&mut tape, &mut bind, x, &graph.topology)?;
    Ok((MeshGraph::new(tape.value(y).clone(), record.pooled.clone())?, record))
}

pub fn edge_unpool(pooled: &MeshGraph, record: &PoolRecord) -> Result<MeshGraph> {
    if !Arc::ptr_eq(&pooled.topology, &record.pooled) && *pooled.topology != *record.pooled {
        return invalid("pooled graph does not match the pool record");
    }
    let mut tape = Tape::new();
    let x = tape.constant(pooled.features.clone());
    let y = unpool(&mut tape, x, record)?;
    MeshGraph::new(tape.value(y).clone(), record.original.clone())
}

pub fn attribute_parser(alpha: &[f64], beta: &[f64], theta: &[f64], parser: &AttributeParser, store: &ParamStore) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut bind = Binding::new(store, false);
    let a = tape.constant(parser.attributes(alpha, beta, theta)?);
    let y = parser.forward(&mut tape, &mut bind, a)?;
    Ok(tape.value(y).data().to_vec())
}

pub fn infuse(encoding: &[f64], graph: &MeshGraph) -> Result<MeshGraph> {
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::row_vector(encoding));
    let x = tape.constant(graph.features.clone());
    let y = infuse_var(&mut tape, e, x)?;
    MeshGraph::new(tape.value(y).clone(), graph.topology.clone())
}

/// Layer widths of both generators and the parser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub heads: usize,
    pub coarse_first: usize,
    pub coarse_branch: Vec<usize>,
    pub coarse_magnitude: Vec<usize>,
    pub coarse_direction: Vec<usize>,
    pub parser: Vec<usize>,
    pub detail_first: usize,
    pub detail_branch: Vec<usize>,
    pub detail_magnitude: Vec<usize>,
    pub detail_direction: Vec<usize>,
    /// Detail branch block after which nodes are pooled (1-based).
    pub pool_after: usize,
    /// Detail branch block after which nodes are unpooled (1-based).
    pub unpool_after: usize,
    /// Initial bias of the last magnitude layer.
    pub magnitude_bias: f64,
}

impl ArchConfig {
    /// Full-size network.
    pub fn full_width() -> Self {
        Self {
            heads: 4,
            coarse_first: 256,
            coarse_branch: vec![512, 512, 256],
            coarse_magnitude: vec![256, 128, 1],
            coarse_direction: vec![256, 128, 3],
            parser: vec![256, 512, 1024],
            detail_first: 1024,
            detail_branch: vec![256, 256, 128, 96],
            detail_magnitude: vec![128, 64, 1],
            detail_direction: vec![128, 64, 3],
            pool_after: 2,
            unpool_after: 4,
            magnitude_bias: 0.1,
        }
    }

    /// Reduced widths that train on a single CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            heads: 4,
            coarse_first: 32,
            coarse_branch: vec![32, 32, 32],
            coarse_magnitude: vec![32, 16, 1],
            coarse_direction: vec![32, 16, 3],
            parser: vec![32, 64, 64],
            detail_first: 64,
            detail_branch: vec![32, 32, 16, 16],
            detail_magnitude: vec![16, 8, 1],
            detail_direction: vec![16, 8, 3],
            pool_after: 2,
            unpool_after: 4,
            magnitude_bias: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parser_out = self.parser.last().copied().unwrap_or(0);
        if parser_out != self.detail_first {
            return invalid(format!(
                "parser output width {parser_out} differs from the first detail block width {}",
                self.detail_first
            ));
        }
        for &w in std::iter::once(&self.coarse_first)
            .chain(&self.coarse_branch)
            .chain(std::iter::once(&self.detail_first))
            .chain(&self.detail_branch)
        {
            block_split(w, self.heads)?;
        }
        if self.coarse_branch.is_empty() || self.detail_branch.is_empty() {
            return invalid("generator branches need at least one block");
        }
        if self.parser.contains(&0) {
            return invalid("parser layer of zero width");
        }
        for (name, widths, end) in [
            ("coarse magnitude", &self.coarse_magnitude, 1),
            ("coarse direction", &self.coarse_direction, 3),
            ("detail magnitude", &self.detail_magnitude, 1),
            ("detail direction", &self.detail_direction, 3),
        ] {
            if widths.last() != Some(&end) || widths.contains(&0) {
                return invalid(format!("{name} head widths {widths:?} must be positive and end in {end}"));
            }
        }
        let blocks = self.detail_branch.len();
        let pooling = self.pool_after != 0 || self.unpool_after != 0;
        if pooling && !(1 <= self.pool_after && self.pool_after < self.unpool_after && self.unpool_after <= blocks) {
            return invalid(format!(
                "pool after block {} / unpool after block {} invalid for {blocks} detail blocks",
                self.pool_after, self.unpool_after
            ));
        }
        if !self.magnitude_bias.is_finite() {
            return invalid("magnitude bias must be finite");
        }
        Ok(())
    }

    /// Pooling is disabled when both positions are zero.
    pub fn pooling(&self) -> bool {
        self.pool_after != 0
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::fd_check;
    use crate::mesh::tests::{grid, icosphere};
    use crate::mesh::{build_graph, TriMesh};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn random_graph(mesh: &TriMesh, width: usize, rng: &mut ChaCha8Rng) -> MeshGraph {
        build_graph(mesh, random_tensor(rng, mesh.vertex_count(), width, 1.0)).unwrap()
    }

    fn permuted_graph(graph: &MeshGraph, order: &[usize]) -> MeshGraph {
        // node k of the new graph is node order[k] of the old one
        let inv = crate::mesh::inverse_permutation(order, order.len()).unwrap();
        let edges: Vec<(usize, usize)> = graph.topology.edges.iter().map(|&(u, v)| (inv[u], inv[v])).collect();
        let topo = GraphTopology::from_edges(graph.node_count(), &edges).unwrap();
        MeshGraph::new(graph.features.select_rows(order), Arc::new(topo)).unwrap()
    }

    fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        order
    }

    #[test]
    fn block_split_follows_width_rule() {
        assert_eq!(block_split(256, 4).unwrap(), (128, 32));
        assert_eq!(block_split(96, 4).unwrap(), (48, 12));
        assert!(block_split(30, 4).is_err());
    }

    #[test]
    fn single_node_block_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let block = GatBlock::new(&mut store, &mut rng, "b", 3, 2, 2, 2, Activation::Tanh).unwrap();
        let v = [0.3, -0.2, 0.9];
        let graph = MeshGraph::new(Tensor::row_vector(&v), Arc::new(GraphTopology::from_edges(1, &[]).unwrap())).unwrap();
        let out = gat_block(&graph, &block, &store).unwrap();
        let mut expected = Vec::new();
        let lin = |name: &str, cols: usize, bias: bool| -> Vec<f64> {
            let w = store.get(name).unwrap();
            (0..cols)
                .map(|c| {
                    let b = if bias { store.get("b.self.bias").unwrap().get(0, c) } else { 0.0 };
                    b + (0..3).map(|r| v[r] * w.get(r, c)).sum::<f64>()
                })
                .collect()
        };
        expected.extend(lin("b.self.weight", 2, true));
        expected.extend(lin("b.head0.weight", 2, false));
        expected.extend(lin("b.head1.weight", 2, false));
        for (o, e) in out.features.data().iter().zip(expected) {
            assert!((o - e.tanh()).abs() < 1e-14);
        }
        assert_eq!(block.output(), 6);
    }

    #[test]
    fn block_output_width_matches_full_width_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let block = GatBlock::with_width(&mut store, &mut rng, "c", 7, 256, 4, Activation::Tanh).unwrap();
        assert_eq!((block.self_width, block.head_width, block.output()), (128, 32, 256));
    }

    #[test]
    fn equal_features_on_a_regular_graph_stay_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let block = GatBlock::with_width(&mut store, &mut rng, "b", 4, 8, 2, Activation::Relu).unwrap();
        // cycle graph: every node has degree 2
        let edges: Vec<(usize, usize)> = (0..6).map(|i| (i, (i + 1) % 6)).collect();
        let topo = Arc::new(GraphTopology::from_edges(6, &edges).unwrap());
        let row = [0.5, -1.0, 0.25, 2.0];
        let feats = Tensor::from_rows(&vec![row.to_vec(); 6]).unwrap();
        let out = gat_block(&MeshGraph::new(feats, topo).unwrap(), &block, &store).unwrap();
        for r in 1..6 {
            assert_eq!(out.features.row(r), out.features.row(0));
        }
    }

    #[test]
    fn block_rejects_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let block = GatBlock::with_width(&mut store, &mut rng, "b", 4, 8, 2, Activation::Relu).unwrap();
        let g = random_graph(&icosphere(0), 5, &mut rng);
        assert!(matches!(gat_block(&g, &block, &store), Err(Error::Validation(_))));
    }

    #[test]
    fn attention_matches_dense_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let block = GatBlock::new(&mut store, &mut rng, "b", 3, 2, 2, 3, Activation::Identity).unwrap();
        let mesh = icosphere(1);
        let g = random_graph(&mesh, 3, &mut rng);
        let out = gat_block(&g, &block, &store).unwrap();
        let n = g.node_count();
        let x = &g.features;
        let lin = |w: &Tensor, i: usize| -> Vec<f64> {
            (0..w.cols()).map(|c| (0..w.rows()).map(|r| x.get(i, r) * w.get(r, c)).sum()).collect()
        };
        let dot = |a: &[f64], b: &Tensor| -> f64 { a.iter().enumerate().map(|(k, v)| v * b.get(k, 0)).sum() };
        for i in 0..n {
            for h in 0..2 {
                let w = store.get(&format!("b.head{h}.weight")).unwrap();
                let ad = store.get(&format!("b.head{h}.att_dst")).unwrap();
                let asrc = store.get(&format!("b.head{h}.att_src")).unwrap();
                let zi = lin(w, i);
                let ring = g.topology.neighbors(i);
                let logits: Vec<f64> = ring
                    .iter()
                    .map(|&j| {
                        let e = dot(&zi, ad) + dot(&lin(w, j), asrc);
                        if e > 0.0 { e } else { ATTENTION_SLOPE * e }
                    })
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                for c in 0..3 {
                    let expected: f64 = ring
                        .iter()
                        .zip(&logits)
                        .map(|(&j, l)| (l - max).exp() / total * lin(w, j)[c])
                        .sum();
                    let got = out.features.get(i, 2 + 3 * h + c);
                    assert!((got - expected).abs() < 1e-12, "node {i} head {h}: {got} vs {expected}");
                }
            }
        }
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = GatBlock::with_width(&mut store, &mut rng, "b", 5, 16, 4, Activation::Tanh).unwrap();
        let g = random_graph(&icosphere(1), 5, &mut rng);
        let order = shuffled(g.node_count(), &mut rng);
        let a = gat_block(&g, &block, &store).unwrap();
        let b = gat_block(&permuted_graph(&g, &order), &block, &store).unwrap();
        assert!(b.features.max_abs_diff(&a.features.select_rows(&order)) < 1e-12);
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let block = GatBlock::with_width(&mut store, &mut rng, "b", 3, 8, 2, Activation::Tanh).unwrap();
        let g = random_graph(&grid(3, 3, 1.0), 3, &mut rng);
        let err = fd_check(
            |tape, x| {
                let mut bind = Binding::new(&store, false);
                let y = block.forward(tape, &mut bind, x, &g.topology)?;
                let y = tape.mul(y, y)?;
                tape.sum(y)
            },
            &g.features,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }

    fn pool_store(width: usize, seed: u64) -> (ParamStore, EdgePool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pool = EdgePool::new(&mut store, &mut rng, "p", width).unwrap();
        (store, pool)
    }

    #[test]
    fn two_node_graph_pools_to_scaled_mean() {
        let (store, pool) = pool_store(2, 0);
        let topo = Arc::new(GraphTopology::from_edges(2, &[(0, 1)]).unwrap());
        let g = MeshGraph::new(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -2.0]]).unwrap(), topo).unwrap();
        let (p, record) = edge_pool(&g, &pool, &store).unwrap();
        assert_eq!(p.node_count(), 1);
        let w: Vec<f64> = (0..2)
            .map(|k| store.get("p.w_first").unwrap().get(k, 0) + store.get("p.w_second").unwrap().get(k, 0))
            .collect();
        let score = (0.5 * (w[0] * 4.0 + w[1] * 0.0)).tanh();
        assert!((p.features.get(0, 0) - 2.0 * (1.0 + score)).abs() < 1e-14);
        assert!((p.features.get(0, 1) - 0.0).abs() < 1e-14);
        assert_eq!(record.contracted, vec![(0, 1)]);

        let u = edge_unpool(&p, &record).unwrap();
        assert_eq!(u.features.row(0), u.features.row(1));
        assert_eq!(u.node_count(), 2);
    }

    #[test]
    fn path_graph_pools_to_half() {
        let (store, pool) = pool_store(1, 5);
        let topo = Arc::new(GraphTopology::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap());
        let g = MeshGraph::new(Tensor::column_vector(&[0.1, 0.2, 0.3, 0.4]), topo).unwrap();
        let (p, record) = edge_pool(&g, &pool, &store).unwrap();
        assert_eq!(p.node_count(), 2);
        assert_eq!(record.original_count(), 4);
    }

    #[test]
    fn single_node_cannot_be_pooled() {
        let (store, pool) = pool_store(1, 5);
        let g = MeshGraph::new(Tensor::scalar(1.0), Arc::new(GraphTopology::from_edges(1, &[]).unwrap())).unwrap();
        assert!(matches!(edge_pool(&g, &pool, &store), Err(Error::Validation(_))));
    }

    #[test]
    fn unpool_rejects_foreign_record() {
        let (store, pool) = pool_store(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = random_graph(&icosphere(1), 2, &mut rng);
        let (_, record) = edge_pool(&g, &pool, &store).unwrap();
        let other = random_graph(&grid(2, 2, 1.0), 2, &mut rng);
        assert!(edge_unpool(&other, &record).is_err());
    }

    #[test]
    fn pool_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (store, pool) = pool_store(4, 2);
        let g = random_graph(&icosphere(2), 4, &mut rng);
        let order = shuffled(g.node_count(), &mut rng);
        let gp = permuted_graph(&g, &order);
        let (a, ra) = edge_pool(&g, &pool, &store).unwrap();
        let (b, rb) = edge_pool(&gp, &pool, &store).unwrap();
        assert_eq!(a.node_count(), b.node_count());
        // same node in both labelings lands in clusters with equal features
        for (k, &old) in order.iter().enumerate() {
            let fa = a.features.row(ra.mapping[old]);
            let fb = b.features.row(rb.mapping[k]);
            for (x, y) in fa.iter().zip(fb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn check_pool_counts(mesh: &TriMesh, width: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, pool) = pool_store(width, seed);
        let g = random_graph(mesh, width, &mut rng);
        let n = g.node_count();
        let (p, record) = edge_pool(&g, &pool, &store).unwrap();
        let m = p.node_count();
        assert!(m >= n.div_ceil(2) && m <= (6 * n).div_ceil(10), "{n} -> {m}");
        let mut seen = vec![false; m];
        for &c in record.mapping.iter() {
            seen[c] = true;
        }
        assert!(seen.iter().all(|&s| s));
        let u = edge_unpool(&p, &record).unwrap();
        assert_eq!(u.node_count(), n);
        assert_eq!(u.topology.dense_adjacency(), g.topology.dense_adjacency());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn pooled_count_stays_in_range(rows in 2usize..12, cols in 2usize..12, seed in 0u64..1000) {
            check_pool_counts(&grid(rows, cols, 1.0), 3, seed);
        }
    }

    #[test]
    fn pooled_count_on_spheres() {
        for (s, seed) in [(1, 0), (2, 1), (3, 2)] {
            check_pool_counts(&icosphere(s), 4, seed);
        }
    }

    #[test]
    fn pool_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (store, pool) = pool_store(3, 4);
        let g = random_graph(&grid(3, 4, 1.0), 3, &mut rng);
        let err = fd_check(
            |tape, x| {
                let mut bind = Binding::new(&store, false);
                let (y, rec) = pool.forward(tape, &mut bind, x, &g.topology)?;
                let y = unpool(tape, y, &rec)?;
                let y = tape.mul(y, y)?;
                tape.sum(y)
            },
            &g.features,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn parser_zero_inputs_give_zero_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let parser = AttributeParser::new(&mut store, &mut rng, "parser", [3, 10, 72], &[256, 512, 1024]).unwrap();
        assert_eq!(parser.input(), 85);
        let e = attribute_parser(&[0.0; 3], &[0.0; 10], &[0.0; 72], &parser, &store).unwrap();
        assert_eq!(e.len(), 1024);
        assert!(e.iter().all(|&v| v == 0.0));
        assert!(attribute_parser(&[0.0; 2], &[0.0; 10], &[0.0; 72], &parser, &store).is_err());
    }

    #[test]
    fn infuse_is_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_graph(&icosphere(1), 5, &mut rng);
        assert_eq!(infuse(&[1.0; 5], &g).unwrap().features, g.features);
        let doubled = infuse(&[2.0; 5], &g).unwrap();
        assert_eq!(doubled.features, g.features.map(|v| 2.0 * v));
        let e: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let out = infuse(&e, &g).unwrap();
        for i in 0..g.node_count() {
            for k in 0..5 {
                assert_eq!(out.features.get(i, k), e[k] * g.features.get(i, k));
            }
        }
        assert!(infuse(&[1.0; 4], &g).is_err());
    }

    #[test]
    fn zero_weight_magnitude_head_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let head = MagnitudeHead::new(&mut store, &mut rng, "m", 4, &[8, 1], 0.0).unwrap();
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let mut bind = Binding::new(&store, false);
        let x = tape.constant(random_tensor(&mut rng, 6, 4, 3.0));
        let y = head.forward(&mut tape, &mut bind, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert!(MagnitudeHead::new(&mut store, &mut rng, "bad", 4, &[8, 2], 0.0).is_err());
    }

    #[test]
    fn direction_head_keeps_unit_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.6, 0.8, 0.0]]).unwrap());
        let y = tape.l2_normalize_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.6, 0.8, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let head = DirectionHead::new(&mut store, &mut rng, "d", 5, &[128, 64, 3]).unwrap();
        let mut bind = Binding::new(&store, false);
        let x = tape.constant(random_tensor(&mut rng, 20, 5, 2.0));
        let y = head.forward(&mut tape, &mut bind, x).unwrap();
        for r in 0..20 {
            let n: f64 = tape.value(y).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-9 || n == 0.0);
        }
        assert!(DirectionHead::new(&mut store, &mut rng, "bad", 5, &[4, 1]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn magnitude_head_is_nonnegative(seed in 0u64..10_000, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let head = MagnitudeHead::new(&mut store, &mut rng, "m", 3, &[6, 4, 1], 0.1).unwrap();
            let mut tape = Tape::new();
            let mut bind = Binding::new(&store, false);
            let x = tape.constant(random_tensor(&mut rng, 10, 3, scale));
            let y = head.forward(&mut tape, &mut bind, x).unwrap();
            prop_assert!(tape.value(y).data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn heads_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let mag = MagnitudeHead::new(&mut store, &mut rng, "m", 4, &[6, 1], 0.5).unwrap();
        let dir = DirectionHead::new(&mut store, &mut rng, "d", 4, &[6, 3]).unwrap();
        let x0 = random_tensor(&mut rng, 5, 4, 1.0);
        let err = fd_check(
            |tape, x| {
                let mut bind = Binding::new(&store, false);
                let m = mag.forward(tape, &mut bind, x)?;
                let d = dir.forward(tape, &mut bind, x)?;
                let y = tape.mul_col(d, m)?;
                let t = tape.constant(Tensor::filled(5, 3, 0.2));
                tape.mse_loss(y, t)
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn binding_maps_gradients_to_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let layer = Dense::new(&mut store, &mut rng, "l", 2, 1).unwrap();
        store.insert("unused", Tensor::zeros(2, 2)).unwrap();
        let mut tape = Tape::new();
        let mut bind = Binding::new(&store, true);
        let x = tape.constant(Tensor::row_vector(&[3.0, -1.0]));
        let y = layer.forward(&mut tape, &mut bind, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = bind.gradients(&grads);
        assert_eq!(g[0].data(), &[3.0, -1.0]);
        assert_eq!(g[1].data(), &[1.0]);
        assert_eq!(g[2], Tensor::zeros(2, 2));
    }

    #[test]
    fn arch_presets_validate() {
        ArchConfig::full_width().validate().unwrap();
        ArchConfig::desk().validate().unwrap();
        let mut bad = ArchConfig::desk();
        bad.parser = vec![32, 48];
        assert!(bad.validate().is_err());
        let mut bad = ArchConfig::desk();
        bad.unpool_after = 1;
        assert!(bad.validate().is_err());
    }
}
