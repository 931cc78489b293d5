//! Trainable parameters and the attentive layer encoder.
//!
//! A layer of triples `(h_i, r_i, t_i)` is encoded as `Σ π_i e(t_i)` where the
//! weights are a softmax over scalar logits
//! `w1 · act(W0 [e(h_i) ‖ r_i] + b0) + b1`. Layer 0 is the mean of the seed
//! entity embeddings. A user or item is represented by concatenating layers
//! `0..=L` of its local graph followed by layers `0..=L` of its non-local graph.

use std::collections::HashMap;
use std::io::{self, Read, Write};

use rand::distributions::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio;
use crate::dataset::{IdMap, Triple};
use crate::graphbuild::{LayeredGraph, ObjectGraphs};
use crate::seeding::{self, STREAM_INIT};

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("cannot encode an empty {0}")]
    Empty(&'static str),
    #[error("representation length mismatch: user {user}, item {item}")]
    LengthMismatch { user: usize, item: usize },
    #[error("graph has {have} layers, need at least {need}")]
    TooShallow { have: usize, need: usize },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Table {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Table {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

impl Activation {
    const LEAKY_SLOPE: f64 = 0.2;

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    Self::LEAKY_SLOPE * x
                }
            }
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    Self::LEAKY_SLOPE
                }
            }
        }
    }
}

/// All trainable parameters.
///
/// `w0` is `d × 2d` and acts on `[e(h) ‖ r]`; its left half multiplies the head
/// embedding and its right half the relation embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub d: usize,
    pub entity: Table,
    pub relation: Table,
    pub w0: Table,
    pub b0: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: f64,
}

fn xavier(rng: &mut impl rand::Rng, fan_in: usize, fan_out: usize, len: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    (0..len).map(|_| dist.sample(rng)).collect()
}

/// Xavier-uniform initialisation; biases start at zero.
pub fn init_params(n_entities: usize, n_relations: usize, d: usize, rng_seed: u64) -> ParamStore {
    assert!(n_entities > 0 && n_relations > 0 && d > 0);
    let mut rng = seeding::rng_from(rng_seed, &[STREAM_INIT]);
    ParamStore {
        d,
        entity: Table {
            rows: n_entities,
            cols: d,
            data: xavier(&mut rng, n_entities, d, n_entities * d),
        },
        relation: Table {
            rows: n_relations,
            cols: d,
            data: xavier(&mut rng, n_relations, d, n_relations * d),
        },
        w0: Table {
            rows: d,
            cols: 2 * d,
            data: xavier(&mut rng, 2 * d, d, 2 * d * d),
        },
        b0: vec![0.0; d],
        w1: xavier(&mut rng, d, 1, d),
        b1: 0.0,
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl ParamStore {
    pub fn n_entities(&self) -> usize {
        self.entity.rows
    }

    pub fn n_relations(&self) -> usize {
        self.relation.rows
    }

    /// Fails with the name of the first tensor holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<(), EncodeError> {
        let tensors: [(&'static str, &[f64]); 6] = [
            ("entity_embeddings", &self.entity.data),
            ("relation_embeddings", &self.relation.data),
            ("attn_w0", &self.w0.data),
            ("attn_b0", &self.b0),
            ("attn_w1", &self.w1),
            ("attn_b1", std::slice::from_ref(&self.b1)),
        ];
        for (name, t) in tensors {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(EncodeError::NonFinite(name));
            }
        }
        Ok(())
    }

    /// `W0[:, :d] · e` for the head half.
    fn project_head(&self, e: &[f64], out: &mut [f64]) {
        let d = self.d;
        for (k, o) in out.iter_mut().enumerate() {
            *o = dot(&self.w0.row(k)[..d], e);
        }
    }

    /// `W0[:, d:] · r + b0` for the relation half.
    fn project_relation(&self, r: &[f64], out: &mut [f64]) {
        let d = self.d;
        for (k, o) in out.iter_mut().enumerate() {
            *o = dot(&self.w0.row(k)[d..], r) + self.b0[k];
        }
    }

    const MAGIC: &'static [u8; 4] = b"KGIC";
    const VERSION: u32 = 1;

    /// Little-endian checkpoint: magic, version, `(n_entities, n_relations, d, L)`
    /// as u32, then every tensor as a u64-length-prefixed f64 array.
    pub fn save<W: Write>(&self, w: &mut W, depth: usize) -> io::Result<()> {
        w.write_all(Self::MAGIC)?;
        binio::write_u32(w, Self::VERSION)?;
        for v in [self.n_entities(), self.n_relations(), self.d, depth] {
            binio::write_u32(w, v as u32)?;
        }
        binio::write_f64s(w, &self.entity.data)?;
        binio::write_f64s(w, &self.relation.data)?;
        binio::write_f64s(w, &self.w0.data)?;
        binio::write_f64s(w, &self.b0)?;
        binio::write_f64s(w, &self.w1)?;
        binio::write_f64s(w, &[self.b1])?;
        Ok(())
    }

    /// Returns the parameters and the stored depth `L`.
    pub fn load<R: Read>(r: &mut R) -> Result<(ParamStore, usize), CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
        if &magic != Self::MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = binio::read_u32(r)?;
        if version != Self::VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let n_entities = binio::read_u32(r)? as usize;
        let n_relations = binio::read_u32(r)? as usize;
        let d = binio::read_u32(r)? as usize;
        let depth = binio::read_u32(r)? as usize;
        let mut tensor = |name: &str, len: usize| -> Result<Vec<f64>, CheckpointError> {
            let v = binio::read_f64s(r, len)?;
            if v.len() != len {
                return Err(CheckpointError::Corrupt(format!("{name}: expected {len} values, found {}", v.len())));
            }
            Ok(v)
        };
        let entity = tensor("entity_embeddings", n_entities * d)?;
        let relation = tensor("relation_embeddings", n_relations * d)?;
        let w0 = tensor("attn_w0", 2 * d * d)?;
        let b0 = tensor("attn_b0", d)?;
        let w1 = tensor("attn_w1", d)?;
        let b1 = tensor("attn_b1", 1)?[0];
        Ok((
            ParamStore {
                d,
                entity: Table {
                    rows: n_entities,
                    cols: d,
                    data: entity,
                },
                relation: Table {
                    rows: n_relations,
                    cols: d,
                    data: relation,
                },
                w0: Table {
                    rows: d,
                    cols: 2 * d,
                    data: w0,
                },
                b0,
                w1,
                b1,
            },
            depth,
        ))
    }

    /// Writes `entity_id \t v1 \t … \t vd` rows using original entity ids.
    pub fn write_entity_tsv<W: Write>(&self, ids: &IdMap, w: &mut W) -> io::Result<()> {
        for e in 0..self.n_entities() {
            let orig = if e < ids.len() { ids.original(e as u32) } else { e as u64 };
            write!(w, "{orig}")?;
            for v in self.entity.row(e) {
                write!(w, "\t{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Precomputed attention-MLP input projections for a set of heads and for every
/// relation. Valid only for the parameters it was computed from.
pub struct Projections {
    d: usize,
    head_slot: Vec<u32>,
    heads: Vec<f64>,
    relations: Vec<f64>,
}

impl Projections {
    const ABSENT: u32 = u32::MAX;

    /// Projections for the listed heads (any order, duplicates allowed).
    pub fn for_heads(params: &ParamStore, heads: &[u32]) -> Self {
        let d = params.d;
        let mut head_slot = vec![Self::ABSENT; params.n_entities()];
        let mut order = Vec::new();
        for &h in heads {
            if head_slot[h as usize] == Self::ABSENT {
                head_slot[h as usize] = order.len() as u32;
                order.push(h);
            }
        }
        let mut head_data = vec![0.0; order.len() * d];
        head_data
            .par_chunks_mut(d)
            .zip(order.par_iter())
            .for_each(|(out, &h)| params.project_head(params.entity.row(h as usize), out));
        let mut relations = vec![0.0; params.n_relations() * d];
        relations
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(r, out)| params.project_relation(params.relation.row(r), out));
        Projections {
            d,
            head_slot,
            heads: head_data,
            relations,
        }
    }

    /// Projections for every head appearing in the given graphs.
    pub fn for_graphs<'a>(params: &ParamStore, graphs: impl Iterator<Item = &'a LayeredGraph>) -> Self {
        let heads: Vec<u32> = graphs
            .flat_map(|g| g.layers.iter().flatten().map(|t| t.head))
            .collect();
        Self::for_heads(params, &heads)
    }

    pub fn all(params: &ParamStore) -> Self {
        let heads: Vec<u32> = (0..params.n_entities() as u32).collect();
        Self::for_heads(params, &heads)
    }

    fn head(&self, h: u32) -> &[f64] {
        let slot = self.head_slot[h as usize];
        assert!(slot != Self::ABSENT, "no projection for head {h}");
        &self.heads[slot as usize * self.d..(slot as usize + 1) * self.d]
    }

    fn relation(&self, r: u32) -> &[f64] {
        &self.relations[r as usize * self.d..(r as usize + 1) * self.d]
    }

    /// Pre-activation `W0 [e(h) ‖ r] + b0` of one triple.
    fn preactivation(&self, t: &Triple, out: &mut [f64]) {
        let (p, q) = (self.head(t.head), self.relation(t.relation));
        for k in 0..self.d {
            out[k] = p[k] + q[k];
        }
    }
}

/// Encoding of one layer. `weights` holds the attention distribution for
/// triple layers and is `None` for the seed layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerEncoding {
    pub embedding: Vec<f64>,
    pub weights: Option<Vec<f64>>,
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn attention_logits(layer: &[Triple], params: &ParamStore, proj: &Projections, act: Activation) -> Result<Vec<f64>, EncodeError> {
    let mut z = vec![0.0; params.d];
    let logits: Vec<f64> = layer
        .iter()
        .map(|t| {
            proj.preactivation(t, &mut z);
            z.iter().zip(&params.w1).map(|(&zk, &wk)| wk * act.apply(zk)).sum::<f64>() + params.b1
        })
        .collect();
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(EncodeError::NonFinite("attention logits"));
    }
    Ok(logits)
}

pub(crate) fn encode_layer_with(
    layer: &[Triple],
    params: &ParamStore,
    proj: &Projections,
    act: Activation,
) -> Result<LayerEncoding, EncodeError> {
    if layer.is_empty() {
        return Err(EncodeError::Empty("triple layer"));
    }
    let weights = softmax(&attention_logits(layer, params, proj, act)?);
    let mut embedding = vec![0.0; params.d];
    for (t, &w) in layer.iter().zip(&weights) {
        axpy(w, params.entity.row(t.tail as usize), &mut embedding);
    }
    Ok(LayerEncoding {
        embedding,
        weights: Some(weights),
    })
}

/// Attention distribution over the triples of a layer.
pub fn attention_weights(layer: &[Triple], params: &ParamStore, act: Activation) -> Result<Vec<f64>, EncodeError> {
    if layer.is_empty() {
        return Err(EncodeError::Empty("triple layer"));
    }
    let heads: Vec<u32> = layer.iter().map(|t| t.head).collect();
    let proj = Projections::for_heads(params, &heads);
    Ok(softmax(&attention_logits(layer, params, &proj, act)?))
}

pub fn encode_layer(layer: &[Triple], params: &ParamStore, act: Activation) -> Result<LayerEncoding, EncodeError> {
    let heads: Vec<u32> = layer.iter().map(|t| t.head).collect();
    encode_layer_with(layer, params, &Projections::for_heads(params, &heads), act)
}

/// Layer 0: the mean of the seed entity embeddings.
pub fn encode_seed(seed: &[u32], params: &ParamStore) -> Result<LayerEncoding, EncodeError> {
    if seed.is_empty() {
        return Err(EncodeError::Empty("seed"));
    }
    let mut embedding = vec![0.0; params.d];
    let w = 1.0 / seed.len() as f64;
    for &e in seed {
        axpy(w, params.entity.row(e as usize), &mut embedding);
    }
    Ok(LayerEncoding {
        embedding,
        weights: None,
    })
}

pub(crate) fn encode_graph_with(
    graph: &LayeredGraph,
    params: &ParamStore,
    proj: &Projections,
    act: Activation,
) -> Result<Vec<LayerEncoding>, EncodeError> {
    let mut out = Vec::with_capacity(graph.depth() + 1);
    out.push(encode_seed(&graph.seed_entities, params)?);
    for layer in &graph.layers {
        out.push(encode_layer_with(layer, params, proj, act)?);
    }
    Ok(out)
}

/// Encodings of layers `0..=depth` of a graph: index 0 is the seed layer.
pub fn encode_graph(graph: &LayeredGraph, params: &ParamStore, act: Activation) -> Result<Vec<LayerEncoding>, EncodeError> {
    let proj = Projections::for_graphs(params, std::iter::once(graph));
    encode_graph_with(graph, params, &proj, act)
}

/// Layer encodings of one user or item.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectEncodings {
    pub local: Vec<LayerEncoding>,
    pub nonlocal: Option<Vec<LayerEncoding>>,
}

impl ObjectEncodings {
    pub(crate) fn encode_with(
        graphs: &ObjectGraphs,
        params: &ParamStore,
        proj: &Projections,
        act: Activation,
    ) -> Result<Self, EncodeError> {
        Ok(ObjectEncodings {
            local: encode_graph_with(&graphs.local, params, proj, act)?,
            nonlocal: graphs
                .nonlocal
                .as_ref()
                .map(|g| encode_graph_with(g, params, proj, act))
                .transpose()?,
        })
    }

    pub fn encode(graphs: &ObjectGraphs, params: &ParamStore, act: Activation) -> Result<Self, EncodeError> {
        let proj = Projections::for_graphs(params, graphs.iter());
        Self::encode_with(graphs, params, &proj, act)
    }

    pub fn graphs(&self) -> impl Iterator<Item = &Vec<LayerEncoding>> {
        std::iter::once(&self.local).chain(self.nonlocal.as_ref())
    }

    /// Concatenation of layers `0..=depth` of the local graph, then of the
    /// non-local graph when present.
    pub fn representation(&self, depth: usize) -> Result<Vec<f64>, EncodeError> {
        let mut out = Vec::new();
        for g in self.graphs() {
            if g.len() < depth + 1 {
                return Err(EncodeError::TooShallow {
                    have: g.len(),
                    need: depth + 1,
                });
            }
            for layer in &g[..=depth] {
                out.extend_from_slice(&layer.embedding);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub user_vec: Vec<f64>,
    pub item_vec: Vec<f64>,
    pub score: f64,
}

/// Inner product of the concatenated user and item representations.
pub fn predict(user: &ObjectEncodings, item: &ObjectEncodings, depth: usize) -> Result<Prediction, EncodeError> {
    let user_vec = user.representation(depth)?;
    let item_vec = item.representation(depth)?;
    if user_vec.len() != item_vec.len() {
        return Err(EncodeError::LengthMismatch {
            user: user_vec.len(),
            item: item_vec.len(),
        });
    }
    let score = dot(&user_vec, &item_vec);
    Ok(Prediction {
        user_vec,
        item_vec,
        score,
    })
}

/// Sparse per-row gradient accumulator.
pub(crate) type RowGrads = HashMap<u32, Vec<f64>>;

pub(crate) fn add_row(map: &mut RowGrads, row: u32, scale: f64, v: &[f64]) {
    let slot = map.entry(row).or_insert_with(|| vec![0.0; v.len()]);
    axpy(scale, v, slot);
}

/// Encoder gradients accumulated over a group of objects, before the
/// head/relation projection gradients are pushed through `W0`.
pub(crate) struct EncoderGrads {
    pub entity: RowGrads,
    pub head_proj: RowGrads,
    pub rel_proj: RowGrads,
    pub w1: Vec<f64>,
    pub b1: f64,
}

impl EncoderGrads {
    pub fn new(d: usize) -> Self {
        EncoderGrads {
            entity: HashMap::new(),
            head_proj: HashMap::new(),
            rel_proj: HashMap::new(),
            w1: vec![0.0; d],
            b1: 0.0,
        }
    }
}

/// Backpropagates `d_embedding` through a triple layer encoding.
pub(crate) fn layer_backward(
    layer: &[Triple],
    enc: &LayerEncoding,
    d_embedding: &[f64],
    params: &ParamStore,
    proj: &Projections,
    act: Activation,
    grads: &mut EncoderGrads,
) {
    let d = params.d;
    let weights = enc.weights.as_ref().expect("triple layer has weights");
    let d_weights: Vec<f64> = layer
        .iter()
        .map(|t| dot(params.entity.row(t.tail as usize), d_embedding))
        .collect();
    let mean: f64 = weights.iter().zip(&d_weights).map(|(w, g)| w * g).sum();
    let mut z = vec![0.0; d];
    let mut dz = vec![0.0; d];
    for ((t, &w), &dw) in layer.iter().zip(weights).zip(&d_weights) {
        add_row(&mut grads.entity, t.tail, w, d_embedding);
        let d_logit = w * (dw - mean);
        if d_logit == 0.0 {
            continue;
        }
        proj.preactivation(t, &mut z);
        for k in 0..d {
            grads.w1[k] += d_logit * act.apply(z[k]);
            dz[k] = d_logit * params.w1[k] * act.derivative(z[k]);
        }
        grads.b1 += d_logit;
        add_row(&mut grads.head_proj, t.head, 1.0, &dz);
        add_row(&mut grads.rel_proj, t.relation, 1.0, &dz);
    }
}

pub(crate) fn seed_backward(seed: &[u32], d_embedding: &[f64], grads: &mut EncoderGrads) {
    let w = 1.0 / seed.len() as f64;
    for &e in seed {
        add_row(&mut grads.entity, e, w, d_embedding);
    }
}

pub(crate) fn graph_backward(
    graph: &LayeredGraph,
    encs: &[LayerEncoding],
    d_layers: &[Vec<f64>],
    params: &ParamStore,
    proj: &Projections,
    act: Activation,
    grads: &mut EncoderGrads,
) {
    if d_layers[0].iter().any(|&g| g != 0.0) {
        seed_backward(&graph.seed_entities, &d_layers[0], grads);
    }
    for (l, layer) in graph.layers.iter().enumerate() {
        if d_layers[l + 1].iter().any(|&g| g != 0.0) {
            layer_backward(layer, &encs[l + 1], &d_layers[l + 1], params, proj, act, grads);
        }
    }
}
