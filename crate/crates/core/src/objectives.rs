//! Training objective: BPR ranking loss plus the intra- and inter-graph
//! contrastive losses and an L2 penalty,
//!
//! `total = bpr + λ1 (α · intra + inter) + λ2 · l2`.
//!
//! Every loss here also produces its gradient with respect to the layer
//! encodings it consumed; the encoder-side backward pass lives in
//! [`crate::engine`].

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{axpy, dot, Activation, EncodeError, LayerEncoding, ObjectEncodings, ParamStore, Projections};
use crate::graphbuild::{GraphSet, ObjectGraphs, Owner};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0:?} has no graphs (cold start)")]
    MissingGraph(Owner),
    #[error("non-local graphs are required but were not built")]
    MissingNonLocal,
    #[error("need {need} layers per graph, found {have}")]
    TooShallow { need: usize, have: usize },
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Dot,
    Cosine,
}

impl Similarity {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Similarity::Dot => dot(a, b),
            Similarity::Cosine => {
                let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot(a, b) / (na * nb)
                }
            }
        }
    }

    /// Adds `upstream · ∂sim/∂a` to `da` and `upstream · ∂sim/∂b` to `db`.
    fn backprop(self, a: &[f64], b: &[f64], upstream: f64, da: &mut [f64], db: &mut [f64]) {
        match self {
            Similarity::Dot => {
                axpy(upstream, b, da);
                axpy(upstream, a, db);
            }
            Similarity::Cosine => {
                let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
                if na == 0.0 || nb == 0.0 {
                    return;
                }
                let cos = dot(a, b) / (na * nb);
                for k in 0..a.len() {
                    da[k] += upstream * (b[k] / (na * nb) - cos * a[k] / (na * na));
                    db[k] += upstream * (a[k] / (na * nb) - cos * b[k] / (nb * nb));
                }
            }
        }
    }
}

/// Ablation switches. Disabling non-local graphs also removes the non-local
/// intra term, the inter term, and the non-local half of the representation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub disable_intra: bool,
    pub disable_inter: bool,
    pub disable_nonlocal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Aggregation depth `L`: layers `0..=L` enter the representation.
    pub depth: usize,
    /// Extra layers beyond `L` that serve as intra-graph negatives (`J`).
    pub negative_layers: usize,
    pub tau: f64,
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub eta: f64,
    pub dim: usize,
    pub batch_size: usize,
    pub local_size: usize,
    pub nonlocal_size: usize,
    pub seed: u64,
    pub activation: Activation,
    pub similarity: Similarity,
    /// Average the local→non-local and non-local→local inter losses.
    pub symmetric_inter: bool,
    /// Regularise the whole parameter set instead of the rows a batch touched.
    pub l2_full: bool,
    pub ablation: Ablation,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams::music()
    }
}

impl HyperParams {
    fn base() -> Self {
        HyperParams {
            depth: 2,
            negative_layers: 1,
            tau: 0.1,
            alpha: 1.0,
            lambda1: 1e-6,
            lambda2: 1e-4,
            eta: 4e-3,
            dim: 64,
            batch_size: 2048,
            local_size: 40,
            nonlocal_size: 128,
            seed: 2022,
            activation: Activation::Relu,
            similarity: Similarity::Dot,
            symmetric_inter: false,
            l2_full: false,
            ablation: Ablation::default(),
        }
    }

    /// Book-Crossing settings.
    pub fn book() -> Self {
        HyperParams {
            depth: 1,
            ..Self::base()
        }
    }

    /// MovieLens-1M settings.
    pub fn movie() -> Self {
        HyperParams {
            lambda1: 1e-7,
            lambda2: 1e-5,
            ..Self::base()
        }
    }

    /// Last.FM settings.
    pub fn music() -> Self {
        Self::base()
    }

    pub fn graph_depth(&self) -> usize {
        self.depth + self.negative_layers
    }

    pub fn uses_nonlocal(&self) -> bool {
        !self.ablation.disable_nonlocal
    }

    pub fn uses_intra(&self) -> bool {
        !self.ablation.disable_intra
    }

    pub fn uses_inter(&self) -> bool {
        !self.ablation.disable_inter && self.uses_nonlocal()
    }

    /// Length of a user or item representation.
    pub fn representation_len(&self) -> usize {
        let graphs = if self.uses_nonlocal() { 2 } else { 1 };
        graphs * (self.depth + 1) * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(ObjectiveError::Temperature(self.tau));
        }
        assert!(self.depth >= 1, "depth L must be at least 1");
        assert!(self.negative_layers >= 1, "negative layer count J must be at least 1");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub intra: f64,
    pub inter: f64,
    pub l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(bpr: f64, intra: f64, inter: f64, l2: f64, hp: &HyperParams) -> Self {
        LossBreakdown {
            bpr,
            intra,
            inter,
            l2,
            total: bpr + hp.lambda1 * (hp.alpha * intra + inter) + hp.lambda2 * l2,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.bpr, self.intra, self.inter, self.l2, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `ln Σ exp(x)` with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−ln σ(pos − neg)`.
pub fn bpr_loss(score_pos: f64, score_neg: f64) -> f64 {
    softplus(-(score_pos - score_neg))
}

/// Sum of squared entries.
pub fn l2_term(tensors: &[&[f64]]) -> f64 {
    tensors.iter().flat_map(|t| t.iter()).map(|v| v * v).sum()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(ObjectiveError::Temperature(tau))
    }
}

fn check_finite(layers: &[&[f64]]) -> Result<()> {
    if layers.iter().all(|l| l.iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(ObjectiveError::NonFinite("layer encoding"))
    }
}

/// Intra-graph term of one graph. `layers[0]` is the anchor, layers `1..=depth`
/// are positives and the rest negatives. When `grads` is given,
/// `scale · ∂loss/∂layer` is added to it.
pub(crate) fn intra_graph_term(
    layers: &[&[f64]],
    depth: usize,
    tau: f64,
    sim: Similarity,
    grads: Option<(&mut [Vec<f64>], f64)>,
) -> f64 {
    let anchor = layers[0];
    let s: Vec<f64> = layers[1..].iter().map(|l| sim.eval(anchor, l) / tau).collect();
    let lse_all = log_sum_exp(&s);
    let lse_pos = log_sum_exp(&s[..depth]);
    if let Some((grads, scale)) = grads {
        let (anchor_grad, rest) = grads.split_first_mut().expect("anchor gradient");
        for (k, layer_grad) in rest.iter_mut().enumerate() {
            let mut ds = (s[k] - lse_all).exp();
            if k < depth {
                ds -= (s[k] - lse_pos).exp();
            }
            sim.backprop(anchor, layers[k + 1], scale * ds / tau, anchor_grad, layer_grad);
        }
    }
    lse_all - lse_pos
}

/// Gradient sinks of the anchor and candidate layers, and a scale.
pub(crate) type PairGrads<'a> = (&'a mut [Vec<f64>], &'a mut [Vec<f64>], f64);

/// Inter-graph term: each layer `k ∈ 0..=depth` of `anchors` is contrasted with
/// the same layer of `candidates` (positive) against its other layers.
pub(crate) fn inter_term(
    anchors: &[&[f64]],
    candidates: &[&[f64]],
    depth: usize,
    tau: f64,
    sim: Similarity,
    mut grads: Option<PairGrads<'_>>,
) -> f64 {
    let n = depth + 1;
    let mut total = 0.0;
    for k in 0..n {
        let s: Vec<f64> = (0..n).map(|j| sim.eval(anchors[k], candidates[j]) / tau).collect();
        let lse = log_sum_exp(&s);
        total += lse - s[k];
        if let Some((ga, gc, scale)) = grads.as_mut() {
            for j in 0..n {
                let mut ds = (s[j] - lse).exp();
                if j == k {
                    ds -= 1.0;
                }
                sim.backprop(anchors[k], candidates[j], *scale * ds / tau, &mut ga[k], &mut gc[j]);
            }
        }
    }
    total
}

fn embeddings(layers: &[LayerEncoding]) -> Vec<&[f64]> {
    layers.iter().map(|l| l.embedding.as_slice()).collect()
}

/// Intra-graph contrastive loss of one object, summed over its graphs (local,
/// then non-local). Each graph needs layers `0..=depth + J` with `J ≥ 1`.
pub fn intra_loss(graphs: &[&[LayerEncoding]], depth: usize, tau: f64, sim: Similarity) -> Result<f64> {
    check_tau(tau)?;
    let mut total = 0.0;
    for g in graphs {
        if g.len() < depth + 2 {
            return Err(ObjectiveError::TooShallow {
                need: depth + 2,
                have: g.len(),
            });
        }
        let layers = embeddings(g);
        check_finite(&layers)?;
        total += intra_graph_term(&layers, depth, tau, sim, None);
    }
    Ok(total)
}

/// Inter-graph contrastive loss of one object, local layers as anchors.
pub fn inter_loss(local: &[LayerEncoding], nonlocal: &[LayerEncoding], tau: f64, depth: usize, sim: Similarity) -> Result<f64> {
    check_tau(tau)?;
    for g in [local, nonlocal] {
        if g.len() < depth + 1 {
            return Err(ObjectiveError::TooShallow {
                need: depth + 1,
                have: g.len(),
            });
        }
    }
    let (a, c) = (embeddings(local), embeddings(nonlocal));
    check_finite(&a)?;
    check_finite(&c)?;
    if depth == 0 {
        log::debug!("inter loss with a single layer is identically zero");
    }
    Ok(inter_term(&a, &c, depth, tau, sim, None))
}

/// One training triple: a user, one of their train positives, and a train
/// negative of the same user.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPair {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
}

/// Forward evaluation of one batch, kept for the backward pass.
pub struct BatchTrace<'a> {
    pub hp: HyperParams,
    pub breakdown: LossBreakdown,
    pub(crate) objects: Vec<Owner>,
    pub(crate) graphs: Vec<&'a ObjectGraphs>,
    pub(crate) encodings: Vec<ObjectEncodings>,
    /// Gradient of `total` w.r.t. every layer encoding: object → graph → layer.
    pub(crate) d_encodings: Vec<Vec<Vec<Vec<f64>>>>,
    pub(crate) projections: Projections,
    pub(crate) touched_entities: Vec<u32>,
    pub(crate) touched_relations: Vec<u32>,
}

fn score_and(user: &ObjectEncodings, item: &ObjectEncodings, depth: usize) -> f64 {
    user.graphs()
        .zip(item.graphs())
        .map(|(gu, gi)| (0..=depth).map(|k| dot(&gu[k].embedding, &gi[k].embedding)).sum::<f64>())
        .sum()
}

/// Restricts the graphs handed to the encoder to what the ablation uses.
pub(crate) fn view_graphs(graphs: &ObjectGraphs, hp: &HyperParams) -> Result<ObjectGraphs> {
    if hp.uses_nonlocal() && graphs.nonlocal.is_none() {
        return Err(ObjectiveError::MissingNonLocal);
    }
    Ok(ObjectGraphs {
        local: graphs.local.clone(),
        nonlocal: if hp.uses_nonlocal() { graphs.nonlocal.clone() } else { None },
    })
}

/// Runs the forward pass of a batch: encodes every distinct user and item,
/// evaluates all loss terms and their gradients w.r.t. the encodings.
pub fn evaluate<'a>(batch: &[TrainPair], graph_set: &'a GraphSet, params: &ParamStore, hp: &HyperParams) -> Result<BatchTrace<'a>> {
    hp.validate()?;
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut index: BTreeMap<Owner, usize> = BTreeMap::new();
    for p in batch {
        for o in [Owner::user(p.user), Owner::item(p.pos), Owner::item(p.neg)] {
            index.entry(o).or_insert(0);
        }
    }
    let objects: Vec<Owner> = index.keys().copied().collect();
    for (i, o) in objects.iter().enumerate() {
        index.insert(*o, i);
    }
    let graphs: Vec<&ObjectGraphs> = objects
        .iter()
        .map(|&o| graph_set.get(o).ok_or(ObjectiveError::MissingGraph(o)))
        .collect::<Result<_>>()?;
    let views: Vec<ObjectGraphs> = graphs.iter().map(|g| view_graphs(g, hp)).collect::<Result<_>>()?;
    let need = hp.graph_depth();
    for v in &views {
        for g in v.iter() {
            if g.depth() < need {
                return Err(ObjectiveError::TooShallow {
                    need: need + 1,
                    have: g.depth() + 1,
                });
            }
        }
    }

    let projections = Projections::for_graphs(params, views.iter().flat_map(|v| v.iter()));
    let encodings: Vec<ObjectEncodings> = views
        .par_iter()
        .map(|v| ObjectEncodings::encode_with(v, params, &projections, hp.activation))
        .collect::<std::result::Result<_, _>>()?;

    let mut d_encodings: Vec<Vec<Vec<Vec<f64>>>> = encodings
        .iter()
        .map(|e| e.graphs().map(|g| vec![vec![0.0; params.d]; g.len()]).collect())
        .collect();

    // BPR, averaged over the batch.
    let depth = hp.depth;
    let b = batch.len() as f64;
    let mut bpr = 0.0;
    for p in batch {
        let (iu, ip, ineg) = (index[&Owner::user(p.user)], index[&Owner::item(p.pos)], index[&Owner::item(p.neg)]);
        let delta = score_and(&encodings[iu], &encodings[ip], depth) - score_and(&encodings[iu], &encodings[ineg], depth);
        bpr += bpr_loss(delta, 0.0);
        let g = -sigmoid(-delta) / b;
        for (gi, (eu, (epos, eneg))) in encodings[iu]
            .graphs()
            .zip(encodings[ip].graphs().zip(encodings[ineg].graphs()))
            .enumerate()
        {
            for k in 0..=depth {
                axpy(g, &epos[k].embedding, &mut d_encodings[iu][gi][k]);
                axpy(-g, &eneg[k].embedding, &mut d_encodings[iu][gi][k]);
                axpy(g, &eu[k].embedding, &mut d_encodings[ip][gi][k]);
                axpy(-g, &eu[k].embedding, &mut d_encodings[ineg][gi][k]);
            }
        }
    }
    bpr /= b;

    // Contrastive terms, averaged over the distinct objects of the batch.
    let n_obj = objects.len() as f64;
    let intra_w = hp.lambda1 * hp.alpha / n_obj;
    let inter_w = hp.lambda1 / n_obj;
    let mut intra = 0.0;
    let mut inter = 0.0;
    for (o, enc) in encodings.iter().enumerate() {
        if hp.uses_intra() {
            for (gi, g) in enc.graphs().enumerate() {
                let layers = embeddings(g);
                let grads = (intra_w != 0.0).then_some((d_encodings[o][gi].as_mut_slice(), intra_w));
                intra += intra_graph_term(&layers, depth, hp.tau, hp.similarity, grads);
            }
        }
        if hp.uses_inter() {
            let nonlocal = enc.nonlocal.as_ref().ok_or(ObjectiveError::MissingNonLocal)?;
            let (a, c) = (embeddings(&enc.local), embeddings(nonlocal));
            let (gl, gn) = d_encodings[o].split_at_mut(1);
            let (gl, gn) = (gl[0].as_mut_slice(), gn[0].as_mut_slice());
            if hp.symmetric_inter {
                let w = 0.5 * inter_w;
                let fwd = inter_term(&a, &c, depth, hp.tau, hp.similarity, (w != 0.0).then_some((&mut *gl, &mut *gn, w)));
                let bwd = inter_term(&c, &a, depth, hp.tau, hp.similarity, (w != 0.0).then_some((&mut *gn, &mut *gl, w)));
                inter += 0.5 * (fwd + bwd);
            } else {
                inter += inter_term(&a, &c, depth, hp.tau, hp.similarity, (inter_w != 0.0).then_some((gl, gn, inter_w)));
            }
        }
    }
    intra /= n_obj;
    inter /= n_obj;

    let mut ents = BTreeSet::new();
    let mut rels = BTreeSet::new();
    for v in &views {
        for g in v.iter() {
            ents.extend(g.entities());
            rels.extend(g.layers.iter().flatten().map(|t| t.relation));
        }
    }
    let (touched_entities, touched_relations): (Vec<u32>, Vec<u32>) = if hp.l2_full {
        ((0..params.n_entities() as u32).collect(), (0..params.n_relations() as u32).collect())
    } else {
        (ents.into_iter().collect(), rels.into_iter().collect())
    };
    let l2 = touched_entities
        .iter()
        .map(|&e| l2_term(&[params.entity.row(e as usize)]))
        .sum::<f64>()
        + touched_relations
            .iter()
            .map(|&r| l2_term(&[params.relation.row(r as usize)]))
            .sum::<f64>()
        + l2_term(&[&params.w0.data, &params.b0, &params.w1, std::slice::from_ref(&params.b1)]);

    let breakdown = LossBreakdown::combine(bpr, intra, inter, l2, hp);
    if !breakdown.is_finite() {
        return Err(ObjectiveError::NonFinite("loss"));
    }
    Ok(BatchTrace {
        hp: hp.clone(),
        breakdown,
        objects,
        graphs,
        encodings,
        d_encodings,
        projections,
        touched_entities,
        touched_relations,
    })
}

/// Loss of one batch. See [`evaluate`] for the version that keeps the trace.
pub fn total_loss(batch: &[TrainPair], graphs: &GraphSet, params: &ParamStore, hp: &HyperParams) -> Result<LossBreakdown> {
    evaluate(batch, graphs, params, hp).map(|t| t.breakdown)
}
