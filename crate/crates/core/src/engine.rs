//! Reverse-mode gradients of the batch loss, Adam, and the training loop.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, InteractionLog, Partition};
use crate::encoder::{axpy, graph_backward, init_params, EncoderGrads, ParamStore, RowGrads, Table};
use crate::eval::{partition_auc, EvalError, KgicScorer};
use crate::graphbuild::{build_cooccurrence, GraphConfig, GraphSet, TrainView};
use crate::objectives::{evaluate, BatchTrace, HyperParams, LossBreakdown, ObjectiveError, TrainPair};
use crate::seeding::{self, STREAM_INIT, STREAM_PAIRS};

/// Objects per backward work unit. Fixed so that the reduction order does not
/// depend on the number of threads.
const CHUNK: usize = 64;

/// Epoch index used for evaluation graphs.
pub const EVAL_EPOCH: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged {
        epoch: usize,
        step: u64,
        /// Parameters before the failing step.
        last_good: Box<ParamStore>,
    },
    #[error("the train partition is empty")]
    NoTrainData,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Gradients of the batch loss: sparse rows for the embedding tables, dense
/// tensors for the attention MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub entity: BTreeMap<u32, Vec<f64>>,
    pub relation: BTreeMap<u32, Vec<f64>>,
    pub w0: Vec<f64>,
    pub b0: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: f64,
}

impl GradientSet {
    pub fn zeros(params: &ParamStore) -> Self {
        GradientSet {
            entity: BTreeMap::new(),
            relation: BTreeMap::new(),
            w0: vec![0.0; params.w0.data.len()],
            b0: vec![0.0; params.d],
            w1: vec![0.0; params.d],
            b1: 0.0,
        }
    }

    fn check_finite(&self) -> Result<(), EngineError> {
        let rows_ok = |m: &BTreeMap<u32, Vec<f64>>| m.values().flatten().all(|v| v.is_finite());
        if !rows_ok(&self.entity) {
            return Err(EngineError::NonFiniteGradient("entity_embeddings"));
        }
        if !rows_ok(&self.relation) {
            return Err(EngineError::NonFiniteGradient("relation_embeddings"));
        }
        for (name, t) in [("attn_w0", &self.w0), ("attn_b0", &self.b0), ("attn_w1", &self.w1)] {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(EngineError::NonFiniteGradient(name));
            }
        }
        if !self.b1.is_finite() {
            return Err(EngineError::NonFiniteGradient("attn_b1"));
        }
        Ok(())
    }
}

fn merge_rows(into: &mut BTreeMap<u32, Vec<f64>>, from: RowGrads) {
    let mut rows: Vec<_> = from.into_iter().collect();
    rows.sort_unstable_by_key(|(r, _)| *r);
    for (r, g) in rows {
        match into.get_mut(&r) {
            Some(acc) => axpy(1.0, &g, acc),
            None => {
                into.insert(r, g);
            }
        }
    }
}

/// Exact gradients of `trace.breakdown.total` with respect to every parameter
/// the forward pass touched.
pub fn backward(trace: &BatchTrace<'_>, params: &ParamStore) -> Result<GradientSet, EngineError> {
    let hp = &trace.hp;
    let d = params.d;
    let n = trace.objects.len();
    let chunk_grads: Vec<EncoderGrads> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = EncoderGrads::new(d);
            for o in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let graphs = std::iter::once(&trace.graphs[o].local).chain(trace.graphs[o].nonlocal.as_ref());
                for ((graph, encs), d_layers) in graphs.zip(trace.encodings[o].graphs()).zip(&trace.d_encodings[o]) {
                    graph_backward(graph, encs, d_layers, params, &trace.projections, hp.activation, &mut g);
                }
            }
            g
        })
        .collect();

    let mut out = GradientSet::zeros(params);
    let mut head_proj = BTreeMap::new();
    let mut rel_proj = BTreeMap::new();
    for g in chunk_grads {
        merge_rows(&mut out.entity, g.entity);
        merge_rows(&mut head_proj, g.head_proj);
        merge_rows(&mut rel_proj, g.rel_proj);
        axpy(1.0, &g.w1, &mut out.w1);
        out.b1 += g.b1;
    }

    // Push the projection gradients through W0 = [W_head | W_rel].
    let two_d = 2 * d;
    for (h, dp) in &head_proj {
        let e = params.entity.row(*h as usize);
        let mut de = vec![0.0; d];
        for (k, &g) in dp.iter().enumerate() {
            axpy(g, e, &mut out.w0[k * two_d..k * two_d + d]);
            axpy(g, &params.w0.row(k)[..d], &mut de);
        }
        merge_rows(&mut out.entity, RowGrads::from([(*h, de)]));
    }
    for (r, dq) in &rel_proj {
        let rel = params.relation.row(*r as usize);
        let mut dr = vec![0.0; d];
        for (k, &g) in dq.iter().enumerate() {
            axpy(g, rel, &mut out.w0[k * two_d + d..(k + 1) * two_d]);
            axpy(g, &params.w0.row(k)[d..], &mut dr);
            out.b0[k] += g;
        }
        out.relation.insert(*r, dr);
    }

    let c = 2.0 * hp.lambda2;
    if c != 0.0 {
        for &e in &trace.touched_entities {
            let row = out.entity.entry(e).or_insert_with(|| vec![0.0; d]);
            axpy(c, params.entity.row(e as usize), row);
        }
        for &r in &trace.touched_relations {
            let row = out.relation.entry(r).or_insert_with(|| vec![0.0; d]);
            axpy(c, params.relation.row(r as usize), row);
        }
        axpy(c, &params.w0.data, &mut out.w0);
        axpy(c, &params.b0, &mut out.b0);
        axpy(c, &params.w1, &mut out.w1);
        out.b1 += c * params.b1;
    }
    out.check_finite()?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Update only the embedding rows that received a gradient.
    pub lazy: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            eta: 4e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lazy: true,
        }
    }
}

/// First and second moment accumulators of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// Bias-corrected Adam update of `param[offset..]` at step `t`.
    pub fn update(&mut self, offset: usize, param: &mut [f64], grad: &[f64], t: u64, cfg: &AdamConfig) {
        let c1 = 1.0 - cfg.beta1.powi(t as i32);
        let c2 = 1.0 - cfg.beta2.powi(t as i32);
        for (k, (p, &g)) in param.iter_mut().zip(grad).enumerate() {
            let (m, v) = (&mut self.m[offset + k], &mut self.v[offset + k]);
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.eta * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }

    /// Updates the rows of `table` named in `grads`, or every row in dense mode.
    pub fn update_rows(&mut self, table: &mut Table, grads: &BTreeMap<u32, Vec<f64>>, t: u64, cfg: &AdamConfig) {
        let cols = table.cols;
        if cfg.lazy {
            for (r, g) in grads {
                let r = *r as usize;
                self.update(r * cols, table.row_mut(r), g, t, cfg);
            }
        } else {
            let zeros = vec![0.0; cols];
            for r in 0..table.rows {
                let g = grads.get(&(r as u32)).unwrap_or(&zeros);
                self.update(r * cols, table.row_mut(r), g, t, cfg);
            }
        }
    }
}

/// Adam state mirroring a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub entity: Moments,
    pub relation: Moments,
    pub w0: Moments,
    pub b0: Moments,
    pub w1: Moments,
    pub b1: Moments,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        AdamState {
            t: 0,
            entity: Moments::new(params.entity.data.len()),
            relation: Moments::new(params.relation.data.len()),
            w0: Moments::new(params.w0.data.len()),
            b0: Moments::new(params.d),
            w1: Moments::new(params.d),
            b1: Moments::new(1),
        }
    }
}

pub fn adam_step(params: &mut ParamStore, grads: &GradientSet, state: &mut AdamState, cfg: &AdamConfig) {
    state.t += 1;
    let t = state.t;
    state.entity.update_rows(&mut params.entity, &grads.entity, t, cfg);
    state.relation.update_rows(&mut params.relation, &grads.relation, t, cfg);
    state.w0.update(0, &mut params.w0.data, &grads.w0, t, cfg);
    state.b0.update(0, &mut params.b0, &grads.b0, t, cfg);
    state.w1.update(0, &mut params.w1, &grads.w1, t, cfg);
    state.b1.update(0, std::slice::from_mut(&mut params.b1), &[grads.b1], t, cfg);
}

/// Pairs every train positive with a train negative of the same user drawn
/// from that user's frozen negative pool, then shuffles.
pub fn sample_pairs(log: &InteractionLog, seed: u64, stream: u64, epoch: u64) -> Vec<TrainPair> {
    let negatives = log.negatives_by_user(Partition::Train);
    let mut rng = seeding::rng_from(seed, &[stream, epoch]);
    let mut pairs: Vec<TrainPair> = log
        .partition(Partition::Train)
        .filter(|r| r.label)
        .filter_map(|r| {
            let pool = &negatives[r.user as usize];
            (!pool.is_empty()).then(|| TrainPair {
                user: r.user,
                pos: r.item,
                neg: pool[rng.gen_range(0..pool.len())],
            })
        })
        .collect();
    pairs.shuffle(&mut rng);
    pairs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    /// Resample every graph each epoch; otherwise build them once.
    pub resample_graphs: bool,
}

impl FitOptions {
    pub fn new(hp: &HyperParams) -> Self {
        FitOptions {
            max_epochs: 100,
            patience: 5,
            adam: AdamConfig {
                eta: hp.eta,
                ..AdamConfig::default()
            },
            resample_graphs: true,
        }
    }
}

/// One training-log line. Batch records carry no `valid_auc`; the record
/// closing an epoch carries the epoch-mean losses and the valid AUC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub valid_auc: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub params: ParamStore,
    pub best_epoch: usize,
    pub best_valid_auc: f64,
    pub epochs_run: usize,
}

pub fn graph_config(hp: &HyperParams) -> GraphConfig {
    GraphConfig {
        depth: hp.graph_depth(),
        local_size: hp.local_size,
        nonlocal_size: hp.nonlocal_size,
        include_nonlocal: hp.uses_nonlocal(),
        seed: hp.seed,
    }
}

/// Graphs used for scoring: the same construction with a fixed epoch tag.
pub fn eval_graphs(ds: &Dataset, hp: &HyperParams) -> GraphSet {
    let train = TrainView::from_log(&ds.log);
    let cooc = build_cooccurrence(&train);
    GraphSet::build(&train, &cooc, &ds.align, &ds.kg, &graph_config(hp), EVAL_EPOCH)
}

pub fn initial_params(ds: &Dataset, hp: &HyperParams) -> ParamStore {
    init_params(
        ds.kg.n_entities,
        ds.kg.relation_slots(),
        hp.dim,
        seeding::derive_seed(hp.seed, &[STREAM_INIT]),
    )
}

fn diverged(e: EngineError, epoch: usize, step: u64, params: &ParamStore) -> EngineError {
    match e {
        EngineError::NonFiniteGradient(_) | EngineError::Objective(ObjectiveError::NonFinite(_)) => {
            log::error!("{e}");
            EngineError::Diverged {
                epoch,
                step,
                last_good: Box::new(params.clone()),
            }
        }
        other => other,
    }
}

/// Trains from the initial parameters, rebuilding graphs every epoch, and
/// returns the parameters with the best valid AUC. `on_log` sees every
/// training-log record in step order.
pub fn fit(ds: &Dataset, hp: &HyperParams, opts: &FitOptions, on_log: &mut dyn FnMut(&LogRecord)) -> Result<FitOutcome, EngineError> {
    fit_from(ds, hp, opts, initial_params(ds, hp), on_log)
}

pub fn fit_from(
    ds: &Dataset,
    hp: &HyperParams,
    opts: &FitOptions,
    mut params: ParamStore,
    on_log: &mut dyn FnMut(&LogRecord),
) -> Result<FitOutcome, EngineError> {
    hp.validate()?;
    let train = TrainView::from_log(&ds.log);
    if train.user_items.iter().all(|v| v.is_empty()) {
        return Err(EngineError::NoTrainData);
    }
    let cooc = build_cooccurrence(&train);
    let gcfg = graph_config(hp);
    let eval_set = GraphSet::build(&train, &cooc, &ds.align, &ds.kg, &gcfg, EVAL_EPOCH);
    let start = Instant::now();
    let mut state = AdamState::new(&params);
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
    let mut since_best = 0;
    let mut epochs_run = 0;
    let frozen = (!opts.resample_graphs).then(|| GraphSet::build(&train, &cooc, &ds.align, &ds.kg, &gcfg, 0));
    for epoch in 0..opts.max_epochs {
        let t0 = Instant::now();
        let resampled;
        let graphs = match &frozen {
            Some(g) => g,
            None => {
                resampled = GraphSet::build(&train, &cooc, &ds.align, &ds.kg, &gcfg, epoch as u64);
                &resampled
            }
        };
        log::debug!("epoch {epoch}: graphs built in {} ms", t0.elapsed().as_millis());
        let t0 = Instant::now();
        let pairs = sample_pairs(&ds.log, hp.seed, STREAM_PAIRS, epoch as u64);
        let mut sum = LossBreakdown::default();
        let mut n_batches = 0.0;
        for batch in pairs.chunks(hp.batch_size.max(1)) {
            let step = state.t + 1;
            let trace = evaluate(batch, graphs, &params, hp).map_err(|e| diverged(e.into(), epoch, step, &params))?;
            let grads = backward(&trace, &params).map_err(|e| diverged(e, epoch, step, &params))?;
            let loss = trace.breakdown;
            drop(trace);
            adam_step(&mut params, &grads, &mut state, &opts.adam);
            for (acc, v) in [
                (&mut sum.bpr, loss.bpr),
                (&mut sum.intra, loss.intra),
                (&mut sum.inter, loss.inter),
                (&mut sum.l2, loss.l2),
                (&mut sum.total, loss.total),
            ] {
                *acc += v;
            }
            n_batches += 1.0;
            on_log(&LogRecord {
                epoch,
                step,
                loss,
                valid_auc: None,
                wall_ms: start.elapsed().as_millis() as u64,
            });
        }
        epochs_run = epoch + 1;
        log::debug!("epoch {epoch}: {} batches in {} ms", n_batches, t0.elapsed().as_millis());
        let t0 = Instant::now();
        let scorer = KgicScorer::new(&params, &eval_set, hp, &train)?;
        let valid_auc = partition_auc(&scorer, &ds.log, Partition::Valid)?;
        log::debug!("epoch {epoch}: validation in {} ms", t0.elapsed().as_millis());
        let mean = LossBreakdown {
            bpr: sum.bpr / n_batches,
            intra: sum.intra / n_batches,
            inter: sum.inter / n_batches,
            l2: sum.l2 / n_batches,
            total: sum.total / n_batches,
        };
        on_log(&LogRecord {
            epoch,
            step: state.t,
            loss: mean,
            valid_auc: Some(valid_auc),
            wall_ms: start.elapsed().as_millis() as u64,
        });
        log::info!("epoch {epoch}: loss {:.5} valid auc {valid_auc:.4}", mean.total);
        if valid_auc > best.0 {
            best = (valid_auc, epoch, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                break;
            }
        }
    }
    Ok(FitOutcome {
        params: best.2,
        best_epoch: best.1,
        best_valid_auc: best.0,
        epochs_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn adam_first_step_is_eta_sign() {
        let mut m = Moments::new(3);
        let mut p = vec![0.0, 0.0, 0.0];
        let cfg = AdamConfig {
            eta: 0.01,
            ..AdamConfig::default()
        };
        m.update(0, &mut p, &[0.5, -2.0, 0.0], 1, &cfg);
        assert_abs_diff_eq!(p[0], -0.01, epsilon = 1e-9);
        assert_abs_diff_eq!(p[1], 0.01, epsilon = 1e-9);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn zero_gradient_on_fresh_state_keeps_parameters() {
        let mut params = init_params(5, 2, 3, 1);
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let grads = GradientSet::zeros(&params);
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default());
        assert_eq!(params, before);
        assert_eq!(state.t, 1);
        let dense = AdamConfig {
            lazy: false,
            ..AdamConfig::default()
        };
        adam_step(&mut params, &grads, &mut state, &dense);
        assert_eq!(params, before);
        assert_eq!(state.t, 2);
    }

    #[test]
    fn lazy_rows_leave_untouched_rows_alone() {
        let mut params = init_params(5, 2, 3, 1);
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let mut grads = GradientSet::zeros(&params);
        grads.entity.insert(2, vec![1.0, 1.0, 1.0]);
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default());
        for r in [0, 1, 3, 4] {
            assert_eq!(params.entity.row(r), before.entity.row(r));
        }
        assert_ne!(params.entity.row(2), before.entity.row(2));
        assert_eq!(state.entity.m[..6], [0.0; 6]);
    }

    #[test]
    fn pair_sampling_pairs_same_user() {
        let rows: Vec<(u64, u64, bool)> = (0..4).flat_map(|u| (0..5).map(move |i| (u, i * 2 + u % 2, true))).collect();
        let log = crate::dataset::build_log(&rows, 3);
        let log = crate::dataset::split(&log, (0.6, 0.2, 0.2), 3).unwrap();
        let a = sample_pairs(&log, 1, STREAM_PAIRS, 0);
        assert_eq!(a, sample_pairs(&log, 1, STREAM_PAIRS, 0));
        let negs = log.negatives_by_user(Partition::Train);
        let poss = log.positives_by_user(Partition::Train);
        assert_eq!(a.len(), poss.iter().map(Vec::len).sum::<usize>());
        for p in &a {
            assert!(negs[p.user as usize].contains(&p.neg));
            assert!(poss[p.user as usize].contains(&p.pos));
        }
    }
}
