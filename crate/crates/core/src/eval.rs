//! Click-through metrics (AUC, F1), top-K recall, and a plain BPR matrix
//! factorisation baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{InteractionLog, Partition};
use crate::encoder::{axpy, dot, ObjectEncodings, ParamStore, Projections, Table};
use crate::engine::{sample_pairs, AdamConfig, Moments};
use crate::graphbuild::{GraphSet, TrainView};
use crate::objectives::{self, sigmoid, HyperParams};
use crate::seeding::{self, STREAM_BPRMF};

pub const DEFAULT_KS: [usize; 5] = [5, 10, 20, 50, 100];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("AUC needs both positive and negative labels")]
    SingleClass,
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("the {0:?} partition is empty")]
    EmptyPartition(Partition),
}

/// Area under the ROC curve in Mann-Whitney form; tied scores count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// F1 of the predictions `σ(score) ≥ threshold`.
pub fn f1(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (sigmoid(s) >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fneg) as f64;
    2.0 * precision * recall / (precision + recall)
}

pub trait Scorer: Sync {
    fn score(&self, user: u32, item: u32) -> f64;

    fn score_all(&self, user: u32, n_items: usize) -> Vec<f64> {
        (0..n_items as u32).map(|i| self.score(user, i)).collect()
    }
}

/// Global item popularity, used for users without train positives. Scores are
/// the log-odds of an item being a train positive of a random warm user.
#[derive(Clone, Debug, PartialEq)]
pub struct Popularity {
    scores: Vec<f64>,
}

impl Popularity {
    pub fn from_train(train: &TrainView) -> Self {
        let warm = (0..train.n_users() as u32).filter(|&u| !train.is_cold(u)).count() as f64;
        let scores = train
            .item_users
            .iter()
            .map(|us| {
                let p = (us.len() as f64 + 1.0) / (warm + 2.0);
                (p / (1.0 - p)).ln()
            })
            .collect();
        Popularity { scores }
    }

    pub fn score(&self, item: u32) -> f64 {
        self.scores[item as usize]
    }
}

/// Scores users and items by the inner product of their concatenated layer
/// encodings, computed once for a fixed graph set.
pub struct KgicScorer {
    users: Vec<Option<Vec<f64>>>,
    items: Vec<Vec<f64>>,
    popularity: Popularity,
}

impl KgicScorer {
    pub fn new(params: &ParamStore, graphs: &GraphSet, hp: &HyperParams, train: &TrainView) -> objectives::Result<Self> {
        let proj = Projections::all(params);
        let encode = |g: &crate::graphbuild::ObjectGraphs| -> objectives::Result<Vec<f64>> {
            let view = objectives::view_graphs(g, hp)?;
            let enc = ObjectEncodings::encode_with(&view, params, &proj, hp.activation)?;
            Ok(enc.representation(hp.depth)?)
        };
        let users = graphs
            .users
            .par_iter()
            .map(|g| g.as_ref().map(encode).transpose())
            .collect::<objectives::Result<_>>()?;
        let items = graphs.items.par_iter().map(encode).collect::<objectives::Result<_>>()?;
        Ok(KgicScorer {
            users,
            items,
            popularity: Popularity::from_train(train),
        })
    }

    pub fn item_vector(&self, item: u32) -> &[f64] {
        &self.items[item as usize]
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }
}

impl Scorer for KgicScorer {
    fn score(&self, user: u32, item: u32) -> f64 {
        match &self.users[user as usize] {
            Some(u) => dot(u, &self.items[item as usize]),
            None => self.popularity.score(item),
        }
    }
}

/// Scores and labels of every record in a partition, in record order.
pub fn score_partition(scorer: &dyn Scorer, log: &InteractionLog, part: Partition) -> (Vec<f64>, Vec<bool>) {
    let records: Vec<_> = log.partition(part).collect();
    let scores = records.par_iter().map(|r| scorer.score(r.user, r.item)).collect();
    let labels = records.iter().map(|r| r.label).collect();
    (scores, labels)
}

pub fn partition_auc(scorer: &dyn Scorer, log: &InteractionLog, part: Partition) -> Result<f64, EvalError> {
    let (s, l) = score_partition(scorer, log, part);
    if s.is_empty() {
        return Err(EvalError::EmptyPartition(part));
    }
    auc(&s, &l)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecall {
    pub user: u32,
    pub n_test: usize,
    pub recall: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    pub mean: Vec<f64>,
    pub per_user: Vec<UserRecall>,
}

/// Keeps the `k` best candidates, sorted by descending score with ties broken
/// by ascending item id.
fn top_k(scores: &[f64], candidates: &mut Vec<u32>, k: usize) {
    let cmp = |a: &u32, b: &u32| scores[*b as usize].total_cmp(&scores[*a as usize]).then(a.cmp(b));
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k, cmp);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(cmp);
}

/// Recall@K over the test partition for every user with a test positive. The
/// candidate list is the whole catalogue minus the user's train and valid
/// positives.
pub fn recall_at_k(scorer: &dyn Scorer, log: &InteractionLog, ks: &[usize]) -> RecallReport {
    let test = log.positives_by_user(Partition::Test);
    let train = log.positives_by_user(Partition::Train);
    let valid = log.positives_by_user(Partition::Valid);
    let kmax = ks.iter().copied().max().unwrap_or(0);
    let users: Vec<u32> = (0..log.n_users as u32).filter(|&u| !test[u as usize].is_empty()).collect();
    let per_user: Vec<UserRecall> = users
        .par_iter()
        .map(|&u| {
            let excluded: BTreeSet<u32> = train[u as usize].iter().chain(&valid[u as usize]).copied().collect();
            let positives: BTreeSet<u32> = test[u as usize].iter().copied().collect();
            let scores = scorer.score_all(u, log.n_items);
            let mut cand: Vec<u32> = (0..log.n_items as u32).filter(|i| !excluded.contains(i)).collect();
            top_k(&scores, &mut cand, kmax);
            let mut hits = 0usize;
            let mut hits_at = Vec::with_capacity(cand.len());
            for i in &cand {
                hits += positives.contains(i) as usize;
                hits_at.push(hits);
            }
            let recall = ks
                .iter()
                .map(|&k| {
                    let h = if k == 0 { 0 } else { hits_at.get(k - 1).or(hits_at.last()).copied().unwrap_or(0) };
                    h as f64 / positives.len() as f64
                })
                .collect();
            UserRecall {
                user: u,
                n_test: positives.len(),
                recall,
            }
        })
        .collect();
    let n = per_user.len().max(1) as f64;
    let mean = (0..ks.len())
        .map(|j| per_user.iter().map(|r| r.recall[j]).sum::<f64>() / n)
        .collect();
    RecallReport {
        ks: ks.to_vec(),
        mean,
        per_user,
    }
}

impl RecallReport {
    pub fn write_tsv<W: Write>(&self, log: &InteractionLog, w: &mut W) -> io::Result<()> {
        write!(w, "user\tn_test")?;
        for k in &self.ks {
            write!(w, "\trecall@{k}")?;
        }
        writeln!(w)?;
        for r in &self.per_user {
            write!(w, "{}\t{}", log.user_ids.original(r.user), r.n_test)?;
            for v in &r.recall {
                write!(w, "\t{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub f1: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub n_eval_users: usize,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "auc          {:.4}", self.auc)?;
        writeln!(f, "f1           {:.4}", self.f1)?;
        for (k, v) in &self.recall_at {
            writeln!(f, "recall@{k:<5} {v:.4}")?;
        }
        write!(f, "users        {}", self.n_eval_users)
    }
}

/// Test-partition metrics of a scorer. Also returns the per-user recall rows.
pub fn evaluate(scorer: &dyn Scorer, log: &InteractionLog, ks: &[usize]) -> Result<(MetricReport, RecallReport), EvalError> {
    let (scores, labels) = score_partition(scorer, log, Partition::Test);
    if scores.is_empty() {
        return Err(EvalError::EmptyPartition(Partition::Test));
    }
    let recall = recall_at_k(scorer, log, ks);
    let report = MetricReport {
        auc: auc(&scores, &labels)?,
        f1: f1(&scores, &labels, 0.5),
        recall_at: ks.iter().copied().zip(recall.mean.iter().copied()).collect(),
        n_eval_users: recall.per_user.len(),
    };
    Ok((report, recall))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BprMfConfig {
    pub dim: usize,
    pub eta: f64,
    pub epochs: usize,
    pub seed: u64,
    pub l2: f64,
    pub batch_size: usize,
    /// Stop after this many epochs without a valid-AUC improvement.
    pub patience: usize,
}

impl Default for BprMfConfig {
    fn default() -> Self {
        BprMfConfig {
            dim: 64,
            eta: 4e-3,
            epochs: 100,
            seed: 2022,
            l2: 1e-4,
            batch_size: 2048,
            patience: 5,
        }
    }
}

/// User table × item table matrix factorisation.
#[derive(Clone, Debug, PartialEq)]
pub struct BprMf {
    pub users: Table,
    pub items: Table,
    cold: Vec<bool>,
    popularity: Popularity,
}

impl Scorer for BprMf {
    fn score(&self, user: u32, item: u32) -> f64 {
        if self.cold[user as usize] {
            self.popularity.score(item)
        } else {
            dot(self.users.row(user as usize), self.items.row(item as usize))
        }
    }
}

/// Trains the baseline with BPR + L2 on touched rows and lazy Adam, keeping
/// the snapshot with the best valid AUC.
pub fn train_bprmf(log: &InteractionLog, cfg: &BprMfConfig) -> BprMf {
    let train = TrainView::from_log(log);
    let mut rng = seeding::rng_from(cfg.seed, &[STREAM_BPRMF]);
    let bound = 0.1;
    let mut table = |rows: usize| Table {
        rows,
        cols: cfg.dim,
        data: (0..rows * cfg.dim).map(|_| rng.gen_range(-bound..=bound)).collect(),
    };
    let mut model = BprMf {
        users: table(log.n_users),
        items: table(log.n_items),
        cold: (0..log.n_users as u32).map(|u| train.is_cold(u)).collect(),
        popularity: Popularity::from_train(&train),
    };
    let adam = AdamConfig {
        eta: cfg.eta,
        ..AdamConfig::default()
    };
    let mut mu = Moments::new(model.users.data.len());
    let mut mi = Moments::new(model.items.data.len());
    let mut best = (partition_auc(&model, log, Partition::Valid).unwrap_or(0.5), model.clone());
    let mut since_best = 0;
    let mut t = 0u64;
    for epoch in 0..cfg.epochs {
        let pairs = sample_pairs(log, cfg.seed, STREAM_BPRMF, epoch as u64);
        for batch in pairs.chunks(cfg.batch_size.max(1)) {
            let b = batch.len() as f64;
            let mut gu: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
            let mut gi: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
            for p in batch {
                let u = model.users.row(p.user as usize);
                let (ip, ineg) = (model.items.row(p.pos as usize), model.items.row(p.neg as usize));
                let delta = dot(u, ip) - dot(u, ineg);
                let g = -sigmoid(-delta) / b;
                let zeros = || vec![0.0; cfg.dim];
                let du = gu.entry(p.user).or_insert_with(zeros);
                axpy(g, ip, du);
                axpy(-g, ineg, du);
                axpy(g, u, gi.entry(p.pos).or_insert_with(zeros));
                axpy(-g, u, gi.entry(p.neg).or_insert_with(zeros));
            }
            for (r, g) in gu.iter_mut() {
                axpy(2.0 * cfg.l2, model.users.row(*r as usize), g);
            }
            for (r, g) in gi.iter_mut() {
                axpy(2.0 * cfg.l2, model.items.row(*r as usize), g);
            }
            t += 1;
            mu.update_rows(&mut model.users, &gu, t, &adam);
            mi.update_rows(&mut model.items, &gi, t, &adam);
        }
        let valid = partition_auc(&model, log, Partition::Valid).unwrap_or(0.5);
        log::debug!("bprmf epoch {epoch}: valid auc {valid:.4}");
        if valid > best.0 {
            best = (valid, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    best.1
}
