//! Local and non-local layered graphs.
//!
//! A layered graph starts from a seed entity set and follows outgoing KG links
//! for a fixed number of hops. Each hop keeps a fixed-size sample of triples so
//! every graph has the same shape. Local seeds come from first-order
//! interactions (a user's items, or the item itself). Non-local seeds come
//! from item–user–item co-occurrence.

use std::io::{self, Write};

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Alignment, InteractionLog, KnowledgeGraph, Partition, Triple};
use crate::seeding::{self, STREAM_GRAPH};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("user {0} has no train positives")]
    ColdStart(u32),
    #[error("{0:?} {1} has an empty co-occurrence set")]
    Isolated(ObjectKind, u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectKind {
    User,
    Item,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Owner {
    pub kind: ObjectKind,
    pub id: u32,
}

impl Owner {
    pub fn user(id: u32) -> Self {
        Owner {
            kind: ObjectKind::User,
            id,
        }
    }

    pub fn item(id: u32) -> Self {
        Owner {
            kind: ObjectKind::Item,
            id,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Locality {
    Local,
    NonLocal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayeredGraph {
    pub owner: Owner,
    pub locality: Locality,
    pub seed_entities: Vec<u32>,
    /// `layers[l - 1]` holds the sampled triples of hop `l`.
    pub layers: Vec<Vec<Triple>>,
    /// First hop (1-based) whose candidate pool was empty. That hop and every
    /// deeper one were filled by the dead-end fallback.
    pub dead_end: Option<usize>,
}

impl LayeredGraph {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Every entity referenced by the graph: seeds, heads and tails.
    pub fn entities(&self) -> impl Iterator<Item = u32> + '_ {
        self.seed_entities
            .iter()
            .copied()
            .chain(self.layers.iter().flatten().flat_map(|t| [t.head, t.tail]))
    }
}

/// Train-partition positives indexed both ways.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainView {
    pub user_items: Vec<Vec<u32>>,
    pub item_users: Vec<Vec<u32>>,
}

impl TrainView {
    pub fn from_log(log: &InteractionLog) -> Self {
        let user_items = log.positives_by_user(Partition::Train);
        let mut item_users = vec![Vec::new(); log.n_items];
        for (u, items) in user_items.iter().enumerate() {
            for &i in items {
                item_users[i as usize].push(u as u32);
            }
        }
        TrainView {
            user_items,
            item_users,
        }
    }

    pub fn n_users(&self) -> usize {
        self.user_items.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_users.len()
    }

    pub fn is_cold(&self, user: u32) -> bool {
        self.user_items[user as usize].is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoOccurrence {
    /// Users sharing at least one train positive with the user (includes itself).
    pub similar_users: Vec<Vec<u32>>,
    /// Train positives of the similar users.
    pub user_highorder_items: Vec<Vec<u32>>,
    /// Train positives of the users who liked the item.
    pub item_highorder_items: Vec<Vec<u32>>,
}

/// Sorts the touched ids, clears their marks and hands them back.
fn gather_marked(marks: &mut [bool], touched: &mut Vec<u32>) -> Vec<u32> {
    touched.sort_unstable();
    for &t in touched.iter() {
        marks[t as usize] = false;
    }
    std::mem::take(touched)
}

fn union_of<'a>(lists: impl Iterator<Item = &'a Vec<u32>>, universe: usize) -> Vec<u32> {
    let mut marks = vec![false; universe];
    let mut touched = Vec::new();
    for list in lists {
        for &x in list {
            if !marks[x as usize] {
                marks[x as usize] = true;
                touched.push(x);
            }
        }
    }
    gather_marked(&mut marks, &mut touched)
}

pub fn build_cooccurrence(train: &TrainView) -> CoOccurrence {
    let n_users = train.n_users();
    let n_items = train.n_items();
    let similar_users: Vec<Vec<u32>> = (0..n_users)
        .into_par_iter()
        .map(|u| {
            union_of(
                train.user_items[u].iter().map(|&i| &train.item_users[i as usize]),
                n_users,
            )
        })
        .collect();
    let user_highorder_items = similar_users
        .par_iter()
        .map(|sim| union_of(sim.iter().map(|&s| &train.user_items[s as usize]), n_items))
        .collect();
    let item_highorder_items = (0..n_items)
        .into_par_iter()
        .map(|v| {
            union_of(
                train.item_users[v].iter().map(|&u| &train.user_items[u as usize]),
                n_items,
            )
        })
        .collect();
    CoOccurrence {
        similar_users,
        user_highorder_items,
        item_highorder_items,
    }
}

fn aligned(items: &[u32], align: &Alignment) -> Vec<u32> {
    let mut out: Vec<u32> = items.iter().map(|&i| align.entity(i)).collect();
    out.sort_unstable();
    out.dedup();
    out
}

pub fn local_seed(owner: Owner, train: &TrainView, align: &Alignment) -> Result<Vec<u32>, GraphError> {
    match owner.kind {
        ObjectKind::User => {
            let items = &train.user_items[owner.id as usize];
            if items.is_empty() {
                return Err(GraphError::ColdStart(owner.id));
            }
            Ok(aligned(items, align))
        }
        ObjectKind::Item => Ok(vec![align.entity(owner.id)]),
    }
}

pub fn nonlocal_seed(owner: Owner, cooc: &CoOccurrence, align: &Alignment) -> Result<Vec<u32>, GraphError> {
    let items = match owner.kind {
        ObjectKind::User => &cooc.user_highorder_items[owner.id as usize],
        ObjectKind::Item => &cooc.item_highorder_items[owner.id as usize],
    };
    if items.is_empty() {
        return Err(GraphError::Isolated(owner.kind, owner.id));
    }
    Ok(aligned(items, align))
}

/// Sample sizes of one layered graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSizes {
    pub seed: usize,
    pub per_layer: Vec<usize>,
}

impl LayerSizes {
    pub fn uniform(size: usize, depth: usize) -> Self {
        LayerSizes {
            seed: size,
            per_layer: vec![size; depth],
        }
    }
}

/// `size` draws from `0..pool`: without replacement when the pool is large
/// enough, uniformly with replacement otherwise.
fn sample_indices(rng: &mut ChaCha8Rng, pool: usize, size: usize) -> Vec<usize> {
    debug_assert!(pool > 0);
    if pool >= size {
        index::sample(rng, pool, size).into_vec()
    } else {
        (0..size).map(|_| rng.gen_range(0..pool)).collect()
    }
}

/// Samples `size` triples from the union of the adjacency lists of `heads`
/// (sorted, distinct) without materialising the union.
fn sample_outgoing(kg: &KnowledgeGraph, heads: &[u32], size: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Triple>> {
    let mut cumulative = Vec::with_capacity(heads.len());
    let mut total = 0usize;
    for &h in heads {
        total += kg.out_degree(h);
        cumulative.push(total);
    }
    if total == 0 {
        return None;
    }
    let picks = sample_indices(rng, total, size)
        .into_iter()
        .map(|k| {
            let slot = cumulative.partition_point(|&c| c <= k);
            let before = if slot == 0 { 0 } else { cumulative[slot - 1] };
            kg.adjacency(heads[slot])[k - before]
        })
        .collect();
    Some(picks)
}

fn distinct(mut v: Vec<u32>) -> Vec<u32> {
    v.sort_unstable();
    v.dedup();
    v
}

/// Grows a layered graph from `seed` (a non-empty entity set).
///
/// Hop 1 samples triples whose head is a seed entity; hop `l` samples triples
/// whose head is a tail of hop `l - 1`. When a pool is empty the hop and all
/// deeper hops resample the previous hop's triples; on hop 1 the previous hop
/// is represented by self-loop triples over the seed.
pub fn propagate(
    owner: Owner,
    locality: Locality,
    seed: &[u32],
    kg: &KnowledgeGraph,
    sizes: &LayerSizes,
    rng: &mut ChaCha8Rng,
) -> LayeredGraph {
    assert!(!seed.is_empty(), "propagate needs a non-empty seed");
    let seed_set = distinct(seed.to_vec());
    let seed_entities: Vec<u32> = sample_indices(rng, seed_set.len(), sizes.seed)
        .into_iter()
        .map(|k| seed_set[k])
        .collect();

    let mut layers: Vec<Vec<Triple>> = Vec::with_capacity(sizes.per_layer.len());
    let mut dead_end = None;
    for (depth, &size) in sizes.per_layer.iter().enumerate() {
        let sampled = if dead_end.is_none() {
            let heads = match layers.last() {
                None => distinct(seed_entities.clone()),
                Some(prev) => distinct(prev.iter().map(|t| t.tail).collect()),
            };
            sample_outgoing(kg, &heads, size, rng)
        } else {
            None
        };
        let layer = match sampled {
            Some(layer) => layer,
            None => {
                dead_end.get_or_insert(depth + 1);
                let previous: Vec<Triple> = match layers.last() {
                    Some(prev) => prev.clone(),
                    None => distinct(seed_entities.clone())
                        .into_iter()
                        .map(|e| Triple::new(e, kg.self_loop_relation(), e))
                        .collect(),
                };
                sample_indices(rng, previous.len(), size)
                    .into_iter()
                    .map(|k| previous[k])
                    .collect()
            }
        };
        layers.push(layer);
    }
    LayeredGraph {
        owner,
        locality,
        seed_entities,
        layers,
        dead_end,
    }
}

/// Graph-construction settings shared by a whole run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Number of hops, L + J.
    pub depth: usize,
    pub local_size: usize,
    pub nonlocal_size: usize,
    pub include_nonlocal: bool,
    pub seed: u64,
}

impl GraphConfig {
    fn sizes(&self, locality: Locality) -> LayerSizes {
        match locality {
            Locality::Local => LayerSizes::uniform(self.local_size, self.depth),
            Locality::NonLocal => LayerSizes::uniform(self.nonlocal_size, self.depth),
        }
    }
}

fn graph_rng(seed: u64, owner: Owner, locality: Locality, epoch: u64) -> ChaCha8Rng {
    let kind = match owner.kind {
        ObjectKind::User => 0,
        ObjectKind::Item => 1,
    };
    let loc = match locality {
        Locality::Local => 0,
        Locality::NonLocal => 1,
    };
    seeding::rng_from(seed, &[STREAM_GRAPH, kind, owner.id as u64, loc, epoch])
}

/// Graphs of one user or item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectGraphs {
    pub local: LayeredGraph,
    pub nonlocal: Option<LayeredGraph>,
}

impl ObjectGraphs {
    pub fn iter(&self) -> impl Iterator<Item = &LayeredGraph> {
        std::iter::once(&self.local).chain(self.nonlocal.as_ref())
    }
}

/// Builds the graphs of one object. Cold-start users yield `ColdStart`; an
/// empty co-occurrence set falls back to the local seed.
pub fn build_object(
    owner: Owner,
    train: &TrainView,
    cooc: &CoOccurrence,
    align: &Alignment,
    kg: &KnowledgeGraph,
    cfg: &GraphConfig,
    epoch: u64,
) -> Result<ObjectGraphs, GraphError> {
    let local_seed = local_seed(owner, train, align)?;
    let local = propagate(
        owner,
        Locality::Local,
        &local_seed,
        kg,
        &cfg.sizes(Locality::Local),
        &mut graph_rng(cfg.seed, owner, Locality::Local, epoch),
    );
    let nonlocal = if cfg.include_nonlocal {
        let seed = nonlocal_seed(owner, cooc, align).unwrap_or_else(|_| local_seed.clone());
        Some(propagate(
            owner,
            Locality::NonLocal,
            &seed,
            kg,
            &cfg.sizes(Locality::NonLocal),
            &mut graph_rng(cfg.seed, owner, Locality::NonLocal, epoch),
        ))
    } else {
        None
    };
    Ok(ObjectGraphs { local, nonlocal })
}

/// All users' and items' graphs for one epoch. `users[u]` is `None` for
/// cold-start users.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSet {
    pub users: Vec<Option<ObjectGraphs>>,
    pub items: Vec<ObjectGraphs>,
}

impl GraphSet {
    pub fn build(
        train: &TrainView,
        cooc: &CoOccurrence,
        align: &Alignment,
        kg: &KnowledgeGraph,
        cfg: &GraphConfig,
        epoch: u64,
    ) -> Self {
        let users = (0..train.n_users() as u32)
            .into_par_iter()
            .map(|u| build_object(Owner::user(u), train, cooc, align, kg, cfg, epoch).ok())
            .collect();
        let items = (0..train.n_items() as u32)
            .into_par_iter()
            .map(|v| {
                build_object(Owner::item(v), train, cooc, align, kg, cfg, epoch)
                    .expect("items always have a local seed")
            })
            .collect();
        GraphSet { users, items }
    }

    pub fn get(&self, owner: Owner) -> Option<&ObjectGraphs> {
        match owner.kind {
            ObjectKind::User => self.users[owner.id as usize].as_ref(),
            ObjectKind::Item => Some(&self.items[owner.id as usize]),
        }
    }

    /// Debug dump, one JSON object per layered graph.
    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let all = self.users.iter().flatten().chain(self.items.iter());
        for g in all.flat_map(|o| o.iter()) {
            serde_json::to_writer(&mut *w, g)?;
            writeln!(w)?;
        }
        Ok(())
    }
}
