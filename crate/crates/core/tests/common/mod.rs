#![allow(dead_code)]

use kgic::dataset::{build_log, split, Alignment, Dataset, KnowledgeGraph, Triple};
use kgic::encoder::{init_params, Activation, ParamStore};
use kgic::engine::{backward, graph_config, sample_pairs, GradientSet};
use kgic::graphbuild::{build_cooccurrence, GraphSet, TrainView};
use kgic::objectives::{evaluate, total_loss, Ablation, HyperParams, Similarity, TrainPair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A tiny model, data set, graph set and batch for exact gradient checks.
pub struct Micro {
    pub ds: Dataset,
    pub hp: HyperParams,
    pub params: ParamStore,
    pub graphs: GraphSet,
    pub batch: Vec<TrainPair>,
}

fn micro_candidate(seed: u64) -> Micro {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_users = rng.gen_range(2..=3u64);
    let n_items = rng.gen_range(3..=4u64);
    let n_entities = n_items as usize + rng.gen_range(2..=4);
    let n_relations = rng.gen_range(1..=3);
    let dim = rng.gen_range(2..=8);

    let mut rows = Vec::new();
    for u in 0..n_users {
        let pos = rng.gen_range(0..n_items);
        rows.push((u, pos, true));
        if rng.gen_bool(0.3) {
            rows.push((u, (pos + 1) % n_items, true));
        }
    }
    // Every item appears in the catalogue.
    for i in 0..n_items {
        rows.push((n_users, i, i == 0));
    }
    let log = build_log(&rows, seed);

    let triples: Vec<Triple> = (0..rng.gen_range(4..=12))
        .map(|_| {
            Triple::new(
                rng.gen_range(0..n_entities as u32),
                rng.gen_range(0..n_relations as u32),
                rng.gen_range(0..n_entities as u32),
            )
        })
        .collect();
    let kg = KnowledgeGraph::from_triples(triples, n_entities, n_relations);
    let align = Alignment {
        item_to_entity: (0..n_items as u32).collect(),
    };

    let ablation = match rng.gen_range(0..6) {
        0 => Ablation {
            disable_intra: true,
            ..Ablation::default()
        },
        1 => Ablation {
            disable_inter: true,
            ..Ablation::default()
        },
        2 => Ablation {
            disable_nonlocal: true,
            ..Ablation::default()
        },
        _ => Ablation::default(),
    };
    let hp = HyperParams {
        depth: rng.gen_range(1..=2),
        negative_layers: 1,
        tau: rng.gen_range(0.1..1.0),
        alpha: rng.gen_range(0.5..2.0),
        lambda1: rng.gen_range(0.1..1.0),
        lambda2: rng.gen_range(0.01..0.1),
        dim,
        local_size: rng.gen_range(1..=5),
        nonlocal_size: rng.gen_range(1..=5),
        seed,
        activation: if rng.gen_bool(0.8) { Activation::Relu } else { Activation::LeakyRelu },
        similarity: if rng.gen_bool(0.8) { Similarity::Dot } else { Similarity::Cosine },
        symmetric_inter: rng.gen_bool(0.3),
        l2_full: rng.gen_bool(0.2),
        ablation,
        ..HyperParams::default()
    };

    let mut params = init_params(kg.n_entities, kg.relation_slots(), dim, seed);
    for b in params.b0.iter_mut() {
        *b = rng.gen_range(-0.5..0.5);
    }
    params.b1 = rng.gen_range(-0.5..0.5);

    let train = TrainView::from_log(&log);
    let cooc = build_cooccurrence(&train);
    let graphs = GraphSet::build(&train, &cooc, &align, &kg, &graph_config(&hp), 0);
    let batch = sample_pairs(&log, seed, 99, 0);
    Micro {
        ds: Dataset { log, kg, align },
        hp,
        params,
        graphs,
        batch,
    }
}

/// Smallest |pre-activation| over every triple of every graph.
pub fn min_abs_preactivation(m: &Micro) -> f64 {
    let p = &m.params;
    let d = p.d;
    let mut min = f64::INFINITY;
    let all = m.graphs.users.iter().flatten().chain(m.graphs.items.iter());
    for t in all.flat_map(|o| o.iter()).flat_map(|g| g.layers.iter().flatten()) {
        let (e, r) = (p.entity.row(t.head as usize), p.relation.row(t.relation as usize));
        for k in 0..d {
            let row = p.w0.row(k);
            let z: f64 = (0..d).map(|j| row[j] * e[j] + row[d + j] * r[j]).sum::<f64>() + p.b0[k];
            min = min.min(z.abs());
        }
    }
    min
}

/// A micro-instance whose ReLU pre-activations all stay clear of the kink, so
/// that central differences are meaningful.
pub fn micro_instance(seed: u64) -> Micro {
    (0..)
        .map(|attempt| micro_candidate(seed.wrapping_mul(1_000_003).wrapping_add(attempt)))
        .find(|m| !m.batch.is_empty() && min_abs_preactivation(m) > 1e-3)
        .expect("some candidate qualifies")
}

pub fn loss_at(m: &Micro, params: &ParamStore) -> f64 {
    total_loss(&m.batch, &m.graphs, params, &m.hp).unwrap().total
}

pub fn analytic(m: &Micro) -> GradientSet {
    let trace = evaluate(&m.batch, &m.graphs, &m.params, &m.hp).unwrap();
    backward(&trace, &m.params).unwrap()
}

/// Every scalar parameter as (tensor, flat index).
fn coordinates(p: &ParamStore) -> Vec<(usize, usize)> {
    let lens = [p.entity.data.len(), p.relation.data.len(), p.w0.data.len(), p.b0.len(), p.w1.len(), 1];
    lens.iter().enumerate().flat_map(|(t, &n)| (0..n).map(move |k| (t, k))).collect()
}

fn coord(p: &mut ParamStore, t: usize, k: usize) -> &mut f64 {
    match t {
        0 => &mut p.entity.data[k],
        1 => &mut p.relation.data[k],
        2 => &mut p.w0.data[k],
        3 => &mut p.b0[k],
        4 => &mut p.w1[k],
        _ => &mut p.b1,
    }
}

fn grad_at(g: &GradientSet, d: usize, t: usize, k: usize) -> f64 {
    match t {
        0 => g.entity.get(&((k / d) as u32)).map_or(0.0, |r| r[k % d]),
        1 => g.relation.get(&((k / d) as u32)).map_or(0.0, |r| r[k % d]),
        2 => g.w0[k],
        3 => g.b0[k],
        4 => g.w1[k],
        _ => g.b1,
    }
}

/// Components smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Largest relative error between the analytic gradient and central
/// differences with step `h`, over every parameter.
pub fn max_relative_error(m: &Micro, h: f64) -> f64 {
    let g = analytic(m);
    let d = m.params.d;
    let mut worst: f64 = 0.0;
    let mut p = m.params.clone();
    for (t, k) in coordinates(&m.params) {
        let orig = *coord(&mut p, t, k);
        *coord(&mut p, t, k) = orig + h;
        let up = loss_at(m, &p);
        *coord(&mut p, t, k) = orig - h;
        let down = loss_at(m, &p);
        *coord(&mut p, t, k) = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = grad_at(&g, d, t, k);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        worst = worst.max(err);
    }
    worst
}

/// Synthetic recommendation data with planted cluster structure that the
/// knowledge graph reveals: items of a cluster share attribute entities, and
/// users mostly consume items from their one or two favourite clusters.
pub fn clustered_dataset(seed: u64, n_users: u64, clusters: u64, items_per_cluster: u64, per_user: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_items = clusters * items_per_cluster;
    let attrs_per_cluster = 4u32;
    let n_entities = n_items as usize + (clusters as u32 * attrs_per_cluster) as usize;
    let attr = |c: u64, a: u32| n_items as u32 + c as u32 * attrs_per_cluster + a;

    let mut triples = Vec::new();
    for i in 0..n_items {
        let c = i / items_per_cluster;
        for _ in 0..2 {
            let a = attr(c, rng.gen_range(0..attrs_per_cluster));
            triples.push(Triple::new(i as u32, 0, a));
            triples.push(Triple::new(a, 1, i as u32));
        }
        if rng.gen_bool(0.2) {
            let a = attr(rng.gen_range(0..clusters), rng.gen_range(0..attrs_per_cluster));
            triples.push(Triple::new(i as u32, 2, a));
        }
    }
    let kg = KnowledgeGraph::from_triples(triples, n_entities, 3);

    let mut rows = Vec::new();
    for u in 0..n_users {
        let favourites = [rng.gen_range(0..clusters), rng.gen_range(0..clusters)];
        let mut chosen = std::collections::BTreeSet::new();
        while chosen.len() < per_user {
            let item = if rng.gen_bool(0.85) {
                let c = favourites[rng.gen_range(0..2)];
                c * items_per_cluster + rng.gen_range(0..items_per_cluster)
            } else {
                rng.gen_range(0..n_items)
            };
            chosen.insert(item);
        }
        rows.extend(chosen.into_iter().map(|i| (u, i, true)));
    }
    // Make sure every item is in the catalogue.
    for i in 0..n_items {
        if !rows.iter().any(|r| r.1 == i) {
            rows.push((rng.gen_range(0..n_users), i, false));
        }
    }
    let log = split(&build_log(&rows, seed), (0.6, 0.2, 0.2), seed).unwrap();
    let align = Alignment {
        item_to_entity: (0..log.n_items as u32)
            .map(|i| log.item_ids.original(i) as u32)
            .collect(),
    };
    Dataset { log, kg, align }
}

/// Writes a clustered dataset as `ratings_final.txt` (user item 0/1) and
/// `kg_final.txt` (head relation tail) under `dir`.
pub fn write_rating_files(dir: &std::path::Path, seed: u64) {
    use std::fmt::Write;
    let ds = clustered_dataset(seed, 60, 4, 10, 8);
    let mut ratings = String::new();
    for r in &ds.log.records {
        let _ = writeln!(ratings, "{}\t{}\t{}", ds.log.user_ids.original(r.user), ds.log.item_ids.original(r.item), r.label as u8);
    }
    let mut kg = String::new();
    for t in &ds.kg.triples {
        let _ = writeln!(kg, "{}\t{}\t{}", t.head, t.relation, t.tail);
    }
    std::fs::write(dir.join("ratings_final.txt"), ratings).unwrap();
    std::fs::write(dir.join("kg_final.txt"), kg).unwrap();
}
