//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 4 to 6 need the benchmark files under `$KGIC_DATA_DIR`
//! (`music/` and `book/`, each with `ratings_final.txt` and `kg_final.txt`).
//! When they are absent the criterion is reported as FAIL (blocked) and does not
//! change the exit status unless `KGIC_ACCEPTANCE_STRICT=1` is set.

mod common;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::{clustered_dataset, max_relative_error, micro_instance};
use kgic::cli::data_path;
use kgic::config::{Preset, RunConfig};
use kgic::dataset::{build_log, load_dataset, split, Dataset, KnowledgeGraph, Partition, Triple};
use kgic::encoder::{attention_weights, init_params, Activation, LayerEncoding};
use kgic::engine::{eval_graphs, fit, FitOptions};
use kgic::eval::{self, auc, partition_auc, recall_at_k, train_bprmf, BprMfConfig, KgicScorer, Scorer};
use kgic::graphbuild::{propagate, LayerSizes, Locality, Owner, TrainView};
use kgic::objectives::{bpr_loss, inter_loss, intra_loss, Ablation, HyperParams, Similarity};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Blocked(String),
}

fn pass(cond: bool, detail: String) -> Outcome {
    if cond {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

const CASES: u32 = 1000;

fn runner() -> TestRunner {
    TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    })
}

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
}

// 1. Gradients against central differences.

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let worst = (0..100u64)
        .map(|seed| max_relative_error(&micro_instance(seed), 1e-5))
        .fold(0.0f64, f64::max);
    let elapsed = start.elapsed();
    pass(
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("100 instances, max relative error {worst:.2e}, {:.1} s", elapsed.as_secs_f64()),
    )
}

// 2. Losses against straight-line evaluation.

fn brute_sim(sim: Similarity, a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    match sim {
        Similarity::Dot => ab,
        Similarity::Cosine => ab / (aa.sqrt() * bb.sqrt()),
    }
}

fn brute_intra(layers: &[Vec<f64>], depth: usize, tau: f64, sim: Similarity) -> f64 {
    let mut pos = 0.0;
    let mut all = 0.0;
    for (k, layer) in layers.iter().enumerate().skip(1) {
        let e = (brute_sim(sim, &layers[0], layer) / tau).exp();
        all += e;
        if k <= depth {
            pos += e;
        }
    }
    -(pos / all).ln()
}

fn brute_inter(local: &[Vec<f64>], nonlocal: &[Vec<f64>], depth: usize, tau: f64, sim: Similarity) -> f64 {
    let mut total = 0.0;
    for k in 0..=depth {
        let mut all = 0.0;
        for c in &nonlocal[..=depth] {
            all += (brute_sim(sim, &local[k], c) / tau).exp();
        }
        total -= ((brute_sim(sim, &local[k], &nonlocal[k]) / tau).exp() / all).ln();
    }
    total
}

fn brute_bpr(pos: f64, neg: f64) -> f64 {
    -(1.0 / (1.0 + (-(pos - neg)).exp())).ln()
}

fn enc(layers: &[Vec<f64>]) -> Vec<LayerEncoding> {
    layers
        .iter()
        .map(|e| LayerEncoding {
            embedding: e.clone(),
            weights: None,
        })
        .collect()
}

#[allow(clippy::approx_constant)]
fn loss_oracles() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let soft1 = (1.0 + (-1.0f64).exp()).ln();
    let e1 = vec![1.0, 0.0];
    let e2 = vec![0.0, 1.0];
    let mut worst: f64 = 0.0;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs());

    // Fixtures with known closed forms.
    let equal = enc(&[e1.clone(), e1.clone(), e1.clone()]);
    let intra_eq = intra_loss(&[&equal], 1, 1.0, Similarity::Dot).unwrap();
    check(intra_eq, ln2);
    check(intra_eq, brute_intra(&[e1.clone(), e1.clone(), e1.clone()], 1, 1.0, Similarity::Dot));
    let split_layers = [e1.clone(), e1.clone(), e2.clone()];
    let intra_split = intra_loss(&[&enc(&split_layers)], 1, 1.0, Similarity::Dot).unwrap();
    check(intra_split, soft1);
    check(intra_split, brute_intra(&split_layers, 1, 1.0, Similarity::Dot));
    let inter_eq = inter_loss(&enc(&[e1.clone(), e1.clone()]), &enc(&[e1.clone(), e1.clone()]), 1.0, 1, Similarity::Dot).unwrap();
    check(inter_eq, 2.0 * ln2);
    let basis = [e1.clone(), e2.clone()];
    let inter_basis = inter_loss(&enc(&basis), &enc(&basis), 1.0, 1, Similarity::Dot).unwrap();
    check(inter_basis, 2.0 * soft1);
    check(inter_basis, brute_inter(&basis, &basis, 1, 1.0, Similarity::Dot));
    check(bpr_loss(0.0, 0.0), ln2);
    check(bpr_loss(1.0, 0.0), soft1);
    check(bpr_loss(3.5, 2.5), brute_bpr(3.5, 2.5));
    let fixtures_ok = (intra_split - 0.313262).abs() < 1e-6 && (intra_eq - 0.693147).abs() < 1e-6;

    // Random scalar fixtures.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..2000 {
        let d = rng.gen_range(1..=4);
        let depth = rng.gen_range(1..=3);
        let j = rng.gen_range(1..=2);
        let tau = rng.gen_range(0.1..2.0);
        let sim = if rng.gen_bool(0.5) { Similarity::Dot } else { Similarity::Cosine };
        let mut vecs = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect() };
        let layers = vecs(depth + j + 1);
        let nonlocal = vecs(depth + j + 1);
        check(intra_loss(&[&enc(&layers)], depth, tau, sim).unwrap(), brute_intra(&layers, depth, tau, sim));
        check(inter_loss(&enc(&layers), &enc(&nonlocal), tau, depth, sim).unwrap(), brute_inter(&layers, &nonlocal, depth, tau, sim));
        let (p, n) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        check(bpr_loss(p, n), brute_bpr(p, n));
    }
    pass(worst < 1e-10 && fixtures_ok, format!("max absolute error {worst:.2e} over fixtures and 2000 random cases"))
}

// 3. Structural invariants as property tests.

fn attention_simplex(runner: &mut TestRunner) -> Result<(), String> {
    let strategy = (any::<u64>(), 1usize..=8, 1usize..=12, 0.01f64..50.0, any::<bool>());
    runner
        .run(&strategy, |(seed, d, n, scale, leaky)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n_entities = rng.gen_range(1..=10);
            let n_relations = rng.gen_range(1..=4);
            let mut params = init_params(n_entities, n_relations, d, seed);
            for x in params.entity.data.iter_mut().chain(params.w0.data.iter_mut()).chain(params.w1.iter_mut()) {
                *x *= scale;
            }
            let layer: Vec<Triple> = (0..n)
                .map(|_| {
                    Triple::new(
                        rng.gen_range(0..n_entities as u32),
                        rng.gen_range(0..n_relations as u32),
                        rng.gen_range(0..n_entities as u32),
                    )
                })
                .collect();
            let act = if leaky { Activation::LeakyRelu } else { Activation::Relu };
            let w = attention_weights(&layer, &params, act).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let sum: f64 = w.iter().sum();
            prop_assert_eq!(w.len(), n);
            prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((sum - 1.0).abs() <= 1e-6, "sum {}", sum);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn layer_chaining(runner: &mut TestRunner) -> Result<(), String> {
    let strategy = (any::<u64>(), 1usize..=12, 1usize..=3, 0usize..=30, 1usize..=4, 1usize..=5, 1usize..=6);
    runner
        .run(&strategy, |(seed, n_entities, n_relations, n_triples, depth, seed_size, size)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let triples: Vec<Triple> = (0..n_triples)
                .map(|_| {
                    Triple::new(
                        rng.gen_range(0..n_entities as u32),
                        rng.gen_range(0..n_relations as u32),
                        rng.gen_range(0..n_entities as u32),
                    )
                })
                .collect();
            let kg = KnowledgeGraph::from_triples(triples, n_entities, n_relations);
            let known: BTreeSet<Triple> = kg.triples.iter().copied().collect();
            let seed_set: Vec<u32> = (0..rng.gen_range(1..=n_entities)).map(|_| rng.gen_range(0..n_entities as u32)).collect();
            let sizes = LayerSizes {
                seed: seed_size,
                per_layer: (0..depth).map(|_| rng.gen_range(1..=size)).collect(),
            };
            let g = propagate(Owner::user(0), Locality::Local, &seed_set, &kg, &sizes, &mut rng);
            prop_assert_eq!(g.seed_entities.len(), seed_size);
            prop_assert!(g.seed_entities.iter().all(|e| seed_set.contains(e)));
            prop_assert_eq!(g.depth(), depth);
            let live = g.dead_end.map_or(depth, |h| h - 1);
            for (l, layer) in g.layers.iter().enumerate() {
                prop_assert_eq!(layer.len(), sizes.per_layer[l]);
                let heads: BTreeSet<u32> = if l == 0 {
                    g.seed_entities.iter().copied().collect()
                } else {
                    g.layers[l - 1].iter().map(|t| t.tail).collect()
                };
                if l < live {
                    prop_assert!(layer.iter().all(|t| heads.contains(&t.head)), "hop {} breaks the chain", l + 1);
                    prop_assert!(layer.iter().all(|t| known.contains(t)));
                } else {
                    // Fallback hops reuse the previous hop or self-loops of the seed.
                    let prev: BTreeSet<Triple> = if l == 0 {
                        g.seed_entities.iter().map(|&e| Triple::new(e, kg.self_loop_relation(), e)).collect()
                    } else {
                        g.layers[l - 1].iter().copied().collect()
                    };
                    prop_assert!(layer.iter().all(|t| prev.contains(t)));
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

struct TableScorer {
    n_items: usize,
    scores: Vec<f64>,
}

impl Scorer for TableScorer {
    fn score(&self, user: u32, item: u32) -> f64 {
        self.scores[user as usize * self.n_items + item as usize]
    }
}

fn recall_monotone(runner: &mut TestRunner) -> Result<(), String> {
    let strategy = (any::<u64>(), 2u64..=8, 4u64..=20, prop::collection::vec(0usize..=25, 1..=6));
    runner
        .run(&strategy, |(seed, n_users, n_items, mut ks)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rows = Vec::new();
            for u in 0..n_users {
                let picks: BTreeSet<u64> = (0..rng.gen_range(1..=n_items / 2)).map(|_| rng.gen_range(0..n_items)).collect();
                rows.extend(picks.into_iter().map(|i| (u, i, true)));
            }
            for i in 0..n_items {
                rows.push((n_users, i, false));
            }
            let log = split(&build_log(&rows, seed), (0.4, 0.2, 0.4), seed).unwrap();
            let scores = (0..log.n_users * log.n_items).map(|_| rng.gen_range(0..4) as f64).collect();
            let scorer = TableScorer {
                n_items: log.n_items,
                scores,
            };
            ks.sort_unstable();
            let report = recall_at_k(&scorer, &log, &ks);
            for w in report.mean.windows(2) {
                prop_assert!(w[0] <= w[1] + 1e-12);
            }
            for user in &report.per_user {
                prop_assert!(user.recall.iter().all(|r| (0.0..=1.0).contains(r)));
                for w in user.recall.windows(2) {
                    prop_assert!(w[0] <= w[1], "user {} recall {:?} at {:?}", user.user, user.recall, ks);
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn auc_pair_count(runner: &mut TestRunner) -> Result<(), String> {
    let strategy = prop::collection::vec((0i32..20, any::<bool>()), 2..=200);
    runner
        .run(&strategy, |mut rows| {
            // Both classes present.
            rows[0].1 = true;
            rows[1].1 = false;
            let scores: Vec<f64> = rows.iter().map(|r| r.0 as f64 / 4.0).collect();
            let labels: Vec<bool> = rows.iter().map(|r| r.1).collect();
            let got = auc(&scores, &labels).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let want = brute_auc(&scores, &labels);
            prop_assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

type Property = fn(&mut TestRunner) -> Result<(), String>;

fn structural_invariants() -> Outcome {
    let mut runner = runner();
    let checks: [(&str, Property); 4] = [
        ("attention simplex", attention_simplex),
        ("layer chaining", layer_chaining),
        ("recall monotone", recall_monotone),
        ("auc pair count", auc_pair_count),
    ];
    let mut failures = Vec::new();
    for (name, check) in checks {
        if let Err(e) = check(&mut runner) {
            failures.push(format!("{name}: {e}"));
        }
    }
    if failures.is_empty() {
        Outcome::Pass(format!("4 properties x {CASES} cases"))
    } else {
        Outcome::Fail(failures.join("; "))
    }
}

// 4 to 6. Benchmark data sets.

fn benchmark(preset: Preset) -> Result<(RunConfig, Dataset), String> {
    let cfg = RunConfig::preset(preset);
    let files: Vec<PathBuf> = [&cfg.interactions, &cfg.kg].into_iter().flatten().map(|p| data_path(p)).collect();
    if let Some(missing) = files.iter().find(|p| !p.is_file()) {
        return Err(format!("{} not found; set KGIC_DATA_DIR", missing.display()));
    }
    let ds = load_dataset(&files[0], &files[1], None, cfg.rating_threshold, cfg.split, cfg.hp.seed).map_err(|e| e.to_string())?;
    Ok((cfg, ds))
}

fn test_auc(ds: &Dataset, hp: &HyperParams) -> Result<f64, String> {
    let out = fit(ds, hp, &FitOptions::new(hp), &mut |_| {}).map_err(|e| e.to_string())?;
    let train = TrainView::from_log(&ds.log);
    let graphs = eval_graphs(ds, hp);
    let scorer = KgicScorer::new(&out.params, &graphs, hp, &train).map_err(|e| e.to_string())?;
    partition_auc(&scorer, &ds.log, Partition::Test).map_err(|e| e.to_string())
}

fn music_reproduction(music: &Result<(RunConfig, Dataset), String>) -> (Outcome, Option<f64>) {
    let (cfg, ds) = match music {
        Ok(x) => x,
        Err(e) => return (Outcome::Blocked(e.clone()), None),
    };
    let start = Instant::now();
    let kgic_auc = match pool(1).install(|| test_auc(ds, &cfg.hp)) {
        Ok(a) => a,
        Err(e) => return (Outcome::Fail(e), None),
    };
    let elapsed = start.elapsed();
    let mf = pool(1).install(|| train_bprmf(&ds.log, &BprMfConfig::default()));
    let mf_auc = partition_auc(&mf, &ds.log, Partition::Test).unwrap_or(f64::NAN);
    let stats = ds.stats();
    let ok = kgic_auc >= 0.82 && kgic_auc - mf_auc >= 0.04 && elapsed <= Duration::from_secs(45 * 60);
    let detail = format!(
        "{} users, {} interactions: test AUC {kgic_auc:.4}, BPRMF {mf_auc:.4}, {:.1} min single-threaded",
        stats.users,
        stats.interactions,
        elapsed.as_secs_f64() / 60.0
    );
    (pass(ok, detail), Some(kgic_auc))
}

fn ablation_ordering(music: &Result<(RunConfig, Dataset), String>, full_first: Option<f64>) -> Outcome {
    let (cfg, ds) = match music {
        Ok(x) => x,
        Err(e) => return Outcome::Blocked(e.clone()),
    };
    let variants = [
        Ablation {
            disable_intra: true,
            ..Ablation::default()
        },
        Ablation {
            disable_inter: true,
            ..Ablation::default()
        },
        Ablation {
            disable_nonlocal: true,
            ..Ablation::default()
        },
    ];
    let mut votes = 0;
    let mut lines = Vec::new();
    for (k, seed) in [cfg.hp.seed, cfg.hp.seed + 1, cfg.hp.seed + 2].into_iter().enumerate() {
        let hp = HyperParams { seed, ..cfg.hp.clone() };
        let full = match (k, full_first) {
            (0, Some(a)) => Ok(a),
            _ => test_auc(ds, &hp),
        };
        let ablated: Result<Vec<f64>, String> = variants
            .iter()
            .map(|a| test_auc(ds, &HyperParams { ablation: *a, ..hp.clone() }))
            .collect();
        let (full, ablated) = match (full, ablated) {
            (Ok(f), Ok(a)) => (f, a),
            (Err(e), _) | (_, Err(e)) => return Outcome::Fail(e),
        };
        let ok = ablated.iter().all(|&a| full >= a - 0.002) && full >= ablated[2] + 0.005;
        votes += ok as usize;
        lines.push(format!(
            "seed {seed}: full {full:.4} intra-off {:.4} inter-off {:.4} nonlocal-off {:.4}",
            ablated[0], ablated[1], ablated[2]
        ));
    }
    pass(votes >= 2, format!("{votes}/3 seeds ordered; {}", lines.join("; ")))
}

fn book_smoke() -> Outcome {
    let (cfg, ds) = match benchmark(Preset::Book) {
        Ok(x) => x,
        Err(e) => return Outcome::Blocked(e),
    };
    let start = Instant::now();
    match test_auc(&ds, &cfg.hp) {
        Ok(a) => {
            let elapsed = start.elapsed();
            pass(
                a >= 0.72 && elapsed <= Duration::from_secs(90 * 60),
                format!("test AUC {a:.4}, {:.1} min", elapsed.as_secs_f64() / 60.0),
            )
        }
        Err(e) => Outcome::Fail(e),
    }
}

// 7. Determinism.

fn checkpoint_bytes(params: &kgic::encoder::ParamStore, depth: usize) -> Vec<u8> {
    let mut bytes = Vec::new();
    params.save(&mut bytes, depth).unwrap();
    bytes
}

fn determinism() -> Outcome {
    let ds = clustered_dataset(5, 60, 4, 10, 8);
    let hp = HyperParams {
        dim: 16,
        local_size: 8,
        nonlocal_size: 16,
        batch_size: 128,
        ..HyperParams::music()
    };
    let opts = FitOptions {
        max_epochs: 3,
        ..FitOptions::new(&hp)
    };
    let run = |threads: usize| {
        pool(threads).install(|| {
            let out = fit(&ds, &hp, &opts, &mut |_| {}).unwrap();
            let train = TrainView::from_log(&ds.log);
            let graphs = eval_graphs(&ds, &hp);
            let scorer = KgicScorer::new(&out.params, &graphs, &hp, &train).unwrap();
            let (report, _) = eval::evaluate(&scorer, &ds.log, &eval::DEFAULT_KS).unwrap();
            (checkpoint_bytes(&out.params, hp.depth), report)
        })
    };
    let (a, ma) = run(1);
    let (b, _) = run(1);
    let (_, mc) = run(4);
    let metric_gap = std::iter::once((ma.auc, mc.auc))
        .chain([(ma.f1, mc.f1)])
        .chain(ma.recall_at.values().copied().zip(mc.recall_at.values().copied()))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    pass(
        a == b && metric_gap <= 1e-9,
        format!("single-threaded checkpoints identical: {}, 1 vs 4 threads metric gap {metric_gap:.1e}", a == b),
    )
}

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    let strict = std::env::var("KGIC_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = false;
    let mut report = |name: &str, outcome: Outcome| {
        let (tag, detail, counts) = match outcome {
            Outcome::Pass(d) => ("PASS", d, false),
            Outcome::Fail(d) => ("FAIL", d, true),
            Outcome::Blocked(d) => ("FAIL", format!("blocked: {d}"), strict),
        };
        failed |= counts;
        println!("{tag} {name}: {detail}");
    };
    report("AC1 gradient correctness", gradient_check());
    report("AC2 loss oracles", loss_oracles());
    report("AC3 structural invariants", structural_invariants());
    let music = benchmark(Preset::Music);
    let (ac4, full_auc) = music_reproduction(&music);
    report("AC4 Last.FM reproduction", ac4);
    report("AC5 ablation ordering", ablation_ordering(&music, full_auc));
    report("AC6 Book-Crossing smoke", book_smoke());
    report("AC7 determinism", determinism());
    if failed {
        std::process::exit(1);
    }
}
