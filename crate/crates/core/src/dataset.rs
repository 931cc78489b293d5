//! Interaction logs, knowledge graphs and item–entity alignment.
//!
//! Input files are UTF-8 text with one record per line. Fields are separated by
//! tabs or spaces and lines starting with `#` are ignored. All ids are
//! non-negative integers and get densely re-indexed in ascending order of their
//! original value, so the result never depends on the order of lines in a file.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio;
use crate::seeding::{self, STREAM_NEGATIVES, STREAM_SPLIT};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0} contains no records")]
    Empty(PathBuf),
    #[error("split ratio {0} is outside (0, 1)")]
    InvalidRatio(f64),
    #[error("split ratios sum to {0}, expected 1")]
    RatioSum(f64),
    #[error("item {item} has no aligned entity")]
    MissingAlignment { item: u64 },
    #[error("item {item} aligns to entity {entity}, which is not in the knowledge graph")]
    AlignmentOutOfRange { item: u64, entity: u64 },
    #[error("item {item} is aligned to more than one entity")]
    ConflictingAlignment { item: u64 },
    #[error("corrupt dataset cache: {0}")]
    Cache(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Partition {
    Train,
    Valid,
    Test,
}

impl Partition {
    fn code(self) -> u32 {
        match self {
            Partition::Train => 0,
            Partition::Valid => 1,
            Partition::Test => 2,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Partition::Train),
            1 => Some(Partition::Valid),
            2 => Some(Partition::Test),
            _ => None,
        }
    }
}

/// One labelled (user, item) observation.
///
/// `pair` ties a positive to the negative that was sampled for it; the split
/// keeps both members of a pair in the same partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub user: u32,
    pub item: u32,
    pub label: bool,
    pub pair: u32,
    pub partition: Partition,
}

/// Dense-id ↔ original-id mapping. Dense ids follow ascending original ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    originals: Vec<u64>,
}

impl IdMap {
    pub fn from_originals<I: IntoIterator<Item = u64>>(ids: I) -> Self {
        let set: BTreeSet<u64> = ids.into_iter().collect();
        IdMap {
            originals: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    pub fn dense(&self, original: u64) -> Option<u32> {
        self.originals
            .binary_search(&original)
            .ok()
            .map(|i| i as u32)
    }

    pub fn original(&self, dense: u32) -> u64 {
        self.originals[dense as usize]
    }

    /// Writes `original_id \t dense_id` rows.
    pub fn write_tsv(&self, path: &Path) -> io::Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for (dense, orig) in self.originals.iter().enumerate() {
            writeln!(w, "{orig}\t{dense}")?;
        }
        w.flush()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionLog {
    pub records: Vec<Record>,
    pub n_users: usize,
    pub n_items: usize,
    pub user_ids: IdMap,
    pub item_ids: IdMap,
    pub warnings: Vec<String>,
}

impl InteractionLog {
    pub fn partition(&self, p: Partition) -> impl Iterator<Item = &Record> + '_ {
        self.records.iter().filter(move |r| r.partition == p)
    }

    /// Per-user sorted item lists of positives in the given partition.
    pub fn positives_by_user(&self, p: Partition) -> Vec<Vec<u32>> {
        self.items_by_user(p, true)
    }

    pub fn negatives_by_user(&self, p: Partition) -> Vec<Vec<u32>> {
        self.items_by_user(p, false)
    }

    fn items_by_user(&self, p: Partition, label: bool) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.n_users];
        for r in self.partition(p).filter(|r| r.label == label) {
            out[r.user as usize].push(r.item);
        }
        for items in &mut out {
            items.sort_unstable();
            items.dedup();
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: u32,
    pub relation: u32,
    pub tail: u32,
}

impl Triple {
    pub fn new(head: u32, relation: u32, tail: u32) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

/// Directed labelled triples with head-indexed adjacency.
///
/// Triples are stored sorted by (head, relation, tail), so the adjacency list of
/// a head is a contiguous slice of the triple list.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    pub triples: Vec<Triple>,
    pub n_entities: usize,
    pub n_relations: usize,
    pub entity_ids: IdMap,
    pub relation_ids: IdMap,
    offsets: Vec<usize>,
}

impl KnowledgeGraph {
    /// Builds a graph over already-dense ids.
    pub fn from_triples(mut triples: Vec<Triple>, n_entities: usize, n_relations: usize) -> Self {
        triples.sort_unstable();
        triples.dedup();
        assert!(triples
            .iter()
            .all(|t| (t.head as usize) < n_entities
                && (t.tail as usize) < n_entities
                && (t.relation as usize) < n_relations));
        let mut offsets = vec![0usize; n_entities + 1];
        for t in &triples {
            offsets[t.head as usize + 1] += 1;
        }
        for i in 0..n_entities {
            offsets[i + 1] += offsets[i];
        }
        KnowledgeGraph {
            triples,
            n_entities,
            n_relations,
            entity_ids: IdMap::from_originals(0..n_entities as u64),
            relation_ids: IdMap::from_originals(0..n_relations as u64),
            offsets,
        }
    }

    /// Outgoing triples of `head`, ordered by (relation, tail).
    pub fn adjacency(&self, head: u32) -> &[Triple] {
        let h = head as usize;
        &self.triples[self.offsets[h]..self.offsets[h + 1]]
    }

    pub fn out_degree(&self, head: u32) -> usize {
        let h = head as usize;
        self.offsets[h + 1] - self.offsets[h]
    }

    /// Relation index reserved for the self-loop triples used when propagation
    /// dead-ends on the first layer. It sits one past the last real relation.
    pub fn self_loop_relation(&self) -> u32 {
        self.n_relations as u32
    }

    /// Number of relation embedding rows a model over this graph needs.
    pub fn relation_slots(&self) -> usize {
        self.n_relations + 1
    }

    /// Adds every listed original entity id that no triple mentions as an
    /// isolated entity, re-indexing the graph. Returns how many were added.
    pub fn add_isolated_entities(&mut self, originals: impl IntoIterator<Item = u64>) -> usize {
        let old = &self.entity_ids;
        let missing: Vec<u64> = originals.into_iter().filter(|&o| old.dense(o).is_none()).collect();
        if missing.is_empty() {
            return 0;
        }
        let ids = IdMap::from_originals(old.originals.iter().copied().chain(missing));
        let added = ids.len() - old.len();
        let remap = |e: u32| ids.dense(old.original(e)).expect("kept entity");
        let triples = self
            .triples
            .iter()
            .map(|t| Triple::new(remap(t.head), t.relation, remap(t.tail)))
            .collect();
        let relation_ids = std::mem::replace(&mut self.relation_ids, IdMap::from_originals([]));
        *self = KnowledgeGraph::from_triples(triples, ids.len(), self.n_relations);
        self.entity_ids = ids;
        self.relation_ids = relation_ids;
        added
    }
}

/// Total map from dense item id to dense entity id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub item_to_entity: Vec<u32>,
}

impl Alignment {
    pub fn entity(&self, item: u32) -> u32 {
        self.item_to_entity[item as usize]
    }
}

/// Everything the trainer needs, bundled.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub log: InteractionLog,
    pub kg: KnowledgeGraph,
    pub align: Alignment,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Yields (1-based line number, fields) for every non-comment, non-blank line.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            None
        } else {
            Some((i + 1, line.split_whitespace().collect()))
        }
    })
}

fn parse_id(path: &Path, line: usize, field: &str, what: &str) -> Result<u64> {
    field.parse::<u64>().map_err(|_| DatasetError::Malformed {
        path: path.to_path_buf(),
        line,
        message: format!("{what} `{field}` is not a non-negative integer"),
    })
}

fn malformed(path: &Path, line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Malformed {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Loads `user item [rating]` rows and turns them into a balanced implicit log.
///
/// With a threshold, rows rated at or above it become positives and the rest are
/// dropped (they still count as observed, so they are never drawn as negatives).
/// Without a threshold every listed pair is positive. Each user then receives as
/// many negatives as positives, drawn without replacement from the items they
/// never interacted with. All records start in the train partition.
pub fn load_interactions(
    path: &Path,
    rating_threshold: Option<f64>,
    rng_seed: u64,
) -> Result<InteractionLog> {
    let text = read_text(path)?;
    let mut rows = Vec::new();
    for (line, fields) in data_lines(&text) {
        if fields.len() < 2 || fields.len() > 3 {
            return Err(malformed(
                path,
                line,
                format!("expected `user item [rating]`, found {} fields", fields.len()),
            ));
        }
        let user = parse_id(path, line, fields[0], "user id")?;
        let item = parse_id(path, line, fields[1], "item id")?;
        let rating = match fields.get(2) {
            Some(f) => Some(
                f.parse::<f64>()
                    .ok()
                    .filter(|r| r.is_finite())
                    .ok_or_else(|| malformed(path, line, format!("rating `{f}` is not a number")))?,
            ),
            None => None,
        };
        let positive = match (rating_threshold, rating) {
            (None, _) => true,
            (Some(th), Some(r)) => r >= th,
            (Some(_), None) => {
                return Err(malformed(path, line, "a rating threshold is set but the line has no rating"))
            }
        };
        rows.push((user, item, positive));
    }
    if rows.is_empty() {
        return Err(DatasetError::Empty(path.to_path_buf()));
    }
    Ok(build_log(&rows, rng_seed))
}

/// Builds a balanced log from already-parsed `(user, item, positive)` rows using
/// original ids. Exposed so callers with in-memory data skip the file layer.
pub fn build_log(rows: &[(u64, u64, bool)], rng_seed: u64) -> InteractionLog {
    let user_ids = IdMap::from_originals(rows.iter().map(|r| r.0));
    let item_ids = IdMap::from_originals(rows.iter().map(|r| r.1));
    let n_users = user_ids.len();
    let n_items = item_ids.len();

    let mut observed: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n_users];
    let mut positives: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n_users];
    for &(u, i, pos) in rows {
        let u = user_ids.dense(u).expect("user indexed") as usize;
        let i = item_ids.dense(i).expect("item indexed");
        observed[u].insert(i);
        if pos {
            positives[u].insert(i);
        }
    }

    let mut rng = seeding::rng_from(rng_seed, &[STREAM_NEGATIVES]);
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut pair = 0u32;
    for u in 0..n_users {
        let pos: Vec<u32> = positives[u].iter().copied().collect();
        if pos.is_empty() {
            continue;
        }
        let unobserved: Vec<u32> = (0..n_items as u32)
            .filter(|i| !observed[u].contains(i))
            .collect();
        let n_neg = if pos.len() > unobserved.len() {
            warnings.push(format!(
                "user {} has {} positives but only {} unobserved items; using all of them as negatives",
                user_ids.original(u as u32),
                pos.len(),
                unobserved.len()
            ));
            unobserved.len()
        } else {
            pos.len()
        };
        let negs: Vec<u32> = index::sample(&mut rng, unobserved.len(), n_neg)
            .into_iter()
            .map(|k| unobserved[k])
            .collect();
        for (k, &item) in pos.iter().enumerate() {
            records.push(Record {
                user: u as u32,
                item,
                label: true,
                pair,
                partition: Partition::Train,
            });
            if let Some(&neg) = negs.get(k) {
                records.push(Record {
                    user: u as u32,
                    item: neg,
                    label: false,
                    pair,
                    partition: Partition::Train,
                });
            }
            pair += 1;
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    InteractionLog {
        records,
        n_users,
        n_items,
        user_ids,
        item_ids,
        warnings,
    }
}

/// Largest-remainder apportionment of `n` units over `ratios`. Ties go to the
/// earlier partition.
pub fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for k in 0..3 {
        // Guard against 0.6 * 10 = 5.999999...
        counts[k] = (exact[k] + 1e-9).floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Assigns every record a partition. Units are pairs (a positive plus its
/// sampled negative); each user's units are shuffled and apportioned
/// train/valid/test by largest remainder.
pub fn split(log: &InteractionLog, ratios: (f64, f64, f64), rng_seed: u64) -> Result<InteractionLog> {
    let ratios = [ratios.0, ratios.1, ratios.2];
    for &r in &ratios {
        if !(r > 0.0 && r < 1.0) {
            return Err(DatasetError::InvalidRatio(r));
        }
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::RatioSum(sum));
    }

    let mut units: Vec<Vec<u32>> = vec![Vec::new(); log.n_users];
    for r in &log.records {
        units[r.user as usize].push(r.pair);
    }

    let mut rng = seeding::rng_from(rng_seed, &[STREAM_SPLIT]);
    let mut assignment: HashMap<u32, Partition> = HashMap::new();
    for user_units in &mut units {
        user_units.sort_unstable();
        user_units.dedup();
        user_units.shuffle(&mut rng);
        let counts = apportion(user_units.len(), ratios);
        let parts = [Partition::Train, Partition::Valid, Partition::Test];
        let mut cursor = 0;
        for (k, &c) in counts.iter().enumerate() {
            for &p in &user_units[cursor..cursor + c] {
                assignment.insert(p, parts[k]);
            }
            cursor += c;
        }
    }

    let mut out = log.clone();
    for r in &mut out.records {
        r.partition = assignment[&r.pair];
    }
    Ok(out)
}

/// Loads `head relation tail` triples, removing duplicates.
pub fn load_kg(path: &Path) -> Result<KnowledgeGraph> {
    let text = read_text(path)?;
    let mut raw = Vec::new();
    for (line, fields) in data_lines(&text) {
        if fields.len() != 3 {
            return Err(malformed(
                path,
                line,
                format!("expected `head relation tail`, found {} fields", fields.len()),
            ));
        }
        raw.push((
            parse_id(path, line, fields[0], "head")?,
            parse_id(path, line, fields[1], "relation")?,
            parse_id(path, line, fields[2], "tail")?,
        ));
    }
    if raw.is_empty() {
        return Err(DatasetError::Empty(path.to_path_buf()));
    }
    let entity_ids = IdMap::from_originals(raw.iter().flat_map(|t| [t.0, t.2]));
    let relation_ids = IdMap::from_originals(raw.iter().map(|t| t.1));
    let triples = raw
        .iter()
        .map(|&(h, r, t)| {
            Triple::new(
                entity_ids.dense(h).unwrap(),
                relation_ids.dense(r).unwrap(),
                entity_ids.dense(t).unwrap(),
            )
        })
        .collect();
    let mut kg = KnowledgeGraph::from_triples(triples, entity_ids.len(), relation_ids.len());
    kg.entity_ids = entity_ids;
    kg.relation_ids = relation_ids;
    Ok(kg)
}

/// Resolves the item → entity map. Without a file, items and entities share one
/// original id space; with a file, rows are `item entity` in original ids.
pub fn load_alignment(path: Option<&Path>, log: &InteractionLog, kg: &KnowledgeGraph) -> Result<Alignment> {
    let mut item_to_entity: Vec<Option<u32>> = vec![None; log.n_items];
    match path {
        None => {
            for (i, slot) in item_to_entity.iter_mut().enumerate() {
                let orig = log.item_ids.original(i as u32);
                let e = kg
                    .entity_ids
                    .dense(orig)
                    .ok_or(DatasetError::AlignmentOutOfRange { item: orig, entity: orig })?;
                *slot = Some(e);
            }
        }
        Some(path) => {
            let text = read_text(path)?;
            for (line, fields) in data_lines(&text) {
                if fields.len() != 2 {
                    return Err(malformed(path, line, "expected `item entity`"));
                }
                let item = parse_id(path, line, fields[0], "item id")?;
                let entity = parse_id(path, line, fields[1], "entity id")?;
                let Some(dense_item) = log.item_ids.dense(item) else {
                    continue;
                };
                let e = kg
                    .entity_ids
                    .dense(entity)
                    .ok_or(DatasetError::AlignmentOutOfRange { item, entity })?;
                match item_to_entity[dense_item as usize] {
                    Some(prev) if prev != e => return Err(DatasetError::ConflictingAlignment { item }),
                    _ => item_to_entity[dense_item as usize] = Some(e),
                }
            }
        }
    }
    let item_to_entity = item_to_entity
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            e.ok_or(DatasetError::MissingAlignment {
                item: log.item_ids.original(i as u32),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Alignment { item_to_entity })
}

/// Loads, splits and aligns a data set from files. Without an alignment file,
/// items missing from the knowledge graph are added to it as isolated entities.
pub fn load_dataset(
    interactions: &Path,
    kg: &Path,
    alignment: Option<&Path>,
    rating_threshold: Option<f64>,
    ratios: (f64, f64, f64),
    rng_seed: u64,
) -> Result<Dataset> {
    let log = load_interactions(interactions, rating_threshold, rng_seed)?;
    let log = split(&log, ratios, rng_seed)?;
    let mut kg = load_kg(kg)?;
    if alignment.is_none() {
        let added = kg.add_isolated_entities((0..log.n_items as u32).map(|i| log.item_ids.original(i)));
        if added > 0 {
            log::warn!("{added} items have no knowledge-graph triples; added as isolated entities");
        }
    }
    let align = load_alignment(alignment, &log, &kg)?;
    Ok(Dataset { log, kg, align })
}

/// Counts in the layout of the usual dataset statistics table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    /// Positive interactions; sampled negatives are not counted.
    pub interactions: usize,
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    pub train_records: usize,
    pub valid_records: usize,
    pub test_records: usize,
}

impl Dataset {
    pub fn stats(&self) -> DatasetStats {
        let count = |p| self.log.partition(p).count();
        DatasetStats {
            users: self.log.n_users,
            items: self.log.n_items,
            interactions: self.log.records.iter().filter(|r| r.label).count(),
            entities: self.kg.n_entities,
            relations: self.kg.n_relations,
            triples: self.kg.triples.len(),
            train_records: count(Partition::Train),
            valid_records: count(Partition::Valid),
            test_records: count(Partition::Test),
        }
    }

    const CACHE_MAGIC: &'static [u8; 4] = b"KGDS";
    const CACHE_VERSION: u32 = 1;

    /// Binary cache: magic, version, then id maps, records, triples and alignment.
    pub fn write_cache<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(Self::CACHE_MAGIC)?;
        binio::write_u32(w, Self::CACHE_VERSION)?;
        binio::write_u64s(w, &self.log.user_ids.originals)?;
        binio::write_u64s(w, &self.log.item_ids.originals)?;
        let flat: Vec<u32> = self
            .log
            .records
            .iter()
            .flat_map(|r| [r.user, r.item, r.label as u32, r.pair, r.partition.code()])
            .collect();
        binio::write_u32s(w, &flat)?;
        binio::write_u64s(w, &self.kg.entity_ids.originals)?;
        binio::write_u64s(w, &self.kg.relation_ids.originals)?;
        let flat: Vec<u32> = self
            .kg
            .triples
            .iter()
            .flat_map(|t| [t.head, t.relation, t.tail])
            .collect();
        binio::write_u32s(w, &flat)?;
        binio::write_u32s(w, &self.align.item_to_entity)?;
        binio::write_u32(w, self.log.warnings.len() as u32)?;
        for warning in &self.log.warnings {
            let bytes = warning.as_bytes();
            binio::write_u32(w, bytes.len() as u32)?;
            w.write_all(bytes)?;
        }
        Ok(())
    }

    pub fn read_cache<R: Read>(r: &mut R) -> Result<Dataset> {
        let bad = |e: io::Error| DatasetError::Cache(e.to_string());
        const LIMIT: usize = 1 << 32;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != Self::CACHE_MAGIC {
            return Err(DatasetError::Cache("bad magic".into()));
        }
        let version = binio::read_u32(r).map_err(bad)?;
        if version != Self::CACHE_VERSION {
            return Err(DatasetError::Cache(format!("unsupported version {version}")));
        }
        let user_ids = IdMap {
            originals: binio::read_u64s(r, LIMIT).map_err(bad)?,
        };
        let item_ids = IdMap {
            originals: binio::read_u64s(r, LIMIT).map_err(bad)?,
        };
        let flat = binio::read_u32s(r, LIMIT).map_err(bad)?;
        if flat.len() % 5 != 0 {
            return Err(DatasetError::Cache("record block truncated".into()));
        }
        let mut records = Vec::with_capacity(flat.len() / 5);
        for c in flat.chunks_exact(5) {
            if c[0] as usize >= user_ids.len() || c[1] as usize >= item_ids.len() {
                return Err(DatasetError::Cache("record id out of range".into()));
            }
            records.push(Record {
                user: c[0],
                item: c[1],
                label: c[2] != 0,
                pair: c[3],
                partition: Partition::from_code(c[4])
                    .ok_or_else(|| DatasetError::Cache("bad partition code".into()))?,
            });
        }
        let entity_ids = IdMap {
            originals: binio::read_u64s(r, LIMIT).map_err(bad)?,
        };
        let relation_ids = IdMap {
            originals: binio::read_u64s(r, LIMIT).map_err(bad)?,
        };
        let flat = binio::read_u32s(r, LIMIT).map_err(bad)?;
        if flat.len() % 3 != 0 {
            return Err(DatasetError::Cache("triple block truncated".into()));
        }
        let triples: Vec<Triple> = flat
            .chunks_exact(3)
            .map(|c| Triple::new(c[0], c[1], c[2]))
            .collect();
        if triples.iter().any(|t| {
            t.head as usize >= entity_ids.len()
                || t.tail as usize >= entity_ids.len()
                || t.relation as usize >= relation_ids.len()
        }) {
            return Err(DatasetError::Cache("triple id out of range".into()));
        }
        let item_to_entity = binio::read_u32s(r, LIMIT).map_err(bad)?;
        if item_to_entity.len() != item_ids.len()
            || item_to_entity.iter().any(|&e| e as usize >= entity_ids.len())
        {
            return Err(DatasetError::Cache("alignment inconsistent".into()));
        }
        let n_warn = binio::read_u32(r).map_err(bad)?;
        let mut warnings = Vec::new();
        for _ in 0..n_warn {
            let len = binio::read_u32(r).map_err(bad)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(bad)?;
            warnings.push(String::from_utf8(buf).map_err(|e| DatasetError::Cache(e.to_string()))?);
        }

        let mut kg = KnowledgeGraph::from_triples(triples, entity_ids.len(), relation_ids.len());
        kg.entity_ids = entity_ids;
        kg.relation_ids = relation_ids;
        Ok(Dataset {
            log: InteractionLog {
                records,
                n_users: user_ids.len(),
                n_items: item_ids.len(),
                user_ids,
                item_ids,
                warnings,
            },
            kg,
            align: Alignment { item_to_entity },
        })
    }
}
