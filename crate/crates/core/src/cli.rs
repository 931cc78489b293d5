//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure (including malformed data),
//! 2 usage or configuration error (including missing input files),
//! 3 training diverged, 4 checkpoint corrupt or inconsistent with the data.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{read_cfg, ConfigError, Preset, RunConfig};
use crate::dataset::{load_dataset, Dataset};
use crate::encoder::ParamStore;
use crate::engine::{eval_graphs, fit, AdamConfig, EngineError, FitOptions};
use crate::eval::{evaluate, train_bprmf, BprMfConfig, KgicScorer, MetricReport, DEFAULT_KS};
use crate::graphbuild::TrainView;
use crate::objectives::HyperParams;

pub const DATA_DIR_ENV: &str = "KGIC_DATA_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
    #[error("{0}")]
    Diverged(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Checkpoint(_) => 4,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "kgic", version, about = "Knowledge-graph contrastive recommender")]
struct Cli {
    /// Worker threads; 1 selects the single-threaded reference path.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse, split and cache a dataset; print its statistics.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Also write the evaluation graphs as JSON lines to `graphs.jsonl`.
        #[arg(long)]
        dump_graphs: bool,
    },
    /// Train a model and write a checkpoint and training log.
    Train(Common),
    /// Report test metrics of a checkpoint or of the baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Write per-user recall rows to this TSV file.
        #[arg(long)]
        per_user: Option<PathBuf>,
    },
    /// Write final item representations as TSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    Bprmf,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    dataset: Option<Preset>,
    #[arg(long)]
    interactions: Option<PathBuf>,
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    alignment: Option<PathBuf>,
    /// Number, or `none` to treat every row as positive.
    #[arg(long)]
    rating_threshold: Option<String>,
    /// Train, valid and test ratios, e.g. `0.6,0.2,0.2`.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long = "L")]
    depth: Option<usize>,
    #[arg(long = "J")]
    negative_layers: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    local_size: Option<usize>,
    #[arg(long)]
    nonlocal_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    similarity: Option<String>,
    #[arg(long)]
    symmetric_inter: bool,
    #[arg(long)]
    l2_full: bool,
    #[arg(long)]
    disable_intra: bool,
    #[arg(long)]
    disable_inter: bool,
    #[arg(long)]
    disable_nonlocal: bool,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Update every embedding row each step instead of only touched rows.
    #[arg(long)]
    dense_adam: bool,
    /// Build the graphs once instead of resampling them every epoch.
    #[arg(long)]
    frozen_graphs: bool,
}

impl Common {
    fn overrides(&self) -> Vec<(String, String, String)> {
        let mut out = Vec::new();
        let mut push = |flag: &str, key: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((format!("--{flag}"), key.to_string(), v));
            }
        };
        let s = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string());
        push("dataset", "dataset", self.dataset.map(|p| p.name().to_string()));
        push("interactions", "interactions", s(&self.interactions));
        push("kg", "kg", s(&self.kg));
        push("alignment", "alignment", s(&self.alignment));
        push("rating-threshold", "rating_threshold", self.rating_threshold.clone());
        push("split", "split", self.split.clone());
        push("out-dir", "out_dir", s(&self.out_dir));
        push("L", "L", self.depth.map(|v| v.to_string()));
        push("J", "J", self.negative_layers.map(|v| v.to_string()));
        push("tau", "tau", self.tau.map(|v| v.to_string()));
        push("alpha", "alpha", self.alpha.map(|v| v.to_string()));
        push("lambda1", "lambda1", self.lambda1.map(|v| v.to_string()));
        push("lambda2", "lambda2", self.lambda2.map(|v| v.to_string()));
        push("eta", "eta", self.eta.map(|v| v.to_string()));
        push("dim", "dim", self.dim.map(|v| v.to_string()));
        push("batch-size", "batch_size", self.batch_size.map(|v| v.to_string()));
        push("local-size", "local_size", self.local_size.map(|v| v.to_string()));
        push("nonlocal-size", "nonlocal_size", self.nonlocal_size.map(|v| v.to_string()));
        push("seed", "seed", self.seed.map(|v| v.to_string()));
        push("activation", "activation", self.activation.clone());
        push("similarity", "similarity", self.similarity.clone());
        push("max-epochs", "max_epochs", self.max_epochs.map(|v| v.to_string()));
        push("patience", "patience", self.patience.map(|v| v.to_string()));
        let flag = |on: bool| on.then(|| "true".to_string());
        push("symmetric-inter", "symmetric_inter", flag(self.symmetric_inter));
        push("l2-full", "l2_full", flag(self.l2_full));
        push("disable-intra", "disable_intra", flag(self.disable_intra));
        push("disable-inter", "disable_inter", flag(self.disable_inter));
        push("disable-nonlocal", "disable_nonlocal", flag(self.disable_nonlocal));
        push("dense-adam", "adam", self.dense_adam.then(|| "dense".to_string()));
        push("frozen-graphs", "graphs", self.frozen_graphs.then(|| "frozen".to_string()));
        out
    }

    /// Preset, then the config file, then flags. With `fallback_cfg`, an
    /// existing `<out_dir>/effective.cfg` stands in for a missing `--config`.
    fn resolve(&self, fallback_cfg: bool) -> Result<RunConfig> {
        let mut settings = Vec::new();
        let file = match &self.config {
            Some(p) => Some(p.clone()),
            None if fallback_cfg => {
                let out_dir = RunConfig::from_settings(&self.overrides())?.out_dir;
                let p = out_dir.join("effective.cfg");
                p.exists().then_some(p)
            }
            None => None,
        };
        if let Some(p) = file {
            if !p.exists() {
                return Err(CliError::Usage(format!("--config: file not found: {}", p.display())));
            }
            log::info!("config file {}", p.display());
            settings.extend(read_cfg(&p)?);
        }
        settings.extend(self.overrides());
        Ok(RunConfig::from_settings(&settings)?)
    }
}

/// Resolves a data path against `KGIC_DATA_DIR` when it is relative.
pub fn data_path(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn require_file(flag: &str, p: Option<&PathBuf>) -> Result<PathBuf> {
    let p = p.ok_or_else(|| CliError::Usage(format!("--{flag} is required for a custom dataset")))?;
    let full = data_path(p);
    if !full.is_file() {
        return Err(CliError::Usage(format!(
            "--{flag}: file not found: {} (set --{flag}, `{flag}` in the config, or {DATA_DIR_ENV})",
            full.display()
        )));
    }
    Ok(full)
}

/// What a cached dataset was built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheKey {
    interactions: PathBuf,
    kg: PathBuf,
    alignment: Option<PathBuf>,
    rating_threshold: Option<f64>,
    split: (f64, f64, f64),
    seed: u64,
}

const CACHE_FILE: &str = "dataset.bin";
const CACHE_KEY_FILE: &str = "dataset.key.json";

fn build_dataset(cfg: &RunConfig) -> Result<(Dataset, CacheKey)> {
    let interactions = require_file("interactions", cfg.interactions.as_ref())?;
    let kg_path = require_file("kg", cfg.kg.as_ref())?;
    let alignment = match &cfg.alignment {
        Some(p) => Some(require_file("alignment", Some(p))?),
        None => None,
    };
    let key = CacheKey {
        interactions: interactions.clone(),
        kg: kg_path.clone(),
        alignment: alignment.clone(),
        rating_threshold: cfg.rating_threshold,
        split: cfg.split,
        seed: cfg.hp.seed,
    };
    let cache = cfg.out_dir.join(CACHE_FILE);
    let key_file = cfg.out_dir.join(CACHE_KEY_FILE);
    let cached_key: Option<CacheKey> = fs::read_to_string(&key_file).ok().and_then(|s| serde_json::from_str(&s).ok());
    if cache.is_file() && cached_key.as_ref() == Some(&key) {
        log::info!("loading cached dataset {}", cache.display());
        let mut r = BufReader::new(File::open(&cache).with_context(|| format!("opening {}", cache.display()))?);
        let ds = Dataset::read_cache(&mut r).with_context(|| format!("reading {}", cache.display()))?;
        return Ok((ds, key));
    }
    log::info!("loading {} and {}", interactions.display(), kg_path.display());
    let ds = load_dataset(&interactions, &kg_path, alignment.as_deref(), cfg.rating_threshold, cfg.split, cfg.hp.seed).context("loading data set")?;
    Ok((ds, key))
}

/// Writes the dataset cache and returns the hex SHA-256 of its bytes.
fn write_cache(ds: &Dataset, key: &CacheKey, out_dir: &Path) -> anyhow::Result<String> {
    let mut bytes = Vec::new();
    ds.write_cache(&mut bytes)?;
    fs::write(out_dir.join(CACHE_FILE), &bytes)?;
    fs::write(out_dir.join(CACHE_KEY_FILE), serde_json::to_string_pretty(key)?)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn create_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    fs::write(cfg.out_dir.join("effective.cfg"), cfg.to_cfg()).context("writing effective.cfg")?;
    Ok(())
}

fn cmd_prepare(common: &Common, dump_graphs: bool) -> Result<()> {
    let cfg = common.resolve(false)?;
    let (ds, key) = build_dataset(&cfg)?;
    create_out_dir(&cfg)?;
    let digest = write_cache(&ds, &key, &cfg.out_dir)?;
    let stats = ds.stats();
    let text = format!(
        "users         {}\nitems         {}\ninteractions  {}\nentities      {}\nrelations     {}\ntriples       {}\ntrain/valid/test records  {}/{}/{}\nsha256        {digest}\n",
        stats.users,
        stats.items,
        stats.interactions,
        stats.entities,
        stats.relations,
        stats.triples,
        stats.train_records,
        stats.valid_records,
        stats.test_records
    );
    for w in &ds.log.warnings {
        log::warn!("{w}");
    }
    fs::write(cfg.out_dir.join("stats.txt"), &text).context("writing stats.txt")?;
    fs::write(cfg.out_dir.join("stats.json"), serde_json::to_string_pretty(&stats).context("stats")?).context("writing stats.json")?;
    fs::write(cfg.out_dir.join("dataset.sha256"), format!("{digest}  {CACHE_FILE}\n")).context("writing digest")?;
    let maps = [
        ("users", &ds.log.user_ids),
        ("items", &ds.log.item_ids),
        ("entities", &ds.kg.entity_ids),
        ("relations", &ds.kg.relation_ids),
    ];
    for (name, ids) in maps {
        let path = cfg.out_dir.join(format!("{name}.idmap.tsv"));
        ids.write_tsv(&path).with_context(|| format!("writing {}", path.display()))?;
    }
    if dump_graphs {
        let path = cfg.out_dir.join("graphs.jsonl");
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        eval_graphs(&ds, &cfg.hp).write_jsonl(&mut w).and_then(|_| w.flush()).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{text}");
    Ok(())
}

/// Contents of `model.json`, written next to every checkpoint.
#[derive(Debug, Serialize, Deserialize)]
struct ModelCard {
    hyperparams: HyperParams,
    n_entities: usize,
    relation_slots: usize,
    status: String,
    best_epoch: Option<usize>,
    best_valid_auc: Option<f64>,
    epochs_run: Option<usize>,
}

fn save_checkpoint(params: &ParamStore, cfg: &RunConfig, card: &ModelCard) -> anyhow::Result<()> {
    let path = cfg.out_dir.join("model.ckpt");
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    params.save(&mut w, cfg.hp.depth)?;
    w.flush()?;
    fs::write(cfg.out_dir.join("model.json"), serde_json::to_string_pretty(card)?)?;
    Ok(())
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = common.resolve(false)?;
    let (ds, key) = build_dataset(&cfg)?;
    create_out_dir(&cfg)?;
    write_cache(&ds, &key, &cfg.out_dir)?;
    let opts = FitOptions {
        max_epochs: cfg.max_epochs,
        patience: cfg.patience,
        adam: AdamConfig {
            eta: cfg.hp.eta,
            lazy: cfg.lazy_adam,
            ..AdamConfig::default()
        },
        resample_graphs: cfg.resample_graphs,
    };
    let log_path = cfg.out_dir.join("train_log.jsonl");
    let mut log_w = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut write_err = None;
    let result = fit(&ds, &cfg.hp, &opts, &mut |rec| {
        if let Err(e) = serde_json::to_writer(&mut log_w, rec).map_err(anyhow::Error::from).and_then(|_| Ok(writeln!(log_w)?)) {
            write_err.get_or_insert(e);
        }
    });
    log_w.flush().context("writing training log")?;
    if let Some(e) = write_err {
        return Err(CliError::Runtime(e.context("writing training log")));
    }
    let mut card = ModelCard {
        hyperparams: cfg.hp.clone(),
        n_entities: ds.kg.n_entities,
        relation_slots: ds.kg.relation_slots(),
        status: "trained".into(),
        best_epoch: None,
        best_valid_auc: None,
        epochs_run: None,
    };
    match result {
        Ok(out) => {
            card.best_epoch = Some(out.best_epoch);
            card.best_valid_auc = Some(out.best_valid_auc);
            card.epochs_run = Some(out.epochs_run);
            save_checkpoint(&out.params, &cfg, &card)?;
            println!(
                "trained {} epochs; best valid AUC {:.4} at epoch {}; checkpoint {}",
                out.epochs_run,
                out.best_valid_auc,
                out.best_epoch,
                cfg.out_dir.join("model.ckpt").display()
            );
            Ok(())
        }
        Err(EngineError::Diverged { epoch, step, last_good }) => {
            card.status = format!("diverged at epoch {epoch}, step {step}");
            save_checkpoint(&last_good, &cfg, &card)?;
            Err(CliError::Diverged(format!(
                "training diverged at epoch {epoch}, step {step}; last good parameters saved to {}",
                cfg.out_dir.join("model.ckpt").display()
            )))
        }
        Err(e) => Err(CliError::Runtime(e.into())),
    }
}

fn load_checkpoint(path: &Path, cfg: &RunConfig, ds: &Dataset) -> Result<ParamStore> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("--checkpoint: file not found: {}", path.display())));
    }
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let (params, depth) = ParamStore::load(&mut BufReader::new(f)).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
    let expect = [
        ("embedding dimension", params.d, cfg.hp.dim),
        ("depth L", depth, cfg.hp.depth),
        ("entity count", params.n_entities(), ds.kg.n_entities),
        ("relation count", params.n_relations(), ds.kg.relation_slots()),
    ];
    for (what, have, want) in expect {
        if have != want {
            return Err(CliError::Checkpoint(format!(
                "{}: {what} is {have} but the configuration needs {want}",
                path.display()
            )));
        }
    }
    Ok(params)
}

fn kgic_scorer(cfg: &RunConfig, ds: &Dataset, checkpoint: Option<&PathBuf>) -> Result<KgicScorer> {
    let ckpt = checkpoint.cloned().unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));
    let params = load_checkpoint(&ckpt, cfg, ds)?;
    let graphs = eval_graphs(ds, &cfg.hp);
    let train = TrainView::from_log(&ds.log);
    KgicScorer::new(&params, &graphs, &cfg.hp, &train).map_err(|e| CliError::Runtime(e.into()))
}

fn cmd_eval(common: &Common, checkpoint: Option<&PathBuf>, baseline: Option<Baseline>, per_user: Option<&PathBuf>) -> Result<()> {
    let cfg = common.resolve(true)?;
    let (ds, _) = build_dataset(&cfg)?;
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let (report, recall, name): (MetricReport, _, &str) = match baseline {
        Some(Baseline::Bprmf) => {
            let mf = train_bprmf(
                &ds.log,
                &BprMfConfig {
                    dim: cfg.hp.dim,
                    eta: cfg.hp.eta,
                    epochs: cfg.max_epochs,
                    seed: cfg.hp.seed,
                    l2: cfg.hp.lambda2,
                    batch_size: cfg.hp.batch_size,
                    patience: cfg.patience,
                },
            );
            let (r, rec) = evaluate(&mf, &ds.log, &DEFAULT_KS).context("evaluating baseline")?;
            (r, rec, "metrics_bprmf.json")
        }
        None => {
            let scorer = kgic_scorer(&cfg, &ds, checkpoint)?;
            let (r, rec) = evaluate(&scorer, &ds.log, &DEFAULT_KS).context("evaluating model")?;
            (r, rec, "metrics.json")
        }
    };
    let json_path = cfg.out_dir.join(name);
    fs::write(&json_path, serde_json::to_string_pretty(&report).context("report")?).with_context(|| format!("writing {}", json_path.display()))?;
    if let Some(p) = per_user {
        let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
        recall.write_tsv(&ds.log, &mut w).and_then(|_| w.flush()).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{report}");
    Ok(())
}

fn cmd_export(common: &Common, checkpoint: Option<&PathBuf>, out: Option<&PathBuf>) -> Result<()> {
    let cfg = common.resolve(true)?;
    let (ds, _) = build_dataset(&cfg)?;
    let scorer = kgic_scorer(&cfg, &ds, checkpoint)?;
    let path = out.cloned().unwrap_or_else(|| cfg.out_dir.join("item_embeddings.tsv"));
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&path)?);
        for i in 0..scorer.n_items() as u32 {
            write!(w, "{}", ds.log.item_ids.original(i))?;
            for v in scorer.item_vector(i) {
                write!(w, "\t{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    write().with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} item vectors of width {} to {}", scorer.n_items(), cfg.hp.representation_len(), path.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare { common, dump_graphs } => cmd_prepare(common, *dump_graphs),
        Command::Train(c) => cmd_train(c),
        Command::Eval {
            common,
            checkpoint,
            baseline,
            per_user,
        } => cmd_eval(common, checkpoint.as_ref(), *baseline, per_user.as_ref()),
        Command::ExportEmbeddings { common, checkpoint, out } => cmd_export(common, checkpoint.as_ref(), out.as_ref()),
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let result = match cli.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(CliError::Runtime(e.into())),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
