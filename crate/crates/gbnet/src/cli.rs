//! Command-line entry points: `compile`, `synth`, `train`, `eval`,
//! `infer`.
//!
//! Every command reads an optional config file of flat `key = value`
//! lines (`#` comments, bare or quoted values) and applies flag
//! overrides on top; flags win. Each run writes a resolved-config copy
//! beside its outputs so results are reproducible from the artifacts
//! alone. Exit codes: 0 success, 2 usage or parse errors, 3 data or
//! shape errors, 4 numeric failures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::commonsense::{
    assemble, compile_conditional_edges, load_gbkg, load_ontology_edges, write_gbkg,
    CommonsenseGraph, EmbeddingTable, TripletCounts,
};
use crate::error::{GbError, Result};
use crate::eval::{evaluate_scenes, extract_topk, MetricReport};
use crate::graph::ordered_pairs;
use crate::model::{
    build_image_graph, forward, InferenceMode, ModelDims, ModelParams, SlotLayout,
};
use crate::synth::{
    generate_dataset, generate_world, read_dataset, triplet_counts, write_dataset, write_world,
    SceneRecord,
};
use crate::train::{load_checkpoint, train, validate_shapes, TrainConfig};

pub const ENV_SEED: &str = "GBNET_SEED";

/// Seed offset separating the test split from the train split.
const TEST_SPLIT_OFFSET: u64 = 0x7e57;

#[derive(Parser)]
#[command(name = "gbnet", version, about = "Scene graph generation by graph bridging")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile a commonsense graph from label lists, ontology TSVs,
    /// triplet counts and an embedding table.
    Compile(CompileArgs),
    /// Generate a synthetic world plus train/test datasets and the
    /// commonsense source files derived from them.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint with the recall protocol.
    Eval(EvalArgs),
    /// Dump ranked scene graphs for each image, optionally as DOT files.
    Infer(InferArgs),
}

#[derive(Args, Clone, Default)]
struct CommonOpts {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (1 is the reproducibility reference).
    #[arg(long)]
    threads: Option<usize>,
    /// RNG seed; defaults to $GBNET_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CompileArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Entity label list, one label per line.
    #[arg(long)]
    entities: Option<PathBuf>,
    /// Predicate label list, one label per line.
    #[arg(long)]
    predicates: Option<PathBuf>,
    /// Ontology edge TSV (src<TAB>relation<TAB>dst[<TAB>weight]).
    #[arg(long)]
    ontology: Option<PathBuf>,
    /// Triplet count TSV (subj<TAB>pred<TAB>obj<TAB>count).
    #[arg(long)]
    counts: Option<PathBuf>,
    /// Embedding table TSV (label<TAB>v1,v2,...).
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long)]
    entity_classes: Option<usize>,
    #[arg(long)]
    pred_classes: Option<usize>,
    #[arg(long)]
    feat_dim: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    test_scenes: Option<usize>,
    #[arg(long)]
    min_entities: Option<usize>,
    #[arg(long)]
    max_entities: Option<usize>,
}

#[derive(Args)]
struct ModelOpts {
    /// Commonsense graph file (GBKG).
    #[arg(long)]
    commonsense: Option<PathBuf>,
    /// Embedding table joined to the graph at load time.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Node state dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Head hidden width (default 2*d).
    #[arg(long)]
    hidden: Option<usize>,
    /// Message passing rounds.
    #[arg(long)]
    t_steps: Option<usize>,
    /// Bridge edges kept per scene node.
    #[arg(long)]
    k_bridge: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[command(flatten)]
    model: ModelOpts,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Class-balance beta in [0,1); 0 disables reweighting.
    #[arg(long)]
    balance_beta: Option<f64>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[command(flatten)]
    model: ModelOpts,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Task: sggen, sgcls or predcls.
    #[arg(long)]
    task: Option<String>,
    /// Comma-separated top-K values, e.g. 50,100.
    #[arg(long)]
    k: Option<String>,
    /// Graph constraint: yes, no or both.
    #[arg(long)]
    constrained: Option<String>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[command(flatten)]
    model: ModelOpts,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    /// Also write one Graphviz DOT file per image.
    #[arg(long)]
    dot: bool,
    /// Top-K triplets to dump per image.
    #[arg(long)]
    k: Option<usize>,
}

/// Flat key=value config file contents.
#[derive(Default, Clone)]
struct FileCfg(BTreeMap<String, String>);

const KNOWN_KEYS: &[&str] = &[
    "balance_beta", "batch", "beta1", "beta2", "checkpoint", "commonsense", "constrained",
    "counts", "d", "dataset", "dot", "embeddings", "entities", "entity_classes", "epochs", "eps",
    "feat_dim", "hidden", "k", "k_bridge", "lr", "max_entities", "max_steps", "min_entities",
    "ontology", "out_dir", "pred_classes", "predicates", "seed", "sigma", "task", "test_scenes",
    "t_steps", "threads", "train_scenes",
];

impl FileCfg {
    fn load(path: Option<&PathBuf>) -> Result<Self> {
        let Some(path) = path else { return Ok(FileCfg::default()) };
        let text = std::fs::read_to_string(path)?;
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => raw[..p].trim(),
                None => raw.trim(),
            };
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| GbError::Parse {
                line: i + 1,
                msg: format!("expected key = value, got '{}'", line),
            })?;
            let key = k.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(GbError::Config(format!(
                    "unknown config key '{}' at line {}",
                    key,
                    i + 1
                )));
            }
            let val = v.trim().trim_matches('"').to_string();
            map.insert(key, val);
        }
        Ok(FileCfg(map))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| GbError::Config(format!("config key '{}': {}", key, e))),
        }
    }

    fn get_path(&self, key: &str) -> Option<PathBuf> {
        self.0.get(key).map(PathBuf::from)
    }
}

fn env_seed() -> Option<u64> {
    std::env::var(ENV_SEED).ok().and_then(|v| v.parse().ok())
}

/// Settings shared by every command, plus the resolved-config ledger.
struct Resolved {
    out_dir: PathBuf,
    threads: usize,
    seed: u64,
    resolved: BTreeMap<String, String>,
}

impl Resolved {
    fn new(common: &CommonOpts, cfg: &FileCfg) -> Result<Self> {
        let out_dir = common
            .out_dir
            .clone()
            .or_else(|| cfg.get_path("out_dir"))
            .unwrap_or_else(|| PathBuf::from("out"));
        let threads = common.threads.or(cfg.get("threads")?).unwrap_or(1);
        if threads == 0 {
            return Err(GbError::Config("threads must be >= 1".into()));
        }
        let seed = common.seed.or(cfg.get("seed")?).or_else(env_seed).unwrap_or(0);
        Ok(Resolved { out_dir, threads, seed, resolved: BTreeMap::new() })
    }

    fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.resolved.insert(key.to_string(), value.to_string());
    }

    fn write_resolved(&mut self, name: &str) -> Result<()> {
        let (out_dir, threads, seed) = (self.out_dir.display().to_string(), self.threads, self.seed);
        self.set("out_dir", out_dir);
        self.set("threads", threads);
        self.set("seed", seed);
        let mut s = String::new();
        for (k, v) in &self.resolved {
            writeln!(s, "{} = {}", k, v).unwrap();
        }
        std::fs::create_dir_all(&self.out_dir)?;
        std::fs::write(self.out_dir.join(name), s)?;
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| GbError::Config(format!("thread pool: {}", e)))
    }
}

fn require(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.ok_or_else(|| GbError::Config(format!("missing required path: {}", what)))
}

fn read_labels(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn cmd_compile(args: CompileArgs) -> Result<()> {
    let cfg = FileCfg::load(args.common.config.as_ref())?;
    let mut res = Resolved::new(&args.common, &cfg)?;
    let entities = require(args.entities.or(cfg.get_path("entities")), "entities")?;
    let predicates = require(args.predicates.or(cfg.get_path("predicates")), "predicates")?;
    let ontology = args.ontology.or(cfg.get_path("ontology"));
    let counts = args.counts.or(cfg.get_path("counts"));
    let embeddings = require(args.embeddings.or(cfg.get_path("embeddings")), "embeddings")?;

    let entity_labels = read_labels(&entities)?;
    let predicate_labels = read_labels(&predicates)?;
    let ontology_edges = match &ontology {
        Some(p) => load_ontology_edges(p)?,
        None => Vec::new(),
    };
    let conditional = match &counts {
        Some(p) => compile_conditional_edges(&TripletCounts::load(p)?)?,
        None => Vec::new(),
    };
    let table = EmbeddingTable::load(&embeddings)?;
    let cs = assemble(&entity_labels, &predicate_labels, &ontology_edges, &conditional, &table)?;

    std::fs::create_dir_all(&res.out_dir)?;
    let out = res.out_dir.join("commonsense.gbkg");
    write_gbkg(&cs, &out)?;

    println!("{} CE, {} CP", cs.n_ce(), cs.n_cp());
    let fams = cs.family_counts();
    let parts: Vec<String> =
        fams.iter().map(|((s, d), n)| format!("{}->{} {}", s.name(), d.name(), n)).collect();
    println!("edges: {}", if parts.is_empty() { "none".to_string() } else { parts.join(", ") });

    res.set("entities", entities.display());
    res.set("predicates", predicates.display());
    if let Some(p) = &ontology {
        res.set("ontology", p.display());
    }
    if let Some(p) = &counts {
        res.set("counts", p.display());
    }
    res.set("embeddings", embeddings.display());
    res.write_resolved("compile.resolved.cfg")
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = FileCfg::load(args.common.config.as_ref())?;
    let mut res = Resolved::new(&args.common, &cfg)?;
    let entity_classes = args.entity_classes.or(cfg.get("entity_classes")?).unwrap_or(8);
    let pred_classes = args.pred_classes.or(cfg.get("pred_classes")?).unwrap_or(6);
    let feat_dim = args.feat_dim.or(cfg.get("feat_dim")?).unwrap_or(16);
    let sigma = args.sigma.or(cfg.get("sigma")?).unwrap_or(0.1);
    let train_scenes = args.train_scenes.or(cfg.get("train_scenes")?).unwrap_or(500);
    let test_scenes = args.test_scenes.or(cfg.get("test_scenes")?).unwrap_or(100);
    let min_entities = args.min_entities.or(cfg.get("min_entities")?).unwrap_or(3);
    let max_entities = args.max_entities.or(cfg.get("max_entities")?).unwrap_or(5);
    if min_entities < 2 || max_entities < min_entities {
        return Err(GbError::Config("need 2 <= min_entities <= max_entities".into()));
    }

    let world = generate_world(res.seed, entity_classes, pred_classes, feat_dim, sigma)?;
    let train_recs =
        generate_dataset(&world, train_scenes, (min_entities, max_entities), res.seed)?;
    let test_recs = generate_dataset(
        &world,
        test_scenes,
        (min_entities, max_entities),
        res.seed ^ TEST_SPLIT_OFFSET,
    )?;

    std::fs::create_dir_all(&res.out_dir)?;
    write_world(&world, &res.out_dir.join("world.gbworld"))?;
    write_dataset(&train_recs, feat_dim, &res.out_dir.join("train.gbds"))?;
    write_dataset(&test_recs, feat_dim, &res.out_dir.join("test.gbds"))?;
    std::fs::write(res.out_dir.join("entities.txt"), world.entity_labels.join("\n") + "\n")?;
    std::fs::write(res.out_dir.join("predicates.txt"), world.predicate_labels.join("\n") + "\n")?;
    world.embedding_table().write(&res.out_dir.join("embeddings.tsv"))?;
    let mut ont = String::new();
    for e in world.ontology_edges() {
        writeln!(ont, "{}\t{}\t{}\t{}", e.src_label, e.relation, e.dst_label, e.weight).unwrap();
    }
    std::fs::write(res.out_dir.join("ontology.tsv"), ont)?;
    let mut counts_s = String::new();
    for ((s, p, o), n) in triplet_counts(&world, &train_recs).iter() {
        writeln!(counts_s, "{}\t{}\t{}\t{}", s, p, o, n).unwrap();
    }
    std::fs::write(res.out_dir.join("counts.tsv"), counts_s)?;

    println!(
        "world: {} entity classes, {} predicate classes, feat dim {}, sigma {}",
        entity_classes, pred_classes, feat_dim, sigma
    );
    println!(
        "wrote {} train and {} test scenes to {}",
        train_scenes,
        test_scenes,
        res.out_dir.display()
    );

    res.set("entity_classes", entity_classes);
    res.set("pred_classes", pred_classes);
    res.set("feat_dim", feat_dim);
    res.set("sigma", sigma);
    res.set("train_scenes", train_scenes);
    res.set("test_scenes", test_scenes);
    res.set("min_entities", min_entities);
    res.set("max_entities", max_entities);
    res.write_resolved("synth.resolved.cfg")
}

struct LoadedModel {
    cs: CommonsenseGraph,
    records: Vec<SceneRecord>,
    dims: ModelDims,
}

fn load_model_inputs(
    res: &mut Resolved,
    model: &ModelOpts,
    cfg: &FileCfg,
    dataset: Option<PathBuf>,
) -> Result<LoadedModel> {
    let dataset = require(dataset.or(cfg.get_path("dataset")), "dataset")?;
    let commonsense =
        require(model.commonsense.clone().or(cfg.get_path("commonsense")), "commonsense")?;
    let embeddings =
        require(model.embeddings.clone().or(cfg.get_path("embeddings")), "embeddings")?;
    let table = EmbeddingTable::load(&embeddings)?;
    let cs = load_gbkg(&commonsense, &table)?;
    let (records, feat_dim) = read_dataset(&dataset)?;
    for rec in &records {
        if rec.label_dists.cols() != cs.n_ce() {
            return Err(GbError::Input(format!(
                "image {}: label distribution has {} classes, commonsense graph has {}",
                rec.image_id,
                rec.label_dists.cols(),
                cs.n_ce()
            )));
        }
    }
    let d = model.d.or(cfg.get("d")?).unwrap_or(32);
    let hidden = model.hidden.or(cfg.get("hidden")?).unwrap_or(2 * d);
    let t_steps = model.t_steps.or(cfg.get("t_steps")?).unwrap_or(3);
    let k_bridge = model.k_bridge.or(cfg.get("k_bridge")?).unwrap_or(5);
    if k_bridge == 0 {
        return Err(GbError::Config("k_bridge must be >= 1".into()));
    }
    let layout = SlotLayout::for_commonsense(&cs);
    let dims = ModelDims {
        d,
        hidden,
        t_steps,
        k_bridge,
        in_dims: [feat_dim, feat_dim + 8, cs.embed_dim, cs.embed_dim],
        slot_counts: layout.counts(),
    };
    res.set("dataset", dataset.display());
    res.set("commonsense", commonsense.display());
    res.set("embeddings", embeddings.display());
    res.set("d", d);
    res.set("hidden", hidden);
    res.set("t_steps", t_steps);
    res.set("k_bridge", k_bridge);
    Ok(LoadedModel { cs, records, dims })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = FileCfg::load(args.common.config.as_ref())?;
    let mut res = Resolved::new(&args.common, &cfg)?;
    let loaded = load_model_inputs(&mut res, &args.model, &cfg, args.dataset)?;

    let config = TrainConfig {
        lr: args.lr.or(cfg.get("lr")?).unwrap_or(3e-3),
        beta1: args.beta1.or(cfg.get("beta1")?).unwrap_or(0.9),
        beta2: args.beta2.or(cfg.get("beta2")?).unwrap_or(0.999),
        eps: args.eps.or(cfg.get("eps")?).unwrap_or(1e-8),
        epochs: args.epochs.or(cfg.get("epochs")?).unwrap_or(10),
        batch: args.batch.or(cfg.get("batch")?).unwrap_or(8),
        seed: res.seed,
        balance_beta: args.balance_beta.or(cfg.get("balance_beta")?).unwrap_or(0.0),
        iou_threshold: 0.5,
        max_steps: args.max_steps.or(cfg.get("max_steps")?),
        checkpoint: Some(res.out_dir.join("checkpoint.gbnet")),
    };
    if !(0.0..1.0).contains(&config.balance_beta) {
        return Err(GbError::Config("balance_beta must be in [0,1)".into()));
    }

    std::fs::create_dir_all(&res.out_dir)?;
    let params = ModelParams::init_random(&loaded.dims, res.seed);
    let pool = res.pool()?;
    let result = pool.install(|| train(&loaded.records, &loaded.cs, params, &config))?;

    let mut log = String::new();
    for entry in &result.log {
        writeln!(log, "{}\t{}\t{}", entry.step, entry.loss, entry.lr).unwrap();
    }
    std::fs::write(res.out_dir.join("loss.tsv"), log)?;
    let last = result.log.last().map(|l| l.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} steps on {} scenes; final loss {:.6}",
        result.log.len(),
        loaded.records.len(),
        last
    );
    println!("checkpoint: {}", res.out_dir.join("checkpoint.gbnet").display());

    res.set("lr", config.lr);
    res.set("beta1", config.beta1);
    res.set("beta2", config.beta2);
    res.set("eps", config.eps);
    res.set("epochs", config.epochs);
    res.set("batch", config.batch);
    res.set("balance_beta", config.balance_beta);
    if let Some(m) = config.max_steps {
        res.set("max_steps", m);
    }
    res.write_resolved("train.resolved.cfg")
}

fn parse_task(s: Option<String>, cfg: &FileCfg) -> Result<InferenceMode> {
    let raw = match s.or_else(|| cfg.0.get("task").cloned()) {
        Some(v) => v,
        None => return Ok(InferenceMode::PredCls),
    };
    InferenceMode::parse(&raw)
        .ok_or_else(|| GbError::Config(format!("unknown task '{}' (sggen|sgcls|predcls)", raw)))
}

fn parse_ks(s: Option<String>, cfg: &FileCfg) -> Result<Vec<usize>> {
    let raw = match s.or_else(|| cfg.0.get("k").cloned()) {
        Some(v) => v,
        None => return Ok(vec![50, 100]),
    };
    let ks: std::result::Result<Vec<usize>, _> =
        raw.split(',').map(|v| v.trim().parse::<usize>()).collect();
    let ks = ks.map_err(|e| GbError::Config(format!("bad k list '{}': {}", raw, e)))?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(GbError::Config("k values must be positive".into()));
    }
    Ok(ks)
}

fn parse_constrained(s: Option<String>, cfg: &FileCfg) -> Result<Vec<bool>> {
    let raw =
        s.or_else(|| cfg.0.get("constrained").cloned()).unwrap_or_else(|| "both".to_string());
    match raw.as_str() {
        "yes" => Ok(vec![true]),
        "no" => Ok(vec![false]),
        "both" => Ok(vec![true, false]),
        _ => Err(GbError::Config(format!("constrained must be yes|no|both, got '{}'", raw))),
    }
}

fn load_params_for(dims: &ModelDims, path: &Path) -> Result<ModelParams> {
    let (params, _) = load_checkpoint(path, Some(dims))?;
    validate_shapes(&params, dims)?;
    Ok(params)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = FileCfg::load(args.common.config.as_ref())?;
    let mut res = Resolved::new(&args.common, &cfg)?;
    let loaded = load_model_inputs(&mut res, &args.model, &cfg, args.dataset)?;
    let checkpoint = require(args.checkpoint.or(cfg.get_path("checkpoint")), "checkpoint")?;
    let task = parse_task(args.task, &cfg)?;
    let ks = parse_ks(args.k, &cfg)?;
    let constrained = parse_constrained(args.constrained, &cfg)?;

    let params = load_params_for(&loaded.dims, &checkpoint)?;
    let pool = res.pool()?;
    let report: MetricReport = pool
        .install(|| evaluate_scenes(&loaded.records, &loaded.cs, &params, task, &ks, &constrained))?;

    std::fs::create_dir_all(&res.out_dir)?;
    let lines = report.to_lines();
    std::fs::write(res.out_dir.join(format!("metrics_{}.tsv", task.name())), &lines)?;
    let table = report.to_table(&loaded.cs);
    std::fs::write(res.out_dir.join(format!("metrics_{}.txt", task.name())), &table)?;
    print!("{}", table);

    res.set("checkpoint", checkpoint.display());
    res.set("task", task.name());
    res.set("k", ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","));
    res.set(
        "constrained",
        match constrained.as_slice() {
            [true] => "yes",
            [false] => "no",
            _ => "both",
        },
    );
    res.write_resolved(&format!("eval_{}.resolved.cfg", task.name()))
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let cfg = FileCfg::load(args.common.config.as_ref())?;
    let mut res = Resolved::new(&args.common, &cfg)?;
    let loaded = load_model_inputs(&mut res, &args.model, &cfg, args.dataset)?;
    let checkpoint = require(args.checkpoint.or(cfg.get_path("checkpoint")), "checkpoint")?;
    let task = parse_task(args.task, &cfg)?;
    let k = args.k.or(cfg.get("k")?).unwrap_or(100);
    let dot = args.dot || cfg.get::<bool>("dot")?.unwrap_or(false);

    let params = load_params_for(&loaded.dims, &checkpoint)?;
    std::fs::create_dir_all(&res.out_dir)?;
    let mut out = String::new();
    for rec in &loaded.records {
        let inputs = rec.to_inputs(task);
        let ig = build_image_graph(&loaded.cs, &inputs.boxes)?;
        let (bridges, _) = forward(&ig, &inputs, &loaded.cs, &params, task)?;
        let pairs = ordered_pairs(rec.n_entities());
        let triplets = extract_topk(
            &bridges,
            &pairs,
            &inputs.boxes,
            loaded.cs.background_entity,
            loaded.cs.background_predicate,
            k,
            true,
        )?;
        let ent_label = |c: usize| loaded.cs.entity_labels[c].as_str();
        let pred_label = |c: usize| loaded.cs.predicate_labels[c].as_str();
        for t in &triplets {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}",
                rec.image_id,
                t.subject_id,
                ent_label(t.subject_class),
                pred_label(t.predicate_class),
                t.object_id,
                ent_label(t.object_class),
                t.confidence
            )
            .unwrap();
        }
        if dot {
            let mut g = format!("digraph scene_{} {{\n", rec.image_id);
            for i in 0..rec.n_entities() {
                let (c, s) = crate::eval::entity_score(bridges.entity.row(i));
                writeln!(g, "  e{} [label=\"{} ({:.2})\"];", i, ent_label(c), s).unwrap();
            }
            for t in &triplets {
                writeln!(
                    g,
                    "  e{} -> e{} [label=\"{} ({:.2})\"];",
                    t.subject_id,
                    t.object_id,
                    pred_label(t.predicate_class),
                    t.confidence
                )
                .unwrap();
            }
            g.push_str("}\n");
            std::fs::write(res.out_dir.join(format!("scene_{}.dot", rec.image_id)), g)?;
        }
    }
    std::fs::write(res.out_dir.join("triplets.tsv"), &out)?;
    println!(
        "wrote ranked triplets for {} images to {}",
        loaded.records.len(),
        res.out_dir.display()
    );

    res.set("checkpoint", checkpoint.display());
    res.set("task", task.name());
    res.set("k", k);
    res.set("dot", dot);
    res.write_resolved("infer.resolved.cfg")
}

/// Run the CLI against explicit arguments; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems exit 2; --help/--version exit 0.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Cmd::Compile(a) => cmd_compile(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Infer(a) => cmd_infer(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}
