//! The `cdn` command line.
//!
//! ```text
//! cdn gen       --config run.json --out corpus/ --seed 7
//! cdn featurize --corpus corpus/ [--config run.json] [--overwrite]
//! cdn train     --corpus corpus/ --out ckpt/ [--config run.json] [--variant diff|cat]
//! cdn predict   --ckpt ckpt/model.ckpt (--obs a.csv --int b.csv | --corpus c/ --dataset 0 --regime 3)
//! cdn baseline  --method mbci|dge|analytic-hard|analytic-soft (same inputs as predict)
//! cdn eval      --corpus corpus/ (--ckpt F | --method M) --report r.json
//! ```
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. Logging level
//! comes from `CDN_LOG` (error, warn, info, debug).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cdn_core::baselines::{baseline_scores, BaselineMethod, BaselineScorer, GraphSource, NodeScores};
use cdn_core::corpus::{generate_corpus, write_json, Corpus, CorpusConfig};
use cdn_core::eval::{evaluate_suite, write_report, Aggregation, EvalConfig, Scorer};
use cdn_core::features::{featurize_corpus, Cache};
use cdn_core::model::{
    load_checkpoint, load_examples, predict_targets, save_checkpoint, split_validation, train, Cdn, CdnScorer, LogRow,
    ModelConfig, TrainConfig, Variant, CHECKPOINT_FILE, LOG_FILE,
};
use cdn_core::scm::derive_seed;
use cdn_core::stats::GlassoConfig;
use cdn_core::CoreError;
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Every tunable of a run in one strictly validated document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub glasso: GlassoConfig,
    /// Node permutations averaged per prediction.
    pub permutations: usize,
    /// Used when `--seed` is absent.
    pub seed: Option<u64>,
    /// Used when `--workers` is absent.
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self {
                permutations: 1,
                ..Default::default()
            });
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if let Some(obj) = value.as_object_mut() {
            obj.entry("permutations").or_insert(1.into());
        }
        let config: Self = serde_json::from_value(value).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        config.validate().map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), CoreError> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.permutations == 0 || self.workers == Some(0) {
            return Err(CoreError::Param("permutations and workers must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "cdn", version, about = "Intervention target identification from paired datasets")]
struct Cli {
    /// Master seed; every random choice derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (wall-clock only; results do not depend on it).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Cache local-discovery features for every dataset side.
    Featurize {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train the network on a corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Target probabilities for one pair.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        input: PairInput,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Baseline node scores for one pair.
    Baseline {
        #[arg(long)]
        method: String,
        #[command(flatten)]
        input: PairInput,
        /// Use the stored true graphs (hard detector).
        #[arg(long)]
        oracle_graphs: bool,
        /// Structure learner supplying graphs to the hard detector.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Benchmark a checkpoint or a baseline over a corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        oracle_graphs: bool,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum)]
        metric_aggregation: Option<AggregationArg>,
    },
}

#[derive(Args, Debug)]
struct PairInput {
    /// Observational samples (CSV, one row per sample).
    #[arg(long, requires = "int", conflicts_with = "corpus")]
    obs: Option<PathBuf>,
    /// Interventional samples (CSV).
    #[arg(long, requires = "obs")]
    int: Option<PathBuf>,
    #[arg(long, requires_all = ["dataset", "regime"])]
    corpus: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<usize>,
    #[arg(long)]
    regime: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Diff,
    Cat,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AggregationArg {
    PerRegime,
    Pooled,
}

/// Parses `argv`, runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("CDN_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let config = RunConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    let workers = cli.workers.or(config.workers).unwrap_or(1);
    if workers == 0 {
        return Err(CliError::Usage("--workers must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(runtime)?;
    pool.install(|| match cli.command {
        Command::Gen { out } => gen(&config, &out, seed),
        Command::Featurize { corpus, overwrite } => featurize(&config, &corpus, overwrite),
        Command::Train { corpus, out, variant } => train_cmd(config, &corpus, &out, variant, seed),
        Command::Predict { ckpt, input, out } => predict(&config, &ckpt, &input, out.as_deref(), seed),
        Command::Baseline {
            method,
            input,
            oracle_graphs,
            ckpt,
            out,
        } => baseline(&config, &method, &input, oracle_graphs, ckpt.as_deref(), out.as_deref(), seed),
        Command::Eval {
            corpus,
            ckpt,
            method,
            oracle_graphs,
            report,
            metric_aggregation,
        } => eval(&config, &corpus, ckpt.as_deref(), method.as_deref(), oracle_graphs, &report, metric_aggregation, seed),
    })
}

fn gen(config: &RunConfig, out: &Path, seed: u64) -> Result<(), CliError> {
    let corpus = CorpusConfig {
        seed,
        ..config.corpus.clone()
    };
    let manifest = generate_corpus(&corpus, out)?;
    log::info!("wrote {} datasets to {}", manifest.datasets.len(), out.display());
    Ok(())
}

fn featurize(config: &RunConfig, corpus: &Path, overwrite: bool) -> Result<(), CliError> {
    let corpus = Corpus::open(corpus)?;
    let ids: Vec<usize> = corpus.manifest.datasets.iter().map(|d| d.id).collect();
    let written = featurize_corpus(&corpus, &ids, &config.model.features, overwrite)?;
    log::info!("wrote {written} feature files");
    Ok(())
}

fn train_cmd(mut config: RunConfig, corpus: &Path, out: &Path, variant: Option<VariantArg>, seed: u64) -> Result<(), CliError> {
    if let Some(v) = variant {
        config.model.variant = match v {
            VariantArg::Diff => Variant::Diff,
            VariantArg::Cat => Variant::Cat,
        };
    }
    let corpus = Corpus::open(corpus)?;
    let model = Cdn::new(config.model.clone())?;
    let ids: Vec<usize> = corpus.manifest.datasets.iter().map(|d| d.id).collect();
    let (train_ids, val_ids) = split_validation(&ids, config.train.val_datasets).map_err(|e| CliError::Usage(e.to_string()))?;
    let train_set = load_examples(&corpus, &train_ids, &config.model, Cache::Compute)?;
    let val_set = load_examples(&corpus, &val_ids, &config.model, Cache::Compute)?;
    log::info!("{} training and {} validation pairs", train_set.len(), val_set.len());

    fs::create_dir_all(out).map_err(runtime)?;
    write_json(&out.join("config.json"), &RunConfig { seed: Some(seed), ..config.clone() })?;
    let log_path = out.join(LOG_FILE);
    let mut log_file = fs::File::create(&log_path).map_err(runtime)?;
    writeln!(log_file, "{}", LogRow::HEADER).map_err(runtime)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let extra = |epoch: usize, val_map: f64| {
        serde_json::json!({
            "seed": seed,
            "corpus_seed": corpus.manifest.config.seed,
            "train_datasets": train_ids.len(),
            "val_datasets": val_ids,
            "best_epoch": epoch,
            "best_val_map": val_map,
            "train": config.train,
        })
    };
    let mut best = (f64::NEG_INFINITY, 0usize);
    let mut io_error = None;
    let trained = train(&model, model.init(derive_seed(seed, 0x1a17)), &train_set, &val_set, &config.train, seed, |row, store| {
        let mut step = || -> Result<(), CliError> {
            writeln!(log_file, "{}", row.csv()).map_err(runtime)?;
            log_file.flush().map_err(runtime)?;
            if row.val_map > best.0 {
                best = (row.val_map, row.epoch);
                save_checkpoint(&ckpt, &model, store, None, 0, extra(row.epoch, row.val_map))?;
            }
            Ok(())
        };
        if let Err(e) = step() {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    save_checkpoint(&ckpt, &model, &trained.store, None, trained.steps, extra(trained.best_epoch, trained.best_val_map))?;
    log::info!("best epoch {} (val mAP {:.4})", trained.best_epoch, trained.best_val_map);
    Ok(())
}

/// Reads a numeric CSV; a first row that does not parse is taken as a header.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        let parsed: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if k == 0 => continue,
            Err(e) => return Err(runtime(format!("{}: row {}: {e}", path.display(), k + 1))),
        }
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(runtime(format!("{}: empty or ragged matrix", path.display())));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c]))
}

struct LoadedPair {
    obs: DMatrix<f64>,
    int: DMatrix<f64>,
    graphs: Option<(Vec<u8>, Vec<u8>)>,
    seed: u64,
}

fn load_pair(input: &PairInput, seed: u64) -> Result<LoadedPair, CliError> {
    match (&input.obs, &input.int, &input.corpus) {
        (Some(o), Some(i), None) => {
            let (obs, int) = (read_matrix_csv(o)?, read_matrix_csv(i)?);
            if obs.ncols() != int.ncols() {
                return Err(CliError::Usage(format!("{} vs {} columns", obs.ncols(), int.ncols())));
            }
            Ok(LoadedPair {
                obs,
                int,
                graphs: None,
                seed,
            })
        }
        (None, None, Some(c)) => {
            let (d, r) = (input.dataset.unwrap_or(0), input.regime.unwrap_or(0));
            let corpus = Corpus::open(c)?;
            let meta = corpus.meta(d)?;
            if r >= meta.regimes.len() {
                return Err(CliError::Usage(format!("dataset {d} has {} regimes", meta.regimes.len())));
            }
            let data = corpus.regime(&meta, r)?;
            Ok(LoadedPair {
                obs: corpus.obs(&meta)?,
                graphs: Some((corpus.graph_obs(&meta)?.adjacency(), data.graph.adjacency())),
                int: data.int,
                seed: derive_seed(derive_seed(seed, d as u64), r as u64),
            })
        }
        _ => Err(CliError::Usage("give --obs and --int, or --corpus with --dataset and --regime".into())),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| runtime(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn predict(config: &RunConfig, ckpt: &Path, input: &PairInput, out: Option<&Path>, seed: u64) -> Result<(), CliError> {
    let (model, store, _) = load_checkpoint(ckpt)?;
    let pair = load_pair(input, seed)?;
    let probs = predict_targets(&model, &store, &pair.obs, &pair.int, pair.seed, config.permutations)?;
    let mut text = String::from("node_index,probability\n");
    for (i, p) in probs.iter().enumerate() {
        text.push_str(&format!("{i},{p}\n"));
    }
    write_or_print(out, &text)
}

fn parse_method(method: &str) -> Result<BaselineMethod, CliError> {
    BaselineMethod::parse(method).ok_or_else(|| {
        let names: Vec<&str> = BaselineMethod::ALL.iter().map(|m| m.name()).collect();
        CliError::Usage(format!("unknown method {method:?}; expected one of {}", names.join(", ")))
    })
}

fn graph_source(method: BaselineMethod, oracle: bool, ckpt: Option<&Path>, permutations: usize) -> Result<GraphSource, CliError> {
    if method != BaselineMethod::AnalyticHard {
        return Ok(GraphSource::None);
    }
    match (oracle, ckpt) {
        (true, None) => Ok(GraphSource::Oracle),
        (false, Some(p)) => {
            let (model, store, _) = load_checkpoint(p)?;
            Ok(GraphSource::Learned {
                model: Box::new(model),
                store,
                permutations,
            })
        }
        _ => Err(CliError::Usage("analytic-hard needs exactly one of --oracle-graphs or --ckpt".into())),
    }
}

#[allow(clippy::too_many_arguments)]
fn baseline(
    config: &RunConfig,
    method: &str,
    input: &PairInput,
    oracle: bool,
    ckpt: Option<&Path>,
    out: Option<&Path>,
    seed: u64,
) -> Result<(), CliError> {
    let method = parse_method(method)?;
    let pair = load_pair(input, seed)?;
    let scores: NodeScores = match graph_source(method, oracle, ckpt, config.permutations)? {
        GraphSource::Oracle => {
            let Some((a, b)) = &pair.graphs else {
                return Err(CliError::Usage("--oracle-graphs needs --corpus input".into()));
            };
            baseline_scores(method, &pair.obs, &pair.int, Some((a, b)), &config.glasso, pair.seed)?
        }
        GraphSource::Learned { model, store, permutations } => {
            let bundle = cdn_core::features::featurize_pair(&pair.obs, &pair.int, &model.config.features, pair.seed)?;
            let (a, b) = cdn_core::model::predict_graphs(
                &model,
                &store,
                &cdn_core::model::SideTokens::new(&bundle.obs, true),
                &cdn_core::model::SideTokens::new(&bundle.int, true),
                derive_seed(pair.seed, 2),
                permutations,
            )?;
            baseline_scores(method, &pair.obs, &pair.int, Some((&a, &b)), &config.glasso, pair.seed)?
        }
        GraphSource::None => baseline_scores(method, &pair.obs, &pair.int, None, &config.glasso, pair.seed)?,
    };
    write_or_print(out, &scores.to_csv())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    config: &RunConfig,
    corpus: &Path,
    ckpt: Option<&Path>,
    method: Option<&str>,
    oracle: bool,
    report: &Path,
    aggregation: Option<AggregationArg>,
    seed: u64,
) -> Result<(), CliError> {
    let eval_config = EvalConfig {
        aggregation: match aggregation {
            Some(AggregationArg::PerRegime) => Aggregation::PerRegime,
            Some(AggregationArg::Pooled) => Aggregation::Pooled,
            None => config.eval.aggregation,
        },
        ..config.eval.clone()
    };
    let scorer: Box<dyn Scorer> = match method {
        None | Some("cdn") => {
            let ckpt = ckpt.ok_or_else(|| CliError::Usage("eval needs --ckpt or --method".into()))?;
            let (model, store, _) = load_checkpoint(ckpt)?;
            Box::new(CdnScorer {
                model,
                store,
                permutations: config.permutations,
                seed,
                cache: Cache::Compute,
            })
        }
        Some(m) => {
            let method = parse_method(m)?;
            Box::new(BaselineScorer {
                method,
                glasso: config.glasso.clone(),
                graphs: graph_source(method, oracle, ckpt, config.permutations)?,
                seed,
            })
        }
    };
    let corpus = Corpus::open(corpus)?;
    let ids: Vec<usize> = corpus.manifest.datasets.iter().map(|d| d.id).collect();
    let (rep, results) = evaluate_suite(scorer.as_ref(), &corpus, &ids, &eval_config)?;
    write_report(report, &rep, &results)?;
    for g in &rep.groups {
        log::info!(
            "{} {} {} targets: mAP {:.3} AUC {:.3} over {} regimes",
            g.family,
            g.intervention,
            g.targets,
            g.map,
            g.auc,
            g.regimes
        );
    }
    if rep.failed > 0 {
        log::warn!("{} regimes failed and were excluded", rep.failed);
    }
    Ok(())
}
