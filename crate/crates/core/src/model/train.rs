use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use cdn_nn::checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};
use cdn_nn::{AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::{edge_probabilities, sigmoid};
use super::{edge_labels, target_indicator, Cdn, ModelConfig, SideTokens};
use crate::corpus::Corpus;
use crate::error::{format_err, param, CoreError, Result};
use crate::eval::{auroc, average_precision, RegimeCase, Scorer};
use crate::features::{featurize_pair, obs_features, regime_features, Cache};
use crate::scm::derive_seed;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs without a validation mAP improvement before stopping.
    pub patience: usize,
    /// Datasets held out for validation, spread evenly over the corpus.
    pub val_datasets: usize,
    /// Training pairs drawn per epoch; all of them when absent.
    pub pairs_per_epoch: Option<usize>,
    /// Node permutations averaged per validation prediction.
    pub val_permutations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 1000,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 1e-5,
            patience: 50,
            val_datasets: 10,
            pairs_per_epoch: None,
            val_permutations: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.val_permutations == 0 {
            return param("epochs, batch size and validation permutations must be positive");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return param(format!("learning rate {} / weight decay {} invalid", self.lr, self.weight_decay));
        }
        Ok(())
    }
}

/// One supervised (dataset, regime) pair.
#[derive(Clone, Debug)]
pub struct Example {
    pub dataset: usize,
    pub regime: usize,
    pub obs: Arc<SideTokens>,
    pub int: SideTokens,
    pub labels_obs: Arc<Vec<usize>>,
    pub labels_int: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Example {
    pub fn indicator(&self) -> Vec<f64> {
        target_indicator(self.int.n, &self.targets)
    }
}

/// Loads (or, with [`Cache::Compute`], computes) the features of every
/// regime of `datasets`, in parallel over datasets.
pub fn load_examples(corpus: &Corpus, datasets: &[usize], config: &ModelConfig, cache: Cache) -> Result<Vec<Example>> {
    let per: Vec<Vec<Example>> = datasets
        .par_iter()
        .map(|&id| -> Result<Vec<Example>> {
            let meta = corpus.meta(id)?;
            let obs = Arc::new(SideTokens::new(&obs_features(corpus, &meta, &config.features, cache)?, true));
            let labels_obs = Arc::new(edge_labels(&corpus.graph_obs(&meta)?));
            (0..meta.regimes.len())
                .map(|r| {
                    let data = corpus.regime(&meta, r)?;
                    let int = regime_features(corpus, &meta, r, &config.features, cache)?;
                    Ok(Example {
                        dataset: id,
                        regime: r,
                        obs: Arc::clone(&obs),
                        int: SideTokens::new(&int, true),
                        labels_obs: Arc::clone(&labels_obs),
                        labels_int: edge_labels(&data.graph),
                        targets: data.regime.targets,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Splits dataset ids into (train, validation) with `val` validation ids
/// taken at an even stride, so every corpus cell is represented.
pub fn split_validation(ids: &[usize], val: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if val == 0 || val >= ids.len() {
        return param(format!("cannot hold out {val} of {} datasets", ids.len()));
    }
    let picked: Vec<usize> = (0..val).map(|k| k * ids.len() / val).collect();
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (pos, &id) in ids.iter().enumerate() {
        if picked.binary_search(&pos).is_ok() {
            held.push(id);
        } else {
            train.push(id);
        }
    }
    Ok((train, held))
}

/// A random injection of `n` nodes into the embedding table.
pub fn sample_perm(n: usize, n_max: usize, seed: u64) -> Result<Vec<usize>> {
    if n > n_max {
        return param(format!("N={n} exceeds the {n_max} embedding rows"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, n_max, n).into_vec())
}

/// Target probabilities averaged over `permutations` node permutations.
pub fn predict_from_tokens(
    model: &Cdn,
    store: &ParamStore<f32>,
    obs: &SideTokens,
    int: &SideTokens,
    seed: u64,
    permutations: usize,
) -> Result<Vec<f64>> {
    if permutations == 0 {
        return param("need at least one permutation");
    }
    let mut acc = vec![0.0; obs.n];
    for p in 0..permutations {
        let perm = sample_perm(obs.n, model.config.n_max, derive_seed(seed, p as u64))?;
        let mut g = Graph::new(false, 0);
        let out = model.forward(&mut g, store, obs, int, &perm)?;
        for (a, z) in acc.iter_mut().zip(g.value(out.target).to_f64_vec()) {
            *a += sigmoid(z);
        }
    }
    Ok(acc.into_iter().map(|a| a / permutations as f64).collect())
}

/// Featurizes a raw pair and predicts target probabilities.
pub fn predict_targets(
    model: &Cdn,
    store: &ParamStore<f32>,
    obs: &DMatrix<f64>,
    int: &DMatrix<f64>,
    seed: u64,
    permutations: usize,
) -> Result<Vec<f64>> {
    if obs.ncols() > model.config.n_max {
        return param(format!("N={} exceeds the {} embedding rows", obs.ncols(), model.config.n_max));
    }
    let bundle = featurize_pair(obs, int, &model.config.features, seed)?;
    predict_from_tokens(
        model,
        store,
        &SideTokens::new(&bundle.obs, true),
        &SideTokens::new(&bundle.int, true),
        derive_seed(seed, 2),
        permutations,
    )
}

/// Estimated row-major adjacency of each side: the most probable edge class
/// per pair, with class probabilities averaged over node permutations.
pub fn predict_graphs(
    model: &Cdn,
    store: &ParamStore<f32>,
    obs: &SideTokens,
    int: &SideTokens,
    seed: u64,
    permutations: usize,
) -> Result<(Vec<u8>, Vec<u8>)> {
    if permutations == 0 {
        return param("need at least one permutation");
    }
    let n = obs.n;
    let pairs = n * (n - 1) / 2;
    let mut acc = [vec![[0.0; 3]; pairs], vec![[0.0; 3]; pairs]];
    for p in 0..permutations {
        let perm = sample_perm(n, model.config.n_max, derive_seed(seed, p as u64))?;
        let mut g = Graph::new(false, 0);
        let out = model.forward(&mut g, store, obs, int, &perm)?;
        for (side, logits) in [out.edge_obs, out.edge_int].into_iter().enumerate() {
            for (a, q) in acc[side].iter_mut().zip(edge_probabilities(&g.value(logits).to_f64_vec())) {
                for c in 0..3 {
                    a[c] += q[c];
                }
            }
        }
    }
    let adjacency = |probs: &[[f64; 3]]| {
        let mut adj = vec![0u8; n * n];
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                let q = probs[k];
                if q[0] >= q[1] && q[0] >= q[2] {
                    adj[i * n + j] = 1;
                } else if q[1] > q[0] && q[1] >= q[2] {
                    adj[j * n + i] = 1;
                }
                k += 1;
            }
        }
        adj
    };
    Ok((adjacency(&acc[0]), adjacency(&acc[1])))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub loss_graph: f64,
    pub loss_target: f64,
    pub val_map: f64,
    pub val_auc: f64,
    pub seconds: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "epoch,L_G,L_I,val_mAP,val_AUC,seconds";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.loss_graph, self.loss_target, self.val_map, self.val_auc, self.seconds
        )
    }
}

/// Result of [`train`]: the best-validation parameters and the log.
pub struct Trained {
    pub store: ParamStore<f32>,
    pub log: Vec<LogRow>,
    pub best_epoch: usize,
    pub best_val_map: f64,
    pub steps: u64,
}

struct ItemGrads {
    grads: BTreeMap<String, Tensor<f32>>,
    lg: f64,
    li: f64,
}

fn item_step(model: &Cdn, store: &ParamStore<f32>, ex: &Example, seed: u64) -> Result<ItemGrads> {
    let perm = sample_perm(ex.int.n, model.config.n_max, derive_seed(seed, 0))?;
    let mut g = Graph::new(true, derive_seed(seed, 1));
    let out = model.forward(&mut g, store, &ex.obs, &ex.int, &perm)?;
    let (lg, li, l) = model.losses(&mut g, &out, &ex.labels_obs, &ex.labels_int, &ex.indicator())?;
    g.backward(l)?;
    Ok(ItemGrads {
        lg: g.value(lg).item() as f64,
        li: g.value(li).item() as f64,
        grads: g.param_grads(),
    })
}

/// Mean validation AP and AUC over regimes.
pub fn validate(model: &Cdn, store: &ParamStore<f32>, val: &[Example], seed: u64, permutations: usize) -> Result<(f64, f64)> {
    let metrics = val
        .par_iter()
        .enumerate()
        .map(|(k, ex)| -> Result<(f64, f64)> {
            let probs = predict_from_tokens(model, store, &ex.obs, &ex.int, derive_seed(seed, k as u64), permutations)?;
            let labels: Vec<bool> = ex.indicator().iter().map(|&v| v > 0.5).collect();
            Ok((average_precision(&probs, &labels)?, auroc(&probs, &labels)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = metrics.len().max(1) as f64;
    Ok((
        metrics.iter().map(|m| m.0).sum::<f64>() / n,
        metrics.iter().map(|m| m.1).sum::<f64>() / n,
    ))
}

/// Trains from `init` with AdamW, batch items in a parallel map whose
/// gradients are summed in item order, early stopping on validation mAP.
/// `on_epoch` sees every log row as it is produced.
pub fn train(
    model: &Cdn,
    init: ParamStore<f32>,
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&LogRow, &ParamStore<f32>),
) -> Result<Trained> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return param(format!("{} training and {} validation pairs", train_set.len(), val_set.len()));
    }
    let mut store = init;
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..Default::default()
    });
    let start = Instant::now();
    let mut best = (f64::NEG_INFINITY, 0usize, store.clone());
    let mut log = Vec::new();
    let val_seed = derive_seed(seed, 0x7a1);
    for epoch in 1..=config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        order.truncate(config.pairs_per_epoch.unwrap_or(usize::MAX));
        let (mut lg_sum, mut li_sum) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let step = opt.step_count();
            let items = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| item_step(model, &store, &train_set[i], derive_seed(derive_seed(seed, 0x5eed + step), k as u64)))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = BTreeMap::new();
            for item in items {
                lg_sum += item.lg;
                li_sum += item.li;
                for (name, t) in item.grads {
                    match grads.get_mut(&name) {
                        None => {
                            grads.insert(name, t);
                        }
                        Some(acc) => {
                            let acc: &mut Tensor<f32> = acc;
                            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                                *a += *b;
                            }
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            for t in grads.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            opt.step(&mut store, &grads)?;
        }
        let (val_map, val_auc) = validate(model, &store, val_set, val_seed, config.val_permutations)?;
        let row = LogRow {
            epoch,
            loss_graph: lg_sum / order.len() as f64,
            loss_target: li_sum / order.len() as f64,
            val_map,
            val_auc,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("{}", row.csv());
        if val_map > best.0 {
            best = (val_map, epoch, store.clone());
        }
        on_epoch(&row, &best.2);
        log.push(row);
        if epoch - best.1 >= config.patience {
            break;
        }
    }
    Ok(Trained {
        store: best.2,
        log,
        best_epoch: best.1,
        best_val_map: best.0,
        steps: opt.step_count(),
    })
}

/// Writes a checkpoint whose header records the model configuration and
/// any `extra` provenance.
pub fn save_checkpoint(
    path: &Path,
    model: &Cdn,
    store: &ParamStore<f32>,
    optimizer: Option<AdamWConfig>,
    steps: u64,
    extra: serde_json::Value,
) -> Result<()> {
    let meta = serde_json::json!({ "config": model.config, "extra": extra });
    write_checkpoint(path, store, optimizer, steps, meta).map_err(|e| format_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Cdn, ParamStore<f32>, CheckpointHeader)> {
    let (header, store) = read_checkpoint::<f32>(path).map_err(|e| format_err(path, e))?;
    let config: ModelConfig = serde_json::from_value(header.model["config"].clone())
        .map_err(|e| format_err(path, format!("model configuration: {e}")))?;
    let model = Cdn::new(config)?;
    let expected = model.init::<f32>(0);
    for (name, t) in expected.iter() {
        match store.get(name) {
            Some(v) if v.shape() == t.shape() => {}
            _ => return Err(format_err(path, format!("parameter {name} missing or misshapen"))),
        }
    }
    if store.len() != expected.len() {
        return Err(CoreError::Format {
            path: path.to_path_buf(),
            detail: format!("{} parameters, expected {}", store.len(), expected.len()),
        });
    }
    Ok((model, store, header))
}

/// Scores regimes with a trained network, reading cached features.
pub struct CdnScorer {
    pub model: Cdn,
    pub store: ParamStore<f32>,
    pub permutations: usize,
    pub seed: u64,
    pub cache: Cache,
}

impl Scorer for CdnScorer {
    fn method(&self) -> String {
        format!("cdn-{}", serde_json::to_value(self.model.config.variant).unwrap().as_str().unwrap_or("?"))
    }

    fn score(&self, case: &RegimeCase) -> Result<Vec<f64>> {
        let f = &self.model.config.features;
        let obs = SideTokens::new(&obs_features(case.corpus, case.meta, f, self.cache)?, true);
        let int = SideTokens::new(&regime_features(case.corpus, case.meta, case.regime, f, self.cache)?, true);
        let seed = derive_seed(derive_seed(self.seed, case.meta.id as u64), case.regime as u64);
        predict_from_tokens(&self.model, &self.store, &obs, &int, seed, self.permutations)
    }
}
