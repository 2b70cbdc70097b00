//! Per-dataset features and their cache file.
//!
//! `features.bin`, all integers and floats little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic `CDNF` | 4 bytes |
//! | version (1) | u32 |
//! | N, k, T | 3 × u32 |
//! | alpha | f64 |
//! | correlation matrix, row-major | N·N × f64 |
//! | T records: subset indices, then the k×k mark codes row-major | k × u32, k·k × u8 |
//! | column means, then unbiased column variances | N × f64, N × f64 |
//!
//! Mark codes are 0 none, 1 circle, 2 arrow, 3 tail; code `(a, b)` is the
//! mark at local variable `b`'s end of the edge between `a` and `b`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DatasetMeta};
use crate::discovery::{local_estimates_from, FisherZ, LocalEstimates, Pag};
use crate::error::{format_err, io_err, param, CoreError, Result};
use crate::scm::derive_seed;
use crate::stats::summary_stats;

pub const MAGIC: &[u8; 4] = b"CDNF";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturizeConfig {
    pub k: usize,
    pub t: usize,
    pub alpha: f64,
}

impl Default for FeaturizeConfig {
    fn default() -> Self {
        Self {
            k: 5,
            t: 100,
            alpha: 0.05,
        }
    }
}

/// Features of one data matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSide {
    pub alpha: f64,
    pub rho: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
    pub local: LocalEstimates,
}

impl FeatureSide {
    pub fn n(&self) -> usize {
        self.rho.nrows()
    }
}

/// Both sides of an (observational, interventional) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub obs: FeatureSide,
    pub int: FeatureSide,
}

pub fn featurize(d: &DMatrix<f64>, config: &FeaturizeConfig, seed: u64) -> Result<FeatureSide> {
    let st = summary_stats(d)?;
    let k = config.k.min(d.ncols());
    let test = FisherZ {
        rho: st.rho.clone(),
        m: st.m,
        alpha: config.alpha,
    };
    let local = local_estimates_from(&test, k, config.t, seed)?;
    Ok(FeatureSide {
        alpha: config.alpha,
        rho: st.rho,
        mean: st.mean,
        var: st.var,
        local,
    })
}

/// Featurizes both sides with independent per-side seeds.
pub fn featurize_pair(obs: &DMatrix<f64>, int: &DMatrix<f64>, config: &FeaturizeConfig, seed: u64) -> Result<FeatureBundle> {
    if obs.ncols() != int.ncols() {
        return Err(CoreError::Shape(format!("{} vs {} columns", obs.ncols(), int.ncols())));
    }
    Ok(FeatureBundle {
        obs: featurize(obs, config, derive_seed(seed, 0))?,
        int: featurize(int, config, derive_seed(seed, 1))?,
    })
}

pub fn encode(side: &FeatureSide) -> Vec<u8> {
    let n = side.n();
    let (k, t) = (side.local.k, side.local.t());
    let mut b = Vec::with_capacity(28 + 8 * n * n + t * (4 * k + k * k) + 16 * n);
    b.extend_from_slice(MAGIC);
    for v in [VERSION, n as u32, k as u32, t as u32] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&side.alpha.to_le_bytes());
    for i in 0..n {
        for j in 0..n {
            b.extend_from_slice(&side.rho[(i, j)].to_le_bytes());
        }
    }
    for (s, p) in side.local.subsets.iter().zip(&side.local.pags) {
        for &v in s {
            b.extend_from_slice(&(v as u32).to_le_bytes());
        }
        b.extend_from_slice(&p.codes());
    }
    for v in side.mean.iter().chain(side.var.iter()) {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.at + len;
        if end > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.at));
        }
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<FeatureSide, String> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let n = r.u32()? as usize;
    let k = r.u32()? as usize;
    let t = r.u32()? as usize;
    if k > n {
        return Err(format!("subset size {k} exceeds {n} variables"));
    }
    let alpha = r.f64()?;
    let mut rho = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            rho[(i, j)] = r.f64()?;
        }
    }
    let mut subsets = Vec::with_capacity(t);
    let mut pags = Vec::with_capacity(t);
    for rec in 0..t {
        let s = (0..k).map(|_| r.u32().map(|v| v as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        if s.iter().any(|&v| v >= n) {
            return Err(format!("record {rec}: index out of range"));
        }
        let codes = r.take(k * k)?;
        pags.push(Pag::from_codes(k, codes).ok_or_else(|| format!("record {rec}: bad mark code"))?);
        subsets.push(s);
    }
    let mean = DVector::from_iterator(n, (0..n).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?);
    let var = DVector::from_iterator(n, (0..n).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?);
    if r.at != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.at));
    }
    Ok(FeatureSide {
        alpha,
        rho,
        mean,
        var,
        local: LocalEstimates { n, k, subsets, pags },
    })
}

pub fn write_features(path: &Path, side: &FeatureSide) -> Result<()> {
    fs::write(path, encode(side)).map_err(io_err(path))
}

pub fn read_features(path: &Path) -> Result<FeatureSide> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes).map_err(|e| format_err(path, e))
}

/// Checks a cached side against the requested featurization.
pub fn check_compatible(side: &FeatureSide, n: usize, config: &FeaturizeConfig) -> Result<()> {
    if side.n() != n || side.local.k != config.k.min(n) || side.local.t() != config.t || side.alpha != config.alpha {
        return param(format!(
            "cached features (N={}, k={}, T={}, alpha={}) do not match the requested (N={n}, k={}, T={}, alpha={})",
            side.n(),
            side.local.k,
            side.local.t(),
            side.alpha,
            config.k,
            config.t,
            config.alpha
        ));
    }
    Ok(())
}

/// Cache file of a dataset's observational side.
pub const OBS_FEATURES: &str = "features_obs.bin";
/// Cache file of one regime's interventional side.
pub const INT_FEATURES: &str = "features.bin";

/// FCI seed of a side, derived from the seed that generated its data.
pub fn side_seed(data_seed: u64) -> u64 {
    derive_seed(data_seed, 0xfea7)
}

/// How [`dataset_features`] treats the on-disk cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cache {
    /// Missing or incompatible files are an error.
    Require,
    /// Missing files are computed in memory and not written.
    Compute,
}

fn cached_side(path: &Path, data: impl FnOnce() -> Result<DMatrix<f64>>, seed: u64, config: &FeaturizeConfig, n: usize, cache: Cache) -> Result<FeatureSide> {
    if path.exists() {
        let side = read_features(path)?;
        check_compatible(&side, n, config)?;
        return Ok(side);
    }
    match cache {
        Cache::Require => param(format!("{} is missing; run featurize first", path.display())),
        Cache::Compute => featurize(&data()?, config, seed),
    }
}

/// Observational features of a dataset.
pub fn obs_features(corpus: &Corpus, meta: &DatasetMeta, config: &FeaturizeConfig, cache: Cache) -> Result<FeatureSide> {
    let path = corpus.dataset_dir(meta.id)?.join(OBS_FEATURES);
    cached_side(&path, || corpus.obs(meta), side_seed(meta.seed), config, meta.cell.n, cache)
}

/// Interventional features of regime `r`.
pub fn regime_features(corpus: &Corpus, meta: &DatasetMeta, r: usize, config: &FeaturizeConfig, cache: Cache) -> Result<FeatureSide> {
    let path = corpus.regime_dir(meta.id, r)?.join(INT_FEATURES);
    let seed = meta
        .regimes
        .get(r)
        .ok_or_else(|| CoreError::Param(format!("dataset {} has no regime {r}", meta.id)))?
        .seed;
    cached_side(&path, || corpus.regime(meta, r).map(|d| d.int), side_seed(seed), config, meta.cell.n, cache)
}

/// Writes the feature cache of every side of `datasets`, in parallel over
/// sides. Existing compatible files are kept unless `overwrite`. Returns
/// the number of files written.
pub fn featurize_corpus(corpus: &Corpus, datasets: &[usize], config: &FeaturizeConfig, overwrite: bool) -> Result<usize> {
    let metas = datasets.iter().map(|&id| corpus.meta(id)).collect::<Result<Vec<_>>>()?;
    let units: Vec<(usize, Option<usize>)> = metas
        .iter()
        .enumerate()
        .flat_map(|(k, m)| std::iter::once((k, None)).chain((0..m.regimes.len()).map(move |r| (k, Some(r)))))
        .collect();
    let written = units
        .par_iter()
        .map(|&(k, r)| -> Result<usize> {
            let meta = &metas[k];
            let (path, seed) = match r {
                None => (corpus.dataset_dir(meta.id)?.join(OBS_FEATURES), meta.seed),
                Some(r) => (corpus.regime_dir(meta.id, r)?.join(INT_FEATURES), meta.regimes[r].seed),
            };
            if !overwrite && path.exists() && read_features(&path).and_then(|s| check_compatible(&s, meta.cell.n, config)).is_ok() {
                return Ok(0);
            }
            let data = match r {
                None => corpus.obs(meta)?,
                Some(r) => corpus.regime(meta, r)?.int,
            };
            write_features(&path, &featurize(&data, config, side_seed(seed))?)?;
            Ok(1)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(written.iter().sum())
}
