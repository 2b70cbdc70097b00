//! On-disk synthetic corpora.
//!
//! ```text
//! out/manifest.json
//! out/ds_00000/meta.json
//! out/ds_00000/graph_obs.csv          src,dst
//! out/ds_00000/obs.f32                row-major little-endian binary32
//! out/ds_00000/regime_000/int.f32
//! out/ds_00000/regime_000/targets.json
//! out/ds_00000/regime_000/graph_int.csv
//! ```
//!
//! Matrix shapes live in `meta.json`. Everything is derived from the master
//! seed, so regenerating with the same config gives identical bytes.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, param, Result};
use crate::scm::{
    derive_seed, instantiate_scm, mutilate, regime_schedule, sample_data, sample_er_dag, Dag, Family,
    InterventionKind, Mechanism, MechanismConfig, Regime, Scm,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub nodes: Vec<usize>,
    /// Expected edge count is `multiplier × nodes`.
    pub edge_multipliers: Vec<usize>,
    pub families: Vec<Family>,
    pub interventions: Vec<InterventionKind>,
    pub datasets_per_cell: usize,
    pub obs_samples: usize,
    pub int_samples: usize,
    pub mechanism: MechanismConfig,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            nodes: vec![10],
            edge_multipliers: vec![1],
            families: vec![Family::Linear],
            interventions: vec![InterventionKind::Hard],
            datasets_per_cell: 1,
            obs_samples: 1000,
            int_samples: 500,
            mechanism: MechanismConfig::default(),
            seed: 0,
        }
    }
}

/// One configuration cell of the corpus grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub n: usize,
    pub expected_edges: usize,
    pub family: Family,
    pub intervention: InterventionKind,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let empty = self.nodes.is_empty()
            || self.edge_multipliers.is_empty()
            || self.families.is_empty()
            || self.interventions.is_empty();
        if empty {
            return param("corpus grid has an empty axis");
        }
        if self.datasets_per_cell == 0 || self.obs_samples < 2 || self.int_samples < 2 {
            return param("dataset and sample counts must be positive (samples at least 2)");
        }
        for &n in &self.nodes {
            if n < 4 {
                return param(format!("{n} nodes is too few for the 3N regime schedule"));
            }
            for &k in &self.edge_multipliers {
                if k == 0 || k * n > n * (n - 1) / 2 {
                    return param(format!("edge multiplier {k} invalid for {n} nodes"));
                }
            }
        }
        Ok(())
    }

    /// Cells in grid order, each repeated `datasets_per_cell` times.
    pub fn schedule(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &n in &self.nodes {
            for &k in &self.edge_multipliers {
                for &family in &self.families {
                    for &intervention in &self.interventions {
                        let cell = Cell {
                            n,
                            expected_edges: k * n,
                            family,
                            intervention,
                        };
                        out.extend(std::iter::repeat(cell).take(self.datasets_per_cell));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub id: usize,
    pub dir: String,
    pub cell: Cell,
    pub regimes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: CorpusConfig,
    pub datasets: Vec<DatasetEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeMeta {
    pub index: usize,
    pub dir: String,
    pub seed: u64,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub id: usize,
    pub cell: Cell,
    pub seed: u64,
    pub obs_rows: usize,
    pub int_rows: usize,
    pub regimes: Vec<RegimeMeta>,
    pub mechanisms: Vec<Mechanism>,
}

pub struct GeneratedRegime {
    pub regime: Regime,
    pub seed: u64,
    pub int: DMatrix<f64>,
    pub graph: Dag,
}

pub struct GeneratedDataset {
    pub id: usize,
    pub cell: Cell,
    pub seed: u64,
    pub scm: Scm,
    pub graph: Dag,
    pub obs: DMatrix<f64>,
    pub regimes: Vec<GeneratedRegime>,
}

/// Builds one dataset in memory. `seed` is the dataset's own seed.
pub fn generate_dataset(
    cell: Cell,
    id: usize,
    seed: u64,
    obs_samples: usize,
    int_samples: usize,
    mechanism: &MechanismConfig,
) -> Result<GeneratedDataset> {
    let graph = sample_er_dag(cell.n, cell.expected_edges, derive_seed(seed, 1))?;
    let scm = instantiate_scm(&graph, cell.family, mechanism, derive_seed(seed, 2))?;
    let obs = sample_data(&scm, obs_samples, derive_seed(seed, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4));
    let sets = regime_schedule(cell.n, &mut rng)?;
    let mut regimes = Vec::with_capacity(sets.len());
    for (r, targets) in sets.into_iter().enumerate() {
        let regime = Regime::sample(targets, cell.intervention, &mut rng)?;
        let (int_scm, int_graph) = mutilate(&scm, &regime)?;
        let rseed = derive_seed(seed, 100 + r as u64);
        let int = sample_data(&int_scm, int_samples, rseed);
        regimes.push(GeneratedRegime {
            regime,
            seed: rseed,
            int,
            graph: int_graph,
        });
    }
    Ok(GeneratedDataset {
        id,
        cell,
        seed,
        scm,
        graph,
        obs,
        regimes,
    })
}

pub fn dataset_dir_name(id: usize) -> String {
    format!("ds_{id:05}")
}

pub fn regime_dir_name(r: usize) -> String {
    format!("regime_{r:03}")
}

/// Generates and writes every dataset of `config`, then the manifest.
pub fn generate_corpus(config: &CorpusConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let cells = config.schedule();
    let entries = cells
        .par_iter()
        .enumerate()
        .map(|(id, &cell)| {
            let ds = generate_dataset(
                cell,
                id,
                derive_seed(config.seed, id as u64),
                config.obs_samples,
                config.int_samples,
                &config.mechanism,
            )?;
            write_dataset(out_dir, &ds)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        datasets: entries,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn write_dataset(root: &Path, ds: &GeneratedDataset) -> Result<DatasetEntry> {
    let dir_name = dataset_dir_name(ds.id);
    let dir = root.join(&dir_name);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_graph(&dir.join("graph_obs.csv"), &ds.graph)?;
    write_matrix_f32(&dir.join("obs.f32"), &ds.obs)?;
    let mut regimes = Vec::with_capacity(ds.regimes.len());
    for (r, reg) in ds.regimes.iter().enumerate() {
        let rdir = dir.join(regime_dir_name(r));
        fs::create_dir_all(&rdir).map_err(io_err(&rdir))?;
        write_matrix_f32(&rdir.join("int.f32"), &reg.int)?;
        write_graph(&rdir.join("graph_int.csv"), &reg.graph)?;
        write_json(&rdir.join("targets.json"), &reg.regime)?;
        regimes.push(RegimeMeta {
            index: r,
            dir: regime_dir_name(r),
            seed: reg.seed,
            targets: reg.regime.targets.clone(),
        });
    }
    let meta = DatasetMeta {
        id: ds.id,
        cell: ds.cell,
        seed: ds.seed,
        obs_rows: ds.obs.nrows(),
        int_rows: ds.regimes.first().map_or(0, |r| r.int.nrows()),
        regimes,
        mechanisms: ds.scm.mechanisms.clone(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    Ok(DatasetEntry {
        id: ds.id,
        dir: dir_name,
        cell: ds.cell,
        regimes: ds.regimes.len(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

/// Row-major little-endian binary32.
pub fn write_matrix_f32(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            bytes.extend_from_slice(&(m[(r, c)] as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_matrix_f32(path: &Path, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != rows * cols * 4 {
        return Err(format_err(
            path,
            format!("{} bytes, expected {rows}×{cols} binary32 values", bytes.len()),
        ));
    }
    let vals = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    Ok(DMatrix::from_row_iterator(rows, cols, vals))
}

pub fn write_graph(path: &Path, dag: &Dag) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut body = String::from("src,dst\n");
    for (a, b) in dag.edges() {
        body.push_str(&format!("{a},{b}\n"));
    }
    w.write_all(body.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_graph(path: &Path, n: usize) -> Result<Dag> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    if lines.next() != Some("src,dst") {
        return Err(format_err(path, "missing `src,dst` header"));
    }
    let mut edges = Vec::new();
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parsed = line
            .split_once(',')
            .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
        match parsed {
            Some(e) => edges.push(e),
            None => return Err(format_err(path, format!("line {}: malformed edge `{line}`", k + 2))),
        }
    }
    Dag::new(n, edges).map_err(|e| format_err(path, e))
}

/// Read access to a corpus directory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
}

/// One interventional side of a dataset as stored on disk.
pub struct RegimeData {
    pub regime: Regime,
    pub int: DMatrix<f64>,
    pub graph: Dag,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&root.join("manifest.json"))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(format_err(
                root.join("manifest.json"),
                format!("format version {} not supported", manifest.format_version),
            ));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn entry(&self, id: usize) -> Result<&DatasetEntry> {
        self.manifest
            .datasets
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| format_err(&self.root, format!("no dataset {id}")))
    }

    pub fn dataset_dir(&self, id: usize) -> Result<PathBuf> {
        Ok(self.root.join(&self.entry(id)?.dir))
    }

    pub fn regime_dir(&self, id: usize, r: usize) -> Result<PathBuf> {
        Ok(self.dataset_dir(id)?.join(regime_dir_name(r)))
    }

    pub fn meta(&self, id: usize) -> Result<DatasetMeta> {
        read_json(&self.dataset_dir(id)?.join("meta.json"))
    }

    pub fn obs(&self, meta: &DatasetMeta) -> Result<DMatrix<f64>> {
        read_matrix_f32(&self.dataset_dir(meta.id)?.join("obs.f32"), meta.obs_rows, meta.cell.n)
    }

    pub fn graph_obs(&self, meta: &DatasetMeta) -> Result<Dag> {
        read_graph(&self.dataset_dir(meta.id)?.join("graph_obs.csv"), meta.cell.n)
    }

    pub fn regime(&self, meta: &DatasetMeta, r: usize) -> Result<RegimeData> {
        let dir = self.regime_dir(meta.id, r)?;
        let regime: Regime = read_json(&dir.join("targets.json"))?;
        let regime = Regime::new(regime.targets, regime.interventions).map_err(|e| format_err(&dir, e))?;
        Ok(RegimeData {
            int: read_matrix_f32(&dir.join("int.f32"), meta.int_rows, meta.cell.n)?,
            graph: read_graph(&dir.join("graph_int.csv"), meta.cell.n)?,
            regime,
        })
    }
}
