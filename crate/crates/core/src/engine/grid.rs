use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{error, info};
use serde::{Deserialize, Serialize};

use super::{generate_synthetic, run, write_round_csv, AlgorithmKind, AlgorithmSpec, Hyper, SyntheticData, SyntheticSpec};
use crate::dataset::{load_csv, plan_shift_split, EncodedDataset, RawTable, SchemaFile, ShiftSplitSpec, Split, SplitPlan};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Relative paths resolve against the experiment file's directory.
    Csv { path: PathBuf, schema: PathBuf },
    Synthetic {
        #[serde(default)]
        synthetic: SyntheticSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    #[serde(flatten)]
    pub source: DatasetSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub name: String,
    #[serde(flatten)]
    pub spec: ShiftSplitSpec,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "one")]
    pub repetitions: usize,
    #[serde(default)]
    pub base_seed: u64,
    pub algorithms: Vec<AlgorithmKind>,
    #[serde(default)]
    pub hyper: Hyper,
    pub datasets: Vec<DatasetConfig>,
    /// Empty means the split stored with the dataset's schema file.
    #[serde(default)]
    pub splits: Vec<SplitConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config; returns it with the directory relative paths resolve
    /// against.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg = Self::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() {
            return Err(Error::Config("no algorithms listed".into()));
        }
        if self.datasets.is_empty() {
            return Err(Error::Config("no datasets listed".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        for s in &self.splits {
            s.spec.validate()?;
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub enum LoadedDataset {
    Table {
        raw: RawTable,
        default_split: Option<ShiftSplitSpec>,
    },
    Synthetic(SyntheticData),
}

impl LoadedDataset {
    pub fn load(cfg: &DatasetConfig, base_dir: &Path) -> Result<Self> {
        match &cfg.source {
            DatasetSource::Csv { path, schema } => {
                let schema_path = resolve(base_dir, schema);
                if !schema_path.exists() {
                    return Err(Error::Config(format!(
                        "schema file {} not found",
                        schema_path.display()
                    )));
                }
                let sf = SchemaFile::load(&schema_path)?;
                let data_path = resolve(base_dir, path);
                if !data_path.exists() {
                    return Err(Error::Config(format!("data file {} not found", data_path.display())));
                }
                let raw = load_csv(&data_path, &sf.schema())?;
                info!(
                    "loaded {} rows from {} ({} dropped)",
                    raw.len(),
                    data_path.display(),
                    raw.dropped
                );
                Ok(Self::Table {
                    raw,
                    default_split: sf.split,
                })
            }
            DatasetSource::Synthetic { synthetic } => Ok(Self::Synthetic(generate_synthetic(synthetic)?)),
        }
    }

    pub fn default_split(&self) -> Option<&ShiftSplitSpec> {
        match self {
            Self::Table { default_split, .. } => default_split.as_ref(),
            Self::Synthetic(_) => None,
        }
    }

    /// Split and encode. For synthetic data the domain flag defines group A.
    pub fn prepare(&self, spec: &ShiftSplitSpec) -> Result<(Split, SplitPlan)> {
        match self {
            Self::Table { raw, .. } => {
                let p = crate::dataset::prepare(raw, spec)?;
                Ok((p.split, p.plan))
            }
            Self::Synthetic(s) => {
                let plan = plan_shift_split(&s.domain, spec)?;
                Ok((Split::from_plan(&s.data, &plan, spec.client_assignment), plan))
            }
        }
    }
}

/// Splits to run for one dataset.
pub fn splits_for(cfg: &ExperimentConfig, data: &LoadedDataset) -> Result<Vec<SplitConfig>> {
    if !cfg.splits.is_empty() {
        return Ok(cfg.splits.clone());
    }
    data.default_split()
        .map(|s| {
            vec![SplitConfig {
                name: "default".into(),
                spec: s.clone(),
            }]
        })
        .ok_or_else(|| Error::Config("no split given and the dataset has no default".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Ignores NaN entries; sample standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
        if v.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub dataset: String,
    pub split: String,
    pub algorithm: AlgorithmKind,
    pub num_clients: usize,
    pub runs: usize,
    pub failures: usize,
    pub errors: Vec<String>,
    pub train_acc: MeanStd,
    pub test_acc: MeanStd,
    pub train_rd: MeanStd,
    pub test_rd: MeanStd,
    pub client_test_rd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub name: String,
    pub repetitions: usize,
    pub base_seed: u64,
    pub cells: Vec<CellSummary>,
}

#[derive(Default)]
struct Acc {
    train_acc: Vec<f64>,
    test_acc: Vec<f64>,
    train_rd: Vec<f64>,
    test_rd: Vec<f64>,
    client_rd: Vec<Vec<f64>>,
    errors: Vec<String>,
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Run every (dataset, split, algorithm) cell `repetitions` times with
/// seeds `base_seed + r`. A failed run is recorded in its cell and the grid
/// continues. Per-run round CSVs go to `out_dir/runs/` when given.
pub fn experiment_grid(cfg: &ExperimentConfig, base_dir: &Path, out_dir: Option<&Path>) -> Result<GridSummary> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("runs"))?;
    }
    let mut cells = Vec::new();
    for ds in &cfg.datasets {
        let data = LoadedDataset::load(ds, base_dir)?;
        for split in splits_for(cfg, &data)? {
            let mut accs: Vec<Acc> = cfg.algorithms.iter().map(|_| Acc::default()).collect();
            for rep in 0..cfg.repetitions {
                let seed = cfg.base_seed + rep as u64;
                let mut spec = split.spec.clone();
                spec.seed = seed;
                let prepared = data.prepare(&spec);
                for (alg, acc) in cfg.algorithms.iter().zip(accs.iter_mut()) {
                    let split_data = match &prepared {
                        Ok((s, _)) => s,
                        Err(e) => {
                            acc.errors.push(format!("rep {rep}: {e}"));
                            continue;
                        }
                    };
                    let hyper = Hyper {
                        seed,
                        ..cfg.hyper.clone()
                    };
                    info!("{} / {} / {} rep {rep} (seed {seed})", ds.name, split.name, alg);
                    match run(&AlgorithmSpec::new(*alg, hyper), split_data) {
                        Ok(r) => {
                            let f = &r.final_metrics;
                            acc.train_acc.push(f.train_acc);
                            acc.test_acc.push(f.test_acc);
                            acc.train_rd.push(f.train_rd);
                            acc.test_rd.push(f.test_rd);
                            acc.client_rd.push(f.per_client_test_rd.clone());
                            if let Some(dir) = out_dir {
                                let name = format!(
                                    "{}_{}_{}_rep{rep}.csv",
                                    sanitize(&ds.name),
                                    sanitize(&split.name),
                                    alg
                                );
                                write_round_csv(&r, fs::File::create(dir.join("runs").join(name))?)?;
                            }
                        }
                        Err(e) => {
                            error!("{} / {} / {} rep {rep} failed: {e}", ds.name, split.name, alg);
                            acc.errors.push(format!("rep {rep}: {e}"));
                        }
                    }
                }
            }
            for (alg, acc) in cfg.algorithms.iter().zip(accs) {
                let clients = split.spec.num_clients;
                let client_test_rd = (0..clients)
                    .map(|k| {
                        let v: Vec<f64> = acc.client_rd.iter().filter_map(|r| r.get(k).copied()).collect();
                        MeanStd::of(&v).mean
                    })
                    .collect();
                cells.push(CellSummary {
                    dataset: ds.name.clone(),
                    split: split.name.clone(),
                    algorithm: *alg,
                    num_clients: clients,
                    runs: acc.test_acc.len(),
                    failures: acc.errors.len(),
                    errors: acc.errors,
                    train_acc: MeanStd::of(&acc.train_acc),
                    test_acc: MeanStd::of(&acc.test_acc),
                    train_rd: MeanStd::of(&acc.train_rd),
                    test_rd: MeanStd::of(&acc.test_rd),
                    client_test_rd,
                });
            }
        }
    }
    let summary = GridSummary {
        name: cfg.name.clone(),
        repetitions: cfg.repetitions,
        base_seed: cfg.base_seed,
        cells,
    };
    if let Some(dir) = out_dir {
        write_summary_csv(&summary, fs::File::create(dir.join("summary.csv"))?)?;
        write_summary_toml(&summary, fs::File::create(dir.join("summary.toml"))?)?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub client_id: usize,
    pub rows: usize,
    pub file: String,
}

/// Description of a split written to disk by [`write_prepared`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedManifest {
    pub dataset: String,
    pub split: String,
    pub spec: ShiftSplitSpec,
    pub train_rows: usize,
    pub test_rows: usize,
    pub train_file: String,
    pub test_file: String,
    pub feature_names: Vec<String>,
    pub shards: Vec<ShardEntry>,
}

/// Write `train.csv`, `test.csv`, one `shard_<k>.csv` per client and
/// `manifest.toml` into `dir`.
pub fn write_prepared(dataset: &str, split_cfg: &SplitConfig, split: &Split, dir: &Path) -> Result<PreparedManifest> {
    fs::create_dir_all(dir)?;
    split.train.write_csv(fs::File::create(dir.join("train.csv"))?)?;
    split.test.write_csv(fs::File::create(dir.join("test.csv"))?)?;
    let names = split.train.feature_names.clone();
    let mut shards = Vec::with_capacity(split.shards.len());
    for s in &split.shards {
        let file = format!("shard_{}.csv", s.client_id);
        let data = EncodedDataset {
            features: s.features.clone(),
            labels: s.labels.clone(),
            sensitive: s.sensitive.clone(),
            feature_names: names.clone(),
        };
        data.write_csv(fs::File::create(dir.join(&file))?)?;
        shards.push(ShardEntry {
            client_id: s.client_id,
            rows: s.len(),
            file,
        });
    }
    let manifest = PreparedManifest {
        dataset: dataset.to_string(),
        split: split_cfg.name.clone(),
        spec: split_cfg.spec.clone(),
        train_rows: split.train.len(),
        test_rows: split.test.len(),
        train_file: "train.csv".into(),
        test_file: "test.csv".into(),
        feature_names: names,
        shards,
    };
    fs::write(dir.join("manifest.toml"), toml::to_string(&manifest)?)?;
    Ok(manifest)
}

pub fn write_summary_csv<W: Write>(summary: &GridSummary, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "dataset",
        "split",
        "algorithm",
        "num_clients",
        "runs",
        "failures",
        "train_acc_mean",
        "train_acc_std",
        "test_acc_mean",
        "test_acc_std",
        "train_rd_mean",
        "train_rd_std",
        "test_rd_mean",
        "test_rd_std",
    ])?;
    for c in &summary.cells {
        let mut rec = vec![
            c.dataset.clone(),
            c.split.clone(),
            c.algorithm.to_string(),
            c.num_clients.to_string(),
            c.runs.to_string(),
            c.failures.to_string(),
        ];
        for m in [c.train_acc, c.test_acc, c.train_rd, c.test_rd] {
            rec.push(format!("{:.6}", m.mean));
            rec.push(format!("{:.6}", m.std));
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_summary_toml<W: Write>(summary: &GridSummary, mut w: W) -> Result<()> {
    let text = toml::to_string(summary)?;
    w.write_all(text.as_bytes())?;
    Ok(())
}
