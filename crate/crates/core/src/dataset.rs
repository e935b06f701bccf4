//! Tabular data: CSV loading, one-hot/min-max encoding, shift splits and
//! client shards.
//!
//! The pipeline is `load_csv -> prepare` for real files, where `prepare`
//! draws the split on raw rows first so the encoder can be fitted on the
//! training rows only, then encodes everything with those statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Cell values treated as missing; records containing one are dropped.
const MISSING: [&str; 2] = ["", "?"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Categorical,
    Numeric,
    Label,
    Sensitive,
    /// Present in the file but not used.
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// Marks the column used to define shift-split groups.
    #[serde(default)]
    pub split_key: bool,
    /// Label value mapped to 1. Defaults to the lexicographically larger value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<String>,
}

impl ColumnSpec {
    pub fn new(name: &str, kind: ColumnKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            split_key: false,
            positive: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        let s = Self { columns };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let count = |k| self.columns.iter().filter(|c| c.kind == k).count();
        if count(ColumnKind::Label) != 1 {
            return Err(Error::Schema("exactly one label column required".into()));
        }
        if count(ColumnKind::Sensitive) != 1 {
            return Err(Error::Schema(
                "exactly one sensitive column required".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column '{}'", c.name)));
            }
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    fn index_of_kind(&self, kind: ColumnKind) -> usize {
        self.columns
            .iter()
            .position(|c| c.kind == kind)
            .expect("validated schema")
    }
}

/// Schema file contents: column declarations plus an optional default split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaFile {
    pub columns: Vec<ColumnSpec>,
    #[serde(default)]
    pub split: Option<ShiftSplitSpec>,
}

impl SchemaFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read schema {}: {e}", path.display())))?;
        let file: SchemaFile = toml::from_str(&text)?;
        Schema::new(file.columns.clone())?;
        Ok(file)
    }

    pub fn schema(&self) -> Schema {
        Schema {
            columns: self.columns.clone(),
        }
    }
}

/// Parsed rows, one string per schema column in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub schema: Schema,
    pub rows: Vec<Vec<String>>,
    /// Records dropped because a listed column was missing.
    pub dropped: usize,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Result<impl Iterator<Item = &str> + '_> {
        let j = self
            .schema
            .index_of(name)
            .ok_or_else(|| Error::Schema(format!("unknown column '{name}'")))?;
        Ok(self.rows.iter().map(move |r| r[j].as_str()))
    }

    /// Membership of each row in group A of a shift split: rows whose
    /// `column` value is listed in `values`. Without a column every row is
    /// in group A.
    pub fn group_membership(&self, column: Option<&str>, values: &[String]) -> Result<Vec<bool>> {
        match column {
            None => Ok(vec![true; self.len()]),
            Some(c) => {
                let set: BTreeSet<&str> = values.iter().map(String::as_str).collect();
                Ok(self.column(c)?.map(|v| set.contains(v)).collect())
            }
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<RawTable> {
    let file = std::fs::File::open(path.as_ref())?;
    let table = read_csv(file, schema)?;
    log::info!(
        "loaded {} rows from {} ({} incomplete records dropped)",
        table.len(),
        path.as_ref().display(),
        table.dropped
    );
    Ok(table)
}

pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<RawTable> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let mut positions = Vec::with_capacity(schema.columns.len());
    for c in &schema.columns {
        let pos = header
            .iter()
            .position(|h| h == c.name)
            .ok_or_else(|| Error::Schema(format!("missing column '{}'", c.name)))?;
        positions.push(pos);
    }

    let mut rows = Vec::new();
    let mut dropped = 0;
    for (k, rec) in rdr.records().enumerate() {
        // Header is line 1.
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Row {
            line,
            message: e.to_string(),
        })?;
        let mut row = Vec::with_capacity(positions.len());
        let mut missing = false;
        for &p in &positions {
            let v = rec.get(p).unwrap_or("");
            if MISSING.contains(&v) {
                missing = true;
            }
            row.push(v.to_string());
        }
        if missing {
            dropped += 1;
            continue;
        }
        for (c, v) in schema.columns.iter().zip(&row) {
            if c.kind == ColumnKind::Numeric && v.parse::<f64>().map_or(true, |x| !x.is_finite()) {
                return Err(Error::Row {
                    line,
                    message: format!("column '{}': cannot parse '{v}' as a number", c.name),
                });
            }
        }
        rows.push(row);
    }
    Ok(RawTable {
        schema: schema.clone(),
        rows,
        dropped,
    })
}

/// Encoded design matrix. The last feature column is the constant bias.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub features: Matrix,
    pub labels: Vec<f64>,
    pub sensitive: Vec<f64>,
    pub feature_names: Vec<String>,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature dimension including the bias column.
    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn select(&self, idx: &[usize]) -> EncodedDataset {
        EncodedDataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            sensitive: idx.iter().map(|&i| self.sensitive[i]).collect(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Concatenate shards back into one dataset, preserving shard order.
    pub fn pooled(shards: &[ClientShard], feature_names: Vec<String>) -> Result<EncodedDataset> {
        let mats: Vec<&Matrix> = shards.iter().map(|s| &s.features).collect();
        Ok(EncodedDataset {
            features: Matrix::vstack(&mats)?,
            labels: shards.iter().flat_map(|s| s.labels.iter().copied()).collect(),
            sensitive: shards
                .iter()
                .flat_map(|s| s.sensitive.iter().copied())
                .collect(),
            feature_names,
        })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = self.feature_names.clone();
        header.push("label".into());
        header.push("sensitive".into());
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            rec.push(self.sensitive[i].to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Block {
    Numeric { col: usize, min: f64, max: f64 },
    Categorical { col: usize, levels: Vec<String> },
    Sensitive { col: usize },
}

/// Encoding statistics fitted on a set of rows and reusable on any other
/// table with the same schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    blocks: Vec<Block>,
    label_col: usize,
    positive_label: String,
    sensitive_col: usize,
    /// Sensitive value mapped to 1 (majority); anything else maps to 0.
    sensitive_majority: String,
    feature_names: Vec<String>,
}

impl Encoder {
    pub fn fit(raw: &RawTable, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Config("cannot fit an encoder on zero rows".into()));
        }
        let schema = &raw.schema;
        let mut blocks = Vec::new();
        let mut feature_names = Vec::new();
        for (j, c) in schema.columns.iter().enumerate() {
            match c.kind {
                ColumnKind::Numeric => {
                    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
                    for &i in rows {
                        let v: f64 = raw.rows[i][j].parse().expect("validated at load");
                        min = min.min(v);
                        max = max.max(v);
                    }
                    if max <= min {
                        warn!("numeric column '{}' is constant; encoded as 0.0", c.name);
                    }
                    blocks.push(Block::Numeric { col: j, min, max });
                    feature_names.push(c.name.clone());
                }
                ColumnKind::Categorical => {
                    let levels: BTreeSet<&str> =
                        rows.iter().map(|&i| raw.rows[i][j].as_str()).collect();
                    let levels: Vec<String> = levels.into_iter().map(String::from).collect();
                    feature_names.extend(levels.iter().map(|l| format!("{}={l}", c.name)));
                    blocks.push(Block::Categorical { col: j, levels });
                }
                ColumnKind::Sensitive => {
                    blocks.push(Block::Sensitive { col: j });
                    feature_names.push(c.name.clone());
                }
                ColumnKind::Label | ColumnKind::Ignore => {}
            }
        }
        feature_names.push("bias".into());

        let label_col = schema.index_of_kind(ColumnKind::Label);
        let label_values: BTreeSet<&str> = rows
            .iter()
            .map(|&i| raw.rows[i][label_col].as_str())
            .collect();
        let positive_label = match &schema.columns[label_col].positive {
            Some(p) => p.clone(),
            None => {
                if label_values.len() != 2 {
                    return Err(Error::Schema(format!(
                        "label column must be binary, found {} values",
                        label_values.len()
                    )));
                }
                label_values.iter().next_back().unwrap().to_string()
            }
        };
        if label_values.len() > 2 {
            return Err(Error::Schema(format!(
                "label column must be binary, found {} values",
                label_values.len()
            )));
        }

        let sensitive_col = schema.index_of_kind(ColumnKind::Sensitive);
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for &i in rows {
            *counts.entry(raw.rows[i][sensitive_col].as_str()).or_default() += 1;
        }
        if counts.len() > 2 {
            return Err(Error::Schema(format!(
                "sensitive column must be binary, found {} values",
                counts.len()
            )));
        }
        if counts.len() < 2 {
            warn!("sensitive column has a single value in the fitted rows");
        }
        // Highest count wins; ties go to the lexicographically smaller value.
        let sensitive_majority = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(v, _)| v.to_string())
            .unwrap();

        Ok(Self {
            blocks,
            label_col,
            positive_label,
            sensitive_col,
            sensitive_majority,
            feature_names,
        })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Feature dimension including bias.
    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn encode(&self, raw: &RawTable, rows: &[usize]) -> Result<EncodedDataset> {
        let d = self.dim();
        let mut features = Matrix::zeros(rows.len(), d);
        let mut labels = Vec::with_capacity(rows.len());
        let mut sensitive = Vec::with_capacity(rows.len());
        let mut unseen: HashMap<usize, usize> = HashMap::new();
        let lookups: Vec<Option<HashMap<&str, usize>>> = self
            .blocks
            .iter()
            .map(|b| match b {
                Block::Categorical { levels, .. } => Some(
                    levels
                        .iter()
                        .enumerate()
                        .map(|(k, l)| (l.as_str(), k))
                        .collect(),
                ),
                _ => None,
            })
            .collect();

        for (r, &i) in rows.iter().enumerate() {
            let src = &raw.rows[i];
            let out = features.row_mut(r);
            let mut at = 0;
            for (b, lookup) in self.blocks.iter().zip(&lookups) {
                match b {
                    Block::Numeric { col, min, max } => {
                        let v: f64 = src[*col].parse().map_err(|_| Error::Row {
                            line: i + 2,
                            message: format!("cannot parse '{}'", src[*col]),
                        })?;
                        out[at] = if max > min {
                            ((v - min) / (max - min)).clamp(0.0, 1.0)
                        } else {
                            0.0
                        };
                        at += 1;
                    }
                    Block::Categorical { col, levels } => {
                        match lookup.as_ref().unwrap().get(src[*col].as_str()) {
                            Some(&k) => out[at + k] = 1.0,
                            None => *unseen.entry(*col).or_default() += 1,
                        }
                        at += levels.len();
                    }
                    Block::Sensitive { col } => {
                        out[at] = self.sensitive_value(&src[*col]);
                        at += 1;
                    }
                }
            }
            out[d - 1] = 1.0;
            labels.push(if src[self.label_col] == self.positive_label {
                1.0
            } else {
                0.0
            });
            sensitive.push(self.sensitive_value(&src[self.sensitive_col]));
        }
        for (col, n) in unseen {
            warn!(
                "{n} rows carry categories of '{}' unseen during fitting; encoded as all-zero",
                raw.schema.columns[col].name
            );
        }
        Ok(EncodedDataset {
            features,
            labels,
            sensitive,
            feature_names: self.feature_names.clone(),
        })
    }

    fn sensitive_value(&self, v: &str) -> f64 {
        if v == self.sensitive_majority {
            1.0
        } else {
            0.0
        }
    }

    /// Recover the category of `column` from an encoded feature row.
    /// `None` for an all-zero block or an unknown column.
    pub fn decode_category<'a>(&'a self, raw: &RawTable, column: &str, row: &[f64]) -> Option<&'a str> {
        let target = raw.schema.index_of(column)?;
        let mut at = 0;
        for b in &self.blocks {
            match b {
                Block::Categorical { col, levels } => {
                    if *col == target {
                        return levels
                            .iter()
                            .enumerate()
                            .find(|(k, _)| row[at + k] == 1.0)
                            .map(|(_, l)| l.as_str());
                    }
                    at += levels.len();
                }
                _ => at += 1,
            }
        }
        None
    }
}

/// Fit an encoder on every row and encode the whole table.
pub fn encode(raw: &RawTable) -> Result<EncodedDataset> {
    let rows: Vec<usize> = (0..raw.len()).collect();
    Encoder::fit(raw, &rows)?.encode(raw, &rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientAssignment {
    /// Client 0 receives all group-A training rows, client 1 all group-B rows.
    ByGroup,
    /// Training rows are shuffled and dealt into near-equal shards.
    Even,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSplitSpec {
    /// Column whose value defines group A. `None` puts every row in group A.
    #[serde(default)]
    pub split_column: Option<String>,
    /// Values of `split_column` that make up group A.
    #[serde(default)]
    pub group_a: Vec<String>,
    pub train_fraction_group_a: f64,
    pub train_fraction_group_b: f64,
    pub client_assignment: ClientAssignment,
    pub num_clients: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ShiftSplitSpec {
    pub fn validate(&self) -> Result<()> {
        for f in [self.train_fraction_group_a, self.train_fraction_group_b] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("train fraction {f} outside [0, 1]")));
            }
        }
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be at least 1".into()));
        }
        if self.client_assignment == ClientAssignment::ByGroup && self.num_clients != 2 {
            return Err(Error::Config(
                "by_group assignment produces exactly two clients".into(),
            ));
        }
        Ok(())
    }
}

/// Row-index plan of a split over some table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Training rows, in shard order.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub shards: Vec<Vec<usize>>,
    /// Group-A membership of each test row (parallel to `test`).
    pub test_group_a: Vec<bool>,
}

pub fn plan_shift_split(group_a: &[bool], spec: &ShiftSplitSpec) -> Result<SplitPlan> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut a: Vec<usize> = (0..group_a.len()).filter(|&i| group_a[i]).collect();
    let mut b: Vec<usize> = (0..group_a.len()).filter(|&i| !group_a[i]).collect();
    a.shuffle(&mut rng);
    b.shuffle(&mut rng);
    let take_a = (spec.train_fraction_group_a * a.len() as f64).round() as usize;
    let take_b = (spec.train_fraction_group_b * b.len() as f64).round() as usize;
    let mut train_a = a[..take_a].to_vec();
    let mut train_b = b[..take_b].to_vec();
    train_a.sort_unstable();
    train_b.sort_unstable();

    let shards = match spec.client_assignment {
        ClientAssignment::ByGroup => vec![train_a.clone(), train_b.clone()],
        ClientAssignment::Even => {
            let mut pool: Vec<usize> = train_a.iter().chain(&train_b).copied().collect();
            pool.sort_unstable();
            pool.shuffle(&mut rng);
            let p = spec.num_clients;
            let (q, r) = (pool.len() / p, pool.len() % p);
            let mut out = Vec::with_capacity(p);
            let mut at = 0;
            for k in 0..p {
                let len = q + usize::from(k < r);
                out.push(pool[at..at + len].to_vec());
                at += len;
            }
            out
        }
    };
    if let Some(k) = shards.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!(
            "split leaves client {k} with an empty shard"
        )));
    }

    let mut in_train = vec![false; group_a.len()];
    for s in &shards {
        for &i in s {
            in_train[i] = true;
        }
    }
    let test: Vec<usize> = (0..group_a.len()).filter(|&i| !in_train[i]).collect();
    let test_group_a = test.iter().map(|&i| group_a[i]).collect();
    Ok(SplitPlan {
        train: shards.concat(),
        test,
        shards,
        test_group_a,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub features: Matrix,
    pub labels: Vec<f64>,
    pub sensitive: Vec<f64>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn from_dataset(client_id: usize, data: &EncodedDataset) -> Self {
        Self {
            client_id,
            features: data.features.clone(),
            labels: data.labels.clone(),
            sensitive: data.sensitive.clone(),
        }
    }
}

/// Output of a shift split over an encoded dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: EncodedDataset,
    pub test: EncodedDataset,
    pub shards: Vec<ClientShard>,
    pub test_group_a: Vec<bool>,
    pub assignment: ClientAssignment,
}

impl Split {
    pub fn from_plan(data: &EncodedDataset, plan: &SplitPlan, assignment: ClientAssignment) -> Self {
        let shards = plan
            .shards
            .iter()
            .enumerate()
            .map(|(k, rows)| ClientShard::from_dataset(k, &data.select(rows)))
            .collect();
        Split {
            train: data.select(&plan.train),
            test: data.select(&plan.test),
            shards,
            test_group_a: plan.test_group_a.clone(),
            assignment,
        }
    }

    pub fn num_train(&self) -> usize {
        self.train.len()
    }
}

/// Split an already-encoded dataset. `group_a` flags group-A rows.
pub fn shift_split(data: &EncodedDataset, group_a: &[bool], spec: &ShiftSplitSpec) -> Result<Split> {
    if group_a.len() != data.len() {
        return Err(Error::Dimension(format!(
            "{} group flags for {} rows",
            group_a.len(),
            data.len()
        )));
    }
    let plan = plan_shift_split(group_a, spec)?;
    Ok(Split::from_plan(data, &plan, spec.client_assignment))
}

/// A prepared experiment input: the split plus the encoder fitted on its
/// training rows.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: Split,
    pub plan: SplitPlan,
    pub encoder: Encoder,
}

/// Split raw rows, fit the encoder on the training rows only, and encode.
/// Test rows are scaled with training statistics and clipped to [0, 1].
pub fn prepare(raw: &RawTable, spec: &ShiftSplitSpec) -> Result<Prepared> {
    if let Some(c) = &spec.split_column {
        if raw.schema.index_of(c).is_none() {
            return Err(Error::Config(format!("split column '{c}' not in schema")));
        }
    }
    let groups = raw.group_membership(spec.split_column.as_deref(), &spec.group_a)?;
    let plan = plan_shift_split(&groups, spec)?;
    let encoder = Encoder::fit(raw, &plan.train)?;
    let all: Vec<usize> = (0..raw.len()).collect();
    let encoded = encoder.encode(raw, &all)?;
    Ok(Prepared {
        split: Split::from_plan(&encoded, &plan, spec.client_assignment),
        plan,
        encoder,
    })
}
