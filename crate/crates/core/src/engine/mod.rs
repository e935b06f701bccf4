//! Training runs for every algorithm, per-round evaluation, and the
//! experiment grid.
//!
//! All algorithms share the federated protocol; they differ in the kernel
//! basis, whether `alpha` is re-solved each round, and which fairness
//! penalty the clients add:
//!
//! | algorithm        | basis      | alpha  | penalty    | LP fairness row |
//! |------------------|------------|--------|------------|-----------------|
//! | `fl`             | constant   | frozen | none       | -               |
//! | `fairfl`         | constant   | frozen | unweighted | -               |
//! | `afl`            | indicator  | LP     | none       | no              |
//! | `agnosticfair`   | Gaussian   | LP     | reweighted | yes             |
//! | `agnosticfair-a` | Gaussian   | LP     | none       | no              |
//! | `agnosticfair-b` | Gaussian   | LP     | unweighted | no              |
//! | `localfair`      | constant   | frozen | local      | -               |

mod grid;
mod synthetic;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClientAssignment, ClientShard, EncodedDataset, Split};
use crate::error::{Error, Result};
use crate::fairness::risk_difference;
use crate::federation::{
    init_protocol, run_round, BasisSpec, MessageLog, PenaltyMode, ProtocolConfig, RoundDiagnostics,
};
use crate::kernel::MixtureCoefficients;
use crate::lpsolve::{LpStatus, LpTolerances};
use crate::model::{accuracy, fit_local, predict_labels, OptimizerSpec, PenaltySpec, WeightVector};

pub use grid::{
    experiment_grid, splits_for, write_prepared, write_summary_csv, write_summary_toml, CellSummary, DatasetConfig,
    DatasetSource, ExperimentConfig, GridSummary, LoadedDataset, MeanStd, PreparedManifest, ShardEntry, SplitConfig,
};
pub use synthetic::{generate_synthetic, LabelRule, SyntheticData, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AlgorithmKind {
    Fl,
    FairFl,
    AflClientWeights,
    AgnosticFair,
    AgnosticFairA,
    AgnosticFairB,
    LocalFair,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 7] = [
        AlgorithmKind::Fl,
        AlgorithmKind::FairFl,
        AlgorithmKind::AflClientWeights,
        AlgorithmKind::AgnosticFair,
        AlgorithmKind::AgnosticFairA,
        AlgorithmKind::AgnosticFairB,
        AlgorithmKind::LocalFair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmKind::Fl => "fl",
            AlgorithmKind::FairFl => "fairfl",
            AlgorithmKind::AflClientWeights => "afl",
            AlgorithmKind::AgnosticFair => "agnosticfair",
            AlgorithmKind::AgnosticFairA => "agnosticfair-a",
            AlgorithmKind::AgnosticFairB => "agnosticfair-b",
            AlgorithmKind::LocalFair => "localfair",
        }
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|k| k.name()).collect()
    }

    pub fn optimizes_alpha(self) -> bool {
        matches!(
            self,
            AlgorithmKind::AflClientWeights
                | AlgorithmKind::AgnosticFair
                | AlgorithmKind::AgnosticFairA
                | AlgorithmKind::AgnosticFairB
        )
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgorithmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        let alias = match key.as_str() {
            "afl-client-weights" => "afl",
            "agnosticfair_a" => "agnosticfair-a",
            other => other,
        };
        Self::ALL
            .into_iter()
            .find(|k| k.name() == alias)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown algorithm '{s}'; valid names: {}",
                    Self::names().join(", ")
                ))
            })
    }
}

impl TryFrom<String> for AlgorithmKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AlgorithmKind> for String {
    fn from(k: AlgorithmKind) -> String {
        k.name().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub lambda: f64,
    pub tau: f64,
    /// Upper bound `B` on each mixture coefficient.
    pub bound: f64,
    pub sigma: f64,
    /// Number of Gaussian kernels.
    pub kernels: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub clamp_eps: f64,
    pub normalize_loss_globally: bool,
    pub parallel_clients: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            tau: 0.05,
            bound: 5.0,
            sigma: 1.0,
            kernels: 200,
            rounds: 30,
            local_epochs: 200,
            learning_rate: 0.1,
            seed: 0,
            clamp_eps: crate::model::DEFAULT_CLAMP_EPS,
            normalize_loss_globally: false,
            parallel_clients: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSpec {
    pub kind: AlgorithmKind,
    pub hyper: Hyper,
}

impl AlgorithmSpec {
    pub fn new(kind: AlgorithmKind, hyper: Hyper) -> Self {
        Self { kind, hyper }
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.hyper;
        let bad = |what: &str| Err(Error::Config(format!("{}: {what}", self.kind)));
        if !(h.lambda >= 0.0 && h.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(h.tau >= 0.0) {
            return bad("tau must be >= 0");
        }
        if !(h.bound > 0.0) {
            return bad("bound must be > 0");
        }
        if !(h.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(h.clamp_eps > 0.0 && h.clamp_eps < 0.5) {
            return bad("clamp_eps must lie in (0, 0.5)");
        }
        if matches!(
            self.kind,
            AlgorithmKind::AgnosticFair | AlgorithmKind::AgnosticFairA | AlgorithmKind::AgnosticFairB
        ) {
            if h.kernels == 0 {
                return bad("kernels must be >= 1");
            }
            if !(h.sigma > 0.0) {
                return bad("sigma must be > 0");
            }
        }
        Ok(())
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        use AlgorithmKind::*;
        let h = &self.hyper;
        let gaussian = BasisSpec::Gaussian {
            m: h.kernels,
            sigma: h.sigma,
            seed: h.seed,
        };
        let (basis, penalty, update_alpha, lp_fairness_row) = match self.kind {
            Fl => (BasisSpec::Constant, PenaltyMode::Off, false, false),
            FairFl => (BasisSpec::Constant, PenaltyMode::Unweighted, false, false),
            AflClientWeights => (BasisSpec::ClientIndicator, PenaltyMode::Off, true, false),
            AgnosticFair => (gaussian, PenaltyMode::Reweighted, true, true),
            AgnosticFairA => (gaussian, PenaltyMode::Off, true, false),
            AgnosticFairB => (gaussian, PenaltyMode::Unweighted, true, false),
            LocalFair => (BasisSpec::Constant, PenaltyMode::Local, false, false),
        };
        ProtocolConfig {
            basis,
            bound: h.bound,
            lambda: if penalty == PenaltyMode::Off { 0.0 } else { h.lambda },
            tau: h.tau,
            penalty,
            optimizer: OptimizerSpec {
                learning_rate: h.learning_rate,
                epochs: h.local_epochs,
                clamp_eps: h.clamp_eps,
            },
            normalize_loss_globally: h.normalize_loss_globally,
            update_alpha,
            lp_fairness_row,
            parallel: h.parallel_clients,
        }
    }
}

/// Metrics of the averaged model after one round. Round 0 is the initial
/// model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub train_rd: f64,
    pub test_rd: f64,
    /// Test RD of each client's population (see [`client_test_sets`]).
    pub client_test_rd: Vec<f64>,
    pub lp_status: Option<LpStatus>,
    pub slack_used: f64,
    pub sum_to_one: f64,
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub train_acc: f64,
    pub test_acc: f64,
    pub train_rd: f64,
    pub test_rd: f64,
    pub per_client_test_rd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub algorithm: AlgorithmKind,
    pub initial: RoundMetrics,
    pub per_round: Vec<RoundMetrics>,
    #[serde(rename = "final")]
    pub final_metrics: FinalMetrics,
    pub alpha_final: MixtureCoefficients,
    pub w_final: WeightVector,
    /// Averaged weights after each round.
    #[serde(skip)]
    pub w_history: Vec<WeightVector>,
    #[serde(skip)]
    pub diagnostics: Vec<RoundDiagnostics>,
}

/// Optional outputs of a run.
#[derive(Default)]
pub struct RunSinks {
    pub log: Option<MessageLog>,
    pub lp_dump: Option<Box<dyn Write + Send>>,
    /// Override for LP tolerances (fault injection in self-checks).
    pub lp_tolerances: Option<LpTolerances>,
}

/// Evaluation sets per client: under group assignment each client is
/// scored on the test rows of its own group; otherwise on its own shard.
pub fn client_test_sets(split: &Split) -> Vec<EncodedDataset> {
    match split.assignment {
        ClientAssignment::ByGroup if split.shards.len() == 2 => {
            let a: Vec<usize> = (0..split.test.len()).filter(|&i| split.test_group_a[i]).collect();
            let b: Vec<usize> = (0..split.test.len()).filter(|&i| !split.test_group_a[i]).collect();
            vec![split.test.select(&a), split.test.select(&b)]
        }
        _ => split
            .shards
            .iter()
            .map(|s| EncodedDataset {
                features: s.features.clone(),
                labels: s.labels.clone(),
                sensitive: s.sensitive.clone(),
                feature_names: split.train.feature_names.clone(),
            })
            .collect(),
    }
}

fn rd_or_nan(w: &WeightVector, data: &EncodedDataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let pred = predict_labels(w, &data.features)?;
    Ok(match risk_difference(&pred, &data.sensitive) {
        Ok(r) => r.rd,
        Err(Error::UndefinedMetric(_)) => f64::NAN,
        Err(e) => return Err(e),
    })
}

fn acc_rd(w: &WeightVector, data: &EncodedDataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let pred = predict_labels(w, &data.features)?;
    let acc = accuracy(&pred, &data.labels);
    let rd = match risk_difference(&pred, &data.sensitive) {
        Ok(r) => r.rd,
        Err(Error::UndefinedMetric(m)) => {
            warn!("risk difference undefined: {m}");
            f64::NAN
        }
        Err(e) => return Err(e),
    };
    Ok((acc, rd))
}

struct Evaluator<'a> {
    split: &'a Split,
    client_sets: Vec<EncodedDataset>,
}

impl<'a> Evaluator<'a> {
    fn new(split: &'a Split) -> Self {
        Self {
            split,
            client_sets: client_test_sets(split),
        }
    }

    fn metrics(&self, round: usize, w: &WeightVector, diag: Option<&RoundDiagnostics>) -> Result<RoundMetrics> {
        let (train_acc, train_rd) = acc_rd(w, &self.split.train)?;
        let (test_acc, test_rd) = acc_rd(w, &self.split.test)?;
        let client_test_rd = self
            .client_sets
            .iter()
            .map(|d| rd_or_nan(w, d))
            .collect::<Result<_>>()?;
        Ok(RoundMetrics {
            round,
            train_acc,
            test_acc,
            train_rd,
            test_rd,
            client_test_rd,
            lp_status: diag.and_then(|d| d.lp_status),
            slack_used: diag.map_or(0.0, |d| d.slack_used),
            sum_to_one: diag.map_or(f64::NAN, |d| d.sum_to_one),
            loss_before: diag.map_or(f64::NAN, |d| d.loss_before),
            loss_after: diag.map_or(f64::NAN, |d| d.loss_after),
        })
    }
}

fn finish(
    kind: AlgorithmKind,
    initial: RoundMetrics,
    per_round: Vec<RoundMetrics>,
    alpha: MixtureCoefficients,
    w: WeightVector,
    w_history: Vec<WeightVector>,
    diagnostics: Vec<RoundDiagnostics>,
) -> RunResult {
    let last = per_round.last().unwrap_or(&initial);
    let final_metrics = FinalMetrics {
        train_acc: last.train_acc,
        test_acc: last.test_acc,
        train_rd: last.train_rd,
        test_rd: last.test_rd,
        per_client_test_rd: last.client_test_rd.clone(),
    };
    RunResult {
        algorithm: kind,
        initial,
        per_round,
        final_metrics,
        alpha_final: alpha,
        w_final: w,
        w_history,
        diagnostics,
    }
}

/// Run `spec` on `split`. On a round failure the rounds completed so far
/// are returned together with the error.
pub fn run_partial(spec: &AlgorithmSpec, split: &Split, sinks: &mut RunSinks) -> (Option<RunResult>, Option<Error>) {
    if let Err(e) = spec.validate() {
        return (None, Some(e));
    }
    let cfg = spec.protocol_config();
    let mut disabled = MessageLog::disabled();
    let log = sinks.log.as_mut().unwrap_or(&mut disabled);
    let mut proto = match init_protocol(split.shards.clone(), &cfg, log) {
        Ok(p) => p,
        Err(e) => return (None, Some(e)),
    };
    if let Some(t) = sinks.lp_tolerances {
        proto.server.lp_tolerances = t;
    }
    let eval = Evaluator::new(split);
    let initial = match eval.metrics(0, &proto.broadcast.w_avg, None) {
        Ok(m) => m,
        Err(e) => return (None, Some(e)),
    };
    let mut per_round = Vec::with_capacity(spec.hyper.rounds);
    let mut w_history = Vec::with_capacity(spec.hyper.rounds);
    let mut diagnostics = Vec::with_capacity(spec.hyper.rounds);
    let mut failure = None;
    for t in 0..spec.hyper.rounds {
        let step = run_round(&mut proto, &cfg, log).and_then(|diag| {
            if let (Some(out), Some(lp)) = (sinks.lp_dump.as_mut(), diag.lp.as_ref()) {
                writeln!(out, "# round {}", t + 1)?;
                lp.write_dump(&mut *out)?;
            }
            let m = eval.metrics(t + 1, &proto.broadcast.w_avg, Some(&diag))?;
            Ok((diag, m))
        });
        match step {
            Ok((diag, m)) => {
                info!(
                    "{} round {}/{}: test acc {:.4}, test rd {:.4}",
                    spec.kind,
                    t + 1,
                    spec.hyper.rounds,
                    m.test_acc,
                    m.test_rd
                );
                per_round.push(m);
                w_history.push(proto.broadcast.w_avg.clone());
                diagnostics.push(diag);
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    if let Err(e) = log.flush() {
        failure.get_or_insert(e);
    }
    let result = finish(
        spec.kind,
        initial,
        per_round,
        proto.broadcast.alpha.clone(),
        proto.broadcast.w_avg.clone(),
        w_history,
        diagnostics,
    );
    (Some(result), failure)
}

pub fn run(spec: &AlgorithmSpec, split: &Split) -> Result<RunResult> {
    run_with(spec, split, &mut RunSinks::default())
}

pub fn run_with(spec: &AlgorithmSpec, split: &Split, sinks: &mut RunSinks) -> Result<RunResult> {
    match run_partial(spec, split, sinks) {
        (Some(r), None) => Ok(r),
        (_, Some(e)) => Err(e),
        (None, None) => unreachable!("run produced neither result nor error"),
    }
}

/// Plain federated averaging written out directly: every round each client
/// fits from the average, then the server averages. Returns the average
/// after each round.
pub fn fedavg_direct(shards: &[ClientShard], rounds: usize, opt: &OptimizerSpec) -> Result<Vec<WeightVector>> {
    let first = shards
        .first()
        .ok_or_else(|| Error::Protocol("no client shards".into()))?;
    let n: usize = shards.iter().map(ClientShard::len).sum();
    let penalty = PenaltySpec::none(first.dim(), n);
    let mut w = WeightVector::zeros(first.dim());
    let mut history = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let locals = shards
            .iter()
            .map(|s| fit_local(&w, s, &vec![1.0; s.len()], &penalty, opt))
            .collect::<Result<Vec<_>>>()?;
        w = WeightVector::average(&locals)?;
        history.push(w.clone());
    }
    Ok(history)
}

/// Unweighted logistic regression on pooled data.
pub fn fit_centralized(data: &EncodedDataset, opt: &OptimizerSpec) -> Result<WeightVector> {
    let shard = ClientShard::from_dataset(0, data);
    let penalty = PenaltySpec::none(data.dim(), data.len());
    fit_local(&WeightVector::zeros(data.dim()), &shard, &vec![1.0; data.len()], &penalty, opt)
}

/// Per-round CSV: one row per completed round.
pub fn write_round_csv<W: Write>(result: &RunResult, w: W) -> Result<()> {
    let clients = result.initial.client_test_rd.len();
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["round", "train_acc", "test_acc", "train_rd", "test_rd"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..clients).map(|k| format!("client_{k}_test_rd")));
    header.extend(
        ["lp_status", "slack_used", "sum_to_one", "loss_before", "loss_after"]
            .iter()
            .map(|s| s.to_string()),
    );
    out.write_record(&header)?;
    for m in &result.per_round {
        let mut rec = vec![
            m.round.to_string(),
            m.train_acc.to_string(),
            m.test_acc.to_string(),
            m.train_rd.to_string(),
            m.test_rd.to_string(),
        ];
        rec.extend(m.client_test_rd.iter().map(|v| v.to_string()));
        rec.push(m.lp_status.map_or(String::from("none"), |s| s.to_string()));
        rec.extend([m.slack_used, m.sum_to_one, m.loss_before, m.loss_after].map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_result_json<W: Write>(result: &RunResult, w: W) -> Result<()> {
    serde_json::to_writer_pretty(w, result)?;
    Ok(())
}
