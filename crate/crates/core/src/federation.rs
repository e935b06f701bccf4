//! Client and server sides of the training protocol and the messages they
//! exchange. Only fixed-length coefficient vectors, scalars and weight
//! vectors cross the boundary; raw rows stay with their client (kernel
//! centers excepted, see [`BasisNomination`]).
//!
//! Protocol:
//!
//! 1. init: clients report `(n_k, sum s)`, the server fixes `s_bar` and the
//!    kernel basis, clients report `psi_theta` and the unit-weight `phi_C`,
//!    the server sets `alpha^0` uniform on the sum-to-one plane.
//! 2. each round: clients fit `w` from the broadcast and return a
//!    [`CoefficientBundle`]; the server solves for `alpha`, averages `w`
//!    and sums `phi_C`.

use std::io::Write;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ClientShard;
use crate::error::{Error, Result};
use crate::fairness::{
    covariance_coeff_alpha, covariance_coeff_w, local_covariance_coeff_w, FairnessStats,
};
use crate::kernel::{
    basis_quotas, kernel_matrix, nominate_centers, KernelBasis, KernelMatrix, MixtureCoefficients,
};
use crate::linalg::{add_assign, dot, Matrix};
use crate::lpsolve::{self, AlphaLP, LpStatus, LpTolerances};
use crate::model::{fit_local, sample_loss, sigmoid, OptimizerSpec, PenaltySpec, WeightVector};

/// Which fairness penalty a client adds to its local objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    Off,
    /// Global covariance under the current reweighing.
    Reweighted,
    /// Global covariance with unit weights.
    Unweighted,
    /// Covariance of the client's own data only.
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisSpec {
    Gaussian { m: usize, sigma: f64, seed: u64 },
    Constant,
    ClientIndicator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub basis: BasisSpec,
    pub bound: f64,
    pub lambda: f64,
    pub tau: f64,
    pub penalty: PenaltyMode,
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub normalize_loss_globally: bool,
    /// Solve for `alpha` each round; otherwise `alpha^0` is kept.
    pub update_alpha: bool,
    /// Include `|psi_C . alpha| <= tau` in the server LP.
    pub lp_fairness_row: bool,
    #[serde(default)]
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub client_id: usize,
    pub n_k: usize,
    pub sum_s: f64,
}

/// Kernel centers drawn from one client's rows. These are training points
/// and therefore the one place where sample values leave a client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisNomination {
    pub client_id: usize,
    pub centers: Matrix,
}

/// Sent once after the basis is fixed. `phi_c_unit` is the covariance
/// coefficient under `alpha = (1, ..., 1)`; the server rescales it to
/// `alpha^0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub client_id: usize,
    pub psi_theta: Vec<f64>,
    pub phi_c_unit: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBundle {
    pub client_id: usize,
    pub round: usize,
    pub psi_l: Vec<f64>,
    pub psi_theta: Vec<f64>,
    pub psi_c: Vec<f64>,
    pub phi_c: Vec<f64>,
    pub w_local: WeightVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerBroadcast {
    pub round: usize,
    pub w_avg: WeightVector,
    pub alpha: MixtureCoefficients,
    pub phi_c_global: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum Message {
    Stats(StatsReport),
    Nomination(BasisNomination),
    Init(InitReport),
    Bundle(CoefficientBundle),
    Broadcast(ServerBroadcast),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    /// `None` during initialization.
    pub round: Option<usize>,
    pub sender: String,
    #[serde(flatten)]
    pub message: Message,
}

enum Sink {
    Off,
    Memory(Vec<LogLine>),
    Writer(Box<dyn Write + Send>),
}

/// Line-delimited JSON log of every protocol message.
pub struct MessageLog {
    sink: Sink,
}

impl MessageLog {
    pub fn disabled() -> Self {
        Self { sink: Sink::Off }
    }

    pub fn memory() -> Self {
        Self {
            sink: Sink::Memory(Vec::new()),
        }
    }

    pub fn to_writer(w: Box<dyn Write + Send>) -> Self {
        Self {
            sink: Sink::Writer(w),
        }
    }

    pub fn is_enabled(&self) -> bool {
        !matches!(self.sink, Sink::Off)
    }

    pub fn record(&mut self, round: Option<usize>, sender: String, message: &Message) -> Result<()> {
        match &mut self.sink {
            Sink::Off => {}
            Sink::Memory(lines) => lines.push(LogLine {
                round,
                sender,
                message: message.clone(),
            }),
            Sink::Writer(w) => {
                let line = LogLine {
                    round,
                    sender,
                    message: message.clone(),
                };
                serde_json::to_writer(&mut *w, &line)?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn lines(&self) -> &[LogLine] {
        match &self.sink {
            Sink::Memory(lines) => lines,
            _ => &[],
        }
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Sink::Writer(w) = &mut self.sink {
            w.flush()?;
        }
        Ok(())
    }
}

fn client_name(id: usize) -> String {
    format!("client-{id}")
}

const SERVER: &str = "server";

pub struct ClientState {
    pub shard: ClientShard,
    pub kernel_matrix: KernelMatrix,
    pub w: WeightVector,
    pub last_broadcast: Option<ServerBroadcast>,
    /// `psi_{theta,k}`; fixed because the data and basis are.
    psi_theta: Vec<f64>,
}

impl ClientState {
    pub fn new(shard: ClientShard, basis: &KernelBasis, stats: &FairnessStats) -> Result<Self> {
        let kernel_matrix = kernel_matrix(&shard, basis)?;
        let inv = 1.0 / stats.n_total as f64;
        let psi_theta = kernel_matrix
            .values
            .col_sums()
            .into_iter()
            .map(|v| v * inv)
            .collect();
        Ok(Self {
            w: WeightVector::zeros(shard.dim()),
            shard,
            kernel_matrix,
            last_broadcast: None,
            psi_theta,
        })
    }

    pub fn psi_theta(&self) -> &[f64] {
        &self.psi_theta
    }

    fn expected_round(&self) -> usize {
        self.last_broadcast.as_ref().map_or(0, |b| b.round + 1)
    }

    fn init_report(&self, stats: &FairnessStats, mode: PenaltyMode) -> InitReport {
        let theta = match mode {
            PenaltyMode::Unweighted => vec![1.0; self.shard.len()],
            _ => self.kernel_matrix.values.mul_vec(&vec![1.0; self.kernel_matrix.cols()]),
        };
        InitReport {
            client_id: self.shard.client_id,
            psi_theta: self.psi_theta.clone(),
            phi_c_unit: covariance_coeff_w(&self.shard, &theta, stats),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub round: usize,
    pub bundles: Vec<CoefficientBundle>,
    pub alpha: MixtureCoefficients,
    pub w_avg: WeightVector,
    pub phi_c_global: Vec<f64>,
    pub stats: FairnessStats,
    pub basis: KernelBasis,
    pub lp_tolerances: LpTolerances,
}

/// What happened on the server in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub round: usize,
    pub lp_status: Option<LpStatus>,
    pub slack_used: f64,
    /// `psi_theta . alpha` after the update.
    pub sum_to_one: f64,
    /// Reweighed training loss `psi_L . alpha` before and after the update.
    pub loss_before: f64,
    pub loss_after: f64,
    /// `psi_C . alpha` after the update.
    pub alpha_covariance: f64,
    #[serde(skip)]
    pub lp: Option<AlphaLP>,
}

pub struct Protocol {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub broadcast: ServerBroadcast,
}

/// Stats round, basis selection and `alpha^0`.
pub fn init_protocol(shards: Vec<ClientShard>, cfg: &ProtocolConfig, log: &mut MessageLog) -> Result<Protocol> {
    if shards.is_empty() {
        return Err(Error::Protocol("no client shards".into()));
    }
    for (k, s) in shards.iter().enumerate() {
        if s.client_id != k {
            return Err(Error::Protocol(format!("shard {k} carries client id {}", s.client_id)));
        }
        if s.is_empty() {
            return Err(Error::Protocol(format!("client {k} has no samples")));
        }
    }
    let dim = shards[0].dim();
    let mut reports = Vec::with_capacity(shards.len());
    for s in &shards {
        let r = StatsReport {
            client_id: s.client_id,
            n_k: s.len(),
            sum_s: s.sensitive.iter().sum(),
        };
        log.record(None, client_name(s.client_id), &Message::Stats(r.clone()))?;
        reports.push((r.n_k, r.sum_s));
    }
    let stats = FairnessStats::from_reports(&reports)?;

    let basis = match &cfg.basis {
        BasisSpec::Gaussian { m, sigma, seed } => {
            let sizes: Vec<usize> = reports.iter().map(|r| r.0).collect();
            let quotas = basis_quotas(&sizes, *m)?;
            let mut parts = Vec::with_capacity(shards.len());
            for (s, &q) in shards.iter().zip(&quotas) {
                let centers = nominate_centers(s, q, *seed);
                log.record(
                    None,
                    client_name(s.client_id),
                    &Message::Nomination(BasisNomination {
                        client_id: s.client_id,
                        centers: centers.clone(),
                    }),
                )?;
                parts.push(centers);
            }
            let refs: Vec<&Matrix> = parts.iter().collect();
            KernelBasis::gaussian(Matrix::vstack(&refs)?, *sigma, cfg.bound)?
        }
        BasisSpec::Constant => KernelBasis::constant(cfg.bound)?,
        BasisSpec::ClientIndicator => KernelBasis::client_indicator(shards.len(), cfg.bound)?,
    };

    let build = |s: ClientShard| ClientState::new(s, &basis, &stats);
    let clients: Vec<ClientState> = if cfg.parallel {
        shards.into_par_iter().map(build).collect::<Result<_>>()?
    } else {
        shards.into_iter().map(build).collect::<Result<_>>()?
    };

    let m = basis.len();
    let mut psi_theta = vec![0.0; m];
    let mut phi_unit = vec![0.0; dim];
    for c in &clients {
        let r = c.init_report(&stats, cfg.penalty);
        log.record(None, client_name(r.client_id), &Message::Init(r.clone()))?;
        add_assign(&mut psi_theta, &r.psi_theta);
        add_assign(&mut phi_unit, &r.phi_c_unit);
    }
    let mass: f64 = psi_theta.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::Protocol("kernel mass is zero; no uniform alpha satisfies sum-to-one".into()));
    }
    let a0 = 1.0 / mass;
    if a0 > cfg.bound {
        return Err(Error::Protocol(format!(
            "uniform alpha {a0} exceeds the bound {}",
            cfg.bound
        )));
    }
    let alpha = MixtureCoefficients(vec![a0; m]);
    let phi_c_global: Vec<f64> = match cfg.penalty {
        PenaltyMode::Unweighted => phi_unit,
        _ => phi_unit.into_iter().map(|v| v * a0).collect(),
    };
    let broadcast = ServerBroadcast {
        round: 0,
        w_avg: WeightVector::zeros(dim),
        alpha: alpha.clone(),
        phi_c_global: phi_c_global.clone(),
    };
    log.record(Some(0), SERVER.into(), &Message::Broadcast(broadcast.clone()))?;
    let server = ServerState {
        round: 0,
        bundles: Vec::new(),
        alpha,
        w_avg: WeightVector::zeros(dim),
        phi_c_global,
        stats,
        basis,
        lp_tolerances: LpTolerances::default(),
    };
    Ok(Protocol {
        server,
        clients,
        broadcast,
    })
}

fn check_finite(name: &str, client: usize, v: &[f64]) -> Result<()> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "client {client}: {name}[{i}] = {}",
            v[i]
        )));
    }
    Ok(())
}

/// Fit `w` from the broadcast, then compute the coefficient bundle at the
/// new `w`.
pub fn client_round(
    state: &mut ClientState,
    bc: &ServerBroadcast,
    stats: &FairnessStats,
    cfg: &ProtocolConfig,
) -> Result<CoefficientBundle> {
    let expected = state.expected_round();
    if bc.round != expected {
        return Err(Error::Protocol(format!(
            "client {} expected round {expected}, got {}",
            state.shard.client_id, bc.round
        )));
    }
    let shard = &state.shard;
    let km = &state.kernel_matrix;
    let theta = crate::kernel::theta(km, &bc.alpha)?;
    let dim = shard.dim();

    let (lambda, phi) = match cfg.penalty {
        PenaltyMode::Off => (0.0, vec![0.0; dim]),
        PenaltyMode::Reweighted | PenaltyMode::Unweighted => (cfg.lambda, bc.phi_c_global.clone()),
        PenaltyMode::Local => (cfg.lambda, local_covariance_coeff_w(shard, &theta)),
    };
    let penalty = PenaltySpec {
        lambda,
        tau: cfg.tau,
        phi_c: phi,
        n_total: stats.n_total,
        normalize_loss_globally: cfg.normalize_loss_globally,
    };
    let w = fit_local(&bc.w_avg, shard, &theta, &penalty, &cfg.optimizer)?;

    let inv = 1.0 / stats.n_total as f64;
    let losses: Vec<f64> = shard
        .features
        .iter_rows()
        .zip(&shard.labels)
        .map(|(x, &y)| sample_loss(sigmoid(dot(x, w.as_slice())), y, cfg.optimizer.clamp_eps))
        .collect();
    let psi_l: Vec<f64> = km.weighted_col_sums(&losses).into_iter().map(|v| v * inv).collect();
    let psi_c = covariance_coeff_alpha(shard, km, &w, stats);
    let phi_c = match cfg.penalty {
        PenaltyMode::Unweighted => covariance_coeff_w(shard, &vec![1.0; shard.len()], stats),
        _ => covariance_coeff_w(shard, &theta, stats),
    };
    let id = shard.client_id;
    check_finite("psi_L", id, &psi_l)?;
    check_finite("psi_C", id, &psi_c)?;
    check_finite("phi_C", id, &phi_c)?;
    check_finite("w", id, w.as_slice())?;

    state.w = w.clone();
    state.last_broadcast = Some(bc.clone());
    Ok(CoefficientBundle {
        client_id: id,
        round: bc.round,
        psi_l,
        psi_theta: state.psi_theta.clone(),
        psi_c,
        phi_c,
        w_local: w,
    })
}

fn sum_vectors<'a>(len: usize, vs: impl Iterator<Item = &'a Vec<f64>>) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for v in vs {
        add_assign(&mut acc, v);
    }
    acc
}

/// Aggregate bundles, solve the LP, average `w`. Requires one bundle per
/// client for the current round.
pub fn server_round(
    state: &mut ServerState,
    bundles: Vec<CoefficientBundle>,
    cfg: &ProtocolConfig,
) -> Result<(ServerBroadcast, RoundDiagnostics)> {
    let p = state.stats.per_client_counts.len();
    if bundles.len() != p {
        return Err(Error::Protocol(format!(
            "round {} has {} bundles for {p} clients",
            state.round,
            bundles.len()
        )));
    }
    let mut seen = vec![false; p];
    let m = state.alpha.len();
    for b in &bundles {
        if b.client_id >= p || std::mem::replace(&mut seen[b.client_id], true) {
            return Err(Error::Protocol(format!("unexpected bundle from client {}", b.client_id)));
        }
        if b.round != state.round {
            return Err(Error::Protocol(format!(
                "bundle from client {} is for round {}, server is at {}",
                b.client_id, b.round, state.round
            )));
        }
        if b.psi_l.len() != m || b.psi_theta.len() != m || b.psi_c.len() != m {
            return Err(Error::Dimension(format!("bundle from client {} has wrong length", b.client_id)));
        }
    }
    let dim = bundles[0].phi_c.len();
    let psi_l = sum_vectors(m, bundles.iter().map(|b| &b.psi_l));
    let psi_theta = sum_vectors(m, bundles.iter().map(|b| &b.psi_theta));
    let psi_c = sum_vectors(m, bundles.iter().map(|b| &b.psi_c));
    let phi_c = sum_vectors(dim, bundles.iter().map(|b| &b.phi_c));

    let loss_before = dot(&psi_l, state.alpha.as_slice());
    let mut diag = RoundDiagnostics {
        round: state.round,
        lp_status: None,
        slack_used: 0.0,
        sum_to_one: 0.0,
        loss_before,
        loss_after: loss_before,
        alpha_covariance: 0.0,
        lp: None,
    };
    if cfg.update_alpha {
        let lp = AlphaLP {
            objective: psi_l,
            equality: psi_theta.clone(),
            fairness_row: cfg.lp_fairness_row.then(|| psi_c.clone()),
            tau: cfg.tau,
            box_upper: state.basis.bound,
        };
        let sol = lpsolve::solve_with(&lp, &state.lp_tolerances)?;
        match sol.status {
            LpStatus::Error => {
                return Err(Error::Lp(format!("round {}: LP has no solution", state.round)));
            }
            LpStatus::InfeasibleRelaxed => warn!(
                "round {}: fairness rows relaxed by {:e}",
                state.round, sol.slack_used
            ),
            LpStatus::Optimal => {}
        }
        diag.lp_status = Some(sol.status);
        diag.slack_used = sol.slack_used;
        diag.loss_after = sol.objective_value;
        diag.lp = Some(lp);
        state.alpha = sol.alpha;
    }
    diag.sum_to_one = dot(&psi_theta, state.alpha.as_slice());
    diag.alpha_covariance = dot(&psi_c, state.alpha.as_slice());
    debug!(
        "round {}: loss {:.6} -> {:.6}, sum {:.3e}",
        state.round, diag.loss_before, diag.loss_after, diag.sum_to_one - 1.0
    );

    let ws: Vec<WeightVector> = {
        let mut sorted: Vec<&CoefficientBundle> = bundles.iter().collect();
        sorted.sort_by_key(|b| b.client_id);
        sorted.into_iter().map(|b| b.w_local.clone()).collect()
    };
    state.w_avg = WeightVector::average(&ws)?;
    state.phi_c_global = phi_c;
    state.bundles = bundles;
    state.round += 1;
    let bc = ServerBroadcast {
        round: state.round,
        w_avg: state.w_avg.clone(),
        alpha: state.alpha.clone(),
        phi_c_global: state.phi_c_global.clone(),
    };
    Ok((bc, diag))
}

/// One full round: every client, then the server. Messages go to `log`.
pub fn run_round(
    proto: &mut Protocol,
    cfg: &ProtocolConfig,
    log: &mut MessageLog,
) -> Result<RoundDiagnostics> {
    let bc = proto.broadcast.clone();
    let stats = proto.server.stats.clone();
    let bundles: Vec<CoefficientBundle> = if cfg.parallel {
        proto
            .clients
            .par_iter_mut()
            .map(|c| client_round(c, &bc, &stats, cfg))
            .collect::<Result<_>>()?
    } else {
        proto
            .clients
            .iter_mut()
            .map(|c| client_round(c, &bc, &stats, cfg))
            .collect::<Result<_>>()?
    };
    if log.is_enabled() {
        for b in &bundles {
            log.record(Some(b.round), client_name(b.client_id), &Message::Bundle(b.clone()))?;
        }
    }
    let (next, diag) = server_round(&mut proto.server, bundles, cfg)?;
    log.record(Some(next.round), SERVER.into(), &Message::Broadcast(next.clone()))?;
    proto.broadcast = next;
    Ok(diag)
}

/// Arrays anywhere in a serialized message whose length equals one of
/// `forbidden` (shard sizes). Returns the JSON paths of offenders.
pub fn privacy_violations(message: &Message, forbidden: &[usize]) -> Result<Vec<String>> {
    fn walk(v: &serde_json::Value, path: String, forbidden: &[usize], out: &mut Vec<String>) {
        match v {
            serde_json::Value::Array(items) => {
                if forbidden.contains(&items.len()) {
                    out.push(format!("{path} (length {})", items.len()));
                }
                for (i, item) in items.iter().enumerate() {
                    walk(item, format!("{path}[{i}]"), forbidden, out);
                }
            }
            serde_json::Value::Object(map) => {
                for (k, item) in map {
                    walk(item, format!("{path}.{k}"), forbidden, out);
                }
            }
            _ => {}
        }
    }
    let value = serde_json::to_value(message)?;
    let mut out = Vec::new();
    walk(&value, String::from("$"), forbidden, &mut out);
    Ok(out)
}
