//! Self-checks that compare the production code paths with slow, direct
//! reference computations on random instances.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::ClientShard;
use crate::error::{Error, Result};
use crate::federation::{
    client_round, init_protocol, BasisSpec, CoefficientBundle, MessageLog, PenaltyMode, ProtocolConfig,
    ServerBroadcast,
};
use crate::kernel::{BasisKind, MixtureCoefficients};
use crate::linalg::{dot, Matrix};
use crate::lpsolve::{brute_force_oracle, solve_with, AlphaLP, LpStatus, LpTolerances};
use crate::model::{loss_gradient, objective, OptimizerSpec, PenaltySpec, WeightVector, DEFAULT_CLAMP_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Lp,
    Gradient,
    Aggregation,
}

impl Check {
    pub const ALL: [Check; 3] = [Check::Lp, Check::Gradient, Check::Aggregation];

    pub fn name(self) -> &'static str {
        match self {
            Check::Lp => "lp",
            Check::Gradient => "gradient",
            Check::Aggregation => "aggregation",
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Check {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown check '{s}'; valid: lp, gradient, aggregation")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub check: Check,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Empty runs every check.
    pub only: Vec<Check>,
    pub seed: u64,
    pub lp_tolerances: LpTolerances,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            only: Vec::new(),
            seed: 0,
            lp_tolerances: LpTolerances::default(),
        }
    }
}

pub fn run_checks(opts: &VerifyOptions) -> Vec<CheckReport> {
    Check::ALL
        .into_iter()
        .filter(|c| opts.only.is_empty() || opts.only.contains(c))
        .map(|c| {
            let outcome = match c {
                Check::Lp => check_lp(opts.seed, &opts.lp_tolerances, 100),
                Check::Gradient => check_gradient(opts.seed, 50),
                Check::Aggregation => check_aggregation(opts.seed, 20),
            };
            match outcome {
                Ok((passed, detail)) => CheckReport { check: c, passed, detail },
                Err(e) => CheckReport {
                    check: c,
                    passed: false,
                    detail: format!("error: {e}"),
                },
            }
        })
        .collect()
}

/// Random LP with `m <= 4`; some are infeasible on the fairness rows.
pub fn random_lp<R: Rng>(rng: &mut R) -> AlphaLP {
    let m = rng.gen_range(1..=4);
    AlphaLP {
        objective: (0..m).map(|_| rng.gen_range(0.0..1.0)).collect(),
        equality: (0..m).map(|_| rng.gen_range(0.05..1.0)).collect(),
        fairness_row: if rng.gen_bool(0.8) {
            Some((0..m).map(|_| rng.gen_range(-1.0..1.0)).collect())
        } else {
            None
        },
        tau: rng.gen_range(0.0..0.3),
        box_upper: [1.0, 2.0, 5.0][rng.gen_range(0..3)],
    }
}

fn check_lp(seed: u64, tol: &LpTolerances, cases: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_gap: f64 = 0.0;
    let mut worst_violation: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..cases {
        let lp = random_lp(&mut rng);
        let s = solve_with(&lp, tol)?;
        let o = brute_force_oracle(&lp)?;
        if s.status != o.status {
            failures += 1;
            continue;
        }
        match s.status {
            LpStatus::Error => {}
            LpStatus::Optimal => {
                worst_gap = worst_gap.max(o.objective_value - s.objective_value);
                worst_violation = worst_violation.max(lp.max_violation(s.alpha.as_slice()));
            }
            LpStatus::InfeasibleRelaxed => {
                worst_gap = worst_gap.max(o.objective_value - s.objective_value);
                worst_gap = worst_gap.max((s.slack_used - o.slack_used).abs());
                let relaxed = AlphaLP {
                    tau: lp.tau + s.slack_used,
                    ..lp.clone()
                };
                worst_violation = worst_violation.max(relaxed.max_violation(s.alpha.as_slice()));
            }
        }
    }
    let passed = failures == 0 && worst_gap <= 1e-6 && worst_violation <= 1e-8;
    Ok((
        passed,
        format!(
            "{cases} instances, status mismatches {failures}, worst objective gap {worst_gap:.2e}, worst violation {worst_violation:.2e}"
        ),
    ))
}

fn random_shard<R: Rng>(rng: &mut R, id: usize, n: usize, d: usize) -> ClientShard {
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let mut r: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
        r.push(1.0);
        rows.push(r);
    }
    ClientShard {
        client_id: id,
        features: Matrix::from_rows(&rows).expect("rectangular"),
        labels: (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect(),
        sensitive: (0..n).map(|i| (i % 2) as f64).collect(),
    }
}

fn check_gradient(seed: u64, cases: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let lambda = [0.0, 2.0, 100.0][case % 3];
        let n = rng.gen_range(5..30);
        let d = rng.gen_range(1..6);
        let shard = random_shard(&mut rng, 0, n, d);
        let theta: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
        let penalty = PenaltySpec {
            lambda,
            tau: rng.gen_range(0.0..0.1),
            phi_c: (0..=d).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            n_total: n + rng.gen_range(0..50),
            normalize_loss_globally: rng.gen_bool(0.5),
        };
        let w = WeightVector((0..=d).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let g = loss_gradient(&w, &shard, &theta, &penalty)?;
        let h = 1e-6;
        let mut fd = vec![0.0; d + 1];
        for j in 0..=d {
            let mut up = w.clone();
            let mut down = w.clone();
            up.0[j] += h;
            down.0[j] -= h;
            fd[j] = (objective(&up, &shard, &theta, &penalty, DEFAULT_CLAMP_EPS)?
                - objective(&down, &shard, &theta, &penalty, DEFAULT_CLAMP_EPS)?)
                / (2.0 * h);
        }
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = dot(&g, &g).sqrt().max(dot(&fd, &fd).sqrt()).max(1e-8);
        worst = worst.max(diff / scale);
    }
    Ok((
        worst <= 1e-4,
        format!("{cases} instances, worst relative error {worst:.2e}"),
    ))
}

/// Bundle sums from the protocol against sums over the pooled rows,
/// evaluated with explicit loops.
fn check_aggregation(seed: u64, cases: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51f0);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let d = rng.gen_range(1..5);
        let shards: Vec<ClientShard> = (0..3)
            .map(|k| {
                let n = rng.gen_range(4..25);
                random_shard(&mut rng, k, n, d)
            })
            .collect();
        let m = rng.gen_range(1..6);
        let cfg = ProtocolConfig {
            basis: BasisSpec::Gaussian {
                m,
                sigma: rng.gen_range(0.5..2.0),
                seed: rng.gen(),
            },
            bound: 50.0,
            lambda: 0.0,
            tau: 0.05,
            penalty: PenaltyMode::Reweighted,
            optimizer: OptimizerSpec {
                epochs: 0,
                ..Default::default()
            },
            normalize_loss_globally: false,
            update_alpha: true,
            lp_fairness_row: true,
            parallel: false,
        };
        let mut proto = init_protocol(shards.clone(), &cfg, &mut MessageLog::disabled())?;
        let alpha = MixtureCoefficients((0..m).map(|_| rng.gen_range(0.0..2.0)).collect());
        let w = WeightVector((0..=d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let bc = ServerBroadcast {
            round: 0,
            w_avg: w.clone(),
            alpha: alpha.clone(),
            phi_c_global: vec![0.0; d + 1],
        };
        let stats = proto.server.stats.clone();
        let bundles: Vec<CoefficientBundle> = proto
            .clients
            .iter_mut()
            .map(|c| client_round(c, &bc, &stats, &cfg))
            .collect::<Result<_>>()?;
        let sum = |f: &dyn Fn(&CoefficientBundle) -> &Vec<f64>, len: usize| {
            let mut acc = vec![0.0; len];
            for b in &bundles {
                for (a, v) in acc.iter_mut().zip(f(b)) {
                    *a += v;
                }
            }
            acc
        };

        let BasisKind::Gaussian { centers, sigma } = &proto.server.basis.kind else {
            return Err(Error::Protocol("expected a Gaussian basis".into()));
        };
        let n: usize = shards.iter().map(ClientShard::len).sum();
        let nf = n as f64;
        let s_bar = shards.iter().flat_map(|s| s.sensitive.iter()).sum::<f64>() / nf;
        let mut psi_l = vec![0.0; m];
        let mut psi_theta = vec![0.0; m];
        let mut psi_c = vec![0.0; m];
        let mut phi_c = vec![0.0; d + 1];
        for s in &shards {
            for i in 0..s.len() {
                let x = s.features.row(i);
                let k: Vec<f64> = (0..m)
                    .map(|j| {
                        let c = centers.row(j);
                        let d2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                        (-d2 / (2.0 * sigma * sigma)).exp()
                    })
                    .collect();
                let z: f64 = x.iter().zip(&w.0).map(|(a, b)| a * b).sum();
                let p = 1.0 / (1.0 + (-z).exp());
                let y = s.labels[i];
                let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
                let theta: f64 = k.iter().zip(&alpha.0).map(|(a, b)| a * b).sum();
                let ds = s.sensitive[i] - s_bar;
                for j in 0..m {
                    psi_l[j] += k[j] * loss / nf;
                    psi_theta[j] += k[j] / nf;
                    psi_c[j] += ds * k[j] * z / nf;
                }
                for (f, xv) in phi_c.iter_mut().zip(x) {
                    *f += ds * theta * xv / nf;
                }
            }
        }
        let pairs = [
            (sum(&|b| &b.psi_l, m), psi_l),
            (sum(&|b| &b.psi_theta, m), psi_theta),
            (sum(&|b| &b.psi_c, m), psi_c),
            (sum(&|b| &b.phi_c, d + 1), phi_c),
        ];
        for (a, b) in &pairs {
            worst = worst.max(crate::linalg::max_abs_diff(a, b));
        }
    }
    Ok((
        worst <= 1e-10,
        format!("{cases} instances, worst absolute difference {worst:.2e}"),
    ))
}
