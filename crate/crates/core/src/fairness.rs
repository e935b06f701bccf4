//! Risk-difference metrics and the linear coefficient vectors of the
//! decision-boundary covariance
//! `C(alpha, w) = (1/n) sum_i (s_i - s_bar) theta_alpha(x_i) (w . x_i)`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataset::ClientShard;
use crate::error::{Error, Result};
use crate::kernel::KernelMatrix;
use crate::linalg::{axpy, dot};
use crate::model::WeightVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessStats {
    pub s_bar: f64,
    pub n_total: usize,
    /// `(n_k, sum of s)` per client.
    pub per_client_counts: Vec<(usize, f64)>,
}

impl FairnessStats {
    /// Aggregate per-client `(n_k, sum s)` reports.
    pub fn from_reports(reports: &[(usize, f64)]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Protocol("no client statistics".into()));
        }
        let n_total: usize = reports.iter().map(|r| r.0).sum();
        if n_total == 0 {
            return Err(Error::Protocol("no training samples".into()));
        }
        let sum: f64 = reports.iter().map(|r| r.1).sum();
        let s_bar = sum / n_total as f64;
        if s_bar <= 0.0 || s_bar >= 1.0 {
            warn!("sensitive attribute is constant (mean {s_bar}); covariance constraint degenerates");
        }
        Ok(Self {
            s_bar,
            n_total,
            per_client_counts: reports.to_vec(),
        })
    }
}

pub fn compute_stats(shards: &[ClientShard]) -> Result<FairnessStats> {
    let reports: Vec<(usize, f64)> = shards
        .iter()
        .map(|s| (s.len(), s.sensitive.iter().sum()))
        .collect();
    FairnessStats::from_reports(&reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskDifferenceReport {
    pub rd: f64,
    /// Positive-prediction rate for `[S=0, S=1]`.
    pub group_rates: [f64; 2],
    pub group_counts: [usize; 2],
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{a} predictions for {b} sensitive values")));
    }
    Ok(())
}

pub fn risk_difference(predictions: &[f64], sensitive: &[f64]) -> Result<RiskDifferenceReport> {
    check_len(predictions.len(), sensitive.len())?;
    let mut pos = [0usize; 2];
    let mut cnt = [0usize; 2];
    for (&p, &s) in predictions.iter().zip(sensitive) {
        let g = usize::from(s >= 0.5);
        cnt[g] += 1;
        if p >= 0.5 {
            pos[g] += 1;
        }
    }
    if cnt[0] == 0 || cnt[1] == 0 {
        return Err(Error::UndefinedMetric(format!(
            "risk difference needs both groups, got sizes {cnt:?}"
        )));
    }
    let rates = [
        pos[0] as f64 / cnt[0] as f64,
        pos[1] as f64 / cnt[1] as f64,
    ];
    Ok(RiskDifferenceReport {
        rd: (rates[1] - rates[0]).abs(),
        group_rates: rates,
        group_counts: cnt,
    })
}

pub fn reweighted_risk_difference(predictions: &[f64], sensitive: &[f64], theta: &[f64]) -> Result<f64> {
    check_len(predictions.len(), sensitive.len())?;
    check_len(theta.len(), sensitive.len())?;
    let mut pos = [0.0; 2];
    let mut mass = [0.0; 2];
    for ((&p, &s), &t) in predictions.iter().zip(sensitive).zip(theta) {
        if t < 0.0 {
            return Err(Error::UndefinedMetric(format!("negative weight {t}")));
        }
        let g = usize::from(s >= 0.5);
        mass[g] += t;
        if p >= 0.5 {
            pos[g] += t;
        }
    }
    if mass[0] <= 0.0 || mass[1] <= 0.0 {
        return Err(Error::UndefinedMetric(format!(
            "weighted group mass is zero: {mass:?}"
        )));
    }
    Ok((pos[1] / mass[1] - pos[0] / mass[0]).abs())
}

/// `phi = scale * sum_i (s_i - s_bar) theta_i x_i`.
pub fn covariance_coeff_w_with(shard: &ClientShard, theta: &[f64], s_bar: f64, scale: f64) -> Vec<f64> {
    let mut phi = vec![0.0; shard.dim()];
    for ((x, &s), &t) in shard.features.iter_rows().zip(&shard.sensitive).zip(theta) {
        let c = (s - s_bar) * t;
        if c != 0.0 {
            axpy(c, x, &mut phi);
        }
    }
    phi.iter_mut().for_each(|v| *v *= scale);
    phi
}

/// Client share `phi_{C,k}` of the covariance, linear in `w`.
pub fn covariance_coeff_w(shard: &ClientShard, theta: &[f64], stats: &FairnessStats) -> Vec<f64> {
    covariance_coeff_w_with(shard, theta, stats.s_bar, 1.0 / stats.n_total as f64)
}

/// Covariance computed from the client's own data only: local mean of
/// `s`, normalized by `n_k`.
pub fn local_covariance_coeff_w(shard: &ClientShard, theta: &[f64]) -> Vec<f64> {
    let n = shard.len().max(1) as f64;
    let s_bar = shard.sensitive.iter().sum::<f64>() / n;
    covariance_coeff_w_with(shard, theta, s_bar, 1.0 / n)
}

/// Client share `psi_{C,k}` of the covariance, linear in `alpha`.
pub fn covariance_coeff_alpha(
    shard: &ClientShard,
    km: &KernelMatrix,
    w: &WeightVector,
    stats: &FairnessStats,
) -> Vec<f64> {
    let weights: Vec<f64> = shard
        .features
        .iter_rows()
        .zip(&shard.sensitive)
        .map(|(x, &s)| (s - stats.s_bar) * dot(x, w.as_slice()))
        .collect();
    let inv = 1.0 / stats.n_total as f64;
    km.weighted_col_sums(&weights)
        .into_iter()
        .map(|v| v * inv)
        .collect()
}
