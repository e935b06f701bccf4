//! Logistic-regression learner with per-sample weights and a squared
//! fairness penalty.
//!
//! Client objective, for shard `k` with weights `theta`:
//!
//! ```text
//! J(w) = (1/n_k) sum_i theta_i l_i(w) + lambda (w . phi_C - tau)^2
//! ```
//!
//! where `phi_C` is the global covariance coefficient vector, so that
//! `w . phi_C` equals the reweighed decision-boundary covariance.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::ClientShard;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};

/// Logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]` before `exp`.
pub const LOGIT_CLAMP: f64 = 30.0;
pub const DEFAULT_CLAMP_EPS: f64 = 1e-12;
pub const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// One header row of feature names, one row of weights.
    pub fn write_csv<W: Write>(&self, names: &[String], w: W) -> Result<()> {
        if names.len() != self.len() {
            return Err(Error::Dimension(format!(
                "{} names for {} weights",
                names.len(),
                self.len()
            )));
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(names)?;
        out.write_record(self.0.iter().map(|v| v.to_string()))?;
        out.flush()?;
        Ok(())
    }

    /// Element-wise mean of client weights.
    pub fn average(ws: &[WeightVector]) -> Result<WeightVector> {
        let first = ws
            .first()
            .ok_or_else(|| Error::Protocol("no weights to average".into()))?;
        let mut acc = vec![0.0; first.len()];
        for w in ws {
            if w.len() != acc.len() {
                return Err(Error::Dimension("weight vectors differ in length".into()));
            }
            crate::linalg::add_assign(&mut acc, &w.0);
        }
        let p = ws.len() as f64;
        Ok(WeightVector(acc.into_iter().map(|v| v / p).collect()))
    }
}

fn check_dims(w: &WeightVector, features: &Matrix) -> Result<()> {
    if w.len() != features.cols() {
        return Err(Error::Dimension(format!(
            "weights have {} entries, features {} columns",
            w.len(),
            features.cols()
        )));
    }
    Ok(())
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).exp())
}

/// Log-loss of one sample with the probability clamped to `[eps, 1 - eps]`.
#[inline]
pub fn sample_loss(p: f64, y: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    if y >= 0.5 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn predict_proba(w: &WeightVector, features: &Matrix) -> Result<Vec<f64>> {
    check_dims(w, features)?;
    Ok(features
        .iter_rows()
        .map(|x| sigmoid(dot(x, w.as_slice())))
        .collect())
}

/// Hard labels: 1 iff the probability is at least 0.5.
pub fn predict_labels(w: &WeightVector, features: &Matrix) -> Result<Vec<f64>> {
    Ok(predict_proba(w, features)?
        .into_iter()
        .map(|p| if p >= 0.5 { 1.0 } else { 0.0 })
        .collect())
}

pub fn accuracy(predictions: &[f64], labels: &[f64]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Signed margin `w . x` (bias included, not normalized by `|w|`).
pub fn boundary_distance(w: &WeightVector, features: &Matrix) -> Result<Vec<f64>> {
    check_dims(w, features)?;
    Ok(features.mul_vec(w.as_slice()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// `(1/n) sum_i theta_i l_i` with the global sample count `n`.
    pub weighted_loss: f64,
    pub per_sample_loss: Vec<f64>,
}

pub fn weighted_loss(
    w: &WeightVector,
    shard: &ClientShard,
    theta: &[f64],
    n_total: usize,
    eps: f64,
) -> Result<LossReport> {
    check_dims(w, &shard.features)?;
    check_theta(shard, theta)?;
    let per_sample_loss: Vec<f64> = shard
        .features
        .iter_rows()
        .zip(&shard.labels)
        .map(|(x, &y)| sample_loss(sigmoid(dot(x, w.as_slice())), y, eps))
        .collect();
    let total: f64 = per_sample_loss.iter().zip(theta).map(|(l, t)| l * t).sum();
    Ok(LossReport {
        weighted_loss: total / n_total as f64,
        per_sample_loss,
    })
}

fn check_theta(shard: &ClientShard, theta: &[f64]) -> Result<()> {
    if theta.len() != shard.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} samples",
            theta.len(),
            shard.len()
        )));
    }
    Ok(())
}

/// Fairness penalty `lambda (w . phi_c - tau)^2` plus the normalization
/// of the loss term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub lambda: f64,
    pub tau: f64,
    pub phi_c: Vec<f64>,
    /// Global training size `n`.
    pub n_total: usize,
    /// Divide the loss term by `n` instead of the local `n_k`.
    #[serde(default)]
    pub normalize_loss_globally: bool,
}

impl PenaltySpec {
    /// No fairness term.
    pub fn none(dim: usize, n_total: usize) -> Self {
        Self {
            lambda: 0.0,
            tau: 0.0,
            phi_c: vec![0.0; dim],
            n_total,
            normalize_loss_globally: false,
        }
    }

    fn loss_scale(&self, n_local: usize) -> f64 {
        if self.normalize_loss_globally {
            1.0 / self.n_total as f64
        } else {
            1.0 / n_local as f64
        }
    }
}

/// Objective value and gradient in one pass over the shard.
fn evaluate(
    w: &[f64],
    shard: &ClientShard,
    theta: &[f64],
    penalty: &PenaltySpec,
    eps: f64,
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    for ((x, &y), &t) in shard.features.iter_rows().zip(&shard.labels).zip(theta) {
        if t == 0.0 {
            continue;
        }
        let p = sigmoid(dot(x, w));
        loss += t * sample_loss(p, y, eps);
        axpy(t * (p - y), x, grad);
    }
    let c = penalty.loss_scale(shard.len());
    let gap = dot(w, &penalty.phi_c) - penalty.tau;
    for (g, phi) in grad.iter_mut().zip(&penalty.phi_c) {
        *g = *g * c + 2.0 * penalty.lambda * gap * phi;
    }
    loss * c + penalty.lambda * gap * gap
}

fn check_penalty(w: &WeightVector, penalty: &PenaltySpec) -> Result<()> {
    if penalty.phi_c.len() != w.len() {
        return Err(Error::Dimension(format!(
            "phi_C has {} entries, weights {}",
            penalty.phi_c.len(),
            w.len()
        )));
    }
    Ok(())
}

/// Client objective `J(w)`.
pub fn objective(
    w: &WeightVector,
    shard: &ClientShard,
    theta: &[f64],
    penalty: &PenaltySpec,
    eps: f64,
) -> Result<f64> {
    check_dims(w, &shard.features)?;
    check_theta(shard, theta)?;
    check_penalty(w, penalty)?;
    let mut g = vec![0.0; w.len()];
    Ok(evaluate(w.as_slice(), shard, theta, penalty, eps, &mut g))
}

/// Gradient of `J`: `sum_i theta_i (p_i - y_i) x_i / n_k + 2 lambda (w.phi - tau) phi`.
pub fn loss_gradient(
    w: &WeightVector,
    shard: &ClientShard,
    theta: &[f64],
    penalty: &PenaltySpec,
) -> Result<Vec<f64>> {
    check_dims(w, &shard.features)?;
    check_theta(shard, theta)?;
    check_penalty(w, penalty)?;
    let mut g = vec![0.0; w.len()];
    evaluate(w.as_slice(), shard, theta, penalty, DEFAULT_CLAMP_EPS, &mut g);
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub learning_rate: f64,
    /// Gradient steps per call.
    pub epochs: usize,
    pub clamp_eps: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 200,
            clamp_eps: DEFAULT_CLAMP_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub w: WeightVector,
    /// Objective at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
    /// True when a step failed to decrease the objective after every halving.
    pub stalled: bool,
}

/// Full-batch gradient descent with backtracking: a step that raises the
/// objective is retried with half the rate, up to [`MAX_HALVINGS`] times;
/// if none succeeds the fit stops.
pub fn fit_local_traced(
    w_init: &WeightVector,
    shard: &ClientShard,
    theta: &[f64],
    penalty: &PenaltySpec,
    opt: &OptimizerSpec,
) -> Result<FitReport> {
    check_dims(w_init, &shard.features)?;
    check_theta(shard, theta)?;
    check_penalty(w_init, penalty)?;
    let d = w_init.len();
    let mut w = w_init.0.clone();
    let mut grad = vec![0.0; d];
    let mut f = evaluate(&w, shard, theta, penalty, opt.clamp_eps, &mut grad);
    if !f.is_finite() {
        return Err(non_finite(shard, f, &w));
    }
    let mut trace = vec![f];
    let mut cand = vec![0.0; d];
    let mut cand_grad = vec![0.0; d];
    let mut stalled = false;

    for _ in 0..opt.epochs {
        let mut rate = opt.learning_rate;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            for ((c, wi), gi) in cand.iter_mut().zip(&w).zip(&grad) {
                *c = wi - rate * gi;
            }
            let fc = evaluate(&cand, shard, theta, penalty, opt.clamp_eps, &mut cand_grad);
            if !fc.is_finite() {
                return Err(non_finite(shard, fc, &cand));
            }
            if fc <= f {
                std::mem::swap(&mut w, &mut cand);
                std::mem::swap(&mut grad, &mut cand_grad);
                f = fc;
                trace.push(f);
                accepted = true;
                break;
            }
            rate *= 0.5;
        }
        if !accepted {
            stalled = true;
            break;
        }
    }
    Ok(FitReport {
        w: WeightVector(w),
        objective_trace: trace,
        stalled,
    })
}

pub fn fit_local(
    w_init: &WeightVector,
    shard: &ClientShard,
    theta: &[f64],
    penalty: &PenaltySpec,
    opt: &OptimizerSpec,
) -> Result<WeightVector> {
    Ok(fit_local_traced(w_init, shard, theta, penalty, opt)?.w)
}

fn non_finite(shard: &ClientShard, f: f64, w: &[f64]) -> Error {
    let wmax = w.iter().map(|v| v.abs()).fold(0.0, f64::max);
    Error::NonFinite(format!(
        "client {} objective became {f} (|w|_inf = {wmax:e})",
        shard.client_id
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shard(rows: &[Vec<f64>], labels: &[f64]) -> ClientShard {
        ClientShard {
            client_id: 0,
            features: Matrix::from_rows(rows).unwrap(),
            labels: labels.to_vec(),
            sensitive: vec![0.0; labels.len()],
        }
    }

    #[test]
    fn zero_weights_predict_half() {
        let x = Matrix::from_rows(&[vec![0.3, 1.0], vec![0.9, 1.0]]).unwrap();
        let p = predict_proba(&WeightVector::zeros(2), &x).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert_eq!(predict_labels(&WeightVector::zeros(2), &x).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn saturation_and_log_three() {
        assert!((sigmoid(30.0) - 1.0).abs() < 1e-9);
        assert!((sigmoid(1e6) - sigmoid(30.0)).abs() == 0.0);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn uniform_prediction_loss_is_ln2() {
        let s = shard(&[vec![0.5, 1.0]], &[1.0]);
        let r = weighted_loss(&WeightVector::zeros(2), &s, &[1.0], 1, DEFAULT_CLAMP_EPS).unwrap();
        assert!((r.per_sample_loss[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_weighted_loss() {
        // w.x = ln 3 gives p = 0.75; theta = 2, n = 1.
        let s = shard(&[vec![1.0]], &[1.0]);
        let w = WeightVector(vec![3f64.ln()]);
        let r = weighted_loss(&w, &s, &[2.0], 1, DEFAULT_CLAMP_EPS).unwrap();
        assert!((r.weighted_loss - 0.575364).abs() < 1e-6);
        assert!((r.weighted_loss + 2.0 * 0.75f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn unit_weights_scale_by_local_share() {
        let s = shard(&[vec![0.2, 1.0], vec![0.8, 1.0]], &[0.0, 1.0]);
        let w = WeightVector(vec![1.0, -0.3]);
        let r = weighted_loss(&w, &s, &[1.0, 1.0], 8, DEFAULT_CLAMP_EPS).unwrap();
        let mean: f64 = r.per_sample_loss.iter().sum::<f64>() / 2.0;
        assert!((r.weighted_loss - mean * 2.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn extreme_weights_stay_finite() {
        let s = shard(&[vec![1.0, 1.0], vec![0.0, 1.0]], &[0.0, 1.0]);
        for w in [vec![1e3, 1e3], vec![-1e3, 1e3], vec![1e3, -1e3]] {
            let w = WeightVector(w);
            let f = objective(&w, &s, &[1.0, 1.0], &PenaltySpec::none(2, 2), DEFAULT_CLAMP_EPS).unwrap();
            assert!(f.is_finite() && f >= 0.0);
            let g = loss_gradient(&w, &s, &[1.0, 1.0], &PenaltySpec::none(2, 2)).unwrap();
            assert!(g.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn penalty_off_is_plain_gradient() {
        let s = shard(&[vec![0.2, 1.0], vec![0.8, 1.0]], &[0.0, 1.0]);
        let w = WeightVector(vec![0.4, -0.1]);
        let g = loss_gradient(&w, &s, &[1.0, 1.0], &PenaltySpec::none(2, 2)).unwrap();
        let mut expect = [0.0; 2];
        for i in 0..2 {
            let x = s.features.row(i);
            let r = sigmoid(dot(x, &w.0)) - s.labels[i];
            expect[0] += r * x[0] / 2.0;
            expect[1] += r * x[1] / 2.0;
        }
        assert!((g[0] - expect[0]).abs() < 1e-15 && (g[1] - expect[1]).abs() < 1e-15);
    }

    #[test]
    fn penalty_vanishes_on_boundary() {
        let s = shard(&[vec![0.2, 1.0]], &[1.0]);
        let w = WeightVector(vec![0.5, 0.0]);
        let phi = vec![0.1, 0.0];
        let on = PenaltySpec {
            lambda: 50.0,
            tau: 0.05,
            phi_c: phi,
            n_total: 1,
            normalize_loss_globally: false,
        };
        let off = PenaltySpec::none(2, 1);
        let a = loss_gradient(&w, &s, &[1.0], &on).unwrap();
        let b = loss_gradient(&w, &s, &[1.0], &off).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn margin_is_plain_dot_product() {
        let x = Matrix::from_rows(&[vec![0.5, 0.25, 1.0]]).unwrap();
        let d = boundary_distance(&WeightVector(vec![1.0, -1.0, 0.0]), &x).unwrap();
        assert_eq!(d, vec![0.25]);
        assert_eq!(boundary_distance(&WeightVector::zeros(3), &x).unwrap(), vec![0.0]);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let s = shard(&[vec![0.2, 1.0]], &[1.0]);
        let w0 = WeightVector(vec![0.3, -0.7]);
        let opt = OptimizerSpec {
            epochs: 0,
            ..Default::default()
        };
        assert_eq!(fit_local(&w0, &s, &[1.0], &PenaltySpec::none(2, 1), &opt).unwrap(), w0);
    }

    #[test]
    fn separable_set_is_learned() {
        let s = shard(
            &[
                vec![0.0, 0.0, 1.0],
                vec![0.1, 0.2, 1.0],
                vec![0.9, 1.0, 1.0],
                vec![1.0, 0.8, 1.0],
            ],
            &[0.0, 0.0, 1.0, 1.0],
        );
        let opt = OptimizerSpec {
            learning_rate: 1.0,
            epochs: 2000,
            ..Default::default()
        };
        let w = fit_local(&WeightVector::zeros(3), &s, &[1.0; 4], &PenaltySpec::none(3, 4), &opt).unwrap();
        let pred = predict_labels(&w, &s.features).unwrap();
        assert_eq!(accuracy(&pred, &s.labels), 1.0);
    }

    #[test]
    fn strong_penalty_meets_target() {
        let s = shard(
            &[
                vec![0.1, 1.0, 1.0],
                vec![0.4, 0.0, 1.0],
                vec![0.8, 1.0, 1.0],
                vec![0.9, 0.0, 1.0],
            ],
            &[0.0, 0.0, 1.0, 1.0],
        );
        let phi = vec![0.2, 0.3, 0.0];
        let pen = PenaltySpec {
            lambda: 100.0,
            tau: 0.05,
            phi_c: phi.clone(),
            n_total: 4,
            normalize_loss_globally: false,
        };
        let opt = OptimizerSpec {
            learning_rate: 0.1,
            epochs: 2000,
            ..Default::default()
        };
        let w = fit_local(&WeightVector::zeros(3), &s, &[1.0; 4], &pen, &opt).unwrap();
        assert!(dot(&w.0, &phi).abs() <= 0.05 + 0.01);
    }

    #[test]
    fn trace_is_monotone() {
        let s = shard(
            &[vec![0.1, 1.0], vec![0.5, 1.0], vec![0.7, 1.0]],
            &[0.0, 1.0, 0.0],
        );
        let pen = PenaltySpec {
            lambda: 2.0,
            tau: 0.05,
            phi_c: vec![0.3, -0.1],
            n_total: 3,
            normalize_loss_globally: false,
        };
        let opt = OptimizerSpec {
            learning_rate: 50.0,
            epochs: 100,
            ..Default::default()
        };
        let r = fit_local_traced(&WeightVector::zeros(2), &s, &[0.5, 1.0, 1.5], &pen, &opt).unwrap();
        assert!(r.objective_trace.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn average_of_weights() {
        let avg = WeightVector::average(&[WeightVector(vec![1.0, 2.0]), WeightVector(vec![3.0, 6.0])]).unwrap();
        assert_eq!(avg.0, vec![2.0, 4.0]);
        assert!(WeightVector::average(&[]).is_err());
    }
}
