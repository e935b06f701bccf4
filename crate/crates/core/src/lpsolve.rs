//! Dense LP for the adversary's mixture coefficients:
//!
//! ```text
//! maximize    psi_L . alpha
//! subject to  psi_theta . alpha = 1
//!             |psi_C . alpha| <= tau          (optional)
//!             0 <= alpha_m <= B
//! ```
//!
//! Solved with a bounded-variable primal simplex (two phases, Bland's rule).
//! If the fairness rows cannot be met, a slack `r >= 0` is added to both
//! of them, `r` is minimized, and the objective is then maximized with `r`
//! held at its minimum.

use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::MixtureCoefficients;
use crate::linalg::{dot, solve_dense};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaLP {
    pub objective: Vec<f64>,
    pub equality: Vec<f64>,
    /// `None` drops both fairness rows.
    pub fairness_row: Option<Vec<f64>>,
    pub tau: f64,
    pub box_upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpStatus {
    Optimal,
    InfeasibleRelaxed,
    Error,
}

impl std::fmt::Display for LpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LpStatus::Optimal => "optimal",
            LpStatus::InfeasibleRelaxed => "infeasible_relaxed",
            LpStatus::Error => "error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LPSolution {
    pub alpha: MixtureCoefficients,
    pub objective_value: f64,
    pub status: LpStatus,
    pub slack_used: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpTolerances {
    pub pivot: f64,
    pub feasibility: f64,
    pub optimality: f64,
}

impl Default for LpTolerances {
    fn default() -> Self {
        Self {
            pivot: 1e-10,
            feasibility: 1e-8,
            optimality: 1e-12,
        }
    }
}

impl AlphaLP {
    pub fn len(&self) -> usize {
        self.objective.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objective.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.objective.len();
        if m == 0 {
            return Err(Error::Lp("no variables".into()));
        }
        if self.equality.len() != m || self.fairness_row.as_ref().is_some_and(|f| f.len() != m) {
            return Err(Error::Lp("row lengths differ".into()));
        }
        if !(self.tau >= 0.0) || !(self.box_upper > 0.0) {
            return Err(Error::Lp(format!(
                "need tau >= 0 and B > 0, got {} and {}",
                self.tau, self.box_upper
            )));
        }
        let rows = [Some(&self.objective), Some(&self.equality), self.fairness_row.as_ref()];
        if rows.iter().flatten().any(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Lp("non-finite coefficient".into()));
        }
        Ok(())
    }

    /// Largest violation of any constraint at `alpha` (fairness slack not
    /// included).
    pub fn max_violation(&self, alpha: &[f64]) -> f64 {
        let mut v = (dot(&self.equality, alpha) - 1.0).abs();
        if let Some(f) = &self.fairness_row {
            v = v.max(dot(f, alpha).abs() - self.tau);
        }
        for &a in alpha {
            v = v.max(-a).max(a - self.box_upper);
        }
        v.max(0.0)
    }

    /// Plain-text dump: one labelled row per line.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        let row = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        writeln!(w, "objective {}", row(&self.objective))?;
        writeln!(w, "equality {} rhs 1", row(&self.equality))?;
        match &self.fairness_row {
            Some(f) => writeln!(w, "fairness {} tau {:e}", row(f), self.tau)?,
            None => writeln!(w, "fairness none")?,
        }
        writeln!(w, "bounds 0 {:e}", self.box_upper)?;
        Ok(())
    }
}

impl LPSolution {
    fn error(m: usize) -> Self {
        Self {
            alpha: MixtureCoefficients(vec![0.0; m]),
            objective_value: f64::NAN,
            status: LpStatus::Error,
            slack_used: 0.0,
        }
    }
}

/// Equality-form LP with bounded columns: max `c.x`, `A x = b`, `lo <= x <= hi`.
struct Standard {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    c: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

enum Outcome {
    Optimal(Vec<f64>),
    Infeasible,
    Failed(String),
}

#[derive(Clone, Copy, PartialEq)]
enum At {
    Lower,
    Upper,
    Basic,
}

const MAX_ITER: usize = 200_000;

fn invert(cols: &[Vec<f64>], tol: f64) -> Option<Vec<Vec<f64>>> {
    let m = cols.len();
    // cols[k] is the k-th basis column; build the row-major matrix.
    let mut a: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let mut r: Vec<f64> = (0..m).map(|k| cols[k][i]).collect();
            r.extend((0..m).map(|k| if k == i { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for c in 0..m {
        let p = (c..m).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()))?;
        if a[p][c].abs() < tol {
            return None;
        }
        a.swap(c, p);
        let piv = a[c][c];
        a[c].iter_mut().for_each(|v| *v /= piv);
        for r in 0..m {
            if r != c {
                let f = a[r][c];
                if f != 0.0 {
                    for k in 0..2 * m {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
    }
    Some(a.into_iter().map(|r| r[m..].to_vec()).collect())
}

struct Tableau<'a> {
    lp: &'a Standard,
    cols: Vec<Vec<f64>>,
    x: Vec<f64>,
    at: Vec<At>,
    basis: Vec<usize>,
}

impl<'a> Tableau<'a> {
    fn col(&self, j: usize) -> &[f64] {
        &self.cols[j]
    }

    /// Maximizes `c.x` starting from the current basis.
    fn optimize(&mut self, c: &[f64], tol: &LpTolerances) -> std::result::Result<(), String> {
        let m = self.lp.b.len();
        let n = self.cols.len();
        for _ in 0..MAX_ITER {
            let bcols: Vec<Vec<f64>> = self.basis.iter().map(|&j| self.cols[j].clone()).collect();
            let binv = invert(&bcols, tol.pivot).ok_or("singular basis")?;
            // Basic values from the nonbasic ones.
            let mut rhs = self.lp.b.clone();
            for j in 0..n {
                if self.at[j] != At::Basic && self.x[j] != 0.0 {
                    for (r, a) in rhs.iter_mut().zip(self.col(j)) {
                        *r -= a * self.x[j];
                    }
                }
            }
            for (i, &bj) in self.basis.iter().enumerate() {
                self.x[bj] = dot(&binv[i], &rhs);
            }
            let mut y = vec![0.0; m];
            for (i, &bj) in self.basis.iter().enumerate() {
                for (k, yk) in y.iter_mut().enumerate() {
                    *yk += c[bj] * binv[i][k];
                }
            }
            // Bland: lowest eligible index enters.
            let entering = (0..n).find(|&j| {
                let d = c[j] - dot(&y, self.col(j));
                match self.at[j] {
                    At::Lower => d > tol.optimality && self.lp.hi[j] > self.lp.lo[j],
                    At::Upper => d < -tol.optimality && self.lp.hi[j] > self.lp.lo[j],
                    At::Basic => false,
                }
            });
            let Some(j) = entering else {
                return Ok(());
            };
            let dir = if self.at[j] == At::Lower { 1.0 } else { -1.0 };
            let alpha_col: Vec<f64> = binv.iter().map(|r| dot(r, self.col(j))).collect();

            let mut best = self.lp.hi[j] - self.lp.lo[j];
            let mut leave: Option<(usize, At)> = None;
            for (i, &bj) in self.basis.iter().enumerate() {
                let delta = -dir * alpha_col[i];
                let (t, bound) = if delta < -tol.pivot {
                    ((self.x[bj] - self.lp.lo[bj]) / -delta, At::Lower)
                } else if delta > tol.pivot && self.lp.hi[bj].is_finite() {
                    ((self.lp.hi[bj] - self.x[bj]) / delta, At::Upper)
                } else {
                    continue;
                };
                let t = t.max(0.0);
                let better = match leave {
                    _ if t < best => true,
                    Some((li, _)) => t == best && bj < self.basis[li],
                    None => false,
                };
                if better {
                    best = t;
                    leave = Some((i, bound));
                }
            }
            if !best.is_finite() {
                return Err("unbounded".into());
            }
            match leave {
                None => {
                    // Bound flip.
                    if self.at[j] == At::Lower {
                        self.at[j] = At::Upper;
                        self.x[j] = self.lp.hi[j];
                    } else {
                        self.at[j] = At::Lower;
                        self.x[j] = self.lp.lo[j];
                    }
                }
                Some((i, bound)) => {
                    let out = self.basis[i];
                    self.at[out] = bound;
                    self.x[out] = if bound == At::Lower {
                        self.lp.lo[out]
                    } else {
                        self.lp.hi[out]
                    };
                    self.x[j] += dir * best;
                    self.at[j] = At::Basic;
                    self.basis[i] = j;
                }
            }
        }
        Err("iteration limit".into())
    }
}

fn simplex(lp: &Standard, tol: &LpTolerances) -> Outcome {
    let m = lp.b.len();
    let n = lp.c.len();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| lp.a.iter().map(|r| r[j]).collect()).collect();
    let mut x = lp.lo.clone();
    let mut at = vec![At::Lower; n];
    let mut resid = lp.b.clone();
    for (j, col) in cols.iter().enumerate() {
        for (r, a) in resid.iter_mut().zip(col) {
            *r -= a * x[j];
        }
    }
    // One artificial per row, signed so it starts nonnegative.
    let mut ext = Standard {
        a: vec![],
        b: lp.b.clone(),
        c: vec![],
        lo: lp.lo.clone(),
        hi: lp.hi.clone(),
    };
    let mut basis = Vec::with_capacity(m);
    for (i, &r) in resid.iter().enumerate() {
        let mut col = vec![0.0; m];
        col[i] = if r >= 0.0 { 1.0 } else { -1.0 };
        cols.push(col);
        x.push(r.abs());
        at.push(At::Basic);
        ext.lo.push(0.0);
        ext.hi.push(f64::INFINITY);
        basis.push(n + i);
    }
    let mut phase1 = vec![0.0; n + m];
    phase1[n..].iter_mut().for_each(|v| *v = -1.0);
    let mut t = Tableau {
        lp: &ext,
        cols,
        x,
        at,
        basis,
    };
    if let Err(e) = t.optimize(&phase1, tol) {
        return Outcome::Failed(format!("phase 1: {e}"));
    }
    let infeas: f64 = t.x[n..].iter().sum();
    if infeas > tol.feasibility {
        return Outcome::Infeasible;
    }
    // Pin the artificials at zero for phase 2.
    let mut hi = ext.hi.clone();
    hi[n..].iter_mut().for_each(|v| *v = 0.0);
    let pinned = Standard {
        a: vec![],
        b: ext.b.clone(),
        c: vec![],
        lo: ext.lo.clone(),
        hi,
    };
    let mut x = t.x;
    for j in n..n + m {
        if t.at[j] != At::Basic {
            x[j] = 0.0;
            t.at[j] = At::Lower;
        }
    }
    let mut t2 = Tableau {
        lp: &pinned,
        cols: t.cols,
        x,
        at: t.at,
        basis: t.basis,
    };
    let mut c2 = lp.c.clone();
    c2.extend(std::iter::repeat(0.0).take(m));
    if let Err(e) = t2.optimize(&c2, tol) {
        return Outcome::Failed(format!("phase 2: {e}"));
    }
    let mut sol = t2.x;
    sol.truncate(n);
    for ((v, lo), hi) in sol.iter_mut().zip(&lp.lo).zip(&lp.hi) {
        *v = v.clamp(*lo, *hi);
    }
    Outcome::Optimal(sol)
}

/// Builds the equality-form system; with `slack` the fairness rows get a
/// shared relaxation variable bounded by `slack_bounds`.
fn standard_form(lp: &AlphaLP, slack_bounds: Option<(f64, f64)>, c: Vec<f64>) -> Standard {
    let m = lp.len();
    let mut a = vec![lp.equality.clone()];
    let mut b = vec![1.0];
    let mut lo = vec![0.0; m];
    let mut hi = vec![lp.box_upper; m];
    let mut c = c;
    if let Some(f) = &lp.fairness_row {
        let extra = if slack_bounds.is_some() { 3 } else { 2 };
        let width = m + extra;
        let mut up = f.clone();
        let mut down: Vec<f64> = f.iter().map(|v| -v).collect();
        up.resize(width, 0.0);
        down.resize(width, 0.0);
        up[m] = 1.0;
        down[m + 1] = 1.0;
        if slack_bounds.is_some() {
            up[m + 2] = -1.0;
            down[m + 2] = -1.0;
        }
        a[0].resize(width, 0.0);
        a.push(up);
        a.push(down);
        b.extend([lp.tau, lp.tau]);
        lo.extend([0.0, 0.0]);
        hi.extend([f64::INFINITY, f64::INFINITY]);
        if let Some((l, h)) = slack_bounds {
            lo.push(l);
            hi.push(h);
        }
        c.resize(width, 0.0);
    }
    Standard { a, b, c, lo, hi }
}

pub fn solve(lp: &AlphaLP) -> Result<LPSolution> {
    solve_with(lp, &LpTolerances::default())
}

pub fn solve_with(lp: &AlphaLP, tol: &LpTolerances) -> Result<LPSolution> {
    lp.validate()?;
    let m = lp.len();
    if lp.equality.iter().all(|&v| v == 0.0) {
        return Ok(LPSolution::error(m));
    }
    let finish = |x: Vec<f64>, status, slack| {
        let alpha: Vec<f64> = x[..m].to_vec();
        LPSolution {
            objective_value: dot(&lp.objective, &alpha),
            alpha: MixtureCoefficients(alpha),
            status,
            slack_used: slack,
        }
    };
    match simplex(&standard_form(lp, None, lp.objective.clone()), tol) {
        Outcome::Optimal(x) => return Ok(finish(x, LpStatus::Optimal, 0.0)),
        Outcome::Failed(e) => return Err(Error::Lp(e)),
        Outcome::Infeasible => {}
    }
    if lp.fairness_row.is_none() {
        warn!("sum-to-one row cannot be met within the box");
        return Ok(LPSolution::error(m));
    }
    // Minimize the fairness slack.
    let mut c = vec![0.0; m + 3];
    c[m + 2] = -1.0;
    let r = match simplex(&standard_form(lp, Some((0.0, f64::INFINITY)), c), tol) {
        Outcome::Optimal(x) => x[m + 2],
        Outcome::Infeasible => {
            warn!("sum-to-one row cannot be met within the box");
            return Ok(LPSolution::error(m));
        }
        Outcome::Failed(e) => return Err(Error::Lp(e)),
    };
    let r_fixed = r + tol.feasibility * 1e-3;
    let std = standard_form(lp, Some((r_fixed, r_fixed)), lp.objective.clone());
    match simplex(&std, tol) {
        Outcome::Optimal(x) => {
            warn!("fairness rows infeasible; relaxed by {r:e}");
            Ok(finish(x, LpStatus::InfeasibleRelaxed, r_fixed))
        }
        Outcome::Infeasible => Err(Error::Lp("relaxed problem lost feasibility".into())),
        Outcome::Failed(e) => Err(Error::Lp(e)),
    }
}

pub const ORACLE_MAX_VARS: usize = 6;

/// Exhaustive vertex enumeration; reference for small instances.
pub fn brute_force_oracle(lp: &AlphaLP) -> Result<LPSolution> {
    lp.validate()?;
    let m = lp.len();
    if m > ORACLE_MAX_VARS {
        return Err(Error::Lp(format!(
            "oracle refuses {m} variables (limit {ORACLE_MAX_VARS})"
        )));
    }
    if lp.equality.iter().all(|&v| v == 0.0) {
        return Ok(LPSolution::error(m));
    }
    if let Some(x) = best_vertex(lp, false) {
        let alpha = x[..m].to_vec();
        return Ok(LPSolution {
            objective_value: dot(&lp.objective, &alpha),
            alpha: MixtureCoefficients(alpha),
            status: LpStatus::Optimal,
            slack_used: 0.0,
        });
    }
    if lp.fairness_row.is_some() {
        if let Some(x) = best_vertex(lp, true) {
            let alpha = x[..m].to_vec();
            return Ok(LPSolution {
                objective_value: dot(&lp.objective, &alpha),
                alpha: MixtureCoefficients(alpha),
                status: LpStatus::InfeasibleRelaxed,
                slack_used: x[m],
            });
        }
    }
    Ok(LPSolution::error(m))
}

/// Inequalities `g.x <= h` over `alpha` (and `r` when `slack`).
fn inequalities(lp: &AlphaLP, slack: bool) -> Vec<(Vec<f64>, f64)> {
    let m = lp.len();
    let d = m + usize::from(slack);
    let mut rows = Vec::new();
    for i in 0..m {
        let mut g = vec![0.0; d];
        g[i] = -1.0;
        rows.push((g.clone(), 0.0));
        g[i] = 1.0;
        rows.push((g, lp.box_upper));
    }
    if let Some(f) = &lp.fairness_row {
        let mut up = f.clone();
        let mut down: Vec<f64> = f.iter().map(|v| -v).collect();
        if slack {
            up.push(-1.0);
            down.push(-1.0);
            let mut g = vec![0.0; d];
            g[m] = -1.0;
            rows.push((g, 0.0));
        }
        rows.push((up, lp.tau));
        rows.push((down, lp.tau));
    }
    rows
}

fn best_vertex(lp: &AlphaLP, slack: bool) -> Option<Vec<f64>> {
    const TOL: f64 = 1e-9;
    let m = lp.len();
    let d = m + usize::from(slack);
    let ineq = inequalities(lp, slack);
    let mut eq = lp.equality.clone();
    eq.resize(d, 0.0);
    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    for subset in combinations(ineq.len(), d - 1) {
        let mut a = vec![eq.clone()];
        let mut b = vec![1.0];
        for &k in &subset {
            a.push(ineq[k].0.clone());
            b.push(ineq[k].1);
        }
        let Some(x) = solve_dense(a, b, 1e-12) else {
            continue;
        };
        let feasible = (dot(&eq, &x) - 1.0).abs() <= TOL
            && ineq.iter().all(|(g, h)| dot(g, &x) <= h + TOL);
        if !feasible {
            continue;
        }
        let r = if slack { x[m] } else { 0.0 };
        let obj = dot(&lp.objective, &x[..m]);
        let better = match &best {
            None => true,
            Some((_, br, bo)) => r < br - TOL || (r <= br + TOL && obj > *bo),
        };
        if better {
            best = Some((x, r, obj));
        }
    }
    best.map(|b| b.0)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}
