//! Reweighing functions `theta_alpha(x) = sum_m alpha_m K_m(x)` and their
//! bases.
//!
//! Three bases share one code path: Gaussian kernels centred on training
//! rows, a single constant basis (`K == 1`, plain federated learning as a
//! special case), and per-client indicators (client-level mixture weights).

use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ClientShard;
use crate::error::{Error, Result};
use crate::linalg::{squared_distance, Matrix};

/// Slack allowed when checking `0 <= alpha_m <= B`.
const BOUND_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BasisKind {
    Gaussian { centers: Matrix, sigma: f64 },
    Constant,
    /// `K_k(x) = 1` iff `x` belongs to client `k`.
    ClientIndicator { clients: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBasis {
    pub kind: BasisKind,
    /// Upper bound `B` on each mixture coefficient.
    pub bound: f64,
}

impl KernelBasis {
    pub fn gaussian(centers: Matrix, sigma: f64, bound: f64) -> Result<Self> {
        if centers.rows() == 0 {
            return Err(Error::Config("a Gaussian basis needs at least one center".into()));
        }
        if !(sigma > 0.0) {
            return Err(Error::Config(format!("kernel width must be positive, got {sigma}")));
        }
        Self::checked(BasisKind::Gaussian { centers, sigma }, bound)
    }

    pub fn constant(bound: f64) -> Result<Self> {
        Self::checked(BasisKind::Constant, bound)
    }

    pub fn client_indicator(clients: usize, bound: f64) -> Result<Self> {
        if clients == 0 {
            return Err(Error::Config("indicator basis needs at least one client".into()));
        }
        Self::checked(BasisKind::ClientIndicator { clients }, bound)
    }

    fn checked(kind: BasisKind, bound: f64) -> Result<Self> {
        if !(bound > 0.0) {
            return Err(Error::Config(format!("coefficient bound must be positive, got {bound}")));
        }
        Ok(Self { kind, bound })
    }

    /// Number of basis functions `M`.
    pub fn len(&self) -> usize {
        match &self.kind {
            BasisKind::Gaussian { centers, .. } => centers.rows(),
            BasisKind::Constant => 1,
            BasisKind::ClientIndicator { clients } => *clients,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Write a Gaussian basis as CSV: a `sigma,<s>,bound,<B>` record, then
    /// one record per center.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let BasisKind::Gaussian { centers, sigma } = &self.kind else {
            return Err(Error::Config("only Gaussian bases are serialized".into()));
        };
        let mut out = csv::WriterBuilder::new().flexible(true).from_writer(w);
        out.write_record(["sigma", &sigma.to_string(), "bound", &self.bound.to_string()])?;
        for r in centers.iter_rows() {
            out.write_record(r.iter().map(|v| v.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(r);
        let mut records = rdr.records();
        let head = records
            .next()
            .ok_or_else(|| Error::Parse("empty basis file".into()))??;
        let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("{s}: {e}")));
        if head.len() != 4 || &head[0] != "sigma" || &head[2] != "bound" {
            return Err(Error::Parse("basis file must start with sigma,<s>,bound,<B>".into()));
        }
        let (sigma, bound) = (parse(&head[1])?, parse(&head[3])?);
        let mut rows = Vec::new();
        for rec in records {
            rows.push(rec?.iter().map(parse).collect::<Result<Vec<f64>>>()?);
        }
        Self::gaussian(Matrix::from_rows(&rows)?, sigma, bound)
    }
}

/// Per-client center quotas proportional to shard size: floors first, the
/// remainder one each to the largest shards (ties to the lower client id).
pub fn basis_quotas(sizes: &[usize], m: usize) -> Result<Vec<usize>> {
    let total: usize = sizes.iter().sum();
    if m == 0 {
        return Err(Error::Config("number of kernels must be at least 1".into()));
    }
    if m > total {
        return Err(Error::Config(format!(
            "{m} kernel centers requested from {total} training rows"
        )));
    }
    let mut quotas: Vec<usize> = sizes.iter().map(|&n| m * n / total).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut rem = m - quotas.iter().sum::<usize>();
    while rem > 0 {
        for &k in &order {
            if rem == 0 {
                break;
            }
            if quotas[k] < sizes[k] {
                quotas[k] += 1;
                rem -= 1;
            }
        }
    }
    Ok(quotas)
}

/// Client-side half of basis selection: pick `quota` distinct local rows.
/// Each client draws from its own stream of the shared seed.
pub fn nominate_centers(shard: &ClientShard, quota: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shard.client_id as u64);
    let mut idx = sample(&mut rng, shard.len(), quota).into_vec();
    idx.sort_unstable();
    shard.features.select_rows(&idx)
}

/// Select `m` Gaussian centers from the union of shards. Nominated rows
/// leave the clients, which is a privacy cost of this basis.
pub fn select_basis(
    shards: &[ClientShard],
    m: usize,
    sigma: f64,
    bound: f64,
    seed: u64,
) -> Result<KernelBasis> {
    let sizes: Vec<usize> = shards.iter().map(ClientShard::len).collect();
    let quotas = basis_quotas(&sizes, m)?;
    let parts: Vec<Matrix> = shards
        .iter()
        .zip(&quotas)
        .map(|(s, &q)| nominate_centers(s, q, seed))
        .collect();
    let refs: Vec<&Matrix> = parts.iter().collect();
    KernelBasis::gaussian(Matrix::vstack(&refs)?, sigma, bound)
}

/// Indicator basis with one function per client.
pub fn client_weight_basis(shards: &[ClientShard], bound: f64) -> Result<KernelBasis> {
    if shards.is_empty() {
        return Err(Error::Config("no client shards".into()));
    }
    KernelBasis::client_indicator(shards.len(), bound)
}

/// `values[i][m] = K_m(x_i)` for one client's rows.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub values: Matrix,
}

impl KernelMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    /// `sum_i K_m(x_i) * v_i` for every m.
    pub fn weighted_col_sums(&self, v: &[f64]) -> Vec<f64> {
        self.values.tmul_vec(v)
    }
}

pub fn kernel_matrix(shard: &ClientShard, basis: &KernelBasis) -> Result<KernelMatrix> {
    let n = shard.len();
    let values = match &basis.kind {
        BasisKind::Gaussian { centers, sigma } => {
            if centers.cols() != shard.dim() {
                return Err(Error::Dimension(format!(
                    "basis has dimension {}, shard has {}",
                    centers.cols(),
                    shard.dim()
                )));
            }
            let denom = 2.0 * sigma * sigma;
            let mut k = Matrix::zeros(n, centers.rows());
            for i in 0..n {
                let x = shard.features.row(i);
                let out = k.row_mut(i);
                for (m, b) in centers.iter_rows().enumerate() {
                    out[m] = (-squared_distance(b, x) / denom).exp();
                }
            }
            k
        }
        BasisKind::Constant => Matrix::from_vec(n, 1, vec![1.0; n])?,
        BasisKind::ClientIndicator { clients } => {
            if shard.client_id >= *clients {
                return Err(Error::Dimension(format!(
                    "client {} outside indicator basis of {clients}",
                    shard.client_id
                )));
            }
            let mut k = Matrix::zeros(n, *clients);
            for i in 0..n {
                k.set(i, shard.client_id, 1.0);
            }
            k
        }
    };
    Ok(KernelMatrix { values })
}

/// Adversary coefficients `alpha`, each in `[0, B]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureCoefficients(pub Vec<f64>);

impl MixtureCoefficients {
    pub fn new(alpha: Vec<f64>, bound: f64) -> Result<Self> {
        let a = Self(alpha);
        a.check_bounds(bound)?;
        Ok(a)
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

    pub fn check_bounds(&self, bound: f64) -> Result<()> {
        for (m, &a) in self.0.iter().enumerate() {
            if !(a >= -BOUND_TOL && a <= bound + BOUND_TOL) {
                return Err(Error::Config(format!(
                    "alpha[{m}] = {a} outside [0, {bound}]"
                )));
            }
        }
        Ok(())
    }
}

/// Per-sample weights `theta_i = sum_m alpha_m K_m(x_i)`.
pub fn theta(km: &KernelMatrix, alpha: &MixtureCoefficients) -> Result<Vec<f64>> {
    if km.cols() != alpha.len() {
        return Err(Error::Dimension(format!(
            "{} kernels but {} coefficients",
            km.cols(),
            alpha.len()
        )));
    }
    Ok(km.values.mul_vec(alpha.as_slice()))
}
