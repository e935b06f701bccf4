use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::EncodedDataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Features drawn around a per-label mean.
    Blobs,
    /// Features drawn around zero; label is the sign of their sum.
    Linear,
}

/// Two-blob binary task with a tunable link between the sensitive attribute
/// and the label, and a domain group whose features are shifted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    /// Non-sensitive features.
    pub d: usize,
    /// Feature means for label 0 and label 1.
    pub group_means: [f64; 2],
    pub noise: f64,
    pub label_rule: LabelRule,
    /// In `[-1, 1]`; `P(s = y) = (1 + c) / 2`.
    pub sensitive_correlation: f64,
    /// Share of rows in the domain group.
    pub domain_fraction: f64,
    /// Added to every feature of domain-group rows.
    pub domain_offset: f64,
    /// Extra correlation between `s` and `y` inside the domain group.
    pub domain_correlation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 1000,
            d: 4,
            group_means: [-0.5, 0.5],
            noise: 1.0,
            label_rule: LabelRule::Blobs,
            sensitive_correlation: 0.6,
            domain_fraction: 0.5,
            domain_offset: 0.5,
            domain_correlation: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub data: EncodedDataset,
    /// Domain-group flag per row, usable as a shift-split group.
    pub domain: Vec<bool>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n < 4 {
            return bad(format!("n = {} < 4", self.n));
        }
        if self.d == 0 {
            return bad("d must be >= 1".into());
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be >= 0".into());
        }
        for c in [self.sensitive_correlation, self.sensitive_correlation + self.domain_correlation] {
            if !(-1.0..=1.0).contains(&c) {
                return bad(format!("correlation {c} outside [-1, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.domain_fraction) {
            return bad("domain_fraction outside [0, 1]".into());
        }
        Ok(())
    }
}

/// Features are the `d` draws scaled to [0, 1], then `s`, then a bias
/// column. Labels and the sensitive attribute are stratified so both values
/// of each always occur.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("synthetic noise: {e}")))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_domain = (spec.domain_fraction * n as f64).round() as usize;
    let mut domain = vec![false; n];
    for &i in &order[..n_domain] {
        domain[i] = true;
    }

    let mut labels: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    labels.shuffle(&mut rng);

    // Within each (label, domain) stratum, the first share of rows gets s = y.
    let mut sensitive = vec![0.0; n];
    for y in [0.0, 1.0] {
        for dom in [false, true] {
            let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == y && domain[i] == dom).collect();
            let c = spec.sensitive_correlation + if dom { spec.domain_correlation } else { 0.0 };
            let keep = ((1.0 + c) / 2.0 * idx.len() as f64).round() as usize;
            for (j, &i) in idx.iter().enumerate() {
                sensitive[i] = if j < keep { y } else { 1.0 - y };
            }
        }
    }
    for target in [0.0, 1.0] {
        if !sensitive.contains(&target) {
            // Guard for very small n.
            sensitive[0] = target;
        }
    }

    let d = spec.d;
    let mut feats = Matrix::zeros(n, d + 2);
    for i in 0..n {
        let shift = if domain[i] { spec.domain_offset } else { 0.0 };
        let row = feats.row_mut(i);
        match spec.label_rule {
            LabelRule::Blobs => {
                let mu = spec.group_means[labels[i] as usize];
                for v in row.iter_mut().take(d) {
                    *v = mu + shift + noise.sample(&mut rng);
                }
            }
            LabelRule::Linear => {
                for v in row.iter_mut().take(d) {
                    *v = shift + noise.sample(&mut rng);
                }
            }
        }
        row[d] = sensitive[i];
        row[d + 1] = 1.0;
    }
    if spec.label_rule == LabelRule::Linear {
        // Label by the sign of the centred feature sum, keeping the 50/50 balance.
        let mut score: Vec<(f64, usize)> = (0..n).map(|i| (feats.row(i)[..d].iter().sum(), i)).collect();
        score.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (rank, &(_, i)) in score.iter().enumerate() {
            let y = if rank >= n / 2 { 1.0 } else { 0.0 };
            if y != labels[i] {
                labels[i] = y;
                sensitive[i] = 1.0 - sensitive[i];
                feats.row_mut(i)[d] = sensitive[i];
            }
        }
    }

    // Min-max scale the drawn features to [0, 1], as the encoder does.
    for j in 0..d {
        let (lo, hi) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
            let v = feats.get(i, j);
            (lo.min(v), hi.max(v))
        });
        let span = hi - lo;
        for i in 0..n {
            let v = if span > 0.0 { (feats.get(i, j) - lo) / span } else { 0.0 };
            feats.set(i, j, v);
        }
    }

    let mut feature_names: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    feature_names.push("s".into());
    feature_names.push("bias".into());
    Ok(SyntheticData {
        data: EncodedDataset {
            features: feats,
            labels,
            sensitive,
            feature_names,
        },
        domain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_spec_has_both_groups() {
        let s = generate_synthetic(&SyntheticSpec {
            n: 4,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(s.data.len(), 4);
        assert!(s.data.sensitive.contains(&0.0) && s.data.sensitive.contains(&1.0));
        assert!(s.data.labels.contains(&0.0) && s.data.labels.contains(&1.0));
    }

    #[test]
    fn same_seed_same_data() {
        let spec = SyntheticSpec {
            seed: 9,
            ..Default::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 10, ..spec };
        assert_ne!(generate_synthetic(&other).unwrap().data, generate_synthetic(&SyntheticSpec { seed: 9, ..Default::default() }).unwrap().data);
    }

    #[test]
    fn full_correlation_ties_s_to_y() {
        let s = generate_synthetic(&SyntheticSpec {
            sensitive_correlation: 1.0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(s.data.labels, s.data.sensitive);
    }

    #[test]
    fn degenerate_spec_rejected() {
        assert!(generate_synthetic(&SyntheticSpec { n: 3, ..Default::default() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec {
            sensitive_correlation: 1.5,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn linear_rule_is_balanced() {
        let s = generate_synthetic(&SyntheticSpec {
            label_rule: LabelRule::Linear,
            n: 101,
            ..Default::default()
        })
        .unwrap();
        let pos = s.data.labels.iter().filter(|&&y| y == 1.0).count();
        assert_eq!(pos, 51);
    }
}
