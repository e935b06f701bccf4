use proptest::prelude::*;

use fairfed::dataset::{
    plan_shift_split, read_csv, ClientAssignment, ClientShard, ColumnKind, ColumnSpec, Encoder, Schema, ShiftSplitSpec,
};
use fairfed::fairness::{
    compute_stats, covariance_coeff_alpha, covariance_coeff_w, reweighted_risk_difference, risk_difference,
};
use fairfed::kernel::{kernel_matrix, theta, KernelBasis, MixtureCoefficients};
use fairfed::linalg::{dot, Matrix};
use fairfed::lpsolve::{brute_force_oracle, solve, AlphaLP, LpStatus};
use fairfed::model::{fit_local_traced, objective, OptimizerSpec, PenaltySpec, WeightVector, DEFAULT_CLAMP_EPS};

fn shard_strategy(max_n: usize, d: usize) -> impl Strategy<Value = ClientShard> {
    (2..=max_n).prop_flat_map(move |n| {
        (
            prop::collection::vec(prop::collection::vec(0.0f64..1.0, d), n),
            prop::collection::vec(prop::bool::ANY, n),
            prop::collection::vec(prop::bool::ANY, n),
        )
            .prop_map(|(rows, y, s)| {
                let rows: Vec<Vec<f64>> = rows
                    .into_iter()
                    .map(|mut r| {
                        r.push(1.0);
                        r
                    })
                    .collect();
                ClientShard {
                    client_id: 0,
                    features: Matrix::from_rows(&rows).unwrap(),
                    labels: y.into_iter().map(f64::from).collect(),
                    sensitive: s.into_iter().map(f64::from).collect(),
                }
            })
    })
}

fn lp_strategy() -> impl Strategy<Value = AlphaLP> {
    (1usize..=4).prop_flat_map(|m| {
        (
            prop::collection::vec(0.0f64..1.0, m),
            prop::collection::vec(0.05f64..1.0, m),
            prop::option::of(prop::collection::vec(-1.0f64..1.0, m)),
            0.0f64..0.3,
            prop::sample::select(vec![1.0, 2.0, 5.0]),
        )
            .prop_map(|(objective, equality, fairness_row, tau, box_upper)| AlphaLP {
                objective,
                equality,
                fairness_row,
                tau,
                box_upper,
            })
    })
}

// Split partition and determinism.
proptest! {
    #[test]
    fn split_partitions_rows(
        groups in prop::collection::vec(prop::bool::ANY, 20..120),
        fa in 0.3f64..1.0,
        fb in 0.3f64..1.0,
        even in prop::bool::ANY,
        clients in 1usize..5,
        seed in 0u64..1000,
    ) {
        prop_assume!(groups.iter().filter(|&&g| g).count() >= 8 && groups.iter().filter(|&&g| !g).count() >= 8);
        let spec = ShiftSplitSpec {
            split_column: None,
            group_a: vec![],
            train_fraction_group_a: fa,
            train_fraction_group_b: fb,
            client_assignment: if even { ClientAssignment::Even } else { ClientAssignment::ByGroup },
            num_clients: if even { clients } else { 2 },
            seed,
        };
        let plan = plan_shift_split(&groups, &spec).unwrap();
        let mut seen = vec![0u8; groups.len()];
        for s in &plan.shards {
            for &i in s {
                seen[i] += 1;
            }
        }
        for &i in &plan.test {
            prop_assert_eq!(seen[i], 0);
            seen[i] += 1;
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        prop_assert_eq!(plan_shift_split(&groups, &spec).unwrap(), plan);
    }
}

fn small_table(rows: &[(u8, f64, bool, bool)]) -> String {
    let mut s = String::from("color,size,y,s\n");
    for (c, x, y, g) in rows {
        s.push_str(&format!("c{c},{x},{},{}\n", u8::from(*y), if *g { "m" } else { "f" }));
    }
    s
}

fn small_schema() -> Schema {
    let mut label = ColumnSpec::new("y", ColumnKind::Label);
    label.positive = Some("1".into());
    let mut sens = ColumnSpec::new("s", ColumnKind::Sensitive);
    sens.positive = Some("m".into());
    Schema::new(vec![
        ColumnSpec::new("color", ColumnKind::Categorical),
        ColumnSpec::new("size", ColumnKind::Numeric),
        label,
        sens,
    ])
    .unwrap()
}

// Encoding: one-hot decoding recovers the category; numeric columns span [0, 1].
proptest! {
    #[test]
    fn encoding_round_trip_and_scaling(
        rows in prop::collection::vec((0u8..4, -50.0f64..50.0, prop::bool::ANY, prop::bool::ANY), 2..40),
    ) {
        let raw = read_csv(small_table(&rows).as_bytes(), &small_schema()).unwrap();
        let all: Vec<usize> = (0..raw.len()).collect();
        let enc = Encoder::fit(&raw, &all).unwrap();
        let data = enc.encode(&raw, &all).unwrap();
        for (i, (c, _, _, _)) in rows.iter().enumerate() {
            let expect = format!("c{c}");
            prop_assert_eq!(enc.decode_category(&raw, "color", data.features.row(i)), Some(expect.as_str()));
        }
        let col = data.feature_names.iter().position(|n| n == "size").unwrap();
        let vals: Vec<f64> = (0..data.len()).map(|i| data.features.get(i, col)).collect();
        let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let constant = rows.iter().all(|r| r.1 == rows[0].1);
        if constant {
            prop_assert!(vals.iter().all(|&v| v == 0.0));
        } else {
            prop_assert_eq!(lo, 0.0);
            prop_assert_eq!(hi, 1.0);
        }
    }
}

// Kernel: non-negativity, linearity in alpha, boundedness, rotation-free symmetry.
proptest! {
    #[test]
    fn theta_is_linear_nonnegative_and_bounded(
        shard in shard_strategy(20, 3),
        centers in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..6),
        sigma in 0.3f64..3.0,
        seed_a in prop::collection::vec(0.0f64..5.0, 6),
        seed_b in prop::collection::vec(0.0f64..5.0, 6),
    ) {
        let m = centers.len();
        let bound = 5.0;
        let basis = KernelBasis::gaussian(Matrix::from_rows(&centers).unwrap(), sigma, bound).unwrap();
        let km = kernel_matrix(&shard, &basis).unwrap();
        let a1 = MixtureCoefficients(seed_a[..m].to_vec());
        let a2 = MixtureCoefficients(seed_b[..m].to_vec());
        let sum = MixtureCoefficients(a1.0.iter().zip(&a2.0).map(|(x, y)| x + y).collect());
        let t1 = theta(&km, &a1).unwrap();
        let t2 = theta(&km, &a2).unwrap();
        let ts = theta(&km, &sum).unwrap();
        for i in 0..shard.len() {
            prop_assert!(t1[i] >= 0.0);
            prop_assert!((ts[i] - t1[i] - t2[i]).abs() <= 1e-12);
            let row_sum: f64 = (0..m).map(|j| km.values.get(i, j)).sum();
            prop_assert!(t1[i] <= bound * row_sum + 1e-12);
            prop_assert!(row_sum <= m as f64 + 1e-12);
        }
    }

    #[test]
    fn kernel_ignores_coordinate_order(
        x in prop::collection::vec(0.0f64..1.0, 4),
        c in prop::collection::vec(0.0f64..1.0, 4),
        perm in Just(vec![2usize, 0, 3, 1]),
    ) {
        let entry = |x: &[f64], c: &[f64]| {
            let shard = ClientShard {
                client_id: 0,
                features: Matrix::from_rows(&[x.to_vec()]).unwrap(),
                labels: vec![0.0],
                sensitive: vec![0.0],
            };
            let basis = KernelBasis::gaussian(Matrix::from_rows(&[c.to_vec()]).unwrap(), 1.0, 5.0).unwrap();
            kernel_matrix(&shard, &basis).unwrap().values.get(0, 0)
        };
        let px: Vec<f64> = perm.iter().map(|&j| x[j]).collect();
        let pc: Vec<f64> = perm.iter().map(|&j| c[j]).collect();
        prop_assert!((entry(&x, &c) - entry(&px, &pc)).abs() <= 1e-15);
    }
}

// Model: finiteness, monotone descent.
proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn objective_is_finite_for_bounded_weights(
        shard in shard_strategy(15, 3),
        w in prop::collection::vec(-1e3f64..1e3, 4),
        lambda in prop::sample::select(vec![0.0, 2.0, 100.0]),
    ) {
        let n = shard.len();
        let penalty = PenaltySpec {
            lambda,
            tau: 0.05,
            phi_c: vec![0.1, -0.2, 0.05, 0.0],
            n_total: n,
            normalize_loss_globally: false,
        };
        let f = objective(&WeightVector(w), &shard, &vec![1.0; n], &penalty, DEFAULT_CLAMP_EPS).unwrap();
        prop_assert!(f.is_finite() && f >= 0.0);
    }

    #[test]
    fn descent_never_increases_objective(
        shard in shard_strategy(25, 3),
        theta in prop::collection::vec(0.0f64..3.0, 25),
        lambda in prop::sample::select(vec![0.0, 2.0, 100.0]),
        phi in prop::collection::vec(-0.3f64..0.3, 4),
    ) {
        let n = shard.len();
        let penalty = PenaltySpec { lambda, tau: 0.05, phi_c: phi, n_total: n + 3, normalize_loss_globally: false };
        let opt = OptimizerSpec { epochs: 40, ..OptimizerSpec::default() };
        let report = fit_local_traced(&WeightVector::zeros(4), &shard, &theta[..n], &penalty, &opt).unwrap();
        for pair in report.objective_trace.windows(2) {
            prop_assert!(pair[1] <= pair[0]);
        }
    }
}

// Fairness: linear-form equivalence on both sides, uniform reduction, range.
proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_linear_forms_agree(
        shards in prop::collection::vec(shard_strategy(12, 3), 1..4),
        centers in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..5),
        alpha_seed in prop::collection::vec(0.0f64..5.0, 5),
        w in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let shards: Vec<ClientShard> = shards
            .into_iter()
            .enumerate()
            .map(|(k, mut s)| {
                s.client_id = k;
                s
            })
            .collect();
        let m = centers.len();
        let basis = KernelBasis::gaussian(Matrix::from_rows(&centers).unwrap(), 1.0, 5.0).unwrap();
        let stats = compute_stats(&shards).unwrap();
        let alpha = MixtureCoefficients(alpha_seed[..m].to_vec());
        let w = WeightVector(w);
        let n = stats.n_total as f64;
        let mut direct = 0.0;
        let mut psi_c = vec![0.0; m];
        let mut phi_c = vec![0.0; 4];
        for s in &shards {
            let km = kernel_matrix(s, &basis).unwrap();
            let th = theta(&km, &alpha).unwrap();
            for i in 0..s.len() {
                direct += (s.sensitive[i] - stats.s_bar) * th[i] * dot(s.features.row(i), &w.0) / n;
            }
            for (a, b) in psi_c.iter_mut().zip(covariance_coeff_alpha(s, &km, &w, &stats)) {
                *a += b;
            }
            for (a, b) in phi_c.iter_mut().zip(covariance_coeff_w(s, &th, &stats)) {
                *a += b;
            }
        }
        prop_assert!((dot(&alpha.0, &psi_c) - direct).abs() <= 1e-12);
        prop_assert!((dot(&w.0, &phi_c) - direct).abs() <= 1e-12);
    }

    #[test]
    fn risk_difference_range_and_reductions(
        pred in prop::collection::vec(prop::bool::ANY, 2..60),
        s in prop::collection::vec(prop::bool::ANY, 2..60),
        constant in prop::bool::ANY,
    ) {
        let n = pred.len().min(s.len());
        let s: Vec<f64> = s[..n].iter().map(|&b| f64::from(b)).collect();
        prop_assume!(s.contains(&0.0) && s.contains(&1.0));
        let pred: Vec<f64> = pred[..n].iter().map(|&b| f64::from(b)).collect();
        let plain = risk_difference(&pred, &s).unwrap().rd;
        prop_assert!((0.0..=1.0).contains(&plain));
        prop_assert_eq!(reweighted_risk_difference(&pred, &s, &vec![1.0; n]).unwrap(), plain);
        let flat = vec![f64::from(constant); n];
        prop_assert_eq!(risk_difference(&flat, &s).unwrap().rd, 0.0);
    }
}

// LP: feasibility, optimality against the oracle, box, determinism.
proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn lp_solution_is_feasible_and_optimal(lp in lp_strategy()) {
        let sol = solve(&lp).unwrap();
        let oracle = brute_force_oracle(&lp).unwrap();
        prop_assert_eq!(sol.status, oracle.status);
        for &a in sol.alpha.as_slice() {
            prop_assert!((0.0..=lp.box_upper).contains(&a));
        }
        match sol.status {
            LpStatus::Optimal => {
                prop_assert!(lp.max_violation(sol.alpha.as_slice()) <= 1e-8);
                prop_assert!(sol.objective_value >= oracle.objective_value - 1e-6);
            }
            LpStatus::InfeasibleRelaxed => {
                prop_assert!((sol.slack_used - oracle.slack_used).abs() <= 1e-8);
                prop_assert!(sol.objective_value >= oracle.objective_value - 1e-6);
            }
            LpStatus::Error => {}
        }
        let again = solve(&lp).unwrap();
        prop_assert_eq!(&again.alpha, &sol.alpha);
        prop_assert_eq!(again.status, sol.status);
        prop_assert_eq!(again.objective_value.to_bits(), sol.objective_value.to_bits());
        prop_assert_eq!(again.slack_used.to_bits(), sol.slack_used.to_bits());
    }
}
