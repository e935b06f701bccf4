use std::path::PathBuf;

use fairfed::dataset::{shift_split, ClientAssignment, ShiftSplitSpec, Split};
use fairfed::engine::{
    experiment_grid, generate_synthetic, run, write_round_csv, AlgorithmKind, AlgorithmSpec, ExperimentConfig, Hyper,
    SyntheticSpec,
};

fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn split(spec: SyntheticSpec, fraction: f64, clients: usize) -> Split {
    let seed = spec.seed;
    let s = generate_synthetic(&spec).unwrap();
    let sp = ShiftSplitSpec {
        split_column: None,
        group_a: vec![],
        train_fraction_group_a: fraction,
        train_fraction_group_b: fraction,
        client_assignment: ClientAssignment::Even,
        num_clients: clients,
        seed,
    };
    shift_split(&s.data, &s.domain, &sp).unwrap()
}

#[test]
fn uncorrelated_sensitive_attribute_gives_fair_fl() {
    let mut rds = Vec::new();
    for seed in 0..20 {
        let sp = split(
            SyntheticSpec {
                n: 4000,
                sensitive_correlation: 0.0,
                seed,
                ..SyntheticSpec::default()
            },
            0.5,
            2,
        );
        let hyper = Hyper {
            rounds: 30,
            local_epochs: 200,
            seed,
            ..Hyper::default()
        };
        rds.push(run(&AlgorithmSpec::new(AlgorithmKind::Fl, hyper), &sp).unwrap().final_metrics.test_rd);
    }
    let mean = rds.iter().sum::<f64>() / rds.len() as f64;
    assert!(mean <= 0.05, "mean test RD {mean}");
}

#[test]
fn correlated_sensitive_attribute_gives_unfair_fl() {
    let sp = split(
        SyntheticSpec {
            n: 2000,
            sensitive_correlation: 0.8,
            seed: 3,
            ..SyntheticSpec::default()
        },
        0.5,
        2,
    );
    let hyper = Hyper {
        rounds: 5,
        local_epochs: 50,
        ..Hyper::default()
    };
    let r = run(&AlgorithmSpec::new(AlgorithmKind::Fl, hyper), &sp).unwrap();
    assert!(r.final_metrics.test_rd > 0.2, "{}", r.final_metrics.test_rd);
}

#[test]
fn shipped_synthetic_grid_has_four_cells() {
    let (cfg, base) = ExperimentConfig::load(repo_path("configs/synthetic.toml")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let summary = experiment_grid(&cfg, &base, Some(out.path())).unwrap();
    assert_eq!(summary.cells.len(), 4);
    assert!(summary.cells.iter().all(|c| c.failures == 0));
    assert!(out.path().join("summary.csv").exists());
    assert!(out.path().join("summary.toml").exists());
    let again = experiment_grid(&cfg, &base, None).unwrap();
    assert_eq!(again, summary);
}

#[test]
fn full_runs_are_reproducible_and_sane() {
    let sp = split(
        SyntheticSpec {
            n: 500,
            seed: 5,
            ..SyntheticSpec::default()
        },
        0.7,
        3,
    );
    for kind in AlgorithmKind::ALL {
        let hyper = Hyper {
            kernels: 12,
            rounds: 4,
            local_epochs: 20,
            seed: 5,
            ..Hyper::default()
        };
        let spec = AlgorithmSpec::new(kind, hyper);
        let a = run(&spec, &sp).unwrap();
        let b = run(&spec, &sp).unwrap();
        // Debug form, since NaN diagnostics never compare equal.
        assert_eq!(format!("{a:?}"), format!("{b:?}"), "{kind}");
        assert_eq!(a.w_history, b.w_history);
        assert_eq!(a.per_round.len(), 4);
        for m in a.per_round.iter().chain([&a.initial]) {
            assert!((0.0..=1.0).contains(&m.train_acc) && (0.0..=1.0).contains(&m.test_acc));
            assert!((0.0..=1.0).contains(&m.test_rd));
        }
        let mut csv = Vec::new();
        write_round_csv(&a, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 4);
    }
}

#[test]
fn agnostic_weights_stay_within_the_box() {
    let sp = split(
        SyntheticSpec {
            n: 400,
            seed: 8,
            ..SyntheticSpec::default()
        },
        0.7,
        2,
    );
    let hyper = Hyper {
        kernels: 15,
        rounds: 5,
        local_epochs: 20,
        ..Hyper::default()
    };
    let r = run(&AlgorithmSpec::new(AlgorithmKind::AgnosticFair, hyper.clone()), &sp).unwrap();
    assert!(r.alpha_final.as_slice().iter().all(|&a| (0.0..=hyper.bound).contains(&a)));
    assert_eq!(r.alpha_final.len(), 15);
}
