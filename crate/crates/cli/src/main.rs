use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

use fairfed::engine::{
    experiment_grid, run_partial, splits_for, write_prepared, write_result_json, write_round_csv, AlgorithmKind,
    AlgorithmSpec, ExperimentConfig, GridSummary, Hyper, LoadedDataset, RunSinks, SplitConfig,
};
use fairfed::error::Error;
use fairfed::federation::MessageLog;
use fairfed::lpsolve::LpTolerances;
use fairfed::verify::{run_checks, Check, VerifyOptions};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "fairfed", version, about = "Fairness-aware agnostic federated learning simulator")]
struct Cli {
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split and encode a dataset, writing train/test/shard CSVs and a manifest.
    Prepare(Common),
    /// Train one algorithm on one split.
    Run(RunArgs),
    /// Run every algorithm/split/repetition cell of an experiment config.
    Grid(Common),
    /// Run the built-in oracle checks.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config path, or a bare name looked up as configs/<name>.toml.
    #[arg(long)]
    config: String,

    /// Overrides the config's base seed.
    #[arg(long)]
    seed: Option<u64>,

    #[arg(long, env = "FAIRFED_OUTPUT_DIR")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: Common,

    /// Defaults to the first algorithm in the config.
    #[arg(long)]
    algorithm: Option<String>,

    #[arg(long)]
    rounds: Option<usize>,

    /// Dataset name from the config; defaults to the first.
    #[arg(long)]
    dataset: Option<String>,

    /// Split name from the config; defaults to the first.
    #[arg(long)]
    split: Option<String>,

    /// Write every round's linear program to lp_dump.txt.
    #[arg(long)]
    debug_lp_dump: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Run only these checks (lp, gradient, aggregation).
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Replace the LP pivot and feasibility tolerances.
    #[arg(long)]
    debug_lp_tolerance: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    let outcome = match &cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Run(a) => cmd_run(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}

fn config_path(arg: &str) -> PathBuf {
    let p = PathBuf::from(arg);
    if p.extension().is_some() || p.components().count() > 1 {
        return p;
    }
    PathBuf::from("configs").join(format!("{arg}.toml"))
}

struct Loaded {
    cfg: ExperimentConfig,
    base_dir: PathBuf,
    out_dir: PathBuf,
}

fn load(common: &Common) -> Result<Loaded, Error> {
    let path = config_path(&common.config);
    if !path.exists() {
        return Err(Error::Config(format!("config file {} not found", path.display())));
    }
    let (mut cfg, base_dir) = ExperimentConfig::load(&path)?;
    if let Some(seed) = common.seed {
        cfg.base_seed = seed;
    }
    let out_dir = match (&common.output, &cfg.output_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) if o.is_absolute() => o.clone(),
        (None, Some(o)) => base_dir.join(o),
        (None, None) => PathBuf::from("results").join(&cfg.name),
    };
    Ok(Loaded { cfg, base_dir, out_dir })
}

fn pick<'a, T>(items: &'a [T], wanted: Option<&str>, name: impl Fn(&T) -> &str, what: &str) -> Result<&'a T, Error> {
    match wanted {
        None => items
            .first()
            .ok_or_else(|| Error::Config(format!("config has no {what}"))),
        Some(w) => items.iter().find(|i| name(i) == w).ok_or_else(|| {
            let names: Vec<&str> = items.iter().map(&name).collect();
            Error::Config(format!("no {what} named '{w}'; available: {}", names.join(", ")))
        }),
    }
}

fn cmd_prepare(args: &Common) -> Result<u8, Error> {
    let l = load(args)?;
    for ds in &l.cfg.datasets {
        let data = LoadedDataset::load(ds, &l.base_dir)?;
        for split in splits_for(&l.cfg, &data)? {
            let mut spec = split.spec.clone();
            spec.seed = l.cfg.base_seed;
            let (s, _) = data.prepare(&spec)?;
            let dir = l.out_dir.join("prepared").join(&ds.name).join(&split.name);
            let cfg = SplitConfig {
                name: split.name.clone(),
                spec,
            };
            let m = write_prepared(&ds.name, &cfg, &s, &dir)?;
            let sizes: Vec<String> = m.shards.iter().map(|s| s.rows.to_string()).collect();
            println!(
                "{} / {}: {} train, {} test, {} shards [{}] -> {}",
                ds.name,
                split.name,
                m.train_rows,
                m.test_rows,
                m.shards.len(),
                sizes.join(", "),
                dir.display()
            );
        }
    }
    Ok(0)
}

fn cmd_run(args: &RunArgs) -> Result<u8, Error> {
    let l = load(&args.common)?;
    let kind = match &args.algorithm {
        Some(a) => a.parse::<AlgorithmKind>()?,
        None => *l
            .cfg
            .algorithms
            .first()
            .ok_or_else(|| Error::Config("config lists no algorithms".into()))?,
    };
    let ds = pick(&l.cfg.datasets, args.dataset.as_deref(), |d| &d.name, "dataset")?;
    let data = LoadedDataset::load(ds, &l.base_dir)?;
    let splits = splits_for(&l.cfg, &data)?;
    let split = pick(&splits, args.split.as_deref(), |s| &s.name, "split")?;

    let seed = l.cfg.base_seed;
    let mut spec = split.spec.clone();
    spec.seed = seed;
    let (prepared, _) = data.prepare(&spec)?;
    let mut hyper = Hyper {
        seed,
        ..l.cfg.hyper.clone()
    };
    if let Some(r) = args.rounds {
        hyper.rounds = r;
    }
    let alg = AlgorithmSpec::new(kind, hyper);
    alg.validate()?;

    let dir = l.out_dir.join(format!("{}_{}_{}_seed{seed}", ds.name, split.name, kind));
    fs::create_dir_all(&dir)?;
    let mut sinks = RunSinks {
        log: Some(MessageLog::to_writer(Box::new(BufWriter::new(fs::File::create(
            dir.join("messages.jsonl"),
        )?)))),
        ..RunSinks::default()
    };
    if args.debug_lp_dump {
        sinks.lp_dump = Some(Box::new(BufWriter::new(fs::File::create(dir.join("lp_dump.txt"))?)));
    }
    info!(
        "running {kind} on {}/{} ({} clients, {} train rows, {} rounds)",
        ds.name,
        split.name,
        prepared.shards.len(),
        prepared.num_train(),
        alg.hyper.rounds
    );
    let (result, failure) = run_partial(&alg, &prepared, &mut sinks);
    if let Some(out) = sinks.lp_dump.as_mut() {
        out.flush()?;
    }
    drop(sinks);

    if let Some(r) = &result {
        write_result_json(r, BufWriter::new(fs::File::create(dir.join("result.json"))?))?;
        write_round_csv(r, fs::File::create(dir.join("rounds.csv"))?)?;
        let f = &r.final_metrics;
        println!(
            "algorithm={kind} rounds={} train_acc={:.4} test_acc={:.4} train_rd={:.4} test_rd={:.4} output={}",
            r.per_round.len(),
            f.train_acc,
            f.test_acc,
            f.train_rd,
            f.test_rd,
            dir.display()
        );
    }
    match failure {
        None => Ok(0),
        Some(e) if e.is_usage() => Err(e),
        Some(e) => {
            if result.is_some() {
                warn!("partial results kept in {}", dir.display());
            }
            eprintln!("error: {e}");
            Ok(EXIT_RUNTIME)
        }
    }
}

fn print_grid(summary: &GridSummary) {
    println!(
        "{:<10} {:<10} {:<15} {:>4} {:>17} {:>17} {:>5}",
        "dataset", "split", "algorithm", "runs", "test_acc", "test_rd", "fail"
    );
    for c in &summary.cells {
        println!(
            "{:<10} {:<10} {:<15} {:>4} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4} {:>5}",
            c.dataset,
            c.split,
            c.algorithm.name(),
            c.runs,
            c.test_acc.mean,
            c.test_acc.std,
            c.test_rd.mean,
            c.test_rd.std,
            c.failures
        );
    }
}

fn cmd_grid(args: &Common) -> Result<u8, Error> {
    let l = load(args)?;
    let summary = experiment_grid(&l.cfg, &l.base_dir, Some(&l.out_dir))?;
    print_grid(&summary);
    info!("summary written to {}", l.out_dir.display());
    let failures: usize = summary.cells.iter().map(|c| c.failures).sum();
    if failures > 0 {
        eprintln!("error: {failures} run(s) failed; see summary.toml");
        return Ok(EXIT_RUNTIME);
    }
    Ok(0)
}

fn cmd_verify(args: &VerifyArgs) -> Result<u8, Error> {
    let only = args
        .only
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<Check>())
        .collect::<Result<Vec<_>, _>>()?;
    let mut lp_tolerances = LpTolerances::default();
    if let Some(t) = args.debug_lp_tolerance {
        warn!("LP tolerances overridden to {t}");
        lp_tolerances.pivot = t;
        lp_tolerances.feasibility = t;
    }
    let reports = run_checks(&VerifyOptions {
        only,
        seed: args.seed,
        lp_tolerances,
    });
    let mut ok = true;
    for r in &reports {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.check, r.detail);
        ok &= r.passed;
    }
    Ok(if ok { 0 } else { EXIT_RUNTIME })
}

#[cfg(test)]
mod tests {
    use std::path::Path;

    use super::*;

    #[test]
    fn bare_names_resolve_under_configs() {
        assert_eq!(config_path("adult_shift"), Path::new("configs/adult_shift.toml"));
        assert_eq!(config_path("x/y.toml"), Path::new("x/y.toml"));
        assert_eq!(config_path("y.toml"), Path::new("y.toml"));
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
