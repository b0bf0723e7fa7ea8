use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use actune_core::engine::{RoundPlan, Strategy};
use actune_core::metrics::{
    accuracy_csv, cluster_assignments, metrics_jsonl, region_report, write_metrics_jsonl,
    write_timings_jsonl, AuditRecord,
};
use actune_core::pool::{write_embeddings, write_labels};
use actune_core::snapshot::{read_snapshot, write_snapshot, EngineSnapshot};
use actune_core::synthetic::SyntheticConfig;
use actune_core::{load_dataset, Config, Engine, ModelParams};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "actune",
    version,
    about = "Active self-training over precomputed embeddings"
)]
struct Cli {
    /// Worker threads for scoring, clustering and prediction (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment against oracle labels.
    Simulate(SimulateArgs),
    /// Serve the annotation API for a live experiment.
    Serve(ServeArgs),
    /// Print the region scores of a snapshot's latest round as CSV.
    InspectRegions(InspectArgs),
    /// Print the round records stored in a snapshot.
    ExportMetrics(ExportArgs),
    /// Write a Gaussian-mixture pool, test split and config to a directory.
    MakeSynthetic(SyntheticArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    /// Region-aware querying plus momentum self-training, measure from the config.
    Actune,
    Random,
    TopEntropy,
    TopCal,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value = "actune")]
    strategy: StrategyArg,
    /// Overrides `experiment.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write `clusters/round_<t>.csv` (index,cluster,weight) per round.
    #[arg(long)]
    export_clusters: bool,
}

#[derive(clap::Args)]
struct ServeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    snapshot_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
}

#[derive(clap::Args)]
struct InspectArgs {
    #[arg(long)]
    snapshot: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricsFormat {
    Jsonl,
    Csv,
}

#[derive(clap::Args)]
struct ExportArgs {
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long, value_enum, default_value = "jsonl")]
    format: MetricsFormat,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 2.5)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    redundancy_groups: usize,
    #[arg(long, default_value_t = 250)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ACTUNE_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Serve(a) => serve(a),
        Command::InspectRegions(a) => inspect_regions(a),
        Command::ExportMetrics(a) => export_metrics(a),
        Command::MakeSynthetic(a) => make_synthetic(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn strategy_for(arg: StrategyArg, config: &Config) -> Result<Strategy> {
    let name = match arg {
        StrategyArg::Actune => "actune",
        StrategyArg::Random => "random",
        StrategyArg::TopEntropy => "top-entropy",
        StrategyArg::TopCal => "top-cal",
    };
    Ok(Strategy::from_name(name, &config.experiment)?)
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut config = Config::from_file(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        config.experiment.seed = seed;
    }
    let strategy = strategy_for(args.strategy, &config)?;
    let dataset = load_dataset(&config)?;
    if dataset.pool.oracle_labels().is_none() {
        bail!("simulation needs oracle labels; set `oracle = true` for the label file");
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let cluster_dir = args.out.join("clusters");
    if args.export_clusters {
        fs::create_dir_all(&cluster_dir)?;
    }

    let mut engine = Engine::from_config(&config, strategy, dataset)?;
    let mut audit = String::new();
    let mut failure = None;
    engine.run_experiment_with(|plan, record| {
        log::info!(
            "round {}: accuracy {:?}, labeled {}, self-training {}",
            record.t,
            record.test_accuracy,
            record.labeled_total,
            record.selftrain_size
        );
        let Some(plan) = plan else { return };
        match serde_json::to_string(&AuditRecord::from_plan(plan)) {
            Ok(line) => {
                audit.push_str(&line);
                audit.push('\n');
            }
            Err(e) => failure = Some(anyhow::Error::from(e)),
        }
        if args.export_clusters && !plan.clustered.is_empty() {
            if let Err(e) = export_clusters(&cluster_dir, plan) {
                failure = Some(e);
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }

    let records = engine.records();
    write_metrics_jsonl(&args.out.join("metrics.jsonl"), records)?;
    write_timings_jsonl(&args.out.join("timings.jsonl"), records)?;
    fs::write(args.out.join("audit.jsonl"), audit)?;
    accuracy_csv(fs::File::create(args.out.join("accuracy.csv"))?, records)?;
    write_snapshot(&args.out.join("final.snap"), &engine.snapshot())?;
    if let Some(last) = records.last() {
        let acc = last
            .test_accuracy
            .map_or("n/a".to_string(), |a| format!("{a:.4}"));
        println!(
            "{}: {} rounds, final test accuracy {acc}, {} labeled",
            engine.strategy(),
            last.t,
            last.labeled_total
        );
    }
    Ok(())
}

fn export_clusters(dir: &Path, plan: &RoundPlan) -> Result<()> {
    let path = dir.join(format!("round_{}.csv", plan.round));
    cluster_assignments(fs::File::create(&path)?, plan)?;
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let config = Config::from_file(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(actune_service::serve(
        config,
        &args.snapshot_dir,
        &args.bind,
    ))?;
    Ok(())
}

fn load_snapshot(path: &Path) -> Result<EngineSnapshot<ModelParams>> {
    read_snapshot(path).with_context(|| format!("reading {}", path.display()))
}

fn inspect_regions(args: InspectArgs) -> Result<()> {
    let snap = load_snapshot(&args.snapshot)?;
    let plan = snap
        .state
        .pending
        .as_ref()
        .or(snap.state.last_plan.as_ref())
        .context("the snapshot has no round with regions yet")?;
    let stdout = std::io::stdout();
    region_report(stdout.lock(), plan)?;
    Ok(())
}

fn export_metrics(args: ExportArgs) -> Result<()> {
    let snap = load_snapshot(&args.snapshot)?;
    let records = &snap.state.records;
    let mut buf = Vec::new();
    match args.format {
        MetricsFormat::Jsonl => buf.extend_from_slice(metrics_jsonl(records)?.as_bytes()),
        MetricsFormat::Csv => accuracy_csv(&mut buf, records)?,
    }
    match &args.out {
        Some(p) => fs::write(p, buf).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(&buf)?,
    }
    Ok(())
}

fn make_synthetic(args: SyntheticArgs) -> Result<()> {
    let syn = SyntheticConfig {
        classes: args.classes,
        per_class: args.per_class,
        dim: args.dim,
        separation: args.separation,
        redundancy_groups: args.redundancy_groups,
        test_per_class: args.test_per_class,
        seed: Some(args.seed),
        ..SyntheticConfig::default()
    };
    let mut gen = Config::default();
    gen.data.synthetic = Some(syn);
    let dataset = load_dataset(&gen)?;
    fs::create_dir_all(&args.out)?;

    let pool = &dataset.pool;
    write_embeddings(&args.out.join("pool.afv"), pool.embeddings())?;
    let oracle: Vec<(usize, usize)> = pool
        .oracle_labels()
        .expect("synthetic pools carry oracle labels")
        .iter()
        .copied()
        .enumerate()
        .collect();
    write_labels(&args.out.join("labels.csv"), &oracle)?;

    let mut config = Config::default();
    config.experiment.seed = args.seed;
    config.data.class_count = Some(args.classes);
    config.data.embeddings = Some("pool.afv".into());
    config.data.labels = Some("labels.csv".into());
    config.data.oracle = true;
    if let Some(test) = &dataset.test {
        write_embeddings(&args.out.join("test.afv"), test.embeddings.view())?;
        let pairs: Vec<(usize, usize)> = test.labels.iter().copied().enumerate().collect();
        write_labels(&args.out.join("test_labels.csv"), &pairs)?;
        config.data.test_embeddings = Some("test.afv".into());
        config.data.test_labels = Some("test_labels.csv".into());
    }
    fs::write(args.out.join("config.toml"), config.to_toml_string()?)?;
    println!(
        "wrote {} samples ({} classes, d = {}) to {}",
        pool.n(),
        args.classes,
        args.dim,
        args.out.display()
    );
    Ok(())
}
