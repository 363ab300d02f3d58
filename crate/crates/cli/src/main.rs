use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ugcl::experiment::{ExperimentConfig, ExperimentReport};
use ugcl::graph::{generate_sbm, indicator_means, write_dataset, SbmSpec};

#[derive(Parser)]
#[command(name = "ugcl", version, about = "Reconstruct missing node features and structure, then classify nodes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a masking sweep over seeds and write reports.
    Run(RunArgs),
    /// Write a synthetic stochastic-block-model dataset.
    GenSbm(SbmArgs),
}

#[derive(Args)]
struct RunArgs {
    /// key=value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    dataset: Option<String>,
    /// Comma-separated feature missing rates.
    #[arg(long)]
    feature_missing: Option<String>,
    /// Comma-separated edge missing rates, paired with the feature rates.
    #[arg(long)]
    edge_missing: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    temperature: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    /// `0,1,2` or `0..10`.
    #[arg(long)]
    seeds: Option<String>,
    /// `gcn`, `clean`, `gcn,clean` or `none`.
    #[arg(long)]
    baseline: Option<String>,
    /// Skip the reconstruction method and run only the baselines.
    #[arg(long)]
    baseline_only: bool,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    threads: Option<String>,
    #[arg(long)]
    dump_embeddings: bool,
    #[arg(long)]
    dump_structure: bool,
    #[arg(long)]
    dump_fusion: bool,
}

#[derive(Args)]
struct SbmArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    n_per_block: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 0.3)]
    p_in: f64,
    #[arg(long, default_value_t = 0.02)]
    p_out: f64,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Mean offset on each block's indicator dimensions.
    #[arg(long, default_value_t = 0.1)]
    mu: f64,
    #[arg(long, default_value_t = 0.5)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn build_config(args: &RunArgs) -> ugcl::Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let flags = [
        ("dataset", &args.dataset),
        ("feature_missing", &args.feature_missing),
        ("edge_missing", &args.edge_missing),
        ("alpha", &args.alpha),
        ("k", &args.k),
        ("temperature", &args.temperature),
        ("epochs", &args.epochs),
        ("seeds", &args.seeds),
        ("baseline", &args.baseline),
        ("out", &args.out),
        ("threads", &args.threads),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            config.set(key, v)?;
        }
    }
    if args.baseline_only {
        config.run_ugcl = false;
        if !config.baseline_gcn && !config.baseline_clean {
            config.baseline_gcn = true;
        }
    }
    config.dump_embeddings |= args.dump_embeddings;
    config.dump_structure |= args.dump_structure;
    config.dump_fusion |= args.dump_fusion;
    for pair in &args.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| ugcl::Error::InvalidParameter(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        config.set(k, v)?;
    }
    config.validate()?;
    Ok(config)
}

fn print_summary(report: &ExperimentReport) {
    println!("config digest {}", report.digest);
    println!("{:>8} {:>8} {:>10} {:>5} {:>9} {:>8}", "feat", "edge", "method", "runs", "mean", "sd");
    for r in &report.summary.rows {
        println!(
            "{:>8} {:>8} {:>10} {:>5} {:>9.4} {:>8.4}",
            r.feature_missing,
            r.edge_missing,
            r.method.name(),
            r.runs,
            r.mean_test_accuracy,
            r.sd_test_accuracy
        );
    }
}

fn run(args: &RunArgs) -> ugcl::Result<()> {
    let config = build_config(args)?;
    let report = ugcl::run_experiment(&config)?;
    print_summary(&report);
    println!("reports written to {}", config.out.display());
    Ok(())
}

fn gen_sbm(args: &SbmArgs) -> ugcl::Result<()> {
    let spec = SbmSpec {
        n_per_block: args.n_per_block,
        blocks: args.blocks,
        p_in: args.p_in,
        p_out: args.p_out,
        feat_means: indicator_means(args.blocks, args.dim, args.mu),
        noise_sd: args.noise_sd,
        seed: args.seed,
    };
    let ds = generate_sbm(&spec)?;
    write_dataset(&ds, &args.out)?;
    println!(
        "wrote {} nodes, {} edges, {} classes to {}",
        ds.n(),
        ds.edges().len(),
        ds.num_classes(),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::GenSbm(args) => gen_sbm(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
