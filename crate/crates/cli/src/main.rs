use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metal_al::graph::{generate_sbm, load_dataset_with_report, make_initial_split, save_dataset, FeatureModel, SbmConfig};
use metal_al::harness::{
    choose, initial_model, persist_aggregate, persist_results, run_comparison, timing_summary, write_metadata, Choice,
    ExperimentConfig, StepContext, Strategy,
};
use metal_al::models::{mc_dropout_posterior, GraphInputs, ModelConfig, ModelKind, TrainConfig};
use metal_al::rng;

/// Environment variable naming the directory that relative `--dataset`
/// names are looked up in.
const DATA_ROOT_VAR: &str = "METAL_DATA_ROOT";

// glibc malloc spends a large share of training time trimming and
// refaulting the heap between steps.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "metal-al", version, about = "Active learning benchmark for node classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every (strategy, seed) pair and write raw and aggregate results.
    Run(RunArgs),
    /// Write a stochastic-block-model dataset.
    GenSynthetic(GenArgs),
    /// Check a dataset directory and print its statistics.
    Validate(ValidateArgs),
    /// Dump the per-node scores of the first acquisition step.
    Score(ScoreArgs),
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Dataset directory, or a name under $METAL_DATA_ROOT.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "gcn")]
    model: ModelKind,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// SGC propagation power.
    #[arg(long, default_value_t = 2)]
    sgc_k: usize,
    #[arg(long, default_value_t = 20)]
    mc_passes: usize,
    /// Adam steps after each acquisition.
    #[arg(long, default_value_t = 50)]
    retrain_steps: usize,
    /// Adam steps for the initial model.
    #[arg(long, default_value_t = 200)]
    initial_steps: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated: random, degree, pagerank, entropy, bald, age, metal, metal:<gamma>.
    #[arg(long, value_delimiter = ',', required = true)]
    strategy: Vec<Strategy>,
    #[arg(long, default_value_t = 40)]
    budget: usize,
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    /// First seed; runs use base-seed, base-seed + 1, ...
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    /// Concurrent runs (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Raw results CSV; the aggregate and metadata files are written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 3)]
    blocks: usize,
    #[arg(long, default_value_t = 50)]
    per_block: usize,
    #[arg(long, default_value_t = 0.1)]
    p_in: f64,
    #[arg(long, default_value_t = 0.01)]
    p_out: f64,
    /// Feature dimension.
    #[arg(long, default_value_t = 16)]
    features: usize,
    /// Mean offset of the class coordinates for Gaussian features.
    #[arg(long, default_value_t = 1.0)]
    shift: f64,
    /// Use binary bag-of-words features with this many words per node.
    #[arg(long)]
    words: Option<usize>,
    /// Share of words drawn from the class vocabulary.
    #[arg(long, default_value_t = 0.5)]
    topic_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "sbm")]
    name: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    strategy: Strategy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<metal_al::Error> for Failure {
    fn from(e: metal_al::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<metal_al::graph::DataError> for Failure {
    fn from(e: metal_al::graph::DataError) -> Self {
        Self::Runtime(e.to_string())
    }
}

fn write_failed(path: &Path) -> impl Fn(io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

fn resolve_dataset(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_ROOT_VAR) {
        Some(root) => Path::new(&root).join(path),
        None => path.to_path_buf(),
    }
}

fn experiment_config(m: &ModelArgs) -> ExperimentConfig {
    ExperimentConfig {
        model: m.model,
        model_config: ModelConfig {
            hidden: m.hidden,
            sgc_k: m.sgc_k,
        },
        mc_passes: m.mc_passes,
        train: TrainConfig {
            steps: m.retrain_steps,
            initial_steps: m.initial_steps,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "results".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let dir = resolve_dataset(&args.model.dataset);
    let config = ExperimentConfig {
        strategies: args.strategy.clone(),
        budget: args.budget,
        seeds: args.seeds,
        base_seed: args.base_seed,
        jobs: args.jobs,
        ..experiment_config(&args.model)
    };
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    eprintln!("dataset: {}", dir.display());
    eprintln!("output: {}", args.out.display());
    eprintln!("config: {config:?}");
    let (dataset, _) = load_dataset_with_report(&dir)?;
    let comparison = run_comparison(&dataset, &config)?;

    let aggregate_path = sibling(&args.out, ".aggregate.csv");
    let meta_path = sibling(&args.out, ".meta.json");
    persist_results(&comparison.runs, &args.out)?;
    persist_aggregate(&comparison.aggregate, &aggregate_path)?;
    write_metadata(&config, dataset.name(), &meta_path)?;

    let timing = timing_summary(&comparison.runs)?;
    println!("strategy\tfinal_mean_f1\tfinal_std_f1\tmean_run_seconds");
    for strategy in &config.strategies {
        let name = strategy.to_string();
        let last = comparison
            .aggregate
            .iter()
            .filter(|r| r.strategy == name)
            .max_by_key(|r| r.step)
            .expect("every strategy has rows");
        let seconds = timing.iter().find(|t| t.strategy == name).map_or(0.0, |t| t.mean_seconds);
        println!("{name}\t{:.4}\t{:.4}\t{seconds:.3}", last.mean_f1, last.std_f1);
    }
    eprintln!("wrote {}, {}, {}", args.out.display(), aggregate_path.display(), meta_path.display());
    Ok(())
}

fn cmd_gen_synthetic(args: GenArgs) -> Result<(), Failure> {
    let valid_p = |p: f64| (0.0..=1.0).contains(&p);
    if !(valid_p(args.p_in) && valid_p(args.p_out) && args.p_out < args.p_in) {
        return Err(Failure::Usage(format!(
            "need 0 <= p-out < p-in <= 1, got p-in = {}, p-out = {}",
            args.p_in, args.p_out
        )));
    }
    if args.blocks == 0 || args.per_block == 0 || args.features == 0 {
        return Err(Failure::Usage("blocks, per-block and features must be positive".into()));
    }
    let features = match args.words {
        Some(words_per_node) => FeatureModel::BagOfWords {
            words_per_node,
            topic_fraction: args.topic_fraction,
        },
        None => FeatureModel::Gaussian,
    };
    let config = SbmConfig {
        name: args.name,
        block_sizes: vec![args.per_block; args.blocks],
        p_in: args.p_in,
        p_out: args.p_out,
        feature_dim: args.features,
        feature_shift: args.shift,
        features,
        seed: args.seed,
    };
    eprintln!("config: {config:?}");
    let dataset = generate_sbm(&config).map_err(|e| Failure::Usage(e.to_string()))?;
    save_dataset(&dataset, &args.out)?;
    println!(
        "wrote {} nodes, {} edges, {} classes to {}",
        dataset.num_nodes(),
        dataset.num_edges(),
        dataset.num_classes(),
        args.out.display()
    );
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<(), Failure> {
    let dir = resolve_dataset(&args.dataset);
    let (dataset, report) = load_dataset_with_report(&dir)?;
    println!("name\t{}", dataset.name());
    println!("nodes\t{}", dataset.num_nodes());
    println!("classes\t{}", dataset.num_classes());
    println!("features\t{}", dataset.num_features());
    println!("edges\t{}", dataset.num_edges());
    for (class, count) in dataset.class_histogram().iter().enumerate() {
        println!("class_{class}\t{count}");
    }
    if report.duplicate_edges > 0 {
        eprintln!("warning: dropped {} duplicate edges", report.duplicate_edges);
    }
    if report.self_loops > 0 {
        eprintln!("warning: dropped {} self-loops", report.self_loops);
    }
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<(), Failure> {
    let dir = resolve_dataset(&args.model.dataset);
    let config = ExperimentConfig {
        strategies: vec![args.strategy],
        base_seed: args.seed,
        seeds: 1,
        budget: 1,
        ..experiment_config(&args.model)
    };
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    eprintln!("dataset: {}", dir.display());
    eprintln!("config: {config:?}");
    let (dataset, _) = load_dataset_with_report(&dir)?;
    let inputs = GraphInputs::new(&dataset);
    let (state, model) = initial_model(&dataset, &inputs, &config, args.seed)?;
    debug_assert_eq!(state, make_initial_split(&dataset, args.seed)?);
    let step = 1;
    let posterior = if args.strategy.needs_posterior() {
        Some(mc_dropout_posterior(
            &model,
            &inputs,
            config.mc_passes,
            config.train.dropout_rate,
            rng::derive_seed(args.seed, &[step as u64, 1]),
        )?)
    } else {
        None
    };
    let ctx = StepContext {
        dataset: &dataset,
        inputs: &inputs,
        state: &state,
        model: &model,
        posterior: posterior.as_ref(),
        step,
        seed: args.seed,
    };
    let choice = choose(args.strategy, &ctx, &config)?;

    let sink: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(File::create(path).map_err(write_failed(path))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut out = BufWriter::new(sink);
    let display = args.out.clone().unwrap_or_else(|| "stdout".into());
    let result = match &choice {
        Choice::Metal(a) => (|| {
            writeln!(out, "node\texpected_grad\tphi_grad\tphi_exp\tgamma\tphi")?;
            for r in &a.rows {
                writeln!(
                    out,
                    "{}\t{:e}\t{}\t{}\t{}\t{}",
                    r.node, r.expected_grad, r.phi_grad, r.phi_exp, a.gamma, r.phi
                )?;
            }
            out.flush()
        })(),
        Choice::Scored { scores, .. } => (|| {
            writeln!(out, "node\tscore")?;
            for (node, s) in scores.iter() {
                writeln!(out, "{node}\t{s}")?;
            }
            out.flush()
        })(),
    };
    result.map_err(write_failed(&display))?;
    eprintln!("selected node {}", choice.node());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Score(a) => cmd_score(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
