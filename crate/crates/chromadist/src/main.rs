use anyhow::Context;
use chromadist::baseline::{fit_baseline, query_baseline};
use chromadist::cdest::{predict, train as train_cdest, CdestConfig, EpochLog};
use chromadist::checkpoint::{load_checkpoint_with_resolution, save_baseline, save_cdest, Checkpoint};
use chromadist::corpus::synthetic::{generate_synthetic, ground_truth_tsv};
use chromadist::corpus::{
    build_extrapolation_split, ingest, observations_to_tsv, parse_tsv, ColorPoint, CorpusSplit,
    Observation, SplitLabel, SplitSpec,
};
use chromadist::discretize::{export_csv, joint_probability, BinnedDistribution, DiscretizerConfig};
use chromadist::evaluate::{
    perplexity, spearman_independence, ColorModel, EvalReport, UniformFallback, UniformModel,
};
use chromadist::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Distribution estimation over discretized HSV color space from color names.
#[derive(Parser)]
#[command(name = "chromadist", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw TSV of (description, h, s, v[, split]) rows into split
    /// manifests plus a vocabulary file.
    Prepare(PrepareArgs),
    /// Rebuild manifests so the rarest descriptions are held out of training
    /// while all of their tokens stay covered.
    SplitExtrapolation(SplitExtrapolationArgs),
    /// Fit a model on prepared manifests and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint (or the uniform reference) on a test manifest.
    Eval(EvalArgs),
    /// Inspect the distribution a checkpoint assigns to one description.
    Query(QueryArgs),
    /// Spearman rank-correlation analysis of channel pairs per description.
    Correlate(CorrelateArgs),
    /// Generate a synthetic corpus with known ground-truth distributions.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Raw TSV input: description<TAB>h<TAB>s<TAB>v[<TAB>split]
    #[arg(long)]
    input: PathBuf,
    /// Directory for train.tsv, dev.tsv, test.tsv, vocab.txt
    #[arg(long)]
    output_dir: PathBuf,
    /// Skip the first non-comment line
    #[arg(long)]
    has_header: bool,
    /// Use the split column of the input instead of a random split
    #[arg(long)]
    labeled: bool,
    /// Fraction of rows assigned to training (random split mode)
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    /// Fraction of rows assigned to the dev set (random split mode)
    #[arg(long, default_value_t = 0.1)]
    dev_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SplitExtrapolationArgs {
    /// Directory holding prepared train.tsv/dev.tsv/test.tsv
    #[arg(long)]
    input_dir: PathBuf,
    /// Directory for the rebuilt manifests and selected.txt
    #[arg(long)]
    output_dir: PathBuf,
    /// Number of descriptions to hold out of training
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Minimum uses each held-out token must keep in other descriptions
    #[arg(long, default_value_t = 8)]
    min_other_uses: usize,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ModelKind {
    Baseline,
    Cdest,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding prepared train.tsv/dev.tsv/test.tsv
    #[arg(long)]
    input_dir: PathBuf,
    #[arg(long, value_enum)]
    model: ModelKind,
    /// Checkpoint output path
    #[arg(long)]
    output: PathBuf,
    /// Optional per-epoch training log (cdest only)
    #[arg(long)]
    log: Option<PathBuf>,
    /// Bins per channel
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Blur width; defaults to 1/(2 * resolution)
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    #[arg(long, default_value_t = 128)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    #[arg(long, default_value_t = 50)]
    max_epochs: usize,
    /// Epochs without dev improvement before stopping early
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score; omit with --uniform
    #[arg(long, required_unless_present = "uniform")]
    checkpoint: Option<PathBuf>,
    /// Test manifest TSV
    #[arg(long)]
    test: PathBuf,
    /// Write the report here instead of stdout
    #[arg(long)]
    output: Option<PathBuf>,
    /// Score unseen descriptions uniformly instead of failing
    #[arg(long)]
    fallback_uniform: bool,
    /// Score the uniform reference model instead of a checkpoint
    #[arg(long)]
    uniform: bool,
    /// Resolution for --uniform, or a consistency check against a checkpoint
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    description: String,
    /// Evaluate the joint probability at this HSV point
    #[arg(long, num_args = 3, value_names = ["H", "S", "V"])]
    point: Option<Vec<f64>>,
    /// Export the three channel distributions as CSV plot data
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Args)]
struct CorrelateArgs {
    /// Manifest TSV of observations
    #[arg(long)]
    input: PathBuf,
    /// Minimum observations per description to include it
    #[arg(long, default_value_t = 100)]
    min_count: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory for full/ and extrapolation/ manifests plus ground truth
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    n_base: usize,
    #[arg(long, default_value_t = 8)]
    n_modifiers: usize,
    #[arg(long, default_value_t = 100)]
    samples_per_name: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(message) = validate_thread_env() {
        eprintln!("error: {message}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// CHROMADIST_THREADS caps internal parallelism; all current paths are
/// single-threaded, but the value is still validated so typos fail loudly.
fn validate_thread_env() -> Result<(), String> {
    match std::env::var("CHROMADIST_THREADS") {
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(format!(
                "CHROMADIST_THREADS must be a positive integer, got {raw:?}"
            )),
        },
        Err(_) => Ok(()),
    }
}

/// 0 success, 1 internal failure, 2 user/input error.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::TrainingFailure { .. }) => 1,
        Some(_) => 2,
        None => {
            if err.downcast_ref::<std::io::Error>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::SplitExtrapolation(args) => cmd_split_extrapolation(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Query(args) => cmd_query(args),
        Command::Correlate(args) => cmd_correlate(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

fn write_atomic(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn read_to_string(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_split(dir: &Path, split: &CorpusSplit, header: Option<&str>) -> anyhow::Result<()> {
    for (name, observations) in [
        ("train.tsv", &split.train),
        ("dev.tsv", &split.dev),
        ("test.tsv", &split.test),
    ] {
        let mut body = String::new();
        if let Some(h) = header {
            body.push_str(h);
        }
        body.push_str(&observations_to_tsv(observations));
        write_atomic(&dir.join(name), &body)?;
    }
    write_atomic(&dir.join("vocab.txt"), &split.vocabulary.to_lines())?;
    Ok(())
}

/// Reads train.tsv/dev.tsv/test.tsv back into a tokenized split. The
/// vocabulary is rebuilt from the train manifest, which reproduces the
/// vocab.txt written next to the manifests.
fn read_split(dir: &Path) -> anyhow::Result<CorpusSplit> {
    let mut records = Vec::new();
    for (name, label) in [
        ("train.tsv", SplitLabel::Train),
        ("dev.tsv", SplitLabel::Dev),
        ("test.tsv", SplitLabel::Test),
    ] {
        let text = read_to_string(&dir.join(name))?;
        for mut record in parse_tsv(&text, false)? {
            record.split = Some(label);
            records.push(record);
        }
    }
    Ok(ingest(&records, &SplitSpec::Labeled)?)
}

/// Reads a single manifest as bare observations (no vocabulary mapping), for
/// evaluation and correlation where only description and color are needed.
fn read_observations(path: &Path) -> anyhow::Result<Vec<Observation>> {
    let text = read_to_string(path)?;
    let records = parse_tsv(&text, false)?;
    let mut observations = Vec::with_capacity(records.len());
    for record in records {
        for (channel, value) in [('h', record.h), ('s', record.s), ('v', record.v)] {
            if !(0.0..=1.0).contains(&value) || !value.is_finite() {
                return Err(Error::ChannelOutOfRange {
                    line: record.line,
                    channel,
                    value,
                }
                .into());
            }
        }
        observations.push(Observation {
            description: record.description,
            tokens: Vec::new(),
            color: ColorPoint::new(record.h, record.s, record.v)?,
        });
    }
    Ok(observations)
}

fn cmd_prepare(args: PrepareArgs) -> anyhow::Result<()> {
    let text = read_to_string(&args.input)?;
    let records = parse_tsv(&text, args.has_header)?;
    let spec = if args.labeled {
        SplitSpec::Labeled
    } else {
        SplitSpec::Ratio {
            train: args.train_frac,
            dev: args.dev_frac,
            seed: args.seed,
        }
    };
    let split = ingest(&records, &spec)?;
    write_split(&args.output_dir, &split, None)?;
    println!(
        "prepared {} observations ({} train, {} dev, {} test), vocabulary {}",
        split.observation_count(),
        split.train.len(),
        split.dev.len(),
        split.test.len(),
        split.vocabulary.len()
    );
    Ok(())
}

fn cmd_split_extrapolation(args: SplitExtrapolationArgs) -> anyhow::Result<()> {
    let full = read_split(&args.input_dir)?;
    let (split, selected) = build_extrapolation_split(&full, args.count, args.min_other_uses)?;
    let header = format!(
        "# chromadist split-extrapolation --count {} --min-other-uses {}\n",
        args.count, args.min_other_uses
    );
    write_split(&args.output_dir, &split, Some(&header))?;
    let mut selected_file = header.clone();
    for desc in &selected {
        selected_file.push_str(desc);
        selected_file.push('\n');
    }
    write_atomic(&args.output_dir.join("selected.txt"), &selected_file)?;
    println!("held out {} descriptions:", selected.len());
    for desc in &selected {
        println!("  {desc}");
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let split = read_split(&args.input_dir)?;
    let discretizer = match args.sigma {
        Some(sigma) => DiscretizerConfig::new(args.resolution, sigma)?,
        None => DiscretizerConfig::with_resolution(args.resolution)?,
    };
    match args.model {
        ModelKind::Baseline => {
            let model = fit_baseline(&split.train, discretizer)?;
            save_baseline(&model, &args.output)?;
            println!(
                "baseline fitted on {} observations over {} descriptions -> {}",
                split.train.len(),
                model.descriptions().count(),
                args.output.display()
            );
        }
        ModelKind::Cdest => {
            let mut config = CdestConfig::new(discretizer);
            config.embed_dim = args.embed_dim;
            config.hidden_dim = args.hidden_dim;
            config.dropout = args.dropout;
            config.learning_rate = args.learning_rate;
            config.batch_size = args.batch_size;
            config.max_epochs = args.max_epochs;
            config.patience = args.patience;
            config.seed = args.seed;
            let (model, log) = train_cdest(&split, &config)?;
            save_cdest(&model, &args.output)?;
            if let Some(log_path) = &args.log {
                let mut body = String::from(EpochLog::tsv_header());
                body.push('\n');
                for entry in &log {
                    body.push_str(&entry.tsv_row());
                    body.push('\n');
                }
                write_atomic(log_path, &body)?;
            }
            if let Some(last) = log.last() {
                println!(
                    "cdest trained {} epochs, final dev perplexity {} (standardized {}) -> {}",
                    log.len(),
                    last.dev_pp,
                    last.dev_pp_std,
                    args.output.display()
                );
            }
        }
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let test = read_observations(&args.test)?;
    let report = if args.uniform {
        let resolution = args.resolution.unwrap_or(64);
        let model = UniformModel { resolution };
        perplexity(&model, &test)?
    } else {
        let checkpoint =
            load_checkpoint_with_resolution(args.checkpoint.as_deref().unwrap(), args.resolution)?;
        let model: &dyn ColorModel = match &checkpoint {
            Checkpoint::Baseline(m) => m,
            Checkpoint::Cdest(m) => m.as_ref(),
        };
        if args.fallback_uniform {
            perplexity(&UniformFallback { inner: model }, &test)?
        } else {
            perplexity(model, &test)?
        }
    };
    let body = format!("{}\n{}\n", EvalReport::tsv_header(), report.tsv_row());
    match &args.output {
        Some(path) => write_atomic(path, &body)?,
        None => print!("{body}"),
    }
    Ok(())
}

fn distributions_for(
    checkpoint: &Checkpoint,
    description: &str,
) -> anyhow::Result<[BinnedDistribution; 3]> {
    match checkpoint {
        Checkpoint::Baseline(m) => Ok(query_baseline(m, description)?.clone()),
        Checkpoint::Cdest(m) => Ok(predict(m, description)?),
    }
}

fn cmd_query(args: QueryArgs) -> anyhow::Result<()> {
    let checkpoint = load_checkpoint_with_resolution(&args.checkpoint, None)?;
    let dists = distributions_for(&checkpoint, &args.description)?;
    let n = dists[0].resolution();
    println!(
        "{} model, {} bins per channel, description: {}",
        checkpoint.kind_name(),
        n,
        args.description
    );
    for (name, dist) in ["hue", "saturation", "value"].iter().zip(&dists) {
        let (best, mass) = dist
            .masses()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty distribution");
        println!(
            "  {name:>10}: mode bin {}/{n} covering ({:.4}, {:.4}], mass {mass:.4}",
            best + 1,
            best as f64 / n as f64,
            (best + 1) as f64 / n as f64
        );
    }
    if let Some(point) = &args.point {
        let color = ColorPoint::new(point[0], point[1], point[2])?;
        let p = joint_probability(&dists[0], &dists[1], &dists[2], &color)?;
        let uniform = 1.0 / (n as f64).powi(3);
        println!(
            "  P(h={}, s={}, v={}) = {p:.6e} ({:.2}x uniform)",
            color.h,
            color.s,
            color.v,
            p / uniform
        );
    }
    if let Some(export) = &args.export {
        let csv = export_csv(&[("h", &dists[0]), ("s", &dists[1]), ("v", &dists[2])]);
        write_atomic(export, &csv)?;
        println!("  wrote plot data to {}", export.display());
    }
    Ok(())
}

fn cmd_correlate(args: CorrelateArgs) -> anyhow::Result<()> {
    let observations = read_observations(&args.input)?;
    let report = spearman_independence(&observations, args.min_count)?;
    let body = report.tsv();
    match &args.output {
        Some(path) => write_atomic(path, &body)?,
        None => print!("{body}"),
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let corpus = generate_synthetic(
        args.seed,
        args.n_base,
        args.n_modifiers,
        args.samples_per_name,
    )?;
    write_split(&args.output_dir.join("full"), &corpus.full, None)?;
    write_split(
        &args.output_dir.join("extrapolation"),
        &corpus.extrapolation,
        None,
    )?;
    write_atomic(
        &args.output_dir.join("ground_truth.tsv"),
        &ground_truth_tsv(&corpus.ground_truth),
    )?;
    let mut held_out = String::new();
    for desc in &corpus.held_out {
        held_out.push_str(desc);
        held_out.push('\n');
    }
    write_atomic(&args.output_dir.join("held_out.txt"), &held_out)?;
    println!(
        "synthetic corpus: {} observations, {} held-out descriptions -> {}",
        corpus.full.observation_count(),
        corpus.held_out.len(),
        args.output_dir.display()
    );
    Ok(())
}
