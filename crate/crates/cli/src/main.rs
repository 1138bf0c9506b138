//! Single entry point for the whole pipeline: dataset construction, LAB
//! conversion, embeddings, batch planning, training, evaluation, gradient
//! checking, and parameter accounting.
//!
//! Exit codes: 0 on success, 1 on usage errors (usage text on stderr), 2 on
//! runtime failures (the module error name and message on stderr).

use std::fs::OpenOptions;
use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use aesnet::checkpoint::{load_checkpoint, save_checkpoint};
use aesnet::coherence::{
    fallback_embed, plan_epoch, read_embeddings, write_batch_plan, write_embeddings,
    EmbeddingIndex,
};
use aesnet::colorspace::{srgb_to_lab, write_labf};
use aesnet::config::{load_config, GlobalConfig};
use aesnet::dataset::{
    build_ava2, parse_ava_metadata, read_manifest, resolve_image_path, write_manifest, Split,
    SplitConfig,
};
use aesnet::evaluator::evaluate;
use aesnet::gradcheck;
use aesnet::imageio::load_rgb;
use aesnet::net::AestheticNet;
use aesnet::trainer::Trainer;
use aesnet::Error;

#[derive(Parser)]
#[command(
    name = "aesnet",
    about = "Training engine and data pipeline for binary visual-aesthetics classification",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an AVA2-style manifest from vote metadata
    BuildDataset(BuildDatasetArgs),
    /// Convert an image file to a raw LABF dump
    LabConvert(LabConvertArgs),
    /// Compute embeddings for every manifest image
    Embed(EmbedArgs),
    /// Plan one epoch of coherent minibatches
    PlanBatches(PlanBatchesArgs),
    /// Train a network over a manifest
    Train(TrainArgs),
    /// Evaluate a checkpoint over a manifest split
    Eval(EvalArgs),
    /// Verify every backward pass against finite differences
    Gradcheck(GradcheckArgs),
    /// Print per-layer parameter shapes and the total count
    Params(ParamsArgs),
}

#[derive(Args)]
struct BuildDatasetArgs {
    /// AVA-style vote metadata file
    #[arg(long, value_name = "FILE")]
    ava_meta: PathBuf,
    /// Directory the manifest's relative image paths refer to
    #[arg(long, value_name = "DIR")]
    images: PathBuf,
    /// Output manifest path
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    top_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    bottom_frac: f64,
    #[arg(long, default_value_t = 0.5)]
    test_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also pull train-only images beyond this percentile tail into the set
    #[arg(long, value_name = "FRAC")]
    extend_percentile: Option<f64>,
    /// Warn about manifest entries whose image files are missing
    #[arg(long, default_value_t = false)]
    check_files: bool,
}

#[derive(Args)]
struct LabConvertArgs {
    /// Input image file (8-bit RGB)
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Output raw LABF file
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedMethod {
    /// Area-pooled 8x8 L-channel vector
    Fallback,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    #[arg(long, value_name = "DIR")]
    images: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = EmbedMethod::Fallback)]
    method: EmbedMethod,
}

#[derive(Args)]
struct PlanBatchesArgs {
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    #[arg(long, value_name = "FILE")]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    #[arg(long, value_name = "DIR")]
    images: PathBuf,
    /// Embedding index (required for coherent batch planning)
    #[arg(long, value_name = "FILE")]
    embeddings: Option<PathBuf>,
    /// `key = value` configuration file
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output checkpoint path
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Compose minibatches from similar images (default)
    #[arg(long, conflicts_with = "random")]
    coherent: bool,
    /// Ablation baseline: seeded random minibatches
    #[arg(long)]
    random: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics file; defaults to `<out>.metrics`
    #[arg(long, value_name = "FILE")]
    metrics: Option<PathBuf>,
    /// Also write the checkpoint every N epochs
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    #[arg(long, value_name = "DIR")]
    images: PathBuf,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Write per-image rows `image_id,true_label,p_attractive`
    #[arg(long, value_name = "FILE")]
    per_image: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ParamsArgs {
    /// `key = value` configuration file (defaults apply when omitted)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::BuildDataset(args) => build_dataset(args),
        Command::LabConvert(args) => lab_convert(args),
        Command::Embed(args) => embed(args),
        Command::PlanBatches(args) => plan_batches(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Gradcheck(args) => run_gradcheck(args),
        Command::Params(args) => params(args),
    }
}

fn build_dataset(args: BuildDatasetArgs) -> Result<(), Error> {
    let file = std::fs::File::open(&args.ava_meta)
        .map_err(|e| Error::io(args.ava_meta.display().to_string(), e))?;
    let parsed = parse_ava_metadata(BufReader::new(file))?;
    for m in &parsed.malformed {
        eprintln!("warning: line {}: {}", m.line, m.reason);
    }
    let cfg = SplitConfig {
        top_frac: args.top_frac,
        bottom_frac: args.bottom_frac,
        test_frac: args.test_frac,
        seed: args.seed,
        extend_percentile: args.extend_percentile,
    };
    let build = build_ava2(&parsed.records, &cfg, &args.images)?;
    if build.dropped_zero_votes > 0 {
        eprintln!(
            "warning: dropped {} records with zero total votes",
            build.dropped_zero_votes
        );
    }
    if args.check_files {
        for e in &build.entries {
            let p = resolve_image_path(&args.images, &e.path);
            if !p.exists() {
                eprintln!("warning: missing image file {}", p.display());
            }
        }
    }
    write_manifest(&build.entries, &args.out)?;
    let train = build.entries.iter().filter(|e| e.split == Split::Train).count();
    println!(
        "manifest={} entries={} train={} test={} malformed_lines={}",
        args.out.display(),
        build.entries.len(),
        train,
        build.entries.len() - train,
        parsed.malformed.len()
    );
    Ok(())
}

fn lab_convert(args: LabConvertArgs) -> Result<(), Error> {
    let rgb = load_rgb(&args.input)?;
    let lab = srgb_to_lab(&rgb);
    write_labf(&lab, &args.out)?;
    println!(
        "wrote {} ({}x{} pixels)",
        args.out.display(),
        lab.width(),
        lab.height()
    );
    Ok(())
}

fn embed(args: EmbedArgs) -> Result<(), Error> {
    let EmbedMethod::Fallback = args.method;
    let entries = read_manifest(&args.manifest)?;
    let mut index = EmbeddingIndex::new(aesnet::coherence::FALLBACK_DIM);
    for entry in &entries {
        let path = resolve_image_path(&args.images, &entry.path);
        let rgb = load_rgb(&path).map_err(|e| match e {
            Error::IoFailure { .. } => Error::MissingImage {
                id: entry.image_id.clone(),
                path: path.display().to_string(),
            },
            other => other,
        })?;
        index.insert(fallback_embed(&entry.image_id, &srgb_to_lab(&rgb)))?;
    }
    write_embeddings(&index, &args.out)?;
    println!("embeddings={} images={} dim={}", args.out.display(), index.len(), index.dim());
    Ok(())
}

fn plan_batches(args: PlanBatchesArgs) -> Result<(), Error> {
    let entries = read_manifest(&args.manifest)?;
    let train: Vec<_> = entries.into_iter().filter(|e| e.split == Split::Train).collect();
    let index = read_embeddings(&args.embeddings)?;
    let plan = plan_epoch(&index, &train, args.batch_size, args.seed)?;
    for w in &plan.warnings {
        eprintln!("warning: {w}");
    }
    write_batch_plan(&plan, &args.out)?;
    println!(
        "plan={} batches={} images={}",
        args.out.display(),
        plan.batches.len(),
        plan.all_ids().count()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => GlobalConfig::default(),
    };
    // Command line wins over the config file.
    if args.coherent {
        cfg.train.coherent = true;
    }
    if args.random {
        cfg.train.coherent = false;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(every) = args.checkpoint_every {
        cfg.train.checkpoint_every = every;
    }

    let entries = read_manifest(&args.manifest)?;
    let embeddings = match &args.embeddings {
        Some(path) => Some(read_embeddings(path)?),
        None => None,
    };
    let net = AestheticNet::<f32>::build(cfg.net.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(net, cfg.train.clone(), &entries, &args.images, embeddings)?;

    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.metrics", args.out.display())));
    let mut metrics_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;

    for epoch in 0..cfg.train.epochs {
        let m = trainer.run_epoch(epoch)?;
        let line = m.format_line();
        println!("{line}");
        writeln!(metrics_file, "{line}")
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
        let every = cfg.train.checkpoint_every;
        if every > 0 && (epoch + 1) % every == 0 {
            let (net, opt) = trainer.parts_mut();
            save_checkpoint(net, opt, &args.out)?;
        }
    }
    let (mut net, opt) = trainer.into_parts();
    save_checkpoint(&mut net, &opt, &args.out)?;
    println!("checkpoint={}", args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Error> {
    let (net, _) = load_checkpoint::<f32>(&args.checkpoint)?;
    let entries = read_manifest(&args.manifest)?;
    let report = evaluate(&net, &entries, args.split.into(), &args.images)?;
    println!(
        "n={} acc={:.4} tp={} tn={} fp={} fn={}",
        report.n,
        report.accuracy,
        report.true_positives(),
        report.true_negatives(),
        report.false_positives(),
        report.false_negatives()
    );
    if let Some(path) = &args.per_image {
        let label_of: std::collections::HashMap<&str, &'static str> = entries
            .iter()
            .map(|e| (e.image_id.as_str(), e.label.as_str()))
            .collect();
        let mut out = String::new();
        for (id, p) in &report.per_image {
            out.push_str(&format!("{id},{},{p}\n", label_of[id.as_str()]));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<(), Error> {
    let reports = gradcheck::run_suite(args.seed, 10);
    let mut all_pass = true;
    for r in &reports {
        println!(
            "op={} max_rel_err={:.3e} tolerance={:.1e} {}",
            r.name,
            r.max_rel_err,
            gradcheck::TOLERANCE,
            if r.passed() { "pass" } else { "FAIL" }
        );
        all_pass &= r.passed();
    }
    if !all_pass {
        return Err(Error::InvalidConfig(
            "gradient check failed; see per-op lines above".into(),
        ));
    }
    Ok(())
}

fn params(args: ParamsArgs) -> Result<(), Error> {
    let cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => GlobalConfig::default(),
    };
    let mut net = AestheticNet::<f32>::build(cfg.net, 0)?;
    for (name, shape) in net.named_param_shapes() {
        let numel: usize = shape.iter().product();
        println!("{name} shape={shape:?} params={numel}");
    }
    println!("total={}", net.count_parameters());
    Ok(())
}
