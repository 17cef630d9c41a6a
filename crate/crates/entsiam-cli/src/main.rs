//! `entsiam` — reproducible pipeline runs from the command line.
//!
//! Subcommands mirror the pipeline stages: `synth` or `ingest` produce a
//! corpus manifest, `obfuscate` appends NOP-padded variants, `render` dumps
//! entropy images, and `train` / `eval` / `embed` drive the model. Every
//! stage that takes a `--seed` is deterministic: the same invocation writes
//! byte-identical artifacts.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use entsiam::binfeed::{scan_corpus, synth_corpus, write_atomic, Manifest, SynthSpec};
use entsiam::entropix::{corpus_stats, render_for_entry, write_pgm, RenderParams};
use entsiam::episodes::LineageFilter;
use entsiam::gradcore::OptimKind;
use entsiam::obfuscate::obfuscate_corpus;
use entsiam::sdae::Pooling;
use entsiam::trainer::{
    evaluate, export_embeddings, load_checkpoint, losses_to_tsv, save_checkpoint, train,
};

use config::Overlay;

#[derive(Parser)]
#[command(name = "entsiam", version, about = "Few-shot malware family classification \
on entropy images: corpus tools, NOP obfuscation, episodic training and evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Scan an on-disk corpus (one directory per family) into a manifest.
    Ingest(IngestArgs),
    /// Generate a synthetic labeled corpus.
    Synth(SynthArgs),
    /// Append NOP-obfuscated variants of every original sample.
    Obfuscate(ObfuscateArgs),
    /// Render every sample to a PGM entropy image plus a stats file.
    Render(RenderArgs),
    /// Train a model episodically and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out classes and print the accuracy.
    Eval(EvalArgs),
    /// Export per-sample latent and head-projection embeddings as TSV.
    Embed(EmbedArgs),
}

/// Knobs shared by the model-facing subcommands. Unset flags fall back to
/// the config file (see `--config`), then to built-in defaults.
#[derive(Args, Default)]
struct KnobArgs {
    /// Flat `key = value` config file; flags override it. Defaults to the
    /// path in ENTSIAM_CONFIG when set.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; all randomness derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Classes per episode (C).
    #[arg(long)]
    way: Option<usize>,
    /// Support samples per class (K).
    #[arg(long)]
    shot: Option<usize>,
    /// Queries per episode; defaults to 19 for 1-shot, 15 from 5-shot up.
    #[arg(long)]
    queries: Option<usize>,
    /// Training episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// Evaluation episodes per run.
    #[arg(long)]
    eval_episodes: Option<usize>,
    /// Evaluation runs; the report averages over them.
    #[arg(long)]
    runs: Option<usize>,
    /// Reconstruction loss weight in [0, 1].
    #[arg(long)]
    lambda: Option<f64>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Update rule: sgd | adam.
    #[arg(long)]
    optimizer: Option<OptimKind>,
    /// Latent pooling for the relation head: mean | sum.
    #[arg(long)]
    pooling: Option<Pooling>,
    /// Relation head hidden width.
    #[arg(long)]
    head_dim: Option<usize>,
    /// Encoder channel width.
    #[arg(long)]
    channels: Option<usize>,
    /// Drop the reconstruction branch (relation loss only).
    #[arg(long)]
    no_decoder: bool,
    /// Train on NOP-obfuscated inputs (reconstruction targets stay clean).
    #[arg(long)]
    obfuscate_train: bool,
    /// NOP count for --obfuscate-train inputs.
    #[arg(long)]
    frequency: Option<u32>,
    /// Bytes per entropy block.
    #[arg(long)]
    block_size: Option<usize>,
    /// Blocks per image row before resizing.
    #[arg(long)]
    width_blocks: Option<usize>,
    /// Classes held out for evaluation (default: a quarter, at least 2).
    #[arg(long)]
    test_classes: Option<usize>,
    /// Seed for the class split only (default: --seed).
    #[arg(long)]
    split_seed: Option<u64>,
}

impl KnobArgs {
    fn overlay(&self) -> Overlay {
        Overlay {
            way: self.way,
            shot: self.shot,
            queries: self.queries,
            episodes_train: self.episodes,
            episodes_eval: self.eval_episodes,
            runs: self.runs,
            lambda: self.lambda,
            lr: self.lr,
            optimizer: self.optimizer,
            pooling: self.pooling,
            head_dim: self.head_dim,
            channels: self.channels,
            decoder: self.no_decoder.then_some(false),
            obfuscate_train: self.obfuscate_train.then_some(true),
            train_frequency: self.frequency,
            seed: self.seed,
            block_size: self.block_size,
            width_blocks: self.width_blocks,
            norm_mean: None,
            norm_std: None,
            test_classes: self.test_classes,
            split_seed: self.split_seed,
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    /// Corpus root: one subdirectory per family, samples inside.
    root: PathBuf,
    /// Output manifest path [default: <root>/manifest.tsv].
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory the samples are written into.
    #[arg(long)]
    out: PathBuf,
    /// Output manifest path [default: <out>/manifest.tsv].
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Number of families.
    #[arg(long, default_value_t = 8)]
    families: usize,
    /// Samples per family.
    #[arg(long, default_value_t = 40)]
    per_family: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct ObfuscateArgs {
    /// Input manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Output manifest path [default: manifest-obf.tsv next to the input].
    #[arg(long)]
    out_manifest: Option<PathBuf>,
    /// NOP count per variant; repeat for several variants per sample.
    #[arg(long = "frequency")]
    frequencies: Vec<u32>,
    /// Byte value to insert (144 = x86 NOP).
    #[arg(long, default_value_t = 0x90)]
    nop_byte: u8,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct RenderArgs {
    /// Input manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory the images are written into.
    #[arg(long)]
    out: PathBuf,
    /// Flat `key = value` config file for block_size / width_blocks.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bytes per entropy block.
    #[arg(long)]
    block_size: Option<usize>,
    /// Blocks per image row before resizing.
    #[arg(long)]
    width_blocks: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Input manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint output path.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// Loss log output path (TSV).
    #[arg(long, default_value = "losses.tsv")]
    losses: PathBuf,
    #[command(flatten)]
    knobs: KnobArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Input manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Trained checkpoint. Architecture and normalization come from it
    /// unless explicitly overridden.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Episode lineage: clean | any | obfuscated:<frequency>.
    #[arg(long, default_value = "clean")]
    lineage: String,
    /// Also write the full per-run report here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    knobs: KnobArgs,
}

#[derive(Args)]
struct EmbedArgs {
    /// Input manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Embedding table output path (TSV).
    #[arg(long, default_value = "embeddings.tsv")]
    out: PathBuf,
    /// Flat `key = value` config file for block_size / width_blocks.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bytes per entropy block.
    #[arg(long)]
    block_size: Option<usize>,
    /// Blocks per image row before resizing.
    #[arg(long)]
    width_blocks: Option<usize>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Ingest(a) => run_ingest(a),
        Cmd::Synth(a) => run_synth(a),
        Cmd::Obfuscate(a) => run_obfuscate(a),
        Cmd::Render(a) => run_render(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Embed(a) => run_embed(a),
    }
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path, None).with_context(|| format!("loading manifest {}", path.display()))
}

fn run_ingest(args: IngestArgs) -> Result<()> {
    let m = scan_corpus(&args.root)
        .with_context(|| format!("scanning corpus root {}", args.root.display()))?;
    let out = args
        .manifest
        .unwrap_or_else(|| args.root.join("manifest.tsv"));
    m.save(&out, &[format!("ingested from {}", args.root.display())])?;
    println!(
        "{} samples in {} families -> {}",
        m.len(),
        m.families().len(),
        out.display()
    );
    Ok(())
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_families: args.families,
        samples_per_family: args.per_family,
        ..SynthSpec::default()
    };
    let mut m = synth_corpus(&spec, args.seed).context("generating synthetic corpus")?;
    m.materialize(&args.out)
        .with_context(|| format!("writing samples under {}", args.out.display()))?;
    let out = args
        .manifest
        .unwrap_or_else(|| args.out.join("manifest.tsv"));
    m.save(
        &out,
        &[format!(
            "synthetic corpus: families = {}, per_family = {}, seed = {}",
            args.families, args.per_family, args.seed
        )],
    )?;
    println!(
        "{} synthetic samples in {} families -> {}",
        m.len(),
        args.families,
        out.display()
    );
    Ok(())
}

fn run_obfuscate(args: ObfuscateArgs) -> Result<()> {
    let m = load_manifest(&args.manifest)?;
    let frequencies = if args.frequencies.is_empty() {
        vec![200]
    } else {
        args.frequencies.clone()
    };
    let mut obf = obfuscate_corpus(&m, &frequencies, args.nop_byte, args.seed)
        .context("building obfuscated variants")?;
    let root = obf
        .root()
        .map(Path::to_path_buf)
        .context("manifest has no root directory to write variants into")?;
    obf.materialize(&root)?;
    let out = args.out_manifest.unwrap_or_else(|| {
        args.manifest
            .parent()
            .unwrap_or(Path::new("."))
            .join("manifest-obf.tsv")
    });
    obf.save(
        &out,
        &[format!(
            "obfuscated: frequencies = {frequencies:?}, nop_byte = {}, seed = {}",
            args.nop_byte, args.seed
        )],
    )?;
    println!(
        "{} entries ({} new variants) -> {}",
        obf.len(),
        obf.len() - m.len(),
        out.display()
    );
    Ok(())
}

fn render_params(
    config: Option<&Path>,
    block_size: Option<usize>,
    width_blocks: Option<usize>,
) -> Result<RenderParams> {
    let flags = Overlay {
        block_size,
        width_blocks,
        ..Overlay::default()
    };
    let rc = config::resolve(config, flags, Overlay::default())?;
    Ok(rc.train.render)
}

fn run_render(args: RenderArgs) -> Result<()> {
    let m = load_manifest(&args.manifest)?;
    let params = render_params(args.config.as_deref(), args.block_size, args.width_blocks)?;
    for idx in 0..m.len() {
        let e = &m.entries()[idx];
        let img = render_for_entry(&m, idx, params)
            .with_context(|| format!("rendering {}", e.origin_id))?;
        let dir = args.out.join(&e.family);
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(format!("{}.pgm", e.origin_id));
        write_pgm(&path, &img, &format!("{} {}", e.origin_id, e.lineage))?;
    }
    let stats = corpus_stats(&m, params)?;
    let text = format!(
        "# block_size = {}\n# width_blocks = {}\nmean\tstd\timages\tpixels\n{}\t{}\t{}\t{}\n",
        params.block_size, params.width_blocks, stats.mean, stats.std, stats.images, stats.pixels
    );
    write_atomic(&args.out.join("stats.tsv"), text.as_bytes())?;
    println!(
        "{} images -> {}; pixel mean {:.5}, std {:.5}",
        m.len(),
        args.out.display(),
        stats.mean,
        stats.std
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let m = load_manifest(&args.manifest)?;
    let rc = config::resolve(args.knobs.config.as_deref(), args.knobs.overlay(), Overlay::default())?;
    let split = config::split_for(&rc, &m)?;
    let run = train(&rc.train, &m, &split.train_classes).context("training")?;
    save_checkpoint(&args.out, &run.checkpoint)?;
    let mut echo = rc.train.echo();
    echo.extend(config::split_echo(&rc, &split));
    write_atomic(&args.losses, losses_to_tsv(&run.losses, &echo).as_bytes())?;
    let last = run.losses.last().expect("at least one training episode");
    println!(
        "trained {} episodes on {} classes; final loss {:.4}",
        run.losses.len(),
        split.train_classes.len(),
        last.total
    );
    println!("checkpoint -> {}", args.out.display());
    println!("losses -> {}", args.losses.display());
    Ok(())
}

fn parse_lineage(s: &str) -> Result<LineageFilter> {
    match s {
        "clean" => Ok(LineageFilter::CleanOnly),
        "any" => Ok(LineageFilter::Any),
        other => match other.strip_prefix("obfuscated:") {
            Some(freq) => Ok(LineageFilter::ObfuscatedOnly(freq.parse().with_context(
                || format!("bad frequency in --lineage {other}"),
            )?)),
            None => bail!("unknown lineage `{other}` (expected clean | any | obfuscated:<frequency>)"),
        },
    }
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let m = load_manifest(&args.manifest)?;
    let ckpt = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    // The checkpoint supplies architecture and normalization; flags and the
    // config file can still override (and then must match the weights).
    let base = Overlay {
        channels: Some(ckpt.model.cfg.channels),
        head_dim: Some(ckpt.model.cfg.head_dim),
        pooling: Some(ckpt.model.cfg.pooling),
        decoder: Some(ckpt.model.cfg.decoder_enabled),
        norm_mean: Some(ckpt.norm_mean),
        norm_std: Some(ckpt.norm_std),
        ..Overlay::default()
    };
    let rc = config::resolve(args.knobs.config.as_deref(), args.knobs.overlay(), base)?;
    let filter = parse_lineage(&args.lineage)?;
    let split = config::split_for(&rc, &m)?;
    let report = evaluate(&ckpt, &m, &split.test_classes, filter, &rc.train)
        .context("evaluating")?;
    if let Some(path) = &args.report {
        write_atomic(path, report.to_text().as_bytes())?;
    }
    println!("{}", report.summary_line());
    Ok(())
}

fn run_embed(args: EmbedArgs) -> Result<()> {
    let m = load_manifest(&args.manifest)?;
    let ckpt = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let params = render_params(args.config.as_deref(), args.block_size, args.width_blocks)?;
    let tsv = export_embeddings(&ckpt, &m, params).context("exporting embeddings")?;
    write_atomic(&args.out, tsv.as_bytes())?;
    println!("{} rows -> {}", m.len(), args.out.display());
    Ok(())
}
