//! Episode-driven training, evaluation and artifact export.
//!
//! The loop per episode: sample a C-way K-shot task from the manifest,
//! render and normalize its images (obfuscated inputs against clean
//! reconstruction targets when enabled), run the model's combined
//! relation + reconstruction pass, and step the optimizer. Evaluation
//! replays the same machinery in eval mode over several independently
//! seeded runs and reports mean accuracy with a 95% half-width.
//! Everything is deterministic in (config, manifest, class split).

pub mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION,
};

use crate::binfeed::{CorpusError, Lineage, Manifest};
use crate::entropix::{self, EntropixError, NormalizedImage, RenderParams};
use crate::episodes::{sample_episode, Episode, EpisodeError, EpisodePool, LineageFilter};
use crate::gradcore::{GradError, OptimKind, Optimizer, Tensor4};
use crate::sdae::{self, ModelConfig, Pooling, SdaeError, SdaeModel};
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Render(#[from] EntropixError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Model(#[from] SdaeError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("episode {episode}: loss is {value}, aborting")]
    NonFiniteLoss { episode: usize, value: f64 },
    #[error("invalid config: {0}")]
    BadConfig(String),
}

// ===== Configuration =====

/// Every knob of a training or evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Classes per episode (C).
    pub way: usize,
    /// Support samples per class (K).
    pub shot: usize,
    /// Total queries per episode, spread across the C classes.
    pub n_query: usize,
    pub episodes_train: usize,
    /// Test episodes per evaluation run.
    pub episodes_eval: usize,
    /// Independent evaluation replicates (fresh episode seeds each).
    pub runs: usize,
    /// Reconstruction weight in the combined loss.
    pub lambda: f64,
    pub lr: f64,
    pub optimizer: OptimKind,
    pub pooling: Pooling,
    /// Hidden width of the relation head.
    pub head_dim: usize,
    /// Channel width of every encoder stage.
    pub channels: usize,
    /// Detached decoder skips the reconstruction pass entirely.
    pub decoder_enabled: bool,
    /// Train on NOP-obfuscated inputs against their clean ancestors'
    /// images; otherwise inputs and targets are both clean.
    pub obfuscate_train: bool,
    /// Insertion frequency of the training inputs when obfuscation is on.
    pub train_frequency: u32,
    pub seed: u64,
    pub render: RenderParams,
    /// Normalization constants applied to every rendered image.
    pub norm_mean: f64,
    pub norm_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            way: 2,
            shot: 1,
            n_query: default_queries(1),
            episodes_train: 20_000,
            episodes_eval: 2_000,
            runs: 10,
            lambda: 0.7,
            lr: 1e-2,
            optimizer: OptimKind::Adam,
            pooling: Pooling::Mean,
            head_dim: 256,
            channels: 64,
            decoder_enabled: true,
            obfuscate_train: false,
            train_frequency: 200,
            seed: 42,
            render: RenderParams::default(),
            norm_mean: entropix::DEFAULT_MEAN,
            norm_std: entropix::DEFAULT_STD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        for (name, v) in [
            ("way", self.way),
            ("shot", self.shot),
            ("queries", self.n_query),
            ("episodes_train", self.episodes_train),
            ("episodes_eval", self.episodes_eval),
            ("runs", self.runs),
            ("head_dim", self.head_dim),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.render.block_size == 0 || self.render.width_blocks == 0 {
            return bad("render block_size and width_blocks must be at least 1".into());
        }
        if self.norm_std <= 0.0 {
            return bad(format!("norm_std {} must be positive", self.norm_std));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_side: entropix::TARGET_SIDE,
            channels: self.channels,
            head_dim: self.head_dim,
            pooling: self.pooling,
            decoder_enabled: self.decoder_enabled,
        }
    }

    /// Which manifest entries may feed training episodes.
    pub fn train_filter(&self) -> LineageFilter {
        if self.obfuscate_train {
            LineageFilter::ObfuscatedOnly(self.train_frequency)
        } else {
            LineageFilter::CleanOnly
        }
    }

    /// Flat key=value view, echoed into every artifact this config produces.
    pub fn echo(&self) -> Vec<(String, String)> {
        [
            ("way", self.way.to_string()),
            ("shot", self.shot.to_string()),
            ("queries", self.n_query.to_string()),
            ("episodes_train", self.episodes_train.to_string()),
            ("episodes_eval", self.episodes_eval.to_string()),
            ("runs", self.runs.to_string()),
            ("lambda", self.lambda.to_string()),
            ("lr", self.lr.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("pooling", self.pooling.to_string()),
            ("head_dim", self.head_dim.to_string()),
            ("channels", self.channels.to_string()),
            ("decoder", self.decoder_enabled.to_string()),
            ("obfuscate_train", self.obfuscate_train.to_string()),
            ("train_frequency", self.train_frequency.to_string()),
            ("seed", self.seed.to_string()),
            ("block_size", self.render.block_size.to_string()),
            ("width_blocks", self.render.width_blocks.to_string()),
            ("norm_mean", self.norm_mean.to_string()),
            ("norm_std", self.norm_std.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Standard query batch size for a shot count: 19 queries in the 1-shot
/// protocol, 15 from 5-shot up.
pub fn default_queries(shot: usize) -> usize {
    if shot >= 5 {
        15
    } else {
        19
    }
}

// ===== Image preparation =====

/// Index of the entry whose image entry `idx` learns to reconstruct:
/// obfuscated entries target their nearest clean ancestor, everything else
/// targets itself.
pub fn recon_target(manifest: &Manifest, idx: usize) -> usize {
    let mut cur = idx;
    while let Lineage::Obfuscated { parent, .. } = &manifest.entries()[cur].lineage {
        cur = manifest
            .index_of(parent)
            .expect("manifest construction validates parent links");
    }
    cur
}

/// Per-entry render+normalize cache; episode sampling revisits the same
/// entries constantly and rendering dominates when it is not cached.
struct ImageCache<'m> {
    manifest: &'m Manifest,
    params: RenderParams,
    mean: f64,
    std: f64,
    images: RefCell<HashMap<usize, Rc<NormalizedImage>>>,
}

impl<'m> ImageCache<'m> {
    fn new(manifest: &'m Manifest, params: RenderParams, mean: f64, std: f64) -> Self {
        ImageCache {
            manifest,
            params,
            mean,
            std,
            images: RefCell::new(HashMap::new()),
        }
    }

    fn get(&self, idx: usize) -> Result<Rc<NormalizedImage>, TrainError> {
        if let Some(img) = self.images.borrow().get(&idx) {
            return Ok(Rc::clone(img));
        }
        let rendered = entropix::render_for_entry(self.manifest, idx, self.params)?;
        let img = Rc::new(entropix::normalize(&rendered, self.mean, self.std)?);
        self.images.borrow_mut().insert(idx, Rc::clone(&img));
        Ok(img)
    }
}

fn stack_images(cache: &ImageCache, idxs: &[usize]) -> Result<Tensor4, TrainError> {
    let side = entropix::TARGET_SIDE;
    let mut t = Tensor4::zeros(idxs.len(), 1, side, side);
    for (i, &idx) in idxs.iter().enumerate() {
        let img = cache.get(idx)?;
        t.item_mut(i).copy_from_slice(&img.values);
    }
    Ok(t)
}

/// Support block first (class-major), then queries — the batch layout the
/// model's episode pass expects.
fn episode_inputs(cache: &ImageCache, ep: &Episode) -> Result<Tensor4, TrainError> {
    let idxs: Vec<usize> = ep.support.iter().chain(&ep.query).copied().collect();
    stack_images(cache, &idxs)
}

/// Clean reconstruction targets aligned with [`episode_inputs`].
fn episode_targets(cache: &ImageCache, ep: &Episode) -> Result<Tensor4, TrainError> {
    let idxs: Vec<usize> = ep
        .support
        .iter()
        .chain(&ep.query)
        .map(|&idx| recon_target(cache.manifest, idx))
        .collect();
    stack_images(cache, &idxs)
}

// ===== Training =====

/// Loss readings for one training episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub episode: usize,
    pub relation: f64,
    pub mse: f64,
    pub total: f64,
}

/// A finished training run: the resulting checkpoint plus the loss curve.
#[derive(Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRecord>,
}

/// A freshly initialized, untrained checkpoint for `cfg` — the starting
/// point of [`train`] and a chance-level baseline for comparisons.
pub fn init_checkpoint(cfg: &TrainConfig) -> Checkpoint {
    Checkpoint {
        model: SdaeModel::new(cfg.model_config(), cfg.seed),
        norm_mean: cfg.norm_mean,
        norm_std: cfg.norm_std,
        lambda: cfg.lambda,
        seed: cfg.seed,
    }
}

/// Run episodic training over the given classes of `manifest`.
///
/// Each episode draws fresh support/query sets (seeded from the config
/// seed and the episode number), builds obfuscated-input/clean-target
/// batches when `obfuscate_train` is set, and steps the optimizer on the
/// combined loss. A non-finite loss aborts with the offending episode.
pub fn train(
    cfg: &TrainConfig,
    manifest: &Manifest,
    train_classes: &[String],
) -> Result<TrainRun, TrainError> {
    cfg.validate()?;
    let pool = EpisodePool::new(manifest, train_classes, cfg.train_filter())?;
    let cache = ImageCache::new(manifest, cfg.render, cfg.norm_mean, cfg.norm_std);
    let mut ckpt = init_checkpoint(cfg);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &ckpt.model.params());

    let mut losses = Vec::with_capacity(cfg.episodes_train);
    for i in 0..cfg.episodes_train {
        let ep_seed = crate::seeds::derive(cfg.seed, &["train-episode", &i.to_string()]);
        let ep = sample_episode(&pool, cfg.way, cfg.shot, cfg.n_query, ep_seed)?;
        let inputs = episode_inputs(&cache, &ep)?;
        let targets = if cfg.decoder_enabled {
            episode_targets(&cache, &ep)?
        } else {
            // Ignored by the episode pass; only the shape must line up.
            inputs.clone()
        };
        let ls = sdae::episode_grads(
            &mut ckpt.model,
            &inputs,
            &targets,
            cfg.way,
            cfg.shot,
            &ep.pair_labels(),
            cfg.lambda,
        )?;
        if !ls.total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                episode: i,
                value: ls.total,
            });
        }
        opt.step(&mut ckpt.model.params_mut())?;
        losses.push(LossRecord {
            episode: i,
            relation: ls.relation,
            mse: ls.mse,
            total: ls.total,
        });
        if (i + 1) % 250 == 0 {
            log::debug!(
                "episode {}/{}: relation {:.4} mse {:.4} total {:.4}",
                i + 1,
                cfg.episodes_train,
                ls.relation,
                ls.mse,
                ls.total
            );
        }
    }
    log::info!(
        "trained {} episodes ({}-way {}-shot)",
        cfg.episodes_train,
        cfg.way,
        cfg.shot
    );
    Ok(TrainRun {
        checkpoint: ckpt,
        losses,
    })
}

/// Render the loss curve as TSV with the config echoed in `#` comments.
pub fn losses_to_tsv(losses: &[LossRecord], echo: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in echo {
        out.push_str(&format!("# {k}={v}\n"));
    }
    out.push_str("episode\trelation\tmse\ttotal\n");
    for r in losses {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.episode, r.relation, r.mse, r.total
        ));
    }
    out
}

// ===== Evaluation =====

/// Accuracy aggregated over several independently seeded evaluation runs.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub way: usize,
    pub shot: usize,
    pub n_query: usize,
    /// Episodes per run.
    pub episodes: usize,
    pub runs: usize,
    /// Mean episode accuracy of each run.
    pub run_means: Vec<f64>,
    /// Mean of the run means.
    pub mean: f64,
    /// 95% confidence half-width over runs (0 for a single run).
    pub half_width: f64,
    /// Flat key=value echo of the producing config.
    pub config_echo: Vec<(String, String)>,
}

impl AccuracyReport {
    /// The one-line human summary, e.g. `2-way 1-shot: 0.9310 ± 0.0124`.
    pub fn summary_line(&self) -> String {
        format!(
            "{}-way {}-shot: {:.4} ± {:.4}",
            self.way, self.shot, self.mean, self.half_width
        )
    }

    /// Full report: config echo, per-run means, summary.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.config_echo {
            out.push_str(&format!("# {k}={v}\n"));
        }
        for (i, m) in self.run_means.iter().enumerate() {
            out.push_str(&format!("run\t{i}\t{m}\n"));
        }
        out.push_str(&self.summary_line());
        out.push('\n');
        out
    }
}

/// Fraction of queries whose top relation score lands on the true class.
/// `scores` is query-major (`q * way + c`); ties break toward the lowest
/// class index.
pub fn episode_accuracy(scores: &[f64], query_class: &[usize], way: usize) -> f64 {
    let mut correct = 0usize;
    for (q, &truth) in query_class.iter().enumerate() {
        let row = &scores[q * way..(q + 1) * way];
        let mut best = 0;
        for (c, &s) in row.iter().enumerate() {
            if s > row[best] {
                best = c;
            }
        }
        if best == truth {
            correct += 1;
        }
    }
    correct as f64 / query_class.len() as f64
}

fn confidence_half_width(run_means: &[f64]) -> f64 {
    let n = run_means.len();
    if n < 2 {
        return 0.0;
    }
    let mean = run_means.iter().sum::<f64>() / n as f64;
    let var = run_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    1.96 * var.sqrt() / (n as f64).sqrt()
}

/// Measure few-shot accuracy of a checkpoint over `cfg.runs` replicates of
/// `cfg.episodes_eval` episodes each, drawn from the given classes under
/// `filter`. Images are normalized with the checkpoint's own constants.
pub fn evaluate(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    classes: &[String],
    filter: LineageFilter,
    cfg: &TrainConfig,
) -> Result<AccuracyReport, TrainError> {
    cfg.validate()?;
    if ckpt.model.cfg != cfg.model_config() {
        return Err(CheckpointError::ArchMismatch(format!(
            "checkpoint holds {:?}, config asks for {:?}",
            ckpt.model.cfg,
            cfg.model_config()
        ))
        .into());
    }
    let pool = EpisodePool::new(manifest, classes, filter)?;
    let cache = ImageCache::new(manifest, cfg.render, ckpt.norm_mean, ckpt.norm_std);
    let mut run_means = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let mut acc_sum = 0.0;
        for e in 0..cfg.episodes_eval {
            let seed = crate::seeds::derive(
                cfg.seed,
                &["eval-episode", &run.to_string(), &e.to_string()],
            );
            let ep = sample_episode(&pool, cfg.way, cfg.shot, cfg.n_query, seed)?;
            let inputs = episode_inputs(&cache, &ep)?;
            let scores = sdae::episode_scores_eval(&ckpt.model, &inputs, cfg.way, cfg.shot)?;
            acc_sum += episode_accuracy(&scores, &ep.query_class, cfg.way);
        }
        run_means.push(acc_sum / cfg.episodes_eval as f64);
    }
    let mean = run_means.iter().sum::<f64>() / run_means.len() as f64;
    let half_width = confidence_half_width(&run_means);
    Ok(AccuracyReport {
        way: cfg.way,
        shot: cfg.shot,
        n_query: cfg.n_query,
        episodes: cfg.episodes_eval,
        runs: cfg.runs,
        run_means,
        mean,
        half_width,
        config_echo: cfg.echo(),
    })
}

// ===== Embedding export =====

/// Batch size for eval-mode encoding during export.
const EMBED_CHUNK: usize = 32;

/// Encode every manifest entry in eval mode and emit a TSV table: identity
/// columns, the flattened latent, and the head's projection vector, for
/// external t-SNE or projection tools. Deterministic: re-export from the
/// same checkpoint is byte-identical.
pub fn export_embeddings(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    render: RenderParams,
) -> Result<String, TrainError> {
    let cache = ImageCache::new(manifest, render, ckpt.norm_mean, ckpt.norm_std);
    let latent_dim = ckpt.model.cfg.latent_dim();
    let mut out = String::from("origin_id\tfamily\tlineage");
    for i in 0..latent_dim {
        out.push_str(&format!("\tz{i}"));
    }
    for i in 0..ckpt.model.cfg.head_dim {
        out.push_str(&format!("\tp{i}"));
    }
    out.push('\n');

    let n = manifest.len();
    let mut start = 0;
    while start < n {
        let count = EMBED_CHUNK.min(n - start);
        let idxs: Vec<usize> = (start..start + count).collect();
        let batch = stack_images(&cache, &idxs)?;
        let z = ckpt.model.encode_eval(&batch)?;
        let proj = ckpt.model.project(&z)?;
        for b in 0..count {
            let e = &manifest.entries()[start + b];
            out.push_str(&format!("{}\t{}\t{}", e.origin_id, e.family, e.lineage));
            for v in z.item(b) {
                out.push_str(&format!("\t{v}"));
            }
            for v in proj.item(b) {
                out.push_str(&format!("\t{v}"));
            }
            out.push('\n');
        }
        start += count;
    }
    Ok(out)
}
