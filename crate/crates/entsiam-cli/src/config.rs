//! Layered run configuration.
//!
//! Settings resolve in priority order: built-in defaults, then values from a
//! flat `key = value` config file, then command-line flags. `ENTSIAM_CONFIG`
//! names the default config file when `--config` is absent. The fully
//! resolved configuration is echoed into every artifact a run writes, so an
//! output file always records how it was produced.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use entsiam::binfeed::Manifest;
use entsiam::episodes::{split_classes, ClassSplit};
use entsiam::gradcore::OptimKind;
use entsiam::sdae::Pooling;
use entsiam::trainer::{default_queries, TrainConfig};

/// Environment variable holding the default config file path.
pub const CONFIG_ENV: &str = "ENTSIAM_CONFIG";

/// One optional value per knob. `None` means "not set at this layer"; layers
/// stack with [`Overlay::over`].
#[derive(Debug, Default, Clone)]
pub struct Overlay {
    pub way: Option<usize>,
    pub shot: Option<usize>,
    pub queries: Option<usize>,
    pub episodes_train: Option<usize>,
    pub episodes_eval: Option<usize>,
    pub runs: Option<usize>,
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub optimizer: Option<OptimKind>,
    pub pooling: Option<Pooling>,
    pub head_dim: Option<usize>,
    pub channels: Option<usize>,
    pub decoder: Option<bool>,
    pub obfuscate_train: Option<bool>,
    pub train_frequency: Option<u32>,
    pub seed: Option<u64>,
    pub block_size: Option<usize>,
    pub width_blocks: Option<usize>,
    pub norm_mean: Option<f64>,
    pub norm_std: Option<f64>,
    pub test_classes: Option<usize>,
    pub split_seed: Option<u64>,
}

impl Overlay {
    /// Stack `self` on top of `base`: set values win, unset ones fall through.
    pub fn over(self, base: Overlay) -> Overlay {
        Overlay {
            way: self.way.or(base.way),
            shot: self.shot.or(base.shot),
            queries: self.queries.or(base.queries),
            episodes_train: self.episodes_train.or(base.episodes_train),
            episodes_eval: self.episodes_eval.or(base.episodes_eval),
            runs: self.runs.or(base.runs),
            lambda: self.lambda.or(base.lambda),
            lr: self.lr.or(base.lr),
            optimizer: self.optimizer.or(base.optimizer),
            pooling: self.pooling.or(base.pooling),
            head_dim: self.head_dim.or(base.head_dim),
            channels: self.channels.or(base.channels),
            decoder: self.decoder.or(base.decoder),
            obfuscate_train: self.obfuscate_train.or(base.obfuscate_train),
            train_frequency: self.train_frequency.or(base.train_frequency),
            seed: self.seed.or(base.seed),
            block_size: self.block_size.or(base.block_size),
            width_blocks: self.width_blocks.or(base.width_blocks),
            norm_mean: self.norm_mean.or(base.norm_mean),
            norm_std: self.norm_std.or(base.norm_std),
            test_classes: self.test_classes.or(base.test_classes),
            split_seed: self.split_seed.or(base.split_seed),
        }
    }

    /// Parse a flat config file: one `key = value` per line, `#` comments.
    /// Keys match the names echoed into artifacts; unknown keys are errors.
    pub fn from_file(path: &Path) -> Result<Overlay> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let mut o = Overlay::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| bad_line(path, lineno + 1, "expected `key = value`"))?;
            o.set(key.trim(), value.trim())
                .with_context(|| bad_line(path, lineno + 1, line))?;
        }
        Ok(o)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "way" => self.way = Some(value.parse()?),
            "shot" => self.shot = Some(value.parse()?),
            "queries" => self.queries = Some(value.parse()?),
            "episodes_train" => self.episodes_train = Some(value.parse()?),
            "episodes_eval" => self.episodes_eval = Some(value.parse()?),
            "runs" => self.runs = Some(value.parse()?),
            "lambda" => self.lambda = Some(value.parse()?),
            "lr" => self.lr = Some(value.parse()?),
            "optimizer" => self.optimizer = Some(value.parse().map_err(anyhow::Error::msg)?),
            "pooling" => self.pooling = Some(value.parse().map_err(anyhow::Error::msg)?),
            "head_dim" => self.head_dim = Some(value.parse()?),
            "channels" => self.channels = Some(value.parse()?),
            "decoder" => self.decoder = Some(value.parse()?),
            "obfuscate_train" => self.obfuscate_train = Some(value.parse()?),
            "train_frequency" => self.train_frequency = Some(value.parse()?),
            "seed" => self.seed = Some(value.parse()?),
            "block_size" => self.block_size = Some(value.parse()?),
            "width_blocks" => self.width_blocks = Some(value.parse()?),
            "norm_mean" => self.norm_mean = Some(value.parse()?),
            "norm_std" => self.norm_std = Some(value.parse()?),
            "test_classes" => self.test_classes = Some(value.parse()?),
            "split_seed" => self.split_seed = Some(value.parse()?),
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }
}

fn bad_line(path: &Path, lineno: usize, what: &str) -> String {
    format!("{}:{lineno}: {what}", path.display())
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Held-out class count; defaults to a quarter of the corpus, at least 2.
    pub test_classes: Option<usize>,
    /// Seed for the class split (defaults to the run seed), so episode seeds
    /// can vary without moving classes between splits.
    pub split_seed: u64,
}

/// Locate the config file: the `--config` flag wins, otherwise the
/// `ENTSIAM_CONFIG` environment variable, otherwise none.
fn config_path(flag: Option<&Path>) -> Option<PathBuf> {
    if let Some(p) = flag {
        return Some(p.to_path_buf());
    }
    match std::env::var(CONFIG_ENV) {
        Ok(p) if !p.is_empty() => Some(PathBuf::from(p)),
        _ => None,
    }
}

/// Resolve flags over the config file over `base` over built-in defaults.
/// `base` carries values implied by other artifacts (e.g. the architecture
/// stored in a checkpoint) that explicit settings may still override.
pub fn resolve(config_flag: Option<&Path>, flags: Overlay, base: Overlay) -> Result<RunConfig> {
    let file = match config_path(config_flag) {
        Some(p) => Overlay::from_file(&p)?,
        None => Overlay::default(),
    };
    let o = flags.over(file).over(base);

    let mut cfg = TrainConfig::default();
    cfg.way = o.way.unwrap_or(cfg.way);
    cfg.shot = o.shot.unwrap_or(cfg.shot);
    cfg.n_query = o.queries.unwrap_or_else(|| default_queries(cfg.shot));
    cfg.episodes_train = o.episodes_train.unwrap_or(cfg.episodes_train);
    cfg.episodes_eval = o.episodes_eval.unwrap_or(cfg.episodes_eval);
    cfg.runs = o.runs.unwrap_or(cfg.runs);
    cfg.lambda = o.lambda.unwrap_or(cfg.lambda);
    cfg.lr = o.lr.unwrap_or(cfg.lr);
    cfg.optimizer = o.optimizer.unwrap_or(cfg.optimizer);
    cfg.pooling = o.pooling.unwrap_or(cfg.pooling);
    cfg.head_dim = o.head_dim.unwrap_or(cfg.head_dim);
    cfg.channels = o.channels.unwrap_or(cfg.channels);
    cfg.decoder_enabled = o.decoder.unwrap_or(cfg.decoder_enabled);
    cfg.obfuscate_train = o.obfuscate_train.unwrap_or(cfg.obfuscate_train);
    cfg.train_frequency = o.train_frequency.unwrap_or(cfg.train_frequency);
    cfg.seed = o.seed.unwrap_or(cfg.seed);
    cfg.render.block_size = o.block_size.unwrap_or(cfg.render.block_size);
    cfg.render.width_blocks = o.width_blocks.unwrap_or(cfg.render.width_blocks);
    cfg.norm_mean = o.norm_mean.unwrap_or(cfg.norm_mean);
    cfg.norm_std = o.norm_std.unwrap_or(cfg.norm_std);
    cfg.validate()?;

    let split_seed = o.split_seed.unwrap_or(cfg.seed);
    Ok(RunConfig {
        train: cfg,
        test_classes: o.test_classes,
        split_seed,
    })
}

/// Deterministic train/test class split for this run.
pub fn split_for(rc: &RunConfig, manifest: &Manifest) -> Result<ClassSplit> {
    let total = manifest.families().len();
    let n_test = rc.test_classes.unwrap_or_else(|| (total / 4).max(2));
    if n_test >= total {
        bail!("cannot hold out {n_test} of {total} classes");
    }
    split_classes(manifest, total - n_test, n_test, rc.split_seed)
        .context("splitting classes into train/test")
}

/// Split facts appended to the config echo in written artifacts.
pub fn split_echo(rc: &RunConfig, split: &ClassSplit) -> Vec<(String, String)> {
    vec![
        ("split_seed".into(), rc.split_seed.to_string()),
        ("train_classes".into(), split.train_classes.join(",")),
        ("test_classes".into(), split.test_classes.join(",")),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pin_the_one_shot_protocol() {
        let rc = resolve(None, Overlay::default(), Overlay::default()).unwrap();
        assert_eq!(rc.train.way, 2);
        assert_eq!(rc.train.shot, 1);
        assert_eq!(rc.train.n_query, 19);
        assert_eq!(rc.split_seed, rc.train.seed);
    }

    #[test]
    fn query_default_follows_the_shot_count() {
        let flags = Overlay {
            shot: Some(5),
            ..Overlay::default()
        };
        let rc = resolve(None, flags, Overlay::default()).unwrap();
        assert_eq!(rc.train.n_query, 15);

        let flags = Overlay {
            shot: Some(5),
            queries: Some(7),
            ..Overlay::default()
        };
        let rc = resolve(None, flags, Overlay::default()).unwrap();
        assert_eq!(rc.train.n_query, 7);
    }

    #[test]
    fn flags_override_the_file_file_overrides_the_base() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nway = 5\nlr = 0.5\npooling = sum\n").unwrap();
        let flags = Overlay {
            lr: Some(0.25),
            ..Overlay::default()
        };
        let base = Overlay {
            way: Some(3),
            channels: Some(8),
            ..Overlay::default()
        };
        let rc = resolve(Some(&path), flags, base).unwrap();
        assert_eq!(rc.train.way, 5);
        assert_eq!(rc.train.lr, 0.25);
        assert_eq!(rc.train.pooling, Pooling::Sum);
        assert_eq!(rc.train.channels, 8);
    }

    #[test]
    fn unknown_keys_and_bad_lines_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "warp = 9\n").unwrap();
        let err = format!("{:#}", Overlay::from_file(&path).unwrap_err());
        assert!(err.contains("unknown config key `warp`"), "{err}");

        std::fs::write(&path, "just-a-word\n").unwrap();
        let err = format!("{:#}", Overlay::from_file(&path).unwrap_err());
        assert!(err.contains("expected `key = value`"), "{err}");
    }

    #[test]
    fn out_of_range_values_fail_validation() {
        let flags = Overlay {
            lambda: Some(1.5),
            ..Overlay::default()
        };
        assert!(resolve(None, flags, Overlay::default()).is_err());
    }
}
