//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use zigan_core::evaluation::RecognizerTraining;
use zigan_core::glyph::{codepoint_label, parse_codepoint};
use zigan_core::losses::{KernelBank, KernelPolicy, LossWeights, MmdEstimator};
use zigan_core::training::TrainConfig;

use crate::error::{ForgeError, Result};

/// Every accepted key with a one-line description, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("font", "standard-font file (TrueType/OpenType) used for every source glyph"),
    ("style_dir", "target style corpus: one U+XXXX.png per character"),
    ("style_id", "numeric id of the target style (>= 1)"),
    ("work_dir", "output root for manifests, logs, checkpoints and reports"),
    ("shots", "training characters taken from the style corpus"),
    ("seed", "master seed for splits, pools, initialization and dropout"),
    ("resolution", "square canvas in pixels, a power of two >= 64"),
    ("batch_size", "glyphs per batch"),
    ("epochs", "training epochs"),
    ("lr0", "initial Adam learning rate"),
    ("halve_every", "epochs between learning-rate halvings"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("lambda1", "weight of adversarial + CAM terms"),
    ("lambda2", "weight of cycle + identity terms"),
    ("lambda3", "weight of the alignment term"),
    ("lambda4", "weight of the style (MK-MMD) term"),
    ("alpha", "L1 weight inside the alignment term"),
    ("kernel", "MK-MMD bandwidths: median (scaled median distance) or fixed"),
    ("kernel_scales", "comma list: median multipliers, or absolute sigmas when kernel = fixed"),
    ("mmd_estimator", "biased (V-statistic) or unbiased (U-statistic)"),
    ("width_divisor", "divide every network width by this (1 = full size)"),
    ("skip_connections", "encoder-decoder skip concatenation (true/false)"),
    ("local_global", "add a shallower second discriminator per direction (true/false)"),
    ("checkpoint_every", "epochs between checkpoints"),
    ("pool_size", "unpaired source glyphs rendered for the style term"),
    ("pool_range", "codepoint range the unpaired pool draws from, e.g. U+4E00-U+9FFF"),
    ("ink_threshold", "binarization threshold for IOU, in [-1, 1] pixel units"),
    ("workers", "threads for rendering and corpus loading (never changes results)"),
    ("recognizer_epochs", "recognizer training epochs"),
    ("recognizer_lr", "recognizer Adam learning rate"),
    ("recognizer_batch", "recognizer batch size"),
    ("recognizer_width", "recognizer first-stage channels"),
    ("recognizer_corpus", "comma list of style dirs whose glyphs train the recognizer (default: style_dir)"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub font: Option<PathBuf>,
    pub style_dir: Option<PathBuf>,
    pub style_id: u32,
    pub work_dir: PathBuf,
    pub shots: usize,
    pub seed: u64,
    pub resolution: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub halve_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub kernel_fixed: bool,
    pub kernel_scales: Vec<f64>,
    pub estimator: MmdEstimator,
    pub width_divisor: usize,
    pub skip_connections: bool,
    pub local_global: bool,
    pub checkpoint_every: usize,
    pub pool_size: usize,
    pub pool_range: (char, char),
    pub ink_threshold: f32,
    pub workers: usize,
    pub recognizer: RecognizerTraining,
    pub recognizer_corpus: Vec<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            font: None,
            style_dir: None,
            style_id: 1,
            work_dir: PathBuf::from("run"),
            shots: t.shots,
            seed: t.seed,
            resolution: t.resolution,
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr0: t.lr0,
            halve_every: t.halve_every,
            beta1: t.beta1,
            beta2: t.beta2,
            weights: t.weights,
            kernel_fixed: false,
            kernel_scales: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            estimator: t.estimator,
            width_divisor: t.width_divisor,
            skip_connections: t.skip_connections,
            local_global: t.local_global,
            checkpoint_every: t.checkpoint_every,
            pool_size: 6000,
            pool_range: ('\u{4E00}', '\u{9FFF}'),
            ink_threshold: 0.0,
            workers: 1,
            recognizer: RecognizerTraining::default(),
            recognizer_corpus: Vec::new(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| ForgeError::Config(format!("{key}: cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ForgeError::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
}

fn range(key: &str, v: &str) -> Result<(char, char)> {
    let bad = || ForgeError::Config(format!("{key}: expected U+XXXX-U+YYYY, got {v:?}"));
    let (lo, hi) = v.split_once('-').ok_or_else(bad)?;
    let lo = parse_codepoint(lo.trim()).ok_or_else(bad)?;
    let hi = parse_codepoint(hi.trim()).ok_or_else(bad)?;
    if lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

impl RunConfig {
    /// Parses the file format: one `key = value` per line, `#` starts a
    /// comment, blank lines are ignored, unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ForgeError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| e.context(format!("line {}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ForgeError::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(path.display().to_string()))
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| ForgeError::Config(format!("--set expects key=value, got {kv:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "font" => self.font = Some(PathBuf::from(v)),
            "style_dir" => self.style_dir = Some(PathBuf::from(v)),
            "style_id" => self.style_id = num(key, v)?,
            "work_dir" => self.work_dir = PathBuf::from(v),
            "shots" => self.shots = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "resolution" => self.resolution = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "lr0" => self.lr0 = num(key, v)?,
            "halve_every" => self.halve_every = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "lambda1" => self.weights.lambda1 = num(key, v)?,
            "lambda2" => self.weights.lambda2 = num(key, v)?,
            "lambda3" => self.weights.lambda3 = num(key, v)?,
            "lambda4" => self.weights.lambda4 = num(key, v)?,
            "alpha" => self.weights.alpha = num(key, v)?,
            "kernel" => {
                self.kernel_fixed = match v {
                    "median" => false,
                    "fixed" => true,
                    _ => return Err(ForgeError::Config(format!("kernel: expected median or fixed, got {v:?}"))),
                }
            }
            "kernel_scales" => self.kernel_scales = list(key, v)?,
            "mmd_estimator" => {
                self.estimator = match v {
                    "biased" => MmdEstimator::Biased,
                    "unbiased" => MmdEstimator::Unbiased,
                    _ => return Err(ForgeError::Config(format!("mmd_estimator: expected biased or unbiased, got {v:?}"))),
                }
            }
            "width_divisor" => self.width_divisor = num(key, v)?,
            "skip_connections" => self.skip_connections = boolean(key, v)?,
            "local_global" => self.local_global = boolean(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "pool_size" => self.pool_size = num(key, v)?,
            "pool_range" => self.pool_range = range(key, v)?,
            "ink_threshold" => self.ink_threshold = num(key, v)?,
            "workers" => self.workers = num(key, v)?,
            "recognizer_epochs" => self.recognizer.epochs = num(key, v)?,
            "recognizer_lr" => self.recognizer.lr = num(key, v)?,
            "recognizer_batch" => self.recognizer.batch_size = num(key, v)?,
            "recognizer_width" => self.recognizer.base_width = num(key, v)?,
            "recognizer_corpus" => {
                self.recognizer_corpus = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect()
            }
            _ => return Err(ForgeError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Canonical rendering; parsing it back gives an equal config.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let w = &self.weights;
        let mut lines: Vec<(&str, String)> = vec![
            ("font", path(&self.font)),
            ("style_dir", path(&self.style_dir)),
            ("style_id", self.style_id.to_string()),
            ("work_dir", self.work_dir.display().to_string()),
            ("shots", self.shots.to_string()),
            ("seed", self.seed.to_string()),
            ("resolution", self.resolution.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr0", format!("{:?}", self.lr0)),
            ("halve_every", self.halve_every.to_string()),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("lambda1", format!("{:?}", w.lambda1)),
            ("lambda2", format!("{:?}", w.lambda2)),
            ("lambda3", format!("{:?}", w.lambda3)),
            ("lambda4", format!("{:?}", w.lambda4)),
            ("alpha", format!("{:?}", w.alpha)),
            ("kernel", if self.kernel_fixed { "fixed" } else { "median" }.into()),
            ("kernel_scales", join(&self.kernel_scales)),
            ("mmd_estimator", if self.estimator == MmdEstimator::Biased { "biased" } else { "unbiased" }.into()),
            ("width_divisor", self.width_divisor.to_string()),
            ("skip_connections", self.skip_connections.to_string()),
            ("local_global", self.local_global.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("pool_size", self.pool_size.to_string()),
            ("pool_range", format!("{}-{}", codepoint_label(self.pool_range.0), codepoint_label(self.pool_range.1))),
            ("ink_threshold", format!("{:?}", self.ink_threshold)),
            ("workers", self.workers.to_string()),
            ("recognizer_epochs", self.recognizer.epochs.to_string()),
            ("recognizer_lr", format!("{:?}", self.recognizer.lr)),
            ("recognizer_batch", self.recognizer.batch_size.to_string()),
            ("recognizer_width", self.recognizer.base_width.to_string()),
            ("recognizer_corpus", self.recognizer_corpus.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")),
        ];
        // empty optional paths are omitted so the text parses back
        lines.retain(|(k, v)| !(v.is_empty() && matches!(*k, "font" | "style_dir" | "recognizer_corpus")));
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn kernel_policy(&self) -> Result<KernelPolicy> {
        if self.kernel_scales.is_empty() || self.kernel_scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(ForgeError::Config("kernel_scales must be positive numbers".into()));
        }
        Ok(if self.kernel_fixed {
            KernelPolicy::Fixed(KernelBank::new(self.kernel_scales.clone())?)
        } else {
            KernelPolicy::MedianHeuristic { multipliers: self.kernel_scales.clone() }
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            epochs: self.epochs,
            lr0: self.lr0,
            halve_every: self.halve_every,
            beta1: self.beta1,
            beta2: self.beta2,
            batch_size: self.batch_size,
            resolution: self.resolution,
            shots: self.shots,
            seed: self.seed,
            weights: self.weights,
            kernel_policy: self.kernel_policy()?,
            estimator: self.estimator,
            width_divisor: self.width_divisor,
            skip_connections: self.skip_connections,
            local_global: self.local_global,
            checkpoint_every: self.checkpoint_every,
        };
        t.validate().map_err(|e| ForgeError::Config(e.to_string()))?;
        Ok(t)
    }

    /// Copies the training fields of `t` over the defaults.
    pub fn from_train(t: &TrainConfig) -> Self {
        let (kernel_fixed, kernel_scales) = match &t.kernel_policy {
            KernelPolicy::MedianHeuristic { multipliers } => (false, multipliers.clone()),
            KernelPolicy::Fixed(bank) => (true, bank.sigmas().to_vec()),
        };
        RunConfig {
            shots: t.shots,
            seed: t.seed,
            resolution: t.resolution,
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr0: t.lr0,
            halve_every: t.halve_every,
            beta1: t.beta1,
            beta2: t.beta2,
            weights: t.weights,
            kernel_fixed,
            kernel_scales,
            estimator: t.estimator,
            width_divisor: t.width_divisor,
            skip_connections: t.skip_connections,
            local_global: t.local_global,
            checkpoint_every: t.checkpoint_every,
            ..RunConfig::default()
        }
    }

    /// Checks values that need no file system access.
    pub fn validate(&self) -> Result<()> {
        self.train_config()?;
        if self.style_id == 0 {
            return Err(ForgeError::Config("style_id 0 is reserved for the source font".into()));
        }
        if self.shots == 0 {
            return Err(ForgeError::Config("shots must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(ForgeError::Config("checkpoint_every must be positive".into()));
        }
        if !(-1.0..=1.0).contains(&self.ink_threshold) {
            return Err(ForgeError::Config("ink_threshold must lie in [-1, 1]".into()));
        }
        if self.workers == 0 {
            return Err(ForgeError::Config("workers must be positive".into()));
        }
        Ok(())
    }

    pub fn require_font(&self) -> Result<&Path> {
        let p = self.font.as_deref().ok_or_else(|| ForgeError::Config("font is not set".into()))?;
        if !p.is_file() {
            return Err(ForgeError::Config(format!("font {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn require_style_dir(&self) -> Result<&Path> {
        let p = self.style_dir.as_deref().ok_or_else(|| ForgeError::Config("style_dir is not set".into()))?;
        if !p.is_dir() {
            return Err(ForgeError::Config(format!("style_dir {} is not a directory", p.display())));
        }
        Ok(p)
    }

    pub fn recognizer_dirs(&self) -> Result<Vec<PathBuf>> {
        if self.recognizer_corpus.is_empty() {
            return Ok(vec![self.require_style_dir()?.to_path_buf()]);
        }
        for p in &self.recognizer_corpus {
            if !p.is_dir() {
                return Err(ForgeError::Config(format!("recognizer_corpus entry {} is not a directory", p.display())));
            }
        }
        Ok(self.recognizer_corpus.clone())
    }

    pub fn split_manifest_path(&self) -> PathBuf {
        self.work_dir.join(format!("split-style{}.txt", self.style_id))
    }

    pub fn pool_manifest_path(&self) -> PathBuf {
        self.work_dir.join("pool.txt")
    }

    pub fn checkpoint_root(&self) -> PathBuf {
        self.work_dir.join("checkpoints")
    }

    pub fn loss_log_path(&self) -> PathBuf {
        self.work_dir.join("loss_log.csv")
    }

    pub fn recognizer_path(&self) -> PathBuf {
        self.work_dir.join("recognizer")
    }
}

/// Keys that feed [`TrainConfig`].
pub const TRAIN_KEYS: &[&str] = &[
    "shots",
    "seed",
    "resolution",
    "batch_size",
    "epochs",
    "lr0",
    "halve_every",
    "beta1",
    "beta2",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "alpha",
    "kernel",
    "kernel_scales",
    "mmd_estimator",
    "width_divisor",
    "skip_connections",
    "local_global",
    "checkpoint_every",
];

/// `key = value` text of the training fields, in [`TRAIN_KEYS`] order.
pub fn train_config_text(t: &TrainConfig) -> String {
    let full = RunConfig::from_train(t).to_text();
    let lines: Vec<&str> = full.lines().collect();
    let mut out = String::new();
    for key in TRAIN_KEYS {
        let line = lines.iter().find(|l| l.split(" = ").next() == Some(key)).expect("every train key is rendered");
        out.push_str(line);
        out.push('\n');
    }
    out
}

pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let cfg = RunConfig::parse(text)?;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let key = line.split('=').next().unwrap_or("").trim();
        if !TRAIN_KEYS.contains(&key) {
            return Err(ForgeError::Config(format!("{key:?} is not a training key")));
        }
    }
    cfg.train_config()
}

/// Help text listing every key.
pub fn keys_help() -> String {
    let d = RunConfig::default().to_text();
    let defaults: std::collections::HashMap<&str, &str> = d.lines().filter_map(|l| l.split_once(" = ")).collect();
    let mut out = String::from("Config keys (file lines `key = value`, `#` comments, override with --set key=value):\n");
    for (k, doc) in KEYS {
        let def = defaults.get(k).copied().unwrap_or("unset");
        out.push_str(&format!("  {k:<18} {doc} [default: {def}]\n"));
    }
    out
}
