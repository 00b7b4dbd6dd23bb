//! `key = value` experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Train,
    Dci,
    LeakageMnist,
    LeakageSprites,
    AlignmentSprites,
    Traverse,
    CalibrateOsr,
}

impl Kind {
    pub const ALL: [Kind; 7] = [
        Kind::Train,
        Kind::Dci,
        Kind::LeakageMnist,
        Kind::LeakageSprites,
        Kind::AlignmentSprites,
        Kind::Traverse,
        Kind::CalibrateOsr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Train => "train",
            Kind::Dci => "dci",
            Kind::LeakageMnist => "leakage-mnist",
            Kind::LeakageSprites => "leakage-sprites",
            Kind::AlignmentSprites => "alignment-sprites",
            Kind::Traverse => "traverse",
            Kind::CalibrateOsr => "calibrate-osr",
        }
    }

    pub fn is_experiment(self) -> bool {
        matches!(self, Kind::LeakageMnist | Kind::LeakageSprites | Kind::AlignmentSprites)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Kind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| format!("unknown experiment kind {s:?}"))
    }
}

/// Dataset used by `train` and `calibrate-osr`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    /// Digits 4 and 5 with their concept annotations.
    Mnist45,
    SpritesLeak,
    SpritesAlignment,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist45 => "mnist45",
            DatasetKind::SpritesLeak => "sprites-leak",
            DatasetKind::SpritesAlignment => "sprites-alignment",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [DatasetKind::Mnist45, DatasetKind::SpritesLeak, DatasetKind::SpritesAlignment]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown dataset {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Kind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub dataset: DatasetKind,

    pub latent_dim: usize,
    pub interpretable: Vec<usize>,
    pub hidden: Vec<usize>,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub recon_weight: f64,
    pub lr: f64,
    pub epochs: usize,
    pub baseline_epochs: usize,
    pub batch_size: usize,
    /// Early-stopping patience in epochs; 0 disables it.
    pub patience: usize,
    pub decay: f64,
    pub warmup_epochs: usize,
    /// Keep the best validation epoch instead of the last one.
    pub restore_best: bool,

    /// Dataset size: image cap for MNIST, sprite count otherwise.
    pub n: usize,
    pub resolution: usize,
    pub supervision_fraction: f64,

    pub quantile: f64,
    pub l1_penalty: f64,
    pub probe_fraction: f64,
    /// Cap on open training digits used to fit the MNIST probe; 0 keeps all.
    pub probe_rows: usize,

    pub latents: Option<PathBuf>,
    pub factors: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub traverse_dim: usize,
    pub traverse_condition: usize,
    pub traverse_min: f64,
    pub traverse_max: f64,
    pub traverse_steps: usize,
}

impl ExperimentConfig {
    /// Defaults for `kind`.
    pub fn defaults(kind: Kind) -> Self {
        let base = ExperimentConfig {
            experiment: kind,
            seed: 0,
            out_dir: PathBuf::from("runs").join(kind.name()),
            data_dir: None,
            dataset: DatasetKind::Mnist45,
            latent_dim: 10,
            interpretable: vec![4, 5],
            hidden: vec![128, 128],
            beta: 100.0,
            gamma: 3.0,
            lambda: 0.0,
            recon_weight: 1.0,
            lr: 1e-3,
            epochs: 20,
            baseline_epochs: 20,
            batch_size: 32,
            patience: 0,
            decay: 0.95,
            warmup_epochs: 0,
            restore_best: true,
            n: 4000,
            resolution: 32,
            supervision_fraction: 1.0,
            quantile: 0.95,
            l1_penalty: 0.01,
            probe_fraction: 0.8,
            probe_rows: 10_000,
            latents: None,
            factors: None,
            checkpoint: None,
            traverse_dim: 0,
            traverse_condition: 0,
            traverse_min: -5.0,
            traverse_max: 5.0,
            traverse_steps: 11,
        };
        match kind {
            Kind::LeakageMnist => ExperimentConfig { restore_best: false, ..base },
            Kind::LeakageSprites => ExperimentConfig {
                dataset: DatasetKind::SpritesLeak,
                latent_dim: 5,
                interpretable: (0..5).collect(),
                gamma: 100.0,
                lr: 4e-4,
                baseline_epochs: 60,
                restore_best: false,
                n: 3000,
                ..base
            },
            Kind::AlignmentSprites => ExperimentConfig {
                dataset: DatasetKind::SpritesAlignment,
                latent_dim: 7,
                interpretable: (0..7).collect(),
                beta: 1.0,
                gamma: 100.0,
                lambda: 100.0,
                n: 10000,
                ..base
            },
            _ => base,
        }
    }

    /// Every key in canonical order with its textual value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        vec![
            ("experiment", self.experiment.to_string()),
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("data_dir", path(&self.data_dir)),
            ("dataset", self.dataset.name().to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("interpretable", list(&self.interpretable)),
            ("hidden", list(&self.hidden)),
            ("beta", self.beta.to_string()),
            ("gamma", self.gamma.to_string()),
            ("lambda", self.lambda.to_string()),
            ("recon_weight", self.recon_weight.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("baseline_epochs", self.baseline_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("patience", self.patience.to_string()),
            ("decay", self.decay.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("restore_best", self.restore_best.to_string()),
            ("n", self.n.to_string()),
            ("resolution", self.resolution.to_string()),
            ("supervision_fraction", self.supervision_fraction.to_string()),
            ("quantile", self.quantile.to_string()),
            ("l1_penalty", self.l1_penalty.to_string()),
            ("probe_fraction", self.probe_fraction.to_string()),
            ("probe_rows", self.probe_rows.to_string()),
            ("latents", path(&self.latents)),
            ("factors", path(&self.factors)),
            ("checkpoint", path(&self.checkpoint)),
            ("traverse_dim", self.traverse_dim.to_string()),
            ("traverse_condition", self.traverse_condition.to_string()),
            ("traverse_min", self.traverse_min.to_string()),
            ("traverse_max", self.traverse_max.to_string()),
            ("traverse_steps", self.traverse_steps.to_string()),
        ]
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| CliError::config(key, format!("cannot parse {value:?}")))
        }
        fn list(key: &str, value: &str) -> Result<Vec<usize>> {
            value
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| num(key, s))
                .collect()
        }
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "experiment" => self.experiment = value.parse().map_err(|e| CliError::config(key, e))?,
            "seed" => self.seed = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "data_dir" => self.data_dir = path(value),
            "dataset" => self.dataset = value.parse().map_err(|e| CliError::config(key, e))?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "interpretable" => self.interpretable = list(key, value)?,
            "hidden" => self.hidden = list(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "recon_weight" => self.recon_weight = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "baseline_epochs" => self.baseline_epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "decay" => self.decay = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "restore_best" => self.restore_best = num(key, value)?,
            "n" => self.n = num(key, value)?,
            "resolution" => self.resolution = num(key, value)?,
            "supervision_fraction" => self.supervision_fraction = num(key, value)?,
            "quantile" => self.quantile = num(key, value)?,
            "l1_penalty" => self.l1_penalty = num(key, value)?,
            "probe_fraction" => self.probe_fraction = num(key, value)?,
            "probe_rows" => self.probe_rows = num(key, value)?,
            "latents" => self.latents = path(value),
            "factors" => self.factors = path(value),
            "checkpoint" => self.checkpoint = path(value),
            "traverse_dim" => self.traverse_dim = num(key, value)?,
            "traverse_condition" => self.traverse_condition = num(key, value)?,
            "traverse_min" => self.traverse_min = num(key, value)?,
            "traverse_max" => self.traverse_max = num(key, value)?,
            "traverse_steps" => self.traverse_steps = num(key, value)?,
            _ => return Err(CliError::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("recon_weight", self.recon_weight),
            ("l1_penalty", self.l1_penalty),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CliError::config(key, format!("must be finite and ≥ 0, got {v}")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(CliError::config("lr", "must be positive"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(CliError::config("decay", "must lie in (0, 1]"));
        }
        if !(self.quantile > 0.0 && self.quantile <= 1.0) {
            return Err(CliError::config("quantile", "must lie in (0, 1]"));
        }
        if !(self.supervision_fraction > 0.0 && self.supervision_fraction <= 1.0) {
            return Err(CliError::config("supervision_fraction", "must lie in (0, 1]"));
        }
        if !(self.probe_fraction > 0.0 && self.probe_fraction < 1.0) {
            return Err(CliError::config("probe_fraction", "must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(CliError::config("batch_size", "must be positive"));
        }
        if self.latent_dim == 0 {
            return Err(CliError::config("latent_dim", "must be positive"));
        }
        if self.interpretable.is_empty() || self.interpretable.iter().any(|&j| j >= self.latent_dim) {
            return Err(CliError::config("interpretable", "indices must be nonempty and below latent_dim"));
        }
        if self.hidden.contains(&0) {
            return Err(CliError::config("hidden", "layer sizes must be positive"));
        }
        if self.resolution < 16 {
            return Err(CliError::config("resolution", "must be at least 16"));
        }
        if self.traverse_steps == 0 {
            return Err(CliError::config("traverse_steps", "must be positive"));
        }
        match self.experiment {
            Kind::Dci => {
                if self.latents.is_none() {
                    return Err(CliError::config("latents", "required for dci"));
                }
                if self.factors.is_none() {
                    return Err(CliError::config("factors", "required for dci"));
                }
            }
            Kind::Traverse | Kind::CalibrateOsr if self.checkpoint.is_none() => {
                return Err(CliError::config("checkpoint", format!("required for {}", self.experiment)));
            }
            _ => {}
        }
        Ok(())
    }

    /// The config echo written into reports; parses back to an equal config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// `(key, value)` pairs from config text. `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::config(&format!("line {}", no + 1), format!("expected key = value, got {raw:?}"))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Sources merged by [`build_config`], later ones overriding earlier ones.
#[derive(Clone, Debug, Default)]
pub struct ConfigSources {
    /// Kind fixed by the subcommand, if any.
    pub kind: Option<Kind>,
    pub file_text: Option<String>,
    pub overrides: Vec<(String, String)>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    /// Fallback for `data_dir` when neither file nor flags set it.
    pub data_dir_env: Option<PathBuf>,
}

pub fn build_config(src: &ConfigSources) -> Result<ExperimentConfig> {
    let file_pairs = match &src.file_text {
        Some(t) => parse_pairs(t)?,
        None => Vec::new(),
    };
    let declared = file_pairs
        .iter()
        .chain(&src.overrides)
        .filter(|(k, _)| k == "experiment")
        .map(|(_, v)| v.parse::<Kind>().map_err(|e| CliError::config("experiment", e)))
        .next_back()
        .transpose()?;
    let kind = match (src.kind, declared) {
        (Some(a), Some(b)) if a != b => {
            return Err(CliError::config("experiment", format!("config declares {b} but the command runs {a}")))
        }
        (Some(a), _) => a,
        (None, Some(b)) => b,
        (None, None) => Kind::Train,
    };
    let mut cfg = ExperimentConfig::defaults(kind);
    cfg.data_dir = src.data_dir_env.clone();
    for (k, v) in file_pairs.iter().chain(&src.overrides) {
        cfg.set(k, v)?;
    }
    if let Some(seed) = src.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &src.out_dir {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file for [`ConfigSources::file_text`].
pub fn read_config_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })
}
