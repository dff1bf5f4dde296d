//! Run configuration files.
//!
//! The format is line oriented:
//!
//! ```text
//! # comment (also ';')
//! [section]
//! key = value        # trailing comments are allowed after whitespace
//! ```
//!
//! Keys are addressed as `section.key`; unknown or repeated keys are errors.
//! Relative paths are resolved against the directory of the config file.
//! See `docs/config.md` for the full key table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autodiff::AdamConfig;
use crate::decoder::{DecoderConfig, ScoreActivation};
use crate::error::{Result, RgatError};
use crate::layer::{Activation, ModelConfig, RelationMode};
use crate::util::fnv1a;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    LinkPrediction,
    EntityClassification,
}

/// Split used for model selection and early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionSplit {
    Train,
    Valid,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub splits: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub layers: usize,
    pub channels: usize,
    pub entity_dim: usize,
    pub relation_dim: usize,
    /// One output width per layer.
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub attention_slope: f64,
    pub attention_dropout: f64,
    pub feature_dropout: f64,
    pub relation_mode: RelationMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimSection {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    /// Evaluate every this many epochs.
    pub every: usize,
    /// Stop after this many evaluations without improvement.
    pub patience: usize,
    pub batch_size: usize,
    pub split: SelectionSplit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub preset: Option<String>,
    pub data: DataPaths,
    pub model: ModelSection,
    pub decoder: DecoderConfig,
    pub optim: OptimSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::LinkPrediction,
            seed: 42,
            preset: None,
            data: DataPaths::default(),
            model: ModelSection {
                layers: 1,
                channels: 4,
                entity_dim: 200,
                relation_dim: 200,
                hidden_dims: vec![200],
                activation: Activation::Elu,
                attention_slope: 0.2,
                attention_dropout: 0.1,
                feature_dropout: 0.2,
                relation_mode: RelationMode::Concat,
            },
            decoder: DecoderConfig::default(),
            optim: OptimSection {
                adam: AdamConfig::default(),
                epochs: 500,
                batch_size: 128,
            },
            eval: EvalSection {
                every: 10,
                patience: 30,
                batch_size: 256,
                split: SelectionSplit::Valid,
            },
        }
    }
}

/// Channel counts and tasks of the standard datasets.
pub fn preset(name: &str) -> Option<(Task, usize)> {
    match name.to_ascii_lowercase().as_str() {
        "fb15k-237" => Some((Task::LinkPrediction, 8)),
        "wn18rr" => Some((Task::LinkPrediction, 4)),
        "aifb" => Some((Task::EntityClassification, 2)),
        "mutag" => Some((Task::EntityClassification, 4)),
        "bgs" => Some((Task::EntityClassification, 4)),
        _ => None,
    }
}

const KEYS: &[&str] = &[
    "run.task",
    "run.seed",
    "run.preset",
    "data.train",
    "data.valid",
    "data.test",
    "data.labels",
    "data.splits",
    "model.layers",
    "model.channels",
    "model.entity_dim",
    "model.relation_dim",
    "model.hidden_dim",
    "model.activation",
    "model.attention_slope",
    "model.attention_dropout",
    "model.feature_dropout",
    "model.relation_mode",
    "decoder.query_dim",
    "decoder.heads",
    "decoder.qatt",
    "decoder.activation",
    "decoder.label_smoothing",
    "optim.lr",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.epochs",
    "optim.batch_size",
    "eval.every",
    "eval.patience",
    "eval.batch_size",
    "eval.split",
];

/// Parses `[section]` / `key = value` text into fully qualified keys.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut section = String::new();
    let mut pairs = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| RgatError::Config(format!("line {lineno}: unterminated section header")))?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| RgatError::Config(format!("line {lineno}: expected 'key = value'")))?;
        let key = if section.is_empty() {
            key.trim().to_string()
        } else {
            format!("{section}.{}", key.trim())
        };
        if !KEYS.contains(&key.as_str()) {
            return Err(RgatError::Config(format!("line {lineno}: unknown key '{key}'")));
        }
        if pairs.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(RgatError::Config(format!("line {lineno}: duplicate key '{key}'")));
        }
    }
    Ok(pairs)
}

fn strip_comment(line: &str) -> &str {
    let trimmed = line.trim_start();
    if trimmed.starts_with('#') || trimmed.starts_with(';') {
        return "";
    }
    match line.find(" #").or_else(|| line.find("\t#")) {
        Some(pos) => &line[..pos],
        None => line,
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| RgatError::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(RgatError::Config(format!("invalid boolean '{value}' for {key}"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RgatError::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text; relative data paths are joined onto `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = RunConfig::default();
        let get = |k: &str| pairs.get(k).map(String::as_str);

        if let Some(name) = get("run.preset") {
            let (task, channels) = preset(name)
                .ok_or_else(|| RgatError::Config(format!("unknown preset '{name}'")))?;
            cfg.task = task;
            cfg.model.channels = channels;
            cfg.preset = Some(name.to_ascii_lowercase());
        }
        if let Some(v) = get("run.task") {
            cfg.task = match v {
                "link_prediction" => Task::LinkPrediction,
                "entity_classification" => Task::EntityClassification,
                _ => return Err(RgatError::Config(format!("unknown task '{v}'"))),
            };
        }
        if let Some(v) = get("run.seed") {
            cfg.seed = parse_value("run.seed", v)?;
        }

        let path = |k: &str| get(k).map(|v| base_dir.join(v));
        cfg.data = DataPaths {
            train: path("data.train"),
            valid: path("data.valid"),
            test: path("data.test"),
            labels: path("data.labels"),
            splits: path("data.splits"),
        };

        let m = &mut cfg.model;
        if let Some(v) = get("model.layers") {
            m.layers = parse_value("model.layers", v)?;
        }
        if let Some(v) = get("model.channels") {
            m.channels = parse_value("model.channels", v)?;
        }
        if let Some(v) = get("model.entity_dim") {
            m.entity_dim = parse_value("model.entity_dim", v)?;
        }
        if let Some(v) = get("model.relation_dim") {
            m.relation_dim = parse_value("model.relation_dim", v)?;
        }
        match get("model.hidden_dim") {
            Some(v) => {
                let dims = v
                    .split(',')
                    .map(|d| parse_value::<usize>("model.hidden_dim", d.trim()))
                    .collect::<Result<Vec<_>>>()?;
                m.hidden_dims = if dims.len() == 1 {
                    vec![dims[0]; m.layers]
                } else {
                    if get("model.layers").is_some() && dims.len() != m.layers {
                        return Err(RgatError::Config(format!(
                            "model.hidden_dim lists {} widths for {} layers",
                            dims.len(),
                            m.layers
                        )));
                    }
                    m.layers = dims.len();
                    dims
                };
            }
            None => m.hidden_dims = vec![m.entity_dim; m.layers],
        }
        if let Some(v) = get("model.activation") {
            m.activation = match v {
                "elu" => Activation::Elu,
                "relu" => Activation::Relu,
                _ => return Err(RgatError::Config(format!("unknown activation '{v}'"))),
            };
        }
        if let Some(v) = get("model.attention_slope") {
            m.attention_slope = parse_value("model.attention_slope", v)?;
        }
        if let Some(v) = get("model.attention_dropout") {
            m.attention_dropout = parse_value("model.attention_dropout", v)?;
        }
        if let Some(v) = get("model.feature_dropout") {
            m.feature_dropout = parse_value("model.feature_dropout", v)?;
        }
        if let Some(v) = get("model.relation_mode") {
            m.relation_mode = match v {
                "concat" => RelationMode::Concat,
                "identity" => RelationMode::Identity,
                _ => return Err(RgatError::Config(format!("unknown relation mode '{v}'"))),
            };
        }

        let d = &mut cfg.decoder;
        if let Some(v) = get("decoder.query_dim") {
            d.query_dim = Some(parse_value("decoder.query_dim", v)?);
        }
        if let Some(v) = get("decoder.heads") {
            d.heads = parse_value("decoder.heads", v)?;
        }
        if let Some(v) = get("decoder.qatt") {
            d.qatt_enabled = parse_bool("decoder.qatt", v)?;
        }
        if let Some(v) = get("decoder.activation") {
            d.activation = match v {
                "relu" => ScoreActivation::Relu,
                "identity" => ScoreActivation::Identity,
                _ => return Err(RgatError::Config(format!("unknown decoder activation '{v}'"))),
            };
        }
        if let Some(v) = get("decoder.label_smoothing") {
            d.label_smoothing = parse_value("decoder.label_smoothing", v)?;
        }

        let o = &mut cfg.optim;
        if let Some(v) = get("optim.lr") {
            o.adam.lr = parse_value("optim.lr", v)?;
        }
        if let Some(v) = get("optim.beta1") {
            o.adam.beta1 = parse_value("optim.beta1", v)?;
        }
        if let Some(v) = get("optim.beta2") {
            o.adam.beta2 = parse_value("optim.beta2", v)?;
        }
        if let Some(v) = get("optim.eps") {
            o.adam.eps = parse_value("optim.eps", v)?;
        }
        if let Some(v) = get("optim.epochs") {
            o.epochs = parse_value("optim.epochs", v)?;
        }
        if let Some(v) = get("optim.batch_size") {
            o.batch_size = parse_value("optim.batch_size", v)?;
        }

        let e = &mut cfg.eval;
        if let Some(v) = get("eval.every") {
            e.every = parse_value("eval.every", v)?;
        }
        if let Some(v) = get("eval.patience") {
            e.patience = parse_value("eval.patience", v)?;
        }
        if let Some(v) = get("eval.batch_size") {
            e.batch_size = parse_value("eval.batch_size", v)?;
        }
        if let Some(v) = get("eval.split") {
            e.split = match v {
                "train" => SelectionSplit::Train,
                "valid" => SelectionSplit::Valid,
                _ => return Err(RgatError::Config(format!("unknown eval split '{v}'"))),
            };
        }

        cfg.check_values()?;
        Ok(cfg)
    }

    fn check_values(&self) -> Result<()> {
        self.model_config().validate()?;
        let entity_out = self.model_config().output_entity_dim();
        if !entity_out.is_multiple_of(self.model.channels) {
            return Err(RgatError::Config(format!(
                "{} channels do not divide entity dim {entity_out}",
                self.model.channels
            )));
        }
        if self.optim.epochs == 0 || self.optim.batch_size == 0 {
            return Err(RgatError::Config("epochs and batch size must be positive".into()));
        }
        if self.eval.every == 0 || self.eval.batch_size == 0 {
            return Err(RgatError::Config("eval cadence and batch size must be positive".into()));
        }
        if self.optim.adam.lr.is_nan() || self.optim.adam.lr < 0.0 {
            return Err(RgatError::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }

    /// Checks that the files this task needs are configured and exist.
    pub fn validate(&self) -> Result<()> {
        self.check_values()?;
        let required: &[(&str, &Option<PathBuf>)] = match self.task {
            Task::LinkPrediction => &[("data.train", &self.data.train)],
            Task::EntityClassification => &[
                ("data.train", &self.data.train),
                ("data.labels", &self.data.labels),
                ("data.splits", &self.data.splits),
            ],
        };
        for (key, path) in required {
            if path.is_none() {
                return Err(RgatError::Config(format!("{key} is required for this task")));
            }
        }
        for path in [
            &self.data.train,
            &self.data.valid,
            &self.data.test,
            &self.data.labels,
            &self.data.splits,
        ]
        .into_iter()
        .flatten()
        {
            if !path.exists() {
                return Err(RgatError::Config(format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig::with_dims(m.channels, m.entity_dim, m.relation_dim, &m.hidden_dims, m.relation_mode).map_layers(
            |mut l| {
                l.activation = m.activation;
                l.attention_slope = m.attention_slope;
                l.attention_dropout = m.attention_dropout;
                l.feature_dropout = m.feature_dropout;
                l
            },
        )
    }

    /// Hash of everything that determines parameter shapes and forward semantics.
    pub fn architecture_hash(&self) -> u64 {
        let text = format!("{:?}|{:?}|{:?}", self.task, self.model, self.decoder);
        fnv1a(text.as_bytes())
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let task = match self.task {
            Task::LinkPrediction => "link_prediction",
            Task::EntityClassification => "entity_classification",
        };
        let _ = writeln!(s, "[run]\ntask = {task}\nseed = {}", self.seed);
        let _ = writeln!(s, "\n[data]");
        for (k, v) in [
            ("train", &self.data.train),
            ("valid", &self.data.valid),
            ("test", &self.data.test),
            ("labels", &self.data.labels),
            ("splits", &self.data.splits),
        ] {
            if let Some(p) = v {
                let _ = writeln!(s, "{k} = {}", p.display());
            }
        }
        let m = &self.model;
        let dims: Vec<String> = m.hidden_dims.iter().map(usize::to_string).collect();
        let _ = writeln!(
            s,
            "\n[model]\nlayers = {}\nchannels = {}\nentity_dim = {}\nrelation_dim = {}\nhidden_dim = {}",
            m.layers,
            m.channels,
            m.entity_dim,
            m.relation_dim,
            dims.join(", ")
        );
        let _ = writeln!(
            s,
            "activation = {}\nattention_slope = {}\nattention_dropout = {}\nfeature_dropout = {}\nrelation_mode = {}",
            match m.activation {
                Activation::Elu => "elu",
                Activation::Relu => "relu",
            },
            m.attention_slope,
            m.attention_dropout,
            m.feature_dropout,
            match m.relation_mode {
                RelationMode::Concat => "concat",
                RelationMode::Identity => "identity",
            }
        );
        let d = &self.decoder;
        let _ = writeln!(s, "\n[decoder]");
        if let Some(q) = d.query_dim {
            let _ = writeln!(s, "query_dim = {q}");
        }
        let _ = writeln!(
            s,
            "heads = {}\nqatt = {}\nactivation = {}\nlabel_smoothing = {}",
            d.heads,
            d.qatt_enabled,
            match d.activation {
                ScoreActivation::Relu => "relu",
                ScoreActivation::Identity => "identity",
            },
            d.label_smoothing
        );
        let o = &self.optim;
        let _ = writeln!(
            s,
            "\n[optim]\nlr = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nepochs = {}\nbatch_size = {}",
            o.adam.lr, o.adam.beta1, o.adam.beta2, o.adam.eps, o.epochs, o.batch_size
        );
        let e = &self.eval;
        let _ = writeln!(
            s,
            "\n[eval]\nevery = {}\npatience = {}\nbatch_size = {}\nsplit = {}",
            e.every,
            e.patience,
            e.batch_size,
            match e.split {
                SelectionSplit::Train => "train",
                SelectionSplit::Valid => "valid",
            }
        );
        s
    }
}
