//! Python bindings: dataset generation, training, evaluation and inspection.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use rgat::autodiff::Checkpoint;
use rgat::classify::Split;
use rgat::config::{RunConfig, Task};
use rgat::inspect;
use rgat::synth::{LabeledSpec, SynthSpec};
use rgat::train::{self, ClassDataset, LinkDataset};
use rgat::RgatError;

fn py_err(e: RgatError) -> PyErr {
    match e {
        RgatError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn load_config(path: PathBuf, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::load(&path).map_err(py_err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// Writes a planted-aspect dataset; returns `(train, valid, test)` sizes.
#[pyfunction]
#[pyo3(signature = (out_dir, aspects=4, relations_per_aspect=3, entities=200, groups=5, density=0.05, permute=false, seed=0))]
#[allow(clippy::too_many_arguments)]
fn generate_synthetic(
    out_dir: PathBuf,
    aspects: usize,
    relations_per_aspect: usize,
    entities: usize,
    groups: usize,
    density: f64,
    permute: bool,
    seed: u64,
) -> PyResult<(usize, usize, usize)> {
    let spec = SynthSpec {
        aspects,
        relations_per_aspect,
        entities,
        groups,
        density,
        permute,
        seed,
    };
    let data = rgat::synth::generate_synthetic(&spec).map_err(py_err)?;
    data.write(&out_dir).map_err(py_err)?;
    Ok((data.train.len(), data.valid.len(), data.test.len()))
}

/// Writes a labelled classification dataset.
#[pyfunction]
#[pyo3(signature = (out_dir, entities=100, classes=4, relations=3, density=0.05, seed=0))]
fn generate_labeled(
    out_dir: PathBuf,
    entities: usize,
    classes: usize,
    relations: usize,
    density: f64,
    seed: u64,
) -> PyResult<()> {
    let spec = LabeledSpec {
        entities,
        classes,
        relations,
        density,
        seed,
        ..LabeledSpec::default()
    };
    rgat::synth::generate_labeled(&spec)
        .and_then(|d| d.write(&out_dir))
        .map_err(py_err)
}

/// Canonical text of a config file after defaults and presets are applied.
#[pyfunction]
fn canonical_config(path: PathBuf) -> PyResult<String> {
    Ok(RunConfig::load(&path).map_err(py_err)?.to_text())
}

/// Filtered rank of `gold` with random tie placement.
#[pyfunction]
#[pyo3(signature = (scores, gold, filtered=Vec::new(), seed=0))]
fn filtered_rank(scores: Vec<f64>, gold: usize, filtered: Vec<usize>, seed: u64) -> PyResult<usize> {
    let set = filtered.into_iter().collect();
    rgat::eval::filtered_rank(&scores, gold, Some(&set), seed).map_err(py_err)
}

#[pyclass(name = "LinkPredictor")]
struct PyLinkPredictor {
    config: RunConfig,
    data: LinkDataset,
    model: rgat::model::LinkPredictor,
    log: String,
    best_epoch: usize,
    best_metric: f64,
}

impl PyLinkPredictor {
    fn split(&self, name: &str) -> PyResult<&[rgat::graph::Triplet]> {
        match name {
            "train" => Ok(&self.data.train),
            "valid" => Ok(&self.data.valid),
            "test" => Ok(&self.data.test),
            _ => Err(PyValueError::new_err(format!("unknown split '{name}'"))),
        }
    }

    fn ids(&self, subject: &str, relation: &str) -> PyResult<(usize, usize)> {
        let s = self
            .data
            .vocab
            .entity_id(subject)
            .ok_or_else(|| PyValueError::new_err(format!("unknown entity '{subject}'")))?;
        let r = self
            .data
            .vocab
            .relation_id(relation)
            .ok_or_else(|| PyValueError::new_err(format!("unknown relation '{relation}'")))?;
        Ok((s, r))
    }
}

#[pymethods]
impl PyLinkPredictor {
    /// Trains from a config file.
    #[staticmethod]
    #[pyo3(signature = (config_path, seed=None))]
    fn train(py: Python<'_>, config_path: PathBuf, seed: Option<u64>) -> PyResult<Self> {
        let config = load_config(config_path, seed)?;
        if config.task != Task::LinkPrediction {
            return Err(PyValueError::new_err("config task is not link_prediction"));
        }
        py.detach(|| {
            let data = LinkDataset::load(&config)?;
            let out = train::train_lp(&config, &data)?;
            Ok(PyLinkPredictor {
                log: out.log.render(),
                best_epoch: out.best_epoch,
                best_metric: out.best_metric,
                model: out.model,
                data,
                config,
            })
        })
        .map_err(py_err)
    }

    /// Restores a saved checkpoint for the given config.
    #[staticmethod]
    fn load(config_path: PathBuf, checkpoint_path: PathBuf) -> PyResult<Self> {
        let config = load_config(config_path, None)?;
        let data = LinkDataset::load(&config).map_err(py_err)?;
        let mut model = rgat::model::LinkPredictor::new(
            &config.model_config(),
            &config.decoder,
            data.vocab.num_entities(),
            data.vocab.num_relations(),
            config.seed,
        )
        .map_err(py_err)?;
        let ckpt = Checkpoint::load(&checkpoint_path).map_err(py_err)?;
        model.load_checkpoint(&ckpt, config.architecture_hash()).map_err(py_err)?;
        Ok(PyLinkPredictor {
            config,
            data,
            model,
            log: String::new(),
            best_epoch: ckpt.epoch as usize,
            best_metric: ckpt.best_metric,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.model
            .checkpoint(self.config.architecture_hash(), self.best_epoch as u64, self.best_metric)
            .save(&path)
            .map_err(py_err)
    }

    /// Filtered MRR and Hits@{1,3,10} on `"train"`, `"valid"` or `"test"`.
    fn evaluate(&self, split: &str) -> PyResult<HashMap<String, f64>> {
        let triplets = self.split(split)?;
        let report = train::evaluate_lp(&self.model, &self.data, triplets, &self.config).map_err(py_err)?;
        Ok(report.metrics().iter().map(|(k, v)| (k.to_string(), *v)).collect())
    }

    /// Scores of every entity as the object of `(subject, relation, ?)`.
    fn score(&self, subject: &str, relation: &str) -> PyResult<Vec<f64>> {
        let (s, r) = self.ids(subject, relation)?;
        let scores = self.model.score(&self.data.graph, &[s], &[r]).map_err(py_err)?;
        Ok(scores.row(0).to_vec())
    }

    /// Channel weights for one query.
    fn beta(&self, subject: &str, relation: &str) -> PyResult<Vec<f64>> {
        let (s, r) = self.ids(subject, relation)?;
        let beta = self.model.beta(&self.data.graph, &[s], &[r]).map_err(py_err)?;
        Ok(beta.row(0).to_vec())
    }

    /// Mean channel weights per relation over a seeded entity sample.
    #[pyo3(signature = (relations, sample=100, seed=0))]
    fn channel_summary(&self, relations: Vec<String>, sample: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let refs: Vec<&str> = relations.iter().map(String::as_str).collect();
        let report =
            inspect::channel_attention_summary(&self.model, &self.data.graph, &self.data.vocab, &refs, sample, seed)
                .map_err(py_err)?;
        Ok(report.rows)
    }

    /// Rendered top-channel / top-fact report.
    #[pyo3(signature = (subject, relation, top_channels=3, top_facts=4))]
    fn top_facts(&self, subject: &str, relation: &str, top_channels: usize, top_facts: usize) -> PyResult<String> {
        inspect::top_facts(
            &self.model,
            &self.data.graph,
            &self.data.vocab,
            subject,
            relation,
            top_channels,
            top_facts,
        )
        .map(|r| r.render())
        .map_err(py_err)
    }

    #[getter]
    fn metrics_log(&self) -> String {
        self.log.clone()
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    #[getter]
    fn entity_names(&self) -> Vec<String> {
        self.data.vocab.entity_names().to_vec()
    }

    #[getter]
    fn relation_names(&self) -> Vec<String> {
        self.data.vocab.relation_names().to_vec()
    }

    #[getter]
    fn layer_param_count(&self) -> usize {
        self.model.layer_param_count()
    }
}

#[pyclass(name = "EntityClassifier")]
struct PyEntityClassifier {
    data: ClassDataset,
    model: rgat::model::EntityClassifier,
    log: String,
}

#[pymethods]
impl PyEntityClassifier {
    #[staticmethod]
    #[pyo3(signature = (config_path, seed=None))]
    fn train(py: Python<'_>, config_path: PathBuf, seed: Option<u64>) -> PyResult<Self> {
        let config = load_config(config_path, seed)?;
        if config.task != Task::EntityClassification {
            return Err(PyValueError::new_err("config task is not entity_classification"));
        }
        py.detach(|| {
            let data = ClassDataset::load(&config)?;
            let out = train::train_ec(&config, &data)?;
            Ok(PyEntityClassifier {
                log: out.log.render(),
                model: out.model,
                data,
            })
        })
        .map_err(py_err)
    }

    fn accuracy(&self, split: &str) -> PyResult<f64> {
        let split = match split {
            "train" => Split::Train,
            "valid" => Split::Valid,
            "test" => Split::Test,
            _ => return Err(PyValueError::new_err(format!("unknown split '{split}'"))),
        };
        train::evaluate_ec(&self.model, &self.data, split).map_err(py_err)
    }

    #[getter]
    fn metrics_log(&self) -> String {
        self.log.clone()
    }
}

#[pymodule]
fn rgat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(generate_labeled, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_config, m)?)?;
    m.add_function(wrap_pyfunction!(filtered_rank, m)?)?;
    m.add_class::<PyLinkPredictor>()?;
    m.add_class::<PyEntityClassifier>()?;
    Ok(())
}
