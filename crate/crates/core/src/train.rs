//! Training loops, evaluation wrappers and the channel sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classify::{accuracy, LabelSet, Labeled, Split};
use crate::config::{RunConfig, SelectionSplit};
use crate::decoder::{build_queries, QueryBatch};
use crate::error::{Result, RgatError};
use crate::eval::{evaluate_with, FilterIndex, RankReport};
use crate::graph::{load_triplets, parse_triplets, MultiRelGraph, Triplet, Vocab};
use crate::layer::Mode;
use crate::model::{EntityClassifier, LinkPredictor};
use crate::synth::{LabeledDataset, NamedTriplet, SynthDataset};
use crate::util::derive_seed;

/// Link-prediction splits over one vocabulary.
#[derive(Debug, Clone)]
pub struct LinkDataset {
    pub vocab: Vocab,
    pub train: Vec<Triplet>,
    pub valid: Vec<Triplet>,
    pub test: Vec<Triplet>,
    /// Message-passing graph over the training triplets.
    pub graph: MultiRelGraph,
    /// Known triplets of all splits.
    pub filter: FilterIndex,
}

impl LinkDataset {
    pub fn new(vocab: Vocab, train: Vec<Triplet>, valid: Vec<Triplet>, test: Vec<Triplet>) -> Self {
        let graph = MultiRelGraph::build(&train, &vocab);
        let filter = FilterIndex::build(&[&train, &valid, &test], vocab.num_base_relations());
        LinkDataset { vocab, train, valid, test, graph, filter }
    }

    /// Reads the configured splits; the vocabulary comes from the training file.
    pub fn load(config: &RunConfig) -> Result<Self> {
        let train_path = config
            .data
            .train
            .as_deref()
            .ok_or_else(|| RgatError::Config("data.train is required".into()))?;
        let (train, vocab) = load_triplets(train_path, None)?;
        let load = |p: Option<&Path>| -> Result<Vec<Triplet>> {
            match p {
                Some(p) => Ok(load_triplets(p, Some(&vocab))?.0),
                None => Ok(Vec::new()),
            }
        };
        let valid = load(config.data.valid.as_deref())?;
        let test = load(config.data.test.as_deref())?;
        Ok(Self::new(vocab, train, valid, test))
    }

    /// Builds a dataset from in-memory named splits.
    pub fn from_synthetic(data: &SynthDataset) -> Result<Self> {
        let (train, vocab) = parse_triplets(&render_named(&data.train), Path::new("<train>"), None)?;
        let (valid, _) = parse_triplets(&render_named(&data.valid), Path::new("<valid>"), Some(&vocab))?;
        let (test, _) = parse_triplets(&render_named(&data.test), Path::new("<test>"), Some(&vocab))?;
        Ok(Self::new(vocab, train, valid, test))
    }
}

fn render_named(triplets: &[NamedTriplet]) -> String {
    triplets.iter().map(|(s, r, o)| format!("{s}\t{r}\t{o}\n")).collect()
}

/// Graph plus entity labels.
#[derive(Debug, Clone)]
pub struct ClassDataset {
    pub vocab: Vocab,
    pub triplets: Vec<Triplet>,
    pub graph: MultiRelGraph,
    pub labels: LabelSet,
}

impl ClassDataset {
    pub fn new(vocab: Vocab, triplets: Vec<Triplet>, labels: LabelSet) -> Self {
        let graph = MultiRelGraph::build(&triplets, &vocab);
        ClassDataset { vocab, triplets, graph, labels }
    }

    pub fn load(config: &RunConfig) -> Result<Self> {
        let need = |p: &Option<std::path::PathBuf>, key: &str| {
            p.clone().ok_or_else(|| RgatError::Config(format!("{key} is required")))
        };
        let (triplets, vocab) = load_triplets(&need(&config.data.train, "data.train")?, None)?;
        let labels = LabelSet::load(
            &need(&config.data.labels, "data.labels")?,
            &need(&config.data.splits, "data.splits")?,
            &vocab,
        )?;
        Ok(Self::new(vocab, triplets, labels))
    }

    pub fn from_synthetic(data: &LabeledDataset) -> Result<Self> {
        let (triplets, vocab) = parse_triplets(&render_named(&data.triplets), Path::new("<train>"), None)?;
        let mut class_names: Vec<String> = Vec::new();
        let mut entries = Vec::new();
        for ((entity, class), (_, split)) in data.labels.iter().zip(&data.splits) {
            let entity = vocab
                .entity_id(entity)
                .ok_or_else(|| RgatError::UnknownName { kind: "entity", name: entity.clone() })?;
            let class = match class_names.iter().position(|c| c == class) {
                Some(c) => c,
                None => {
                    class_names.push(class.clone());
                    class_names.len() - 1
                }
            };
            let split = match *split {
                "train" => Split::Train,
                "valid" => Split::Valid,
                _ => Split::Test,
            };
            entries.push(Labeled { entity, class, split });
        }
        Ok(Self::new(vocab, triplets, LabelSet::new(class_names, entries)?))
    }
}

/// `epoch TAB metric TAB value` records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    pub records: Vec<(usize, String, f64)>,
}

impl MetricLog {
    pub fn push(&mut self, epoch: usize, metric: &str, value: f64) {
        log::info!("epoch {epoch} {metric} {value}");
        self.records.push((epoch, metric.to_string(), value));
    }

    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.1 == metric).map(|r| r.2).collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (epoch, metric, value) in &self.records {
            let _ = writeln!(s, "{epoch}\t{metric}\t{value}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| RgatError::io(path, e))
    }
}

/// Result of a training run; the model holds the best parameters seen.
#[derive(Debug, Clone)]
pub struct Outcome<M> {
    pub model: M,
    pub log: MetricLog,
    pub best_epoch: usize,
    /// Selection metric at `best_epoch`; NaN when nothing was evaluated.
    pub best_metric: f64,
    pub epochs_run: usize,
}

/// Epoch, metric and parameter values of the best evaluation so far.
type Snapshot = (usize, f64, Vec<(String, crate::autodiff::Array)>);

struct Selector {
    every: usize,
    patience: usize,
    best: Option<Snapshot>,
    stale: usize,
}

impl Selector {
    fn new(config: &RunConfig) -> Self {
        Selector {
            every: config.eval.every,
            patience: config.eval.patience,
            best: None,
            stale: 0,
        }
    }

    fn due(&self, epoch: usize, last: usize) -> bool {
        epoch.is_multiple_of(self.every) || epoch == last
    }

    /// Records an evaluation; returns true when training should stop.
    fn observe(&mut self, epoch: usize, metric: f64, store: &crate::autodiff::ParamStore) -> bool {
        let improved = match &self.best {
            None => true,
            Some((_, best, _)) => metric > *best,
        };
        if improved {
            self.best = Some((epoch, metric, store.snapshot()));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.patience > 0 && self.stale >= self.patience
    }

    fn finish(self, store: &mut crate::autodiff::ParamStore, last_epoch: usize) -> Result<(usize, f64)> {
        match self.best {
            Some((epoch, metric, snapshot)) => {
                store.restore(&snapshot)?;
                Ok((epoch, metric))
            }
            None => Ok((last_epoch, f64::NAN)),
        }
    }
}

/// Trains a link predictor on `dataset.train`.
///
/// Model selection uses filtered MRR on the configured split, evaluated every
/// `eval.every` epochs and at the final epoch.
pub fn train_lp(config: &RunConfig, dataset: &LinkDataset) -> Result<Outcome<LinkPredictor>> {
    let mut model = LinkPredictor::new(
        &config.model_config(),
        &config.decoder,
        dataset.vocab.num_entities(),
        dataset.vocab.num_relations(),
        config.seed,
    )?;
    let queries = build_queries(&dataset.train, dataset.vocab.num_base_relations());
    if queries.is_empty() {
        return Err(RgatError::EmptySplit("train"));
    }
    let selection: &[Triplet] = match config.eval.split {
        SelectionSplit::Train => &dataset.train,
        SelectionSplit::Valid => &dataset.valid,
    };
    let n_e = dataset.vocab.num_entities();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x5eed]));
    let mut order: Vec<usize> = (0..queries.len()).collect();
    let mut log = MetricLog::default();
    let mut selector = Selector::new(config);
    let mut step = 0u64;
    let mut epochs_run = 0;
    let last = config.optim.epochs;

    for epoch in 1..=last {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.optim.batch_size) {
            step += 1;
            let refs: Vec<_> = chunk.iter().map(|&i| &queries[i]).collect();
            let batch = QueryBatch::new(&refs, n_e);
            let mode = Mode::Train {
                seed: derive_seed(config.seed, &[step]),
            };
            let loss = model.loss_and_grad(&dataset.graph, &batch, mode)?;
            if !loss.is_finite() {
                return Err(RgatError::Diverged { epoch, loss });
            }
            model.store.adam_step(&config.optim.adam);
            total += loss * chunk.len() as f64;
        }
        log.push(epoch, "train_loss", total / queries.len() as f64);

        if !selection.is_empty() && selector.due(epoch, last) {
            let report = evaluate_lp(&model, dataset, selection, config)?;
            let name = match config.eval.split {
                SelectionSplit::Train => "train",
                SelectionSplit::Valid => "valid",
            };
            log.push(epoch, &format!("{name}_mrr"), report.mrr);
            log.push(epoch, &format!("{name}_hits@10"), report.hits10);
            if selector.observe(epoch, report.mrr, &model.store) {
                break;
            }
        }
    }
    let (best_epoch, best_metric) = selector.finish(&mut model.store, epochs_run)?;
    Ok(Outcome {
        model,
        log,
        best_epoch,
        best_metric,
        epochs_run,
    })
}

/// Filtered ranking of both directions of `triplets`.
pub fn evaluate_lp(
    model: &LinkPredictor,
    dataset: &LinkDataset,
    triplets: &[Triplet],
    config: &RunConfig,
) -> Result<RankReport> {
    let scorer = model.scorer(&dataset.graph)?;
    evaluate_with(
        triplets,
        &dataset.filter,
        dataset.vocab.num_base_relations(),
        config.seed,
        config.eval.batch_size,
        scorer,
    )
}

/// Trains an entity classifier with full-batch steps on the train labels.
///
/// Selection uses validation accuracy when the valid split has labels and
/// `eval.split = valid`, otherwise training accuracy.
pub fn train_ec(config: &RunConfig, dataset: &ClassDataset) -> Result<Outcome<EntityClassifier>> {
    if dataset.labels.count(Split::Train) == 0 {
        return Err(RgatError::EmptySplit("train"));
    }
    let mut model = EntityClassifier::new(
        &config.model_config(),
        dataset.labels.num_classes(),
        dataset.vocab.num_entities(),
        dataset.vocab.num_relations(),
        config.seed,
    )?;
    let select = match config.eval.split {
        SelectionSplit::Valid if dataset.labels.count(Split::Valid) > 0 => Split::Valid,
        _ => Split::Train,
    };
    let mut log = MetricLog::default();
    let mut selector = Selector::new(config);
    let mut epochs_run = 0;
    let last = config.optim.epochs;
    for epoch in 1..=last {
        epochs_run = epoch;
        let mode = Mode::Train {
            seed: derive_seed(config.seed, &[epoch as u64]),
        };
        let loss = model.loss_and_grad(&dataset.graph, &dataset.labels, mode)?;
        if !loss.is_finite() {
            return Err(RgatError::Diverged { epoch, loss });
        }
        model.store.adam_step(&config.optim.adam);
        log.push(epoch, "train_loss", loss);
        if selector.due(epoch, last) {
            let probs = model.probabilities(&dataset.graph)?;
            let acc = accuracy(&probs, &dataset.labels, select)?;
            log.push(epoch, &format!("{}_acc", select.name()), acc);
            if selector.observe(epoch, acc, &model.store) {
                break;
            }
        }
    }
    let (best_epoch, best_metric) = selector.finish(&mut model.store, epochs_run)?;
    Ok(Outcome {
        model,
        log,
        best_epoch,
        best_metric,
        epochs_run,
    })
}

/// Accuracy on one split.
pub fn evaluate_ec(model: &EntityClassifier, dataset: &ClassDataset, split: Split) -> Result<f64> {
    let probs = model.probabilities(&dataset.graph)?;
    accuracy(&probs, &dataset.labels, split)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub channels: usize,
    pub layer_params: usize,
    pub total_params: usize,
    /// `Err` holds the failure message; the sweep continues past it.
    pub result: std::result::Result<RankReport, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Channel count with the highest MRR among successful runs.
    pub fn best(&self) -> Option<usize> {
        self.rows
            .iter()
            .filter_map(|r| r.result.as_ref().ok().map(|rep| (r.channels, rep.mrr)))
            .fold(None, |acc: Option<(usize, f64)>, (k, m)| match acc {
                Some((_, best)) if best >= m => acc,
                _ => Some((k, m)),
            })
            .map(|(k, _)| k)
    }

    pub fn render(&self) -> String {
        let best = self.best();
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>4}{:>14}{:>14}{:>10}{:>10}{:>10}{:>10}  note",
            "K", "layer_params", "total_params", "mrr", "hits@1", "hits@3", "hits@10"
        );
        for row in &self.rows {
            match &row.result {
                Ok(r) => {
                    let _ = writeln!(
                        s,
                        "{:>4}{:>14}{:>14}{:>10.4}{:>10.4}{:>10.4}{:>10.4}  {}",
                        row.channels,
                        row.layer_params,
                        row.total_params,
                        r.mrr,
                        r.hits1,
                        r.hits3,
                        r.hits10,
                        if best == Some(row.channels) { "best" } else { "" }
                    );
                }
                Err(msg) => {
                    let _ = writeln!(
                        s,
                        "{:>4}{:>14}{:>14}{:>10}{:>10}{:>10}{:>10}  failed: {msg}",
                        row.channels, row.layer_params, row.total_params, "-", "-", "-", "-"
                    );
                }
            }
        }
        s
    }
}

/// Trains one model per channel count and reports test ranking
/// (validation ranking when there is no test split).
pub fn sweep_channels(config: &RunConfig, dataset: &LinkDataset, channel_counts: &[usize]) -> SweepTable {
    let rows = channel_counts
        .iter()
        .map(|&k| {
            let mut cfg = config.clone();
            cfg.model.channels = k;
            let model_cfg = cfg.model_config();
            let (layer_params, total_params) = match LinkPredictor::new(
                &model_cfg,
                &cfg.decoder,
                dataset.vocab.num_entities(),
                dataset.vocab.num_relations(),
                cfg.seed,
            ) {
                Ok(m) => (m.layer_param_count(), m.store.num_scalars()),
                Err(e) => {
                    return SweepRow {
                        channels: k,
                        layer_params: 0,
                        total_params: 0,
                        result: Err(e.to_string()),
                    }
                }
            };
            let eval_split = if dataset.test.is_empty() { &dataset.valid } else { &dataset.test };
            let result = train_lp(&cfg, dataset)
                .and_then(|out| evaluate_lp(&out.model, dataset, eval_split, &cfg))
                .map_err(|e| {
                    log::warn!("K = {k} failed: {e}");
                    e.to_string()
                });
            SweepRow {
                channels: k,
                layer_params,
                total_params,
                result,
            }
        })
        .collect();
    SweepTable { rows }
}
