//! Entity classification on top of the final encoder layer.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Array, ParamId, ParamStore, Tape, Var};
use crate::error::{Result, RgatError};
use crate::graph::{EntityId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Labeled {
    pub entity: EntityId,
    pub class: usize,
    pub split: Split,
}

/// Gold classes of labelled entities and their split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub class_names: Vec<String>,
    pub entries: Vec<Labeled>,
}

impl LabelSet {
    pub fn new(class_names: Vec<String>, entries: Vec<Labeled>) -> Result<Self> {
        let c = class_names.len();
        if let Some(bad) = entries.iter().find(|l| l.class >= c) {
            return Err(RgatError::Invalid(format!("class {} out of range for C = {c}", bad.class)));
        }
        let mut seen = HashMap::new();
        for l in &entries {
            if let Some(prev) = seen.insert(l.entity, l.split) {
                return Err(RgatError::Invalid(format!(
                    "entity {} labelled twice ({} and {})",
                    l.entity,
                    prev.name(),
                    l.split.name()
                )));
            }
        }
        Ok(LabelSet { class_names, entries })
    }

    /// Reads "entity TAB class" labels and "entity TAB train|valid|test" split markers.
    /// Class ids follow first appearance in the labels file.
    pub fn load(labels: &Path, splits: &Path, vocab: &Vocab) -> Result<Self> {
        let label_text = fs::read_to_string(labels).map_err(|e| RgatError::io(labels, e))?;
        let split_text = fs::read_to_string(splits).map_err(|e| RgatError::io(splits, e))?;

        let mut split_of: HashMap<EntityId, Split> = HashMap::new();
        for (lineno, fields) in tab_lines(&split_text, splits)? {
            let entity = lookup(vocab, fields[0], splits, lineno)?;
            let split = Split::parse(fields[1]).ok_or_else(|| {
                RgatError::Invalid(format!(
                    "{}:{lineno}: split must be train, valid or test, got '{}'",
                    splits.display(),
                    fields[1]
                ))
            })?;
            split_of.insert(entity, split);
        }

        let mut class_names: Vec<String> = Vec::new();
        let mut class_ids: HashMap<String, usize> = HashMap::new();
        let mut entries = Vec::new();
        for (lineno, fields) in tab_lines(&label_text, labels)? {
            let entity = lookup(vocab, fields[0], labels, lineno)?;
            let class = *class_ids.entry(fields[1].to_string()).or_insert_with(|| {
                class_names.push(fields[1].to_string());
                class_names.len() - 1
            });
            let split = split_of.get(&entity).copied().ok_or_else(|| {
                RgatError::Invalid(format!(
                    "{}:{lineno}: entity '{}' has no split marker",
                    labels.display(),
                    fields[0]
                ))
            })?;
            entries.push(Labeled { entity, class, split });
        }
        Self::new(class_names, entries)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Labeled> {
        self.entries.iter().filter(move |l| l.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

fn tab_lines<'a>(text: &'a str, path: &Path) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(RgatError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                found: fields.len(),
            });
        }
        out.push((i + 1, fields));
    }
    Ok(out)
}

fn lookup(vocab: &Vocab, name: &str, path: &Path, line: usize) -> Result<EntityId> {
    vocab.entity_id(name).ok_or_else(|| RgatError::Vocabulary {
        path: path.to_path_buf(),
        line,
        kind: "entity",
        name: name.to_string(),
    })
}

/// Linear class map `[C x D_e]` on final-layer entity features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub num_classes: usize,
}

impl ClassifierHead {
    pub fn new(num_classes: usize, entity_dim: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        if num_classes == 0 {
            return Err(RgatError::Config("at least one class is required".into()));
        }
        Ok(ClassifierHead {
            weight: store.add_glorot("classifier.w", num_classes, entity_dim, rng),
            num_classes,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, entities: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        class_probabilities(tape, entities, w)
    }
}

/// Row softmax of `entities W^T`, `[N_e x C]`.
pub fn class_probabilities(tape: &mut Tape, entities: Var, w_cls: Var) -> Result<Var> {
    let logits = tape.matmul_t(entities, w_cls)?;
    let (n, c) = (tape.value(logits).rows(), tape.value(logits).cols());
    let flat = tape.reshape(logits, &[n * c])?;
    let segments: Vec<usize> = (0..n * c).map(|i| i / c).collect();
    let probs = tape.segment_softmax(flat, &segments)?;
    tape.reshape(probs, &[n, c])
}

/// `-(1/|Y|) sum_i ln p_{i, gold(i)}` over the chosen split.
pub fn ce_loss(tape: &mut Tape, probs: Var, labels: &LabelSet, split: Split) -> Result<Var> {
    let c = tape.value(probs).cols();
    let picks: Vec<usize> = labels.split(split).map(|l| l.entity * c + l.class).collect();
    if picks.is_empty() {
        return Err(RgatError::EmptySplit(split.name()));
    }
    let n = tape.value(probs).len();
    let column = tape.reshape(probs, &[n, 1])?;
    let gold = tape.gather_rows(column, &picks)?;
    let log = tape.log(gold);
    let mean = tape.mean(log);
    Ok(tape.scale(mean, -1.0))
}

/// Fraction of entities in `split` whose argmax class (lowest id on ties) is gold.
pub fn accuracy(probs: &Array, labels: &LabelSet, split: Split) -> Result<f64> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for l in labels.split(split) {
        total += 1;
        if argmax(probs.row(l.entity)) == l.class {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(RgatError::EmptySplit(split.name()));
    }
    Ok(correct as f64 / total as f64)
}

/// Index of the first maximum.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(entries: &[(usize, usize, Split)], c: usize) -> LabelSet {
        LabelSet::new(
            (0..c).map(|i| format!("c{i}")).collect(),
            entries.iter().map(|&(entity, class, split)| Labeled { entity, class, split }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_rows() {
        let mut tape = Tape::new();
        let e = tape.constant(Array::from_fn(4, 3, |i, j| (i * 3 + j) as f64));
        let w = tape.constant(Array::zeros(&[5, 3]));
        let p = class_probabilities(&mut tape, e, w).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let w1 = tape.constant(Array::full(&[1, 3], 2.0));
        let p1 = class_probabilities(&mut tape, e, w1).unwrap();
        assert!(tape.value(p1).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn perfect_and_uniform_losses() {
        let ls = labels(&[(0, 1, Split::Train), (1, 0, Split::Train), (2, 2, Split::Test)], 3);
        let mut tape = Tape::new();
        let perfect = tape.constant(Array::matrix(3, 3, vec![0., 1., 0., 1., 0., 0., 0., 0., 1.]).unwrap());
        let loss = ce_loss(&mut tape, perfect, &ls, Split::Train).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        let uniform = tape.constant(Array::full(&[3, 3], 1.0 / 3.0));
        let loss = ce_loss(&mut tape, uniform, &ls, Split::Train).unwrap();
        assert!((tape.value(loss).item() - 3f64.ln()).abs() < 1e-15);
        assert!(matches!(ce_loss(&mut tape, uniform, &ls, Split::Valid), Err(RgatError::EmptySplit("valid"))));
    }

    #[test]
    fn accuracy_breaks_ties_towards_lowest_class() {
        let ls = labels(&[(0, 0, Split::Test), (1, 1, Split::Test)], 2);
        let probs = Array::matrix(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(accuracy(&probs, &ls, Split::Test).unwrap(), 0.5);
        let all_right = Array::matrix(2, 2, vec![0.9, 0.1, 0.3, 0.7]).unwrap();
        assert_eq!(accuracy(&all_right, &ls, Split::Test).unwrap(), 1.0);
        assert!(accuracy(&all_right, &ls, Split::Train).is_err());
    }

    #[test]
    fn duplicate_labels_rejected() {
        let entries = vec![
            Labeled { entity: 0, class: 0, split: Split::Train },
            Labeled { entity: 0, class: 1, split: Split::Test },
        ];
        assert!(LabelSet::new(vec!["a".into(), "b".into()], entries).is_err());
    }
}
