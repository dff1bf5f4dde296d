//! Triplet loading, vocabularies, and the augmented multi-relational graph.
//!
//! Every original relation `r` gets an inverse `r + |R|`, and one shared
//! self-loop relation with id `2|R|` links each entity to itself, so that
//! every entity has a non-empty incoming neighbourhood.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Result, RgatError};

pub type EntityId = usize;
pub type RelationId = usize;

const INVERSE_SUFFIX: &str = "^-1";
pub const SELF_LOOP_NAME: &str = "<self>";

/// Entity and (augmented) relation names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    entity_names: Vec<String>,
    relation_names: Vec<String>,
    num_base_relations: usize,
    entity_index: HashMap<String, EntityId>,
    relation_index: HashMap<String, RelationId>,
}

impl Vocab {
    /// Builds an augmented vocabulary from entity names and original relation names.
    pub fn new(entities: Vec<String>, base_relations: Vec<String>) -> Result<Self> {
        let num_base_relations = base_relations.len();
        let mut relation_names = base_relations.clone();
        relation_names.extend(base_relations.iter().map(|r| format!("{r}{INVERSE_SUFFIX}")));
        relation_names.push(SELF_LOOP_NAME.to_string());

        let entity_index = index_names(&entities, "entity")?;
        let relation_index = index_names(&relation_names, "relation")?;
        Ok(Vocab {
            entity_names: entities,
            relation_names,
            num_base_relations,
            entity_index,
            relation_index,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.entity_names.len()
    }

    /// |R|, the number of relations before augmentation.
    pub fn num_base_relations(&self) -> usize {
        self.num_base_relations
    }

    /// 2|R| + 1.
    pub fn num_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn self_loop(&self) -> RelationId {
        2 * self.num_base_relations
    }

    pub fn inverse(&self, relation: RelationId) -> RelationId {
        inverse_of(relation, self.num_base_relations)
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entity_names[id]
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        &self.relation_names[id]
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entity_names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_index.get(name).copied()
    }

    /// Looks up any augmented relation name, including inverses and the self-loop.
    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_index.get(name).copied()
    }

    fn base_relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_id(name).filter(|&r| r < self.num_base_relations)
    }

    /// "id TAB name" lines, entities first, then a blank line, then relations.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (id, name) in self.entity_names.iter().enumerate() {
            let _ = writeln!(out, "{id}\t{name}");
        }
        out.push('\n');
        for (id, name) in self.relation_names.iter().enumerate() {
            let _ = writeln!(out, "{id}\t{name}");
        }
        out
    }
}

fn intern<'a>(name: &'a str, ids: &mut HashMap<&'a str, usize>, names: &mut Vec<String>) -> usize {
    *ids.entry(name).or_insert_with(|| {
        names.push(name.to_string());
        names.len() - 1
    })
}

fn index_names(names: &[String], kind: &'static str) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(names.len());
    for (id, name) in names.iter().enumerate() {
        if index.insert(name.clone(), id).is_some() {
            return Err(RgatError::Invalid(format!("duplicate {kind} name '{name}'")));
        }
    }
    Ok(index)
}

pub(crate) fn inverse_of(relation: RelationId, num_base: usize) -> RelationId {
    if relation < num_base {
        relation + num_base
    } else if relation < 2 * num_base {
        relation - num_base
    } else {
        relation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
}

impl Triplet {
    pub fn new(subject: EntityId, relation: RelationId, object: EntityId) -> Self {
        Triplet {
            subject,
            relation,
            object,
        }
    }
}

/// Reads a tab-separated triplet file.
///
/// With `vocab = None` the file is treated as the training split and a fresh
/// vocabulary is built in first-appearance order. Otherwise every name must
/// already be known.
pub fn load_triplets(path: &Path, vocab: Option<&Vocab>) -> Result<(Vec<Triplet>, Vocab)> {
    let text = fs::read_to_string(path).map_err(|e| RgatError::io(path, e))?;
    parse_triplets(&text, path, vocab)
}

pub(crate) fn parse_triplets(
    text: &str,
    path: &Path,
    vocab: Option<&Vocab>,
) -> Result<(Vec<Triplet>, Vocab)> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(RgatError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                found: fields.len(),
            });
        }
        rows.push((lineno + 1, fields[0], fields[1], fields[2]));
    }

    match vocab {
        Some(vocab) => {
            let unknown = |line, kind, name: &str| RgatError::Vocabulary {
                path: path.to_path_buf(),
                line,
                kind,
                name: name.to_string(),
            };
            let mut triplets = Vec::with_capacity(rows.len());
            for (line, s, r, o) in rows {
                let subject = vocab.entity_id(s).ok_or_else(|| unknown(line, "entity", s))?;
                let relation = vocab
                    .base_relation_id(r)
                    .ok_or_else(|| unknown(line, "relation", r))?;
                let object = vocab.entity_id(o).ok_or_else(|| unknown(line, "entity", o))?;
                triplets.push(Triplet::new(subject, relation, object));
            }
            Ok((triplets, vocab.clone()))
        }
        None => {
            let mut entities: Vec<String> = Vec::new();
            let mut relations: Vec<String> = Vec::new();
            let mut entity_ids: HashMap<&str, usize> = HashMap::new();
            let mut relation_ids: HashMap<&str, usize> = HashMap::new();
            let mut triplets = Vec::with_capacity(rows.len());
            for (_, s, r, o) in rows {
                let subject = intern(s, &mut entity_ids, &mut entities);
                let relation = intern(r, &mut relation_ids, &mut relations);
                let object = intern(o, &mut entity_ids, &mut entities);
                triplets.push(Triplet::new(subject, relation, object));
            }
            Ok((triplets, Vocab::new(entities, relations)?))
        }
    }
}

/// Augmented edge structure grouped by target entity.
///
/// `incoming[v]` holds `(u, i)` pairs for every augmented edge `u -i-> v`.
/// A flattened copy of the edges (ordered by target, then by position in the
/// incoming list) backs the vectorised layer computations.
#[derive(Debug, Clone)]
pub struct MultiRelGraph {
    incoming: Vec<Vec<(EntityId, RelationId)>>,
    num_base_relations: usize,
    edge_count: usize,
    edge_target: Vec<EntityId>,
    edge_source: Vec<EntityId>,
    edge_relation: Vec<RelationId>,
    offsets: Vec<usize>,
}

impl MultiRelGraph {
    /// Builds the graph from training triplets: forward edges, then inverse
    /// edges, then one self-loop per entity.
    pub fn build(triplets: &[Triplet], vocab: &Vocab) -> Self {
        let n = vocab.num_entities();
        let num_base = vocab.num_base_relations();
        let mut incoming: Vec<Vec<(EntityId, RelationId)>> = vec![Vec::new(); n];
        for t in triplets {
            incoming[t.object].push((t.subject, t.relation));
        }
        for t in triplets {
            incoming[t.subject].push((t.object, t.relation + num_base));
        }
        for (v, list) in incoming.iter_mut().enumerate() {
            list.push((v, 2 * num_base));
        }
        Self::from_incoming_unchecked(incoming, num_base)
    }

    /// Wraps pre-grouped incoming lists. Every list must contain the entity's
    /// self-loop and all ids must be in range.
    pub fn from_incoming(
        incoming: Vec<Vec<(EntityId, RelationId)>>,
        num_base_relations: usize,
    ) -> Result<Self> {
        let n = incoming.len();
        let self_loop = 2 * num_base_relations;
        for (v, list) in incoming.iter().enumerate() {
            if list.iter().filter(|&&(u, i)| u == v && i == self_loop).count() != 1 {
                return Err(RgatError::Invalid(format!(
                    "entity {v} must have exactly one self-loop"
                )));
            }
            if let Some(&(u, i)) = list.iter().find(|&&(u, i)| u >= n || i > self_loop) {
                return Err(RgatError::Invalid(format!(
                    "edge ({u}, {i}) -> {v} out of bounds"
                )));
            }
        }
        Ok(Self::from_incoming_unchecked(incoming, num_base_relations))
    }

    fn from_incoming_unchecked(
        incoming: Vec<Vec<(EntityId, RelationId)>>,
        num_base_relations: usize,
    ) -> Self {
        let edge_count = incoming.iter().map(Vec::len).sum();
        let mut edge_target = Vec::with_capacity(edge_count);
        let mut edge_source = Vec::with_capacity(edge_count);
        let mut edge_relation = Vec::with_capacity(edge_count);
        let mut offsets = Vec::with_capacity(incoming.len() + 1);
        offsets.push(0);
        for (v, list) in incoming.iter().enumerate() {
            for &(u, i) in list {
                edge_target.push(v);
                edge_source.push(u);
                edge_relation.push(i);
            }
            offsets.push(edge_target.len());
        }
        MultiRelGraph {
            incoming,
            num_base_relations,
            edge_count,
            edge_target,
            edge_source,
            edge_relation,
            offsets,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.incoming.len()
    }

    pub fn num_base_relations(&self) -> usize {
        self.num_base_relations
    }

    pub fn num_relations(&self) -> usize {
        2 * self.num_base_relations + 1
    }

    pub fn self_loop(&self) -> RelationId {
        2 * self.num_base_relations
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Incoming `(neighbor, relation)` pairs of `v`. Never empty.
    pub fn neighbors(&self, v: EntityId) -> &[(EntityId, RelationId)] {
        &self.incoming[v]
    }

    /// Target entity of each flattened edge; also the softmax segment id.
    pub fn edge_targets(&self) -> &[EntityId] {
        &self.edge_target
    }

    pub fn edge_sources(&self) -> &[EntityId] {
        &self.edge_source
    }

    pub fn edge_relations(&self) -> &[RelationId] {
        &self.edge_relation
    }

    /// Range of flattened edge indices belonging to `v`.
    pub fn edge_range(&self, v: EntityId) -> std::ops::Range<usize> {
        self.offsets[v]..self.offsets[v + 1]
    }

    /// Original triplets recovered from the forward edges.
    pub fn forward_triplets(&self) -> Vec<Triplet> {
        let mut out = Vec::new();
        for (v, list) in self.incoming.iter().enumerate() {
            for &(u, i) in list {
                if i < self.num_base_relations {
                    out.push(Triplet::new(u, i, v));
                }
            }
        }
        out
    }
}
