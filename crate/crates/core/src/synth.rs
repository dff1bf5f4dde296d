//! Synthetic knowledge graphs with planted latent aspects.
//!
//! Every entity carries one latent group per aspect. A relation of aspect `a`
//! links `s` to `o` when both share their aspect-`a` group, or, with
//! `permute` set, when `o`'s group is `pi_r` of `s`'s group for a fixed
//! random permutation per relation. Each compatible `(s, r, o)` is kept with
//! probability `density`, so relations of one aspect depend only on that
//! aspect's groups.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, RgatError};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub aspects: usize,
    pub relations_per_aspect: usize,
    pub entities: usize,
    pub groups: usize,
    pub density: f64,
    pub permute: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            aspects: 4,
            relations_per_aspect: 3,
            entities: 200,
            groups: 5,
            density: 0.05,
            permute: false,
            seed: 0,
        }
    }
}

/// Named triplet.
pub type NamedTriplet = (String, String, String);

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<NamedTriplet>,
    pub valid: Vec<NamedTriplet>,
    pub test: Vec<NamedTriplet>,
    /// Relation name and its planted aspect.
    pub relation_aspects: Vec<(String, usize)>,
    /// `groups[e][a]`: latent group of entity `e` under aspect `a`.
    pub groups: Vec<Vec<usize>>,
}

pub fn entity_name(i: usize) -> String {
    format!("e{i:04}")
}

fn check(spec: &SynthSpec) -> Result<()> {
    if spec.aspects == 0 || spec.relations_per_aspect == 0 {
        return Err(RgatError::Invalid("need at least one aspect and relation".into()));
    }
    if spec.groups == 0 || spec.groups > spec.entities {
        return Err(RgatError::Invalid(format!(
            "groups must be in 1..={}, got {}",
            spec.entities, spec.groups
        )));
    }
    if !(spec.density > 0.0 && spec.density <= 1.0) {
        return Err(RgatError::Invalid(format!("density must be in (0, 1], got {}", spec.density)));
    }
    Ok(())
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthDataset> {
    check(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.entities;
    let g = spec.groups;
    let groups: Vec<Vec<usize>> = (0..n)
        .map(|_| (0..spec.aspects).map(|_| rng.random_range(0..g)).collect())
        .collect();

    let mut members = vec![vec![Vec::new(); g]; spec.aspects];
    for (e, gs) in groups.iter().enumerate() {
        for (a, &z) in gs.iter().enumerate() {
            members[a][z].push(e);
        }
    }

    let mut relation_aspects = Vec::new();
    let mut triplets = Vec::new();
    for a in 0..spec.aspects {
        for j in 0..spec.relations_per_aspect {
            let name = format!("a{a}_r{j}");
            let mut perm: Vec<usize> = (0..g).collect();
            if spec.permute {
                perm.shuffle(&mut rng);
            }
            for s in 0..n {
                for &o in &members[a][perm[groups[s][a]]] {
                    if o != s && rng.random_bool(spec.density) {
                        triplets.push((s, relation_aspects.len(), o));
                    }
                }
            }
            relation_aspects.push((name, a));
        }
    }
    if triplets.len() < 10 {
        return Err(RgatError::Invalid(format!(
            "only {} triplets generated; raise density or entities",
            triplets.len()
        )));
    }

    triplets.shuffle(&mut rng);
    let cut = triplets.len() * 8 / 10;
    let mut train: Vec<_> = triplets[..cut].to_vec();
    let mut seen_e: HashSet<usize> = train.iter().flat_map(|t| [t.0, t.2]).collect();
    let mut seen_r: HashSet<usize> = train.iter().map(|t| t.1).collect();
    let mut held = Vec::new();
    for &t in &triplets[cut..] {
        if seen_e.contains(&t.0) && seen_e.contains(&t.2) && seen_r.contains(&t.1) {
            held.push(t);
        } else {
            seen_e.extend([t.0, t.2]);
            seen_r.insert(t.1);
            train.push(t);
        }
    }
    let half = held.len() / 2;
    let name = |t: &(usize, usize, usize)| (entity_name(t.0), relation_aspects[t.1].0.clone(), entity_name(t.2));
    Ok(SynthDataset {
        train: train.iter().map(name).collect(),
        valid: held[..half].iter().map(name).collect(),
        test: held[half..].iter().map(name).collect(),
        relation_aspects,
        groups,
    })
}

fn render(triplets: &[NamedTriplet]) -> String {
    let mut s = String::new();
    for (a, b, c) in triplets {
        let _ = writeln!(s, "{a}\t{b}\t{c}");
    }
    s
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| RgatError::io(path, e))
}

impl SynthDataset {
    /// Writes `train.txt`, `valid.txt`, `test.txt` and `aspects.tsv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| RgatError::io(dir, e))?;
        write_file(&dir.join("train.txt"), &render(&self.train))?;
        write_file(&dir.join("valid.txt"), &render(&self.valid))?;
        write_file(&dir.join("test.txt"), &render(&self.test))?;
        let mut s = String::new();
        for (r, a) in &self.relation_aspects {
            let _ = writeln!(s, "{r}\t{a}");
        }
        write_file(&dir.join("aspects.tsv"), &s)
    }
}

/// Reads "relation TAB aspect" lines.
pub fn load_aspects(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| RgatError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
        let aspect = match fields.as_slice() {
            [_, a] => a.parse().ok(),
            _ => None,
        };
        match aspect {
            Some(a) => out.push((fields[0].to_string(), a)),
            None => {
                return Err(RgatError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    found: fields.len(),
                })
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSpec {
    pub entities: usize,
    pub classes: usize,
    pub relations: usize,
    pub density: f64,
    /// Fraction of entities in the train split; the rest is split evenly
    /// between valid and test.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for LabeledSpec {
    fn default() -> Self {
        LabeledSpec {
            entities: 100,
            classes: 4,
            relations: 3,
            density: 0.05,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub triplets: Vec<NamedTriplet>,
    pub labels: Vec<(String, String)>,
    pub splits: Vec<(String, &'static str)>,
}

/// Graph where relation `j` links class `c` to class `pi_j(c)`; every entity
/// is labelled and touches at least one edge.
pub fn generate_labeled(spec: &LabeledSpec) -> Result<LabeledDataset> {
    if spec.classes == 0 || spec.relations == 0 || spec.entities < 2 * spec.classes {
        return Err(RgatError::Invalid("need classes, relations and at least 2 entities per class".into()));
    }
    if !(spec.density > 0.0 && spec.density <= 1.0) || !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(RgatError::Invalid("density must be in (0, 1] and train_fraction in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.entities;
    let class: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    let mut by_class = vec![Vec::new(); spec.classes];
    for (e, &c) in class.iter().enumerate() {
        by_class[c].push(e);
    }
    let perms: Vec<Vec<usize>> = (0..spec.relations)
        .map(|_| {
            let mut p: Vec<usize> = (0..spec.classes).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let mut edges = Vec::new();
    let mut touched = vec![false; n];
    for (j, perm) in perms.iter().enumerate() {
        for s in 0..n {
            for &o in &by_class[perm[class[s]]] {
                if o != s && rng.random_bool(spec.density) {
                    edges.push((s, j, o));
                    touched[s] = true;
                    touched[o] = true;
                }
            }
        }
    }
    for s in 0..n {
        if !touched[s] {
            let j = rng.random_range(0..spec.relations);
            let pool: Vec<usize> = by_class[perms[j][class[s]]].iter().copied().filter(|&o| o != s).collect();
            let o = pool[rng.random_range(0..pool.len())];
            edges.push((s, j, o));
            touched[s] = true;
            touched[o] = true;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (n as f64 * spec.train_fraction).round() as usize;
    let n_valid = (n - n_train) / 2;
    let mut split = vec!["test"; n];
    for (i, &e) in order.iter().enumerate() {
        split[e] = if i < n_train {
            "train"
        } else if i < n_train + n_valid {
            "valid"
        } else {
            "test"
        };
    }
    Ok(LabeledDataset {
        triplets: edges
            .iter()
            .map(|&(s, j, o)| (entity_name(s), format!("r{j}"), entity_name(o)))
            .collect(),
        labels: (0..n).map(|e| (entity_name(e), format!("class{}", class[e]))).collect(),
        splits: (0..n).map(|e| (entity_name(e), split[e])).collect(),
    })
}

impl LabeledDataset {
    /// Writes `train.txt`, `labels.tsv` and `splits.tsv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| RgatError::io(dir, e))?;
        write_file(&dir.join("train.txt"), &render(&self.triplets))?;
        let mut labels = String::new();
        for (e, c) in &self.labels {
            let _ = writeln!(labels, "{e}\t{c}");
        }
        write_file(&dir.join("labels.tsv"), &labels)?;
        let mut splits = String::new();
        for (e, s) in &self.splits {
            let _ = writeln!(splits, "{e}\t{s}");
        }
        write_file(&dir.join("splits.tsv"), &splits)
    }
}
