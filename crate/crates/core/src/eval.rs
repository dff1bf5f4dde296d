//! Filtered link-prediction ranking with random tie placement.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Array;
use crate::error::{Result, RgatError};
use crate::graph::{EntityId, RelationId, Triplet};
use crate::util::derive_seed;

/// Known true objects for every `(subject, relation)` query, both directions.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    known: HashMap<(EntityId, RelationId), HashSet<EntityId>>,
}

impl FilterIndex {
    pub fn build(splits: &[&[Triplet]], num_base_relations: usize) -> Self {
        let mut known: HashMap<_, HashSet<_>> = HashMap::new();
        for split in splits {
            for t in split.iter() {
                known.entry((t.subject, t.relation)).or_default().insert(t.object);
                known
                    .entry((t.object, t.relation + num_base_relations))
                    .or_default()
                    .insert(t.subject);
            }
        }
        FilterIndex { known }
    }

    pub fn get(&self, subject: EntityId, relation: RelationId) -> Option<&HashSet<EntityId>> {
        self.known.get(&(subject, relation))
    }

    pub fn contains(&self, subject: EntityId, relation: RelationId, object: EntityId) -> bool {
        self.get(subject, relation).is_some_and(|s| s.contains(&object))
    }

    /// Total number of `(key, object)` memberships over keys with `relation < limit`.
    pub fn size_below(&self, limit: RelationId) -> usize {
        self.known
            .iter()
            .filter(|((_, r), _)| *r < limit)
            .map(|(_, s)| s.len())
            .sum()
    }
}

/// Rank of `gold` among candidates not in `filter`.
///
/// Candidates scoring strictly higher count ahead of gold; gold is placed
/// uniformly at random among the candidates with exactly equal score, the
/// placement drawn from `seed`.
pub fn filtered_rank(
    scores: &[f64],
    gold: EntityId,
    filter: Option<&HashSet<EntityId>>,
    seed: u64,
) -> Result<usize> {
    let gold_score = *scores.get(gold).ok_or_else(|| {
        RgatError::Invalid(format!("gold entity {gold} outside {} scores", scores.len()))
    })?;
    let mut greater = 0usize;
    let mut ties = 0usize;
    for (o, &s) in scores.iter().enumerate() {
        if o == gold || filter.is_some_and(|f| f.contains(&o)) {
            continue;
        }
        if s > gold_score {
            greater += 1;
        } else if s == gold_score {
            ties += 1;
        }
    }
    let offset = if ties == 0 {
        0
    } else {
        ChaCha8Rng::seed_from_u64(seed).random_range(0..=ties)
    };
    Ok(1 + greater + offset)
}

/// Seed for the tie placement of one query.
pub fn query_seed(seed: u64, triplet_index: usize, direction: Direction) -> u64 {
    derive_seed(seed, &[triplet_index as u64, direction as u64])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `(s, r, ?)`
    Object = 0,
    /// `(o, r^-1, ?)`
    Subject = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryRank {
    pub triplet: usize,
    pub direction: Direction,
    pub rank: usize,
}

/// Per-query ranks with MRR and Hits@{1,3,10}.
#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub ranks: Vec<QueryRank>,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl RankReport {
    pub fn from_ranks(ranks: Vec<QueryRank>) -> Result<Self> {
        if ranks.is_empty() {
            return Err(RgatError::EmptySplit("evaluation"));
        }
        let n = ranks.len() as f64;
        let hits = |k: usize| ranks.iter().filter(|q| q.rank <= k).count() as f64 / n;
        let mrr = ranks.iter().map(|q| 1.0 / q.rank as f64).sum::<f64>() / n;
        Ok(RankReport {
            mrr,
            hits1: hits(1),
            hits3: hits(3),
            hits10: hits(10),
            ranks,
        })
    }

    pub fn metrics(&self) -> [(&'static str, f64); 4] {
        [
            ("mrr", self.mrr),
            ("hits@1", self.hits1),
            ("hits@3", self.hits3),
            ("hits@10", self.hits10),
        ]
    }

    /// Aligned text table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10}{:>10}", "metric", "value");
        for (name, value) in self.metrics() {
            let _ = writeln!(out, "{name:<10}{value:>10.4}");
        }
        let _ = writeln!(out, "{:<10}{:>10}", "queries", self.ranks.len());
        out
    }

    /// "metric=value" lines.
    pub fn machine_lines(&self) -> String {
        let mut out = String::new();
        for (name, value) in self.metrics() {
            let _ = writeln!(out, "{name}={value}");
        }
        let _ = writeln!(out, "queries={}", self.ranks.len());
        out
    }
}

/// Ranks both directions of every triplet.
///
/// `score` receives a batch of `(subject, relation)` queries and returns a
/// `[batch x N_e]` score matrix.
pub fn evaluate_with<F>(
    triplets: &[Triplet],
    filter: &FilterIndex,
    num_base_relations: usize,
    seed: u64,
    batch_size: usize,
    mut score: F,
) -> Result<RankReport>
where
    F: FnMut(&[EntityId], &[RelationId]) -> Result<Array>,
{
    if triplets.is_empty() {
        return Err(RgatError::EmptySplit("evaluation"));
    }
    let mut queries = Vec::with_capacity(2 * triplets.len());
    for (i, t) in triplets.iter().enumerate() {
        queries.push((i, Direction::Object, t.subject, t.relation, t.object));
        queries.push((i, Direction::Subject, t.object, t.relation + num_base_relations, t.subject));
    }
    let mut ranks = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(batch_size.max(1)) {
        let subjects: Vec<_> = chunk.iter().map(|q| q.2).collect();
        let relations: Vec<_> = chunk.iter().map(|q| q.3).collect();
        let scores = score(&subjects, &relations)?;
        if scores.rows() != chunk.len() {
            return Err(RgatError::shape(
                "evaluate",
                format!("{} queries scored into {:?}", chunk.len(), scores.shape()),
            ));
        }
        for (row, &(triplet, direction, s, r, gold)) in chunk.iter().enumerate() {
            let rank = filtered_rank(
                scores.row(row),
                gold,
                filter.get(s, r),
                query_seed(seed, triplet, direction),
            )?;
            ranks.push(QueryRank {
                triplet,
                direction,
                rank,
            });
        }
    }
    RankReport::from_ranks(ranks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strictly_best_is_rank_one() {
        assert_eq!(filtered_rank(&[0.1, 0.9, 0.3], 1, None, 0).unwrap(), 1);
    }

    #[test]
    fn one_higher_unfiltered_is_rank_two() {
        let filter: HashSet<_> = [1].into_iter().collect();
        assert_eq!(filtered_rank(&[0.5, 0.9, 0.8, 0.1], 0, Some(&filter), 0).unwrap(), 2);
        assert_eq!(filtered_rank(&[0.5, 0.9, 0.8, 0.1], 0, None, 0).unwrap(), 3);
    }

    #[test]
    fn gold_out_of_range_is_an_error() {
        assert!(filtered_rank(&[0.0], 3, None, 0).is_err());
    }

    #[test]
    fn filter_for_single_triplet() {
        let f = FilterIndex::build(&[&[Triplet::new(0, 0, 1), Triplet::new(0, 0, 1)]], 1);
        assert_eq!(f.get(0, 0).unwrap().iter().copied().collect::<Vec<_>>(), vec![1]);
        assert_eq!(f.get(1, 1).unwrap().iter().copied().collect::<Vec<_>>(), vec![0]);
        assert_eq!(f.size_below(1), 1);
    }

    #[test]
    fn report_metrics() {
        let ranks = [1, 4]
            .iter()
            .enumerate()
            .map(|(i, &rank)| QueryRank { triplet: i, direction: Direction::Object, rank })
            .collect();
        let r = RankReport::from_ranks(ranks).unwrap();
        assert_eq!(r.mrr, 0.625);
        assert_eq!(r.hits1, 0.5);
        assert_eq!(r.hits3, 0.5);
        assert_eq!(r.hits10, 1.0);
        assert!(r.machine_lines().starts_with("mrr=0.625\n"));
        assert!(RankReport::from_ranks(vec![]).is_err());
    }

    #[test]
    fn perfect_single_triplet_split() {
        let t = [Triplet::new(0, 0, 1)];
        let f = FilterIndex::build(&[&t], 1);
        let report = evaluate_with(&t, &f, 1, 0, 8, |subjects, _| {
            Ok(Array::from_fn(subjects.len(), 2, |i, j| if j == 1 - subjects[i] { 1.0 } else { 0.0 }))
        })
        .unwrap();
        assert_eq!(report.ranks.len(), 2);
        assert_eq!(report.mrr, 1.0);
        assert_eq!(report.hits1, 1.0);
        assert!(evaluate_with(&[], &f, 1, 0, 8, |_, _| unreachable!()).is_err());
    }
}
