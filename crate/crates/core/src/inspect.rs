//! Channel-attention and fact-attribution reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classify::argmax;
use crate::error::{Result, RgatError};
use crate::graph::{EntityId, MultiRelGraph, RelationId, Vocab, SELF_LOOP_NAME};
use crate::model::LinkPredictor;

/// Mean channel weights per query relation over an entity sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttentionReport {
    pub relations: Vec<String>,
    /// `rows[i][k]`: mean beta of channel `k` for `relations[i]`.
    pub rows: Vec<Vec<f64>>,
    pub sample_size: usize,
    pub seed: u64,
}

impl ChannelAttentionReport {
    pub fn channels(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Relations x channels matrix with a header row.
    pub fn render(&self) -> String {
        let width = self.relations.iter().map(String::len).max().unwrap_or(8).max(8);
        let mut s = String::new();
        let _ = write!(s, "{:<width$}", "relation");
        for k in 0..self.channels() {
            let _ = write!(s, "{:>9}", format!("ch{k}"));
        }
        s.push('\n');
        for (name, row) in self.relations.iter().zip(&self.rows) {
            let _ = write!(s, "{name:<width$}");
            for v in row {
                let _ = write!(s, "{v:>9.4}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "# sample_size={} seed={}", self.sample_size, self.seed);
        s
    }

    /// Tab-separated `relation TAB beta_0 TAB ...` lines with full precision.
    pub fn machine_lines(&self) -> String {
        let mut s = String::new();
        for (name, row) in self.relations.iter().zip(&self.rows) {
            s.push_str(name);
            for v in row {
                let _ = write!(s, "\t{v}");
            }
            s.push('\n');
        }
        s
    }
}

fn resolve_relation(vocab: &Vocab, name: &str) -> Result<RelationId> {
    vocab.relation_id(name).ok_or_else(|| RgatError::UnknownName {
        kind: "relation",
        name: name.to_string(),
    })
}

fn resolve_entity(vocab: &Vocab, name: &str) -> Result<EntityId> {
    vocab.entity_id(name).ok_or_else(|| RgatError::UnknownName {
        kind: "entity",
        name: name.to_string(),
    })
}

/// Averages beta over `sample_size` entities drawn without replacement.
pub fn channel_attention_summary(
    model: &LinkPredictor,
    graph: &MultiRelGraph,
    vocab: &Vocab,
    relations: &[&str],
    sample_size: usize,
    seed: u64,
) -> Result<ChannelAttentionReport> {
    let ids = relations
        .iter()
        .map(|r| resolve_relation(vocab, r))
        .collect::<Result<Vec<_>>>()?;
    let n = vocab.num_entities();
    let take = sample_size.min(n);
    if take == 0 {
        return Err(RgatError::Invalid("entity sample is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = rand::seq::index::sample(&mut rng, n, take).into_vec();

    let mut subjects = Vec::with_capacity(ids.len() * take);
    let mut rels = Vec::with_capacity(ids.len() * take);
    for &r in &ids {
        subjects.extend_from_slice(&sample);
        rels.extend(std::iter::repeat_n(r, take));
    }
    let beta = model.beta(graph, &subjects, &rels)?;
    let k = beta.cols();
    let rows = (0..ids.len())
        .map(|i| {
            let mut mean = vec![0.0; k];
            for row in i * take..(i + 1) * take {
                for (m, b) in mean.iter_mut().zip(beta.row(row)) {
                    *m += b;
                }
            }
            mean.iter_mut().for_each(|m| *m /= take as f64);
            mean
        })
        .collect();
    Ok(ChannelAttentionReport {
        relations: relations.iter().map(|r| r.to_string()).collect(),
        rows,
        sample_size: take,
        seed,
    })
}

/// A neighbour fact of the subject, oriented as in the source data.
#[derive(Debug, Clone, PartialEq)]
pub struct Fact {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFacts {
    pub channel: usize,
    pub beta: f64,
    pub facts: Vec<Fact>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactAttributionReport {
    pub subject: String,
    pub relation: String,
    /// Sorted by beta, descending.
    pub channels: Vec<ChannelFacts>,
}

impl FactAttributionReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "query: ({}, {}, ?)", self.subject, self.relation);
        for ch in &self.channels {
            let _ = writeln!(s, "Channel {}: {:.3}", ch.channel, ch.beta);
            for f in &ch.facts {
                let _ = writeln!(s, "  ({}, {}, {})\t{:.3}", f.head, f.relation, f.tail, f.alpha);
            }
        }
        s
    }
}

/// Top channels by beta for one query and, per channel, the incoming
/// facts of the subject with the largest final-layer attention.
pub fn top_facts(
    model: &LinkPredictor,
    graph: &MultiRelGraph,
    vocab: &Vocab,
    subject: &str,
    relation: &str,
    top_channels: usize,
    top_facts: usize,
) -> Result<FactAttributionReport> {
    let s = resolve_entity(vocab, subject)?;
    let r = resolve_relation(vocab, relation)?;
    let beta = model.beta(graph, &[s], &[r])?;
    let attention = model.attention(graph)?;
    let last = attention
        .last()
        .ok_or_else(|| RgatError::Invalid("model has no attention layers".into()))?;

    let mut order: Vec<usize> = (0..beta.cols()).collect();
    order.sort_by(|&a, &b| beta.row(0)[b].total_cmp(&beta.row(0)[a]).then(a.cmp(&b)));

    let range = graph.edge_range(s);
    let num_base = vocab.num_base_relations();
    let sources = graph.edge_sources();
    let rels = graph.edge_relations();
    let channels = order
        .into_iter()
        .take(top_channels)
        .map(|k| {
            let alpha = last[k].data();
            let mut edges: Vec<usize> = range.clone().collect();
            edges.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]).then(a.cmp(&b)));
            let facts = edges
                .into_iter()
                .take(top_facts)
                .map(|e| {
                    let (u, rel) = (sources[e], rels[e]);
                    let (head, relation, tail) = if rel < num_base {
                        (u, vocab.relation_name(rel).to_string(), s)
                    } else if rel < 2 * num_base {
                        (s, vocab.relation_name(rel - num_base).to_string(), u)
                    } else {
                        (s, SELF_LOOP_NAME.to_string(), s)
                    };
                    Fact {
                        head: vocab.entity_name(head).to_string(),
                        relation,
                        tail: vocab.entity_name(tail).to_string(),
                        alpha: alpha[e],
                    }
                })
                .collect();
            ChannelFacts {
                channel: k,
                beta: beta.row(0)[k],
                facts,
            }
        })
        .collect();
    Ok(FactAttributionReport {
        subject: subject.to_string(),
        relation: relation.to_string(),
        channels,
    })
}

/// Mean over aspects of the fraction of the aspect's relations whose
/// argmax channel equals the aspect's most common argmax channel.
///
/// Relations missing from the report are ignored. A single channel gives 1.0.
pub fn aspect_alignment_score(report: &ChannelAttentionReport, aspects: &[(String, usize)]) -> f64 {
    if report.channels() == 1 {
        log::warn!("alignment with a single channel is trivially 1.0");
        return 1.0;
    }
    let mut picks: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (name, aspect) in aspects {
        if let Some(i) = report.relations.iter().position(|r| r == name) {
            picks.entry(*aspect).or_default().push(argmax(&report.rows[i]));
        }
    }
    modal_fraction_mean(picks.values(), report.channels())
}

fn modal_fraction_mean<'a>(groups: impl Iterator<Item = &'a Vec<usize>>, channels: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for picks in groups {
        if picks.is_empty() {
            continue;
        }
        let mut hist = vec![0usize; channels.max(1)];
        for &p in picks {
            hist[p] += 1;
        }
        let modal = *hist.iter().max().unwrap_or(&0);
        total += modal as f64 / picks.len() as f64;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Expected alignment score when every relation's argmax channel is uniform
/// over `channels`, estimated from `trials` Monte-Carlo draws.
pub fn alignment_chance_baseline(aspect_sizes: &[usize], channels: usize, trials: usize, seed: u64) -> f64 {
    if channels <= 1 {
        return 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for _ in 0..trials.max(1) {
        let groups: Vec<Vec<usize>> = aspect_sizes
            .iter()
            .map(|&m| (0..m).map(|_| rng.random_range(0..channels)).collect())
            .collect();
        sum += modal_fraction_mean(groups.iter(), channels);
    }
    sum / trials.max(1) as f64
}
