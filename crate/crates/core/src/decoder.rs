//! Query-aware channel attention and 1-N scoring for link prediction.
//!
//! For a query `(s, q)` the decoder weighs the `K` channel slices of `e_s`
//! by `beta = softmax_k((W1 e_s^k)^T (W2 r_q) / sqrt(D_q))`, builds
//! `Q = ||_k beta_k W3 [e_s^k || r_q]`, and scores every entity `o` with
//! `sigma2(W Q)^T e_o`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Array, ParamId, ParamStore, Tape, Var};
use crate::error::{Result, RgatError};
use crate::graph::{EntityId, RelationId, Triplet};
use crate::layer::EncoderOutput;

/// Nonlinearity applied to the projected query embedding before matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreActivation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    /// Query-space width `D_q`; `None` means `D_e / K`.
    pub query_dim: Option<usize>,
    pub heads: usize,
    /// When false, `beta` is replaced by the uniform mean over channels.
    pub qatt_enabled: bool,
    pub activation: ScoreActivation,
    pub label_smoothing: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            query_dim: None,
            heads: 1,
            qatt_enabled: true,
            activation: ScoreActivation::Relu,
            label_smoothing: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadParams {
    /// `[D_q/heads x D_e/K]`
    pub w1: ParamId,
    /// `[D_q/heads x D_r]`
    pub w2: ParamId,
}

/// Parameters and geometry of the query-aware decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct QattDecoder {
    pub config: DecoderConfig,
    pub channels: usize,
    pub entity_dim: usize,
    pub relation_dim: usize,
    pub query_dim: usize,
    /// Empty when query attention is disabled.
    pub heads: Vec<HeadParams>,
    /// `[D_q x (D_e/K + D_r)]`
    pub w3: ParamId,
    /// `[D_e x K D_q]`
    pub w_out: ParamId,
}

/// Scores plus the channel weights used to produce them.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    /// `[B x N_e]`
    pub scores: Var,
    /// `[B x K]`
    pub beta: Var,
}

/// Pluggable link-prediction decoder over encoder outputs.
pub trait Decoder {
    /// One row of scores against all entities per `(subject, relation)` query.
    fn score(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        encoded: &EncoderOutput,
        subjects: &[EntityId],
        relations: &[RelationId],
    ) -> Result<Var>;
}

impl QattDecoder {
    pub fn new(
        config: DecoderConfig,
        channels: usize,
        entity_dim: usize,
        relation_dim: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels == 0 || !entity_dim.is_multiple_of(channels) {
            return Err(RgatError::Config(format!(
                "{channels} channels do not divide entity dim {entity_dim}"
            )));
        }
        let width = entity_dim / channels;
        let query_dim = config.query_dim.unwrap_or(width);
        if query_dim == 0 || config.heads == 0 {
            return Err(RgatError::Config("query dim and heads must be at least 1".into()));
        }
        if !query_dim.is_multiple_of(config.heads) {
            return Err(RgatError::Config(format!(
                "{} heads do not divide query dim {query_dim}",
                config.heads
            )));
        }
        if !(0.0..1.0).contains(&config.label_smoothing) {
            return Err(RgatError::Config(format!(
                "label smoothing must be in [0, 1), got {}",
                config.label_smoothing
            )));
        }
        let head_dim = query_dim / config.heads;
        let heads = if config.qatt_enabled {
            (0..config.heads)
                .map(|h| HeadParams {
                    w1: store.add_glorot(format!("decoder.head{h}.w1"), head_dim, width, rng),
                    w2: store.add_glorot(format!("decoder.head{h}.w2"), head_dim, relation_dim, rng),
                })
                .collect()
        } else {
            Vec::new()
        };
        let w3 = store.add_glorot("decoder.w3", query_dim, width + relation_dim, rng);
        let w_out = store.add_glorot("decoder.w_out", entity_dim, channels * query_dim, rng);
        Ok(QattDecoder {
            config,
            channels,
            entity_dim,
            relation_dim,
            query_dim,
            heads,
            w3,
            w_out,
        })
    }

    pub fn channel_width(&self) -> usize {
        self.entity_dim / self.channels
    }

    /// Channel slices `e_s^k` (`[B x D_e/K]` each) and relation rows `r_q`.
    pub fn query_inputs(
        &self,
        tape: &mut Tape,
        encoded: &EncoderOutput,
        subjects: &[EntityId],
        relations: &[RelationId],
    ) -> Result<(Vec<Var>, Var)> {
        if subjects.len() != relations.len() || subjects.is_empty() {
            return Err(RgatError::Invalid(format!(
                "{} subjects for {} relations",
                subjects.len(),
                relations.len()
            )));
        }
        let es = tape.gather_rows(encoded.entities, subjects)?;
        let rq = tape.gather_rows(encoded.relations, relations)?;
        if tape.value(es).cols() != self.entity_dim || tape.value(rq).cols() != self.relation_dim {
            return Err(RgatError::shape(
                "decoder",
                format!(
                    "expects entity dim {} and relation dim {}, got {:?} and {:?}",
                    self.entity_dim,
                    self.relation_dim,
                    tape.value(es).shape(),
                    tape.value(rq).shape()
                ),
            ));
        }
        let width = self.channel_width();
        let slices = (0..self.channels)
            .map(|k| tape.slice_cols(es, k * width, width))
            .collect::<Result<Vec<_>>>()?;
        Ok((slices, rq))
    }

    /// Channel weights `[B x K]`: head-averaged query attention, or uniform
    /// when query attention is disabled.
    pub fn beta(&self, tape: &mut Tape, store: &ParamStore, slices: &[Var], rq: Var) -> Result<Var> {
        let batch = tape.value(rq).rows();
        if !self.config.qatt_enabled {
            return Ok(tape.constant(Array::full(&[batch, self.channels], 1.0 / self.channels as f64)));
        }
        let mut total: Option<Var> = None;
        for head in &self.heads {
            let w1 = tape.param(store, head.w1);
            let w2 = tape.param(store, head.w2);
            let b = query_channel_attention(tape, slices, rq, w1, w2)?;
            total = Some(match total {
                None => b,
                Some(t) => tape.add(t, b)?,
            });
        }
        let total = total.expect("at least one head");
        Ok(if self.heads.len() > 1 {
            tape.scale(total, 1.0 / self.heads.len() as f64)
        } else {
            total
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        encoded: &EncoderOutput,
        subjects: &[EntityId],
        relations: &[RelationId],
    ) -> Result<DecoderOutput> {
        let (slices, rq) = self.query_inputs(tape, encoded, subjects, relations)?;
        let beta = self.beta(tape, store, &slices, rq)?;
        let w3 = tape.param(store, self.w3);
        let q = query_aware_embedding(tape, &slices, rq, beta, w3)?;
        let w_out = tape.param(store, self.w_out);
        let scores = score_all(tape, q, encoded.entities, w_out, self.config.activation)?;
        Ok(DecoderOutput { scores, beta })
    }
}

impl Decoder for QattDecoder {
    fn score(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        encoded: &EncoderOutput,
        subjects: &[EntityId],
        relations: &[RelationId],
    ) -> Result<Var> {
        Ok(self.forward(tape, store, encoded, subjects, relations)?.scores)
    }
}

/// `softmax_k( (W1 e_s^k)^T (W2 r_q) / sqrt(D_q) )` for each row; returns `[B x K]`.
/// `D_q` is taken from the row count of `w1`.
pub fn query_channel_attention(tape: &mut Tape, slices: &[Var], rq: Var, w1: Var, w2: Var) -> Result<Var> {
    let dq = tape.value(w1).rows() as f64;
    let batch = tape.value(rq).rows();
    let k = slices.len();
    let query = tape.matmul_t(rq, w2)?;
    let mut logits = Vec::with_capacity(k);
    for &slice in slices {
        let key = tape.matmul_t(slice, w1)?;
        let prod = tape.mul(key, query)?;
        let dot = tape.sum_cols(prod);
        logits.push(tape.scale(dot, 1.0 / dq.sqrt()));
    }
    let stacked = tape.concat(&logits)?;
    let flat = tape.reshape(stacked, &[batch * k])?;
    let segments: Vec<usize> = (0..batch * k).map(|i| i / k).collect();
    let beta = tape.segment_softmax(flat, &segments)?;
    tape.reshape(beta, &[batch, k])
}

/// `||_k beta_k W3 [e_s^k || r_q]`, `[B x K D_q]`.
pub fn query_aware_embedding(tape: &mut Tape, slices: &[Var], rq: Var, beta: Var, w3: Var) -> Result<Var> {
    let mut parts = Vec::with_capacity(slices.len());
    for (k, &slice) in slices.iter().enumerate() {
        let joined = tape.concat(&[slice, rq])?;
        let proj = tape.matmul_t(joined, w3)?;
        let weight = tape.slice_cols(beta, k, 1)?;
        parts.push(tape.mul(proj, weight)?);
    }
    tape.concat(&parts)
}

/// `sigma2(Q W^T) E^T`: every query against every entity, `[B x N_e]`.
pub fn score_all(tape: &mut Tape, q: Var, entities: Var, w_out: Var, activation: ScoreActivation) -> Result<Var> {
    let projected = tape.matmul_t(q, w_out)?;
    let hidden = match activation {
        ScoreActivation::Relu => tape.relu(projected),
        ScoreActivation::Identity => projected,
    };
    tape.matmul_t(hidden, entities)
}

/// Mean binary cross-entropy of `sigmoid(scores)` against binary `labels`.
/// With smoothing `eps`, targets become `(1 - eps) t + eps / N_e`.
pub fn bce_loss(tape: &mut Tape, scores: Var, labels: &Array, smoothing: f64) -> Result<Var> {
    let sv = tape.value(scores);
    if sv.shape() != labels.shape() {
        return Err(RgatError::shape(
            "bce_loss",
            format!("scores {:?} vs labels {:?}", sv.shape(), labels.shape()),
        ));
    }
    let n = labels.cols() as f64;
    let targets = labels.map(|t| (1.0 - smoothing) * t + smoothing / n);
    let complement = targets.map(|t| 1.0 - t);
    let t = tape.constant(targets);
    let c = tape.constant(complement);

    let p = tape.sigmoid(scores);
    let log_p = tape.log(p);
    let negated = tape.scale(scores, -1.0);
    let q = tape.sigmoid(negated);
    let log_q = tape.log(q);
    let pos = tape.mul(log_p, t)?;
    let neg = tape.mul(log_q, c)?;
    let total = tape.add(pos, neg)?;
    let mean = tape.mean(total);
    Ok(tape.scale(mean, -1.0))
}

/// A `(subject, relation)` query with every object observed for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub subject: EntityId,
    pub relation: RelationId,
    pub objects: Vec<EntityId>,
}

/// Groups triplets into forward `(s, r)` and reverse `(o, r^-1)` queries,
/// sorted by `(subject, relation)`.
pub fn build_queries(triplets: &[Triplet], num_base_relations: usize) -> Vec<Query> {
    let mut grouped: BTreeMap<(EntityId, RelationId), Vec<EntityId>> = BTreeMap::new();
    for t in triplets {
        grouped.entry((t.subject, t.relation)).or_default().push(t.object);
        grouped
            .entry((t.object, t.relation + num_base_relations))
            .or_default()
            .push(t.subject);
    }
    grouped
        .into_iter()
        .map(|((subject, relation), mut objects)| {
            objects.sort_unstable();
            objects.dedup();
            Query {
                subject,
                relation,
                objects,
            }
        })
        .collect()
}

/// Query pairs with their dense binary label matrix.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    pub subjects: Vec<EntityId>,
    pub relations: Vec<RelationId>,
    /// `[B x N_e]`
    pub labels: Array,
}

impl QueryBatch {
    pub fn new(queries: &[&Query], num_entities: usize) -> Self {
        let mut labels = Array::zeros(&[queries.len(), num_entities]);
        for (row, q) in queries.iter().enumerate() {
            for &o in &q.objects {
                labels.data_mut()[row * num_entities + o] = 1.0;
            }
        }
        QueryBatch {
            subjects: queries.iter().map(|q| q.subject).collect(),
            relations: queries.iter().map(|q| q.relation).collect(),
            labels,
        }
    }
}
