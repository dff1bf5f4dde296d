//! Multi-channel relational graph attention layers and the stacked encoder.
//!
//! Each layer projects entities and relations into `K` independent channel
//! subspaces. Within channel `k`, edge `u -i-> v` gets the logit
//! `leaky_relu(w_f . [e_v || r_i || e_u])`, logits are normalised by a softmax
//! over the full incoming set of `v`, and `v` aggregates `alpha * (e_u * r_i)`
//! (elementwise product) followed by `sigma1`. Channel outputs are concatenated.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var, DEFAULT_LEAKY_SLOPE};
use crate::error::{Result, RgatError};
use crate::graph::MultiRelGraph;
use crate::util::derive_seed;

/// Nonlinearity applied after neighbourhood aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Elu => tape.elu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// How relation features are passed from one layer to the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationMode {
    /// `r^(l)` is the concatenation of the per-channel relation projections.
    Concat,
    /// Every layer sees the base relation embeddings.
    Identity,
}

/// Whether dropout is active. Training mode carries the seed that all
/// dropout masks of one forward pass are derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

impl Mode {
    pub(crate) fn dropout_seed(self, salts: &[u64]) -> Option<u64> {
        match self {
            Mode::Eval => None,
            Mode::Train { seed } => Some(derive_seed(seed, salts)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerConfig {
    pub channels: usize,
    pub in_entity_dim: usize,
    pub in_relation_dim: usize,
    pub out_dim: usize,
    pub attention_slope: f64,
    pub activation: Activation,
    pub attention_dropout: f64,
    pub feature_dropout: f64,
}

impl LayerConfig {
    pub fn new(channels: usize, in_entity_dim: usize, in_relation_dim: usize, out_dim: usize) -> Self {
        LayerConfig {
            channels,
            in_entity_dim,
            in_relation_dim,
            out_dim,
            attention_slope: DEFAULT_LEAKY_SLOPE,
            activation: Activation::Elu,
            attention_dropout: 0.1,
            feature_dropout: 0.2,
        }
    }

    pub fn without_dropout(mut self) -> Self {
        self.attention_dropout = 0.0;
        self.feature_dropout = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(RgatError::Config("channel count must be at least 1".into()));
        }
        if self.in_entity_dim == 0 || self.in_relation_dim == 0 || self.out_dim == 0 {
            return Err(RgatError::Config("layer dimensions must be at least 1".into()));
        }
        if !self.out_dim.is_multiple_of(self.channels) {
            return Err(RgatError::Config(format!(
                "{} channels do not divide output dim {}",
                self.channels, self.out_dim
            )));
        }
        for (name, rate) in [
            ("attention_dropout", self.attention_dropout),
            ("feature_dropout", self.feature_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(RgatError::Config(format!("{name} must be in [0, 1), got {rate}")));
            }
        }
        Ok(())
    }

    /// Width of one channel, `out_dim / K`.
    pub fn channel_width(&self) -> usize {
        self.out_dim / self.channels
    }

    /// `D_out * D_in_e + D_out * D_in_r + 3 * D_out`; independent of `K`.
    pub fn param_count(&self) -> usize {
        let d = self.channel_width();
        self.channels * (d * self.in_entity_dim + d * self.in_relation_dim + 3 * d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelParams {
    /// `[D_out/K x D_in_e]`
    pub entity_proj: ParamId,
    /// `[D_out/K x D_in_r]`
    pub relation_proj: ParamId,
    /// `[1 x 3 D_out/K]`
    pub attention: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub channels: Vec<ChannelParams>,
}

impl LayerParams {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &LayerConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.channel_width();
        let channels = (0..cfg.channels)
            .map(|k| ChannelParams {
                entity_proj: store.add_glorot(format!("{prefix}.channel{k}.w_e"), d, cfg.in_entity_dim, rng),
                relation_proj: store.add_glorot(format!("{prefix}.channel{k}.w_r"), d, cfg.in_relation_dim, rng),
                attention: store.add_glorot(format!("{prefix}.channel{k}.w_f"), 1, 3 * d, rng),
            })
            .collect();
        LayerParams { channels }
    }

    /// Scalars actually allocated for this layer.
    pub fn allocated_count(&self, store: &ParamStore) -> usize {
        self.channels
            .iter()
            .flat_map(|c| [c.entity_proj, c.relation_proj, c.attention])
            .map(|id| store.value(id).len())
            .sum()
    }
}

/// `e^k = e W_e^T`, `r^k = r W_r^T`.
pub fn channel_project(tape: &mut Tape, e: Var, r: Var, w_e: Var, w_r: Var) -> Result<(Var, Var)> {
    Ok((tape.matmul_t(e, w_e)?, tape.matmul_t(r, w_r)?))
}

/// One attention logit per flattened edge, `[E x 1]`.
///
/// The concatenated product `w_f . [e_v || r_i || e_u]` is evaluated as
/// `w_f[0..d] . e_v + w_f[d..2d] . r_i + w_f[2d..3d] . e_u`, scoring each node
/// once and gathering per edge.
pub fn edge_logits(
    tape: &mut Tape,
    graph: &MultiRelGraph,
    e_k: Var,
    r_k: Var,
    w_f: Var,
    slope: f64,
) -> Result<Var> {
    let d = tape.value(e_k).cols();
    if tape.value(w_f).cols() != 3 * d || tape.value(r_k).cols() != d {
        return Err(RgatError::shape(
            "edge_logits",
            format!(
                "w_f {:?}, e_k {:?}, r_k {:?}",
                tape.value(w_f).shape(),
                tape.value(e_k).shape(),
                tape.value(r_k).shape()
            ),
        ));
    }
    let a_target = tape.slice_cols(w_f, 0, d)?;
    let a_relation = tape.slice_cols(w_f, d, d)?;
    let a_source = tape.slice_cols(w_f, 2 * d, d)?;

    let s_target = tape.matmul_t(e_k, a_target)?;
    let s_relation = tape.matmul_t(r_k, a_relation)?;
    let s_source = tape.matmul_t(e_k, a_source)?;

    let per_target = tape.gather_rows(s_target, graph.edge_targets())?;
    let per_relation = tape.gather_rows(s_relation, graph.edge_relations())?;
    let per_source = tape.gather_rows(s_source, graph.edge_sources())?;
    let sum = tape.add(per_target, per_relation)?;
    let sum = tape.add(sum, per_source)?;
    Ok(tape.leaky_relu(sum, slope))
}

/// Softmax of edge logits over each target's incoming set.
pub fn normalize_attention(tape: &mut Tape, logits: Var, graph: &MultiRelGraph) -> Result<Var> {
    tape.segment_softmax(logits, graph.edge_targets())
}

/// `sigma1( sum_{(u,i) in incoming[v]} alpha_viu (e_u^k * r_i^k) )` for every `v`.
pub fn aggregate_channel(
    tape: &mut Tape,
    graph: &MultiRelGraph,
    alpha: Var,
    e_k: Var,
    r_k: Var,
    activation: Activation,
) -> Result<Var> {
    let sources = tape.gather_rows(e_k, graph.edge_sources())?;
    let relations = tape.gather_rows(r_k, graph.edge_relations())?;
    let messages = tape.mul(sources, relations)?;
    let weighted = tape.mul(messages, alpha)?;
    let summed = tape.scatter_add_rows(weighted, graph.edge_targets(), graph.num_entities())?;
    Ok(activation.apply(tape, summed))
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub entities: Var,
    /// Concatenated per-channel relation projections.
    pub relations: Var,
    /// Normalised attention per channel, `[E x 1]` each, before dropout.
    pub attention: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
pub fn layer_forward(
    tape: &mut Tape,
    store: &ParamStore,
    graph: &MultiRelGraph,
    e: Var,
    r: Var,
    params: &LayerParams,
    cfg: &LayerConfig,
    mode: Mode,
    layer_index: usize,
) -> Result<LayerOutput> {
    cfg.validate()?;
    if params.channels.len() != cfg.channels {
        return Err(RgatError::Config(format!(
            "layer {layer_index} has {} channel parameter sets for K = {}",
            params.channels.len(),
            cfg.channels
        )));
    }
    let (ev, rv) = (tape.value(e), tape.value(r));
    if ev.cols() != cfg.in_entity_dim || rv.cols() != cfg.in_relation_dim {
        return Err(RgatError::shape(
            "layer_forward",
            format!(
                "layer {layer_index} expects entity dim {} and relation dim {}, got {:?} and {:?}",
                cfg.in_entity_dim,
                cfg.in_relation_dim,
                ev.shape(),
                rv.shape()
            ),
        ));
    }

    let layer = layer_index as u64;
    let e_in = match mode.dropout_seed(&[layer, 0]) {
        Some(seed) => tape.dropout(e, cfg.feature_dropout, seed)?,
        None => e,
    };

    let mut entity_parts = Vec::with_capacity(cfg.channels);
    let mut relation_parts = Vec::with_capacity(cfg.channels);
    let mut attention = Vec::with_capacity(cfg.channels);
    for (k, ch) in params.channels.iter().enumerate() {
        let w_e = tape.param(store, ch.entity_proj);
        let w_r = tape.param(store, ch.relation_proj);
        let w_f = tape.param(store, ch.attention);
        let (e_k, r_k) = channel_project(tape, e_in, r, w_e, w_r)?;
        let logits = edge_logits(tape, graph, e_k, r_k, w_f, cfg.attention_slope)?;
        let alpha = normalize_attention(tape, logits, graph)?;
        attention.push(alpha);
        let alpha_used = match mode.dropout_seed(&[layer, 1, k as u64]) {
            Some(seed) => tape.dropout(alpha, cfg.attention_dropout, seed)?,
            None => alpha,
        };
        entity_parts.push(aggregate_channel(tape, graph, alpha_used, e_k, r_k, cfg.activation)?);
        relation_parts.push(r_k);
    }
    Ok(LayerOutput {
        entities: tape.concat(&entity_parts)?,
        relations: tape.concat(&relation_parts)?,
        attention,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub entity_dim: usize,
    pub relation_dim: usize,
    pub layers: Vec<LayerConfig>,
    pub relation_mode: RelationMode,
}

impl ModelConfig {
    /// `num_layers` layers of identical width and channel count.
    pub fn uniform(num_layers: usize, channels: usize, entity_dim: usize, relation_dim: usize, hidden_dim: usize) -> Self {
        Self::with_dims(channels, entity_dim, relation_dim, &vec![hidden_dim; num_layers], RelationMode::Concat)
    }

    /// One layer per entry of `out_dims`, with input dims chained.
    pub fn with_dims(
        channels: usize,
        entity_dim: usize,
        relation_dim: usize,
        out_dims: &[usize],
        relation_mode: RelationMode,
    ) -> Self {
        let mut layers = Vec::with_capacity(out_dims.len());
        let (mut in_e, mut in_r) = (entity_dim, relation_dim);
        for &out in out_dims {
            layers.push(LayerConfig::new(channels, in_e, in_r, out));
            in_e = out;
            if relation_mode == RelationMode::Concat {
                in_r = out;
            }
        }
        ModelConfig {
            entity_dim,
            relation_dim,
            layers,
            relation_mode,
        }
    }

    pub fn map_layers(mut self, f: impl Fn(LayerConfig) -> LayerConfig) -> Self {
        self.layers = self.layers.into_iter().map(f).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(RgatError::Config("at least one layer is required".into()));
        }
        if self.entity_dim == 0 || self.relation_dim == 0 {
            return Err(RgatError::Config("embedding dims must be at least 1".into()));
        }
        let (mut in_e, mut in_r) = (self.entity_dim, self.relation_dim);
        for (l, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if layer.in_entity_dim != in_e || layer.in_relation_dim != in_r {
                return Err(RgatError::Config(format!(
                    "layer {l} expects inputs ({}, {}) but receives ({in_e}, {in_r})",
                    layer.in_entity_dim, layer.in_relation_dim
                )));
            }
            in_e = layer.out_dim;
            if self.relation_mode == RelationMode::Concat {
                in_r = layer.out_dim;
            }
        }
        Ok(())
    }

    pub fn output_entity_dim(&self) -> usize {
        self.layers.last().map_or(self.entity_dim, |l| l.out_dim)
    }

    pub fn output_relation_dim(&self) -> usize {
        match self.relation_mode {
            RelationMode::Concat => self.layers.last().map_or(self.relation_dim, |l| l.out_dim),
            RelationMode::Identity => self.relation_dim,
        }
    }

    /// Channel count of the final layer.
    pub fn output_channels(&self) -> usize {
        self.layers.last().map_or(1, |l| l.channels)
    }
}

/// Base embeddings plus stacked layer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: ModelConfig,
    pub entity_embedding: ParamId,
    pub relation_embedding: ParamId,
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub entities: Var,
    pub relations: Var,
    /// `attention[l][k]`: normalised edge attention of layer `l`, channel `k`.
    pub attention: Vec<Vec<Var>>,
}

impl Encoder {
    pub fn new(
        config: ModelConfig,
        num_entities: usize,
        num_relations: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let entity_embedding = store.add_glorot("entity_embedding", num_entities, config.entity_dim, rng);
        let relation_embedding = store.add_glorot("relation_embedding", num_relations, config.relation_dim, rng);
        let layers = config
            .layers
            .iter()
            .enumerate()
            .map(|(l, cfg)| LayerParams::init(store, &format!("layer{l}"), cfg, rng))
            .collect();
        Ok(Encoder {
            config,
            entity_embedding,
            relation_embedding,
            layers,
        })
    }

    /// Runs every layer over the full graph.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &MultiRelGraph,
        mode: Mode,
    ) -> Result<EncoderOutput> {
        let e = tape.param(store, self.entity_embedding);
        let r = tape.param(store, self.relation_embedding);
        model_forward(tape, store, graph, e, r, &self.layers, &self.config, mode)
    }
}

/// Chains [`layer_forward`] over all layers starting from base embeddings `e`, `r`.
#[allow(clippy::too_many_arguments)]
pub fn model_forward(
    tape: &mut Tape,
    store: &ParamStore,
    graph: &MultiRelGraph,
    e: Var,
    r: Var,
    layers: &[LayerParams],
    config: &ModelConfig,
    mode: Mode,
) -> Result<EncoderOutput> {
    config.validate()?;
    if layers.len() != config.layers.len() {
        return Err(RgatError::Config(format!(
            "{} parameter layers for {} configured layers",
            layers.len(),
            config.layers.len()
        )));
    }
    let (mut e_cur, mut r_cur) = (e, r);
    let mut attention = Vec::with_capacity(layers.len());
    for (l, (params, cfg)) in layers.iter().zip(&config.layers).enumerate() {
        let out = layer_forward(tape, store, graph, e_cur, r_cur, params, cfg, mode, l)?;
        e_cur = out.entities;
        if config.relation_mode == RelationMode::Concat {
            r_cur = out.relations;
        }
        attention.push(out.attention);
    }
    Ok(EncoderOutput {
        entities: e_cur,
        relations: r_cur,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Array;
    use crate::graph::{Triplet, Vocab};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_graph() -> MultiRelGraph {
        let vocab = Vocab::new((0..4).map(|i| format!("e{i}")).collect(), vec!["r0".into(), "r1".into()]).unwrap();
        MultiRelGraph::build(
            &[Triplet::new(0, 0, 1), Triplet::new(2, 1, 1), Triplet::new(1, 0, 3)],
            &vocab,
        )
    }

    #[test]
    fn param_count_is_independent_of_channels() {
        let counts: Vec<usize> = [1, 2, 4, 8]
            .iter()
            .map(|&k| LayerConfig::new(k, 200, 200, 200).param_count())
            .collect();
        assert!(counts.iter().all(|&c| c == 200 * 200 + 200 * 200 + 3 * 200));
    }

    #[test]
    fn channels_must_divide_width() {
        assert!(LayerConfig::new(3, 8, 8, 8).validate().is_err());
        assert!(LayerConfig::new(0, 8, 8, 8).validate().is_err());
        assert_eq!(LayerConfig::new(8, 200, 200, 200).channel_width(), 25);
    }

    #[test]
    fn zero_projection_gives_zero_channel() {
        let mut tape = Tape::new();
        let e = tape.constant(Array::full(&[3, 4], 0.7));
        let r = tape.constant(Array::full(&[5, 4], -0.3));
        let w_e = tape.constant(Array::zeros(&[2, 4]));
        let w_r = tape.constant(Array::full(&[2, 4], 1.0));
        let (ek, rk) = channel_project(&mut tape, e, r, w_e, w_r).unwrap();
        assert!(tape.value(ek).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(rk).shape(), &[5, 2]);
    }

    #[test]
    fn zero_attention_weights_give_zero_logits() {
        let g = toy_graph();
        let mut tape = Tape::new();
        let ek = tape.constant(Array::full(&[4, 2], 0.4));
        let rk = tape.constant(Array::full(&[5, 2], 0.1));
        let wf = tape.constant(Array::zeros(&[1, 6]));
        let logits = edge_logits(&mut tape, &g, ek, rk, wf, 0.2).unwrap();
        assert_eq!(tape.value(logits).len(), g.edge_count());
        assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_edge_attention_is_one_and_ties_split() {
        let g = toy_graph();
        let mut tape = Tape::new();
        let logits = tape.constant(Array::zeros(&[g.edge_count(), 1]));
        let alpha = normalize_attention(&mut tape, logits, &g).unwrap();
        let a = tape.value(alpha).data();
        // entity 3: inverse of nothing, forward from 1, plus self-loop -> 2 edges
        for v in 0..4 {
            let range = g.edge_range(v);
            let n = range.len() as f64;
            for e in range {
                assert!((a[e] - 1.0 / n).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ones_relation_and_single_edge_reduces_to_activation() {
        // entity 0 has only its self-loop
        let vocab = Vocab::new(vec!["a".into()], vec![]).unwrap();
        let g = MultiRelGraph::build(&[], &vocab);
        let mut tape = Tape::new();
        let ek = tape.constant(Array::matrix(1, 3, vec![-1.0, 0.5, 2.0]).unwrap());
        let rk = tape.constant(Array::full(&[1, 3], 1.0));
        let alpha = tape.constant(Array::full(&[1, 1], 1.0));
        let out = aggregate_channel(&mut tape, &g, alpha, ek, rk, Activation::Elu).unwrap();
        let expected = [(-1.0f64).exp_m1(), 0.5, 2.0];
        for (a, b) in tape.value(out).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_output_width_is_out_dim() {
        let g = toy_graph();
        for k in [1, 2, 4] {
            let cfg = LayerConfig::new(k, 6, 5, 8).without_dropout();
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let params = LayerParams::init(&mut store, "l", &cfg, &mut rng);
            assert_eq!(params.allocated_count(&store), cfg.param_count());
            let mut tape = Tape::new();
            let e = tape.constant(Array::full(&[4, 6], 0.1));
            let r = tape.constant(Array::full(&[5, 5], 0.2));
            let out = layer_forward(&mut tape, &store, &g, e, r, &params, &cfg, Mode::Eval, 0).unwrap();
            assert_eq!(tape.value(out.entities).shape(), &[4, 8]);
            assert_eq!(tape.value(out.relations).shape(), &[5, 8]);
            assert_eq!(out.attention.len(), k);
        }
    }

    #[test]
    fn dims_must_chain() {
        let mut cfg = ModelConfig::uniform(2, 2, 4, 4, 8);
        assert!(cfg.validate().is_ok());
        cfg.layers[1].in_entity_dim = 5;
        assert!(cfg.validate().is_err());
        let id = ModelConfig::with_dims(2, 4, 6, &[8, 8], RelationMode::Identity);
        assert!(id.validate().is_ok());
        assert_eq!(id.output_relation_dim(), 6);
    }
}
