//! Encoder plus task head, owning their parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, Checkpoint, ParamStore, Tape};
use crate::classify::{ClassifierHead, LabelSet, Split};
use crate::decoder::{bce_loss, DecoderConfig, QattDecoder, QueryBatch};
use crate::error::{Result, RgatError};
use crate::graph::{EntityId, MultiRelGraph, RelationId};
use crate::layer::{Encoder, EncoderOutput, ModelConfig, Mode};
use crate::util::derive_seed;

/// r-GAT encoder with the query-aware decoder.
#[derive(Debug, Clone)]
pub struct LinkPredictor {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: QattDecoder,
}

impl LinkPredictor {
    pub fn new(
        model: &ModelConfig,
        decoder: &DecoderConfig,
        num_entities: usize,
        num_relations: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1417]));
        let mut store = ParamStore::new();
        let encoder = Encoder::new(model.clone(), num_entities, num_relations, &mut store, &mut rng)?;
        let decoder = QattDecoder::new(
            decoder.clone(),
            model.output_channels(),
            model.output_entity_dim(),
            model.output_relation_dim(),
            &mut store,
            &mut rng,
        )?;
        Ok(LinkPredictor { store, encoder, decoder })
    }

    /// Scalar parameters of the attention layers only.
    pub fn layer_param_count(&self) -> usize {
        self.encoder.layers.iter().map(|l| l.allocated_count(&self.store)).sum()
    }

    /// Forward and backward on one batch; gradients are left in the store.
    pub fn loss_and_grad(&mut self, graph: &MultiRelGraph, batch: &QueryBatch, mode: Mode) -> Result<f64> {
        let mut tape = Tape::new();
        let enc = self.encoder.forward(&mut tape, &self.store, graph, mode)?;
        let out = self.decoder.forward(&mut tape, &self.store, &enc, &batch.subjects, &batch.relations)?;
        let loss = bce_loss(&mut tape, out.scores, &batch.labels, self.decoder.config.label_smoothing)?;
        let value = tape.value(loss).item();
        if value.is_finite() {
            tape.backward(loss, &mut self.store)?;
        }
        Ok(value)
    }

    /// Evaluation-mode encoding of the whole graph.
    pub fn encode(&self, tape: &mut Tape, graph: &MultiRelGraph) -> Result<EncoderOutput> {
        self.encoder.forward(tape, &self.store, graph, Mode::Eval)
    }

    /// `[B x N_e]` scores for the given queries.
    pub fn score(&self, graph: &MultiRelGraph, subjects: &[EntityId], relations: &[RelationId]) -> Result<Array> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, graph)?;
        let out = self.decoder.forward(&mut tape, &self.store, &enc, subjects, relations)?;
        Ok(tape.value(out.scores).clone())
    }

    /// Scores with a shared encoding; `score_fn` is called once per chunk.
    pub fn scorer<'a>(
        &'a self,
        graph: &MultiRelGraph,
    ) -> Result<impl FnMut(&[EntityId], &[RelationId]) -> Result<Array> + 'a> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, graph)?;
        let entities = tape.value(enc.entities).clone();
        let relations = tape.value(enc.relations).clone();
        Ok(move |s: &[EntityId], r: &[RelationId]| {
            let mut t = Tape::new();
            let enc = EncoderOutput {
                entities: t.constant(entities.clone()),
                relations: t.constant(relations.clone()),
                attention: Vec::new(),
            };
            let out = self.decoder.forward(&mut t, &self.store, &enc, s, r)?;
            Ok(t.value(out.scores).clone())
        })
    }

    /// Channel weights `[B x K]` for the given queries.
    pub fn beta(&self, graph: &MultiRelGraph, subjects: &[EntityId], relations: &[RelationId]) -> Result<Array> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, graph)?;
        let (slices, rq) = self.decoder.query_inputs(&mut tape, &enc, subjects, relations)?;
        let beta = self.decoder.beta(&mut tape, &self.store, &slices, rq)?;
        Ok(tape.value(beta).clone())
    }

    /// Edge attention `[layer][channel]`, each `[E x 1]` in edge order.
    pub fn attention(&self, graph: &MultiRelGraph) -> Result<Vec<Vec<Array>>> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, graph)?;
        Ok(enc
            .attention
            .iter()
            .map(|layer| layer.iter().map(|&v| tape.value(v).clone()).collect())
            .collect())
    }

    pub fn checkpoint(&self, config_hash: u64, epoch: u64, best_metric: f64) -> Checkpoint {
        Checkpoint::from_store(&self.store, config_hash, epoch, best_metric)
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint, config_hash: u64) -> Result<()> {
        check_hash(ckpt, config_hash)?;
        self.store.restore(&ckpt.params)
    }
}

/// r-GAT encoder with a linear softmax classifier.
#[derive(Debug, Clone)]
pub struct EntityClassifier {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: ClassifierHead,
}

impl EntityClassifier {
    pub fn new(
        model: &ModelConfig,
        num_classes: usize,
        num_entities: usize,
        num_relations: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1417]));
        let mut store = ParamStore::new();
        let encoder = Encoder::new(model.clone(), num_entities, num_relations, &mut store, &mut rng)?;
        let head = ClassifierHead::new(num_classes, model.output_entity_dim(), &mut store, &mut rng)?;
        Ok(EntityClassifier { store, encoder, head })
    }

    pub fn loss_and_grad(&mut self, graph: &MultiRelGraph, labels: &LabelSet, mode: Mode) -> Result<f64> {
        let mut tape = Tape::new();
        let enc = self.encoder.forward(&mut tape, &self.store, graph, mode)?;
        let probs = self.head.forward(&mut tape, &self.store, enc.entities)?;
        let loss = crate::classify::ce_loss(&mut tape, probs, labels, Split::Train)?;
        let value = tape.value(loss).item();
        if value.is_finite() {
            tape.backward(loss, &mut self.store)?;
        }
        Ok(value)
    }

    /// Class probabilities `[N_e x C]` in evaluation mode.
    pub fn probabilities(&self, graph: &MultiRelGraph) -> Result<Array> {
        let mut tape = Tape::new();
        let enc = self.encoder.forward(&mut tape, &self.store, graph, Mode::Eval)?;
        let probs = self.head.forward(&mut tape, &self.store, enc.entities)?;
        Ok(tape.value(probs).clone())
    }

    pub fn checkpoint(&self, config_hash: u64, epoch: u64, best_metric: f64) -> Checkpoint {
        Checkpoint::from_store(&self.store, config_hash, epoch, best_metric)
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint, config_hash: u64) -> Result<()> {
        check_hash(ckpt, config_hash)?;
        self.store.restore(&ckpt.params)
    }
}

fn check_hash(ckpt: &Checkpoint, expected: u64) -> Result<()> {
    if ckpt.config_hash != expected {
        return Err(RgatError::Checkpoint(format!(
            "checkpoint was written for config {:016x}, current config is {expected:016x}",
            ckpt.config_hash
        )));
    }
    Ok(())
}
