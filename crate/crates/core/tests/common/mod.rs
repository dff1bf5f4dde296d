#![allow(dead_code, clippy::needless_range_loop, clippy::type_complexity, clippy::too_many_arguments)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rgat::autodiff::{Array, ParamStore, Tape, Var};
use rgat::decoder::{bce_loss, build_queries, DecoderConfig, QattDecoder, QueryBatch};
use rgat::eval::{evaluate_with, filtered_rank, query_seed, Direction, FilterIndex};
use rgat::graph::{EntityId, MultiRelGraph, RelationId, Triplet, Vocab};
use rgat::layer::{Activation, Encoder, ModelConfig, Mode};
use rgat::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array {
    Array::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-300 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Largest relative error over all inputs of `build`, for the loss
/// `sum(out * C)` with a fixed random `C`.
pub fn check_op<F>(inputs: &[Array], seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Array]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = build(&mut tape, &vars).expect("forward");
        let shape = tape.value(out).shape().to_vec();
        let mut r = rng(seed);
        let n = tape.value(out).len();
        let c = Array::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let c = tape.constant(c);
        let prod = tape.mul(out, c).expect("mul");
        let loss = tape.sum(prod);
        (tape, vars, loss)
    };
    let (tape, vars, loss) = eval(inputs);
    let grads = tape.gradients(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let (tp, _, lp) = eval(&plus);
            let (tm, _, lm) = eval(&minus);
            numeric[j] = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Relative gradient error of every primitive for one random trial.
pub fn primitive_errors(trial: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(1000 + trial);
    let (m, k, n) = (r.random_range(2..5), r.random_range(2..5), r.random_range(2..5));
    let a = uniform(&mut r, m, k, -1.0, 1.0);
    let b = uniform(&mut r, k, n, -1.0, 1.0);
    let bt = uniform(&mut r, n, k, -1.0, 1.0);
    let a2 = uniform(&mut r, m, k, -1.0, 1.0);
    let col = uniform(&mut r, m, 1, -1.0, 1.0);
    let pos = uniform(&mut r, m, k, 0.1, 1.0);
    let idx: Vec<usize> = (0..m + 2).map(|_| r.random_range(0..m)).collect();
    let flat = uniform(&mut r, 7, 1, -1.0, 1.0);
    let segments: Vec<usize> = {
        let mut s: Vec<usize> = (0..7).map(|_| r.random_range(0..3)).collect();
        s.sort_unstable();
        s
    };
    let seed = 50 + trial;
    let drop_seed = r.random::<u64>();
    let scatter_rows = m + 1;
    let cases: Vec<(&'static str, Vec<Array>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>)> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_t", vec![a.clone(), bt.clone()], Box::new(|t, v| t.matmul_t(v[0], v[1]))),
        ("add", vec![a.clone(), a2.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("mul", vec![a.clone(), a2.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("mul_column", vec![a.clone(), col.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("concat", vec![a.clone(), col.clone()], Box::new(|t, v| t.concat(&[v[0], v[1]]))),
        ("slice_cols", vec![a.clone()], Box::new(move |t, v| t.slice_cols(v[0], 1, k - 1))),
        ("gather_rows", vec![a.clone()], {
            let idx = idx.clone();
            Box::new(move |t, v| t.gather_rows(v[0], &idx))
        }),
        ("scatter_add_rows", vec![a.clone()], {
            let idx: Vec<usize> = (0..m).map(|i| (i * 2) % scatter_rows).collect();
            Box::new(move |t, v| t.scatter_add_rows(v[0], &idx, scatter_rows))
        }),
        ("leaky_relu", vec![a.clone()], Box::new(|t, v| Ok(t.leaky_relu(v[0], 0.2)))),
        ("elu", vec![a.clone()], Box::new(|t, v| Ok(t.elu(v[0])))),
        ("relu", vec![a.clone()], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("sigmoid", vec![a.clone()], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("log", vec![pos.clone()], Box::new(|t, v| Ok(t.log(v[0])))),
        ("dropout", vec![a.clone()], Box::new(move |t, v| t.dropout(v[0], 0.3, drop_seed))),
        ("scale", vec![a.clone()], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("segment_softmax", vec![flat.clone()], {
            let s = segments.clone();
            Box::new(move |t, v| t.segment_softmax(v[0], &s))
        }),
        ("reshape", vec![a.clone()], Box::new(move |t, v| t.reshape(v[0], &[m * k]))),
        ("sum", vec![a.clone()], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![a.clone()], Box::new(|t, v| Ok(t.mean(v[0])))),
        ("sum_cols", vec![a.clone()], Box::new(|t, v| Ok(t.sum_cols(v[0])))),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, build)| (name, check_op(&inputs, seed, build)))
        .collect()
}

/// Random graph where every triplet has distinct endpoints chosen uniformly.
pub fn random_graph(seed: u64, entities: usize, relations: usize, triplets: usize) -> (Vocab, Vec<Triplet>, MultiRelGraph) {
    let mut r = rng(seed);
    let vocab = Vocab::new(
        (0..entities).map(|i| format!("e{i}")).collect(),
        (0..relations).map(|i| format!("r{i}")).collect(),
    )
    .unwrap();
    let ts: Vec<Triplet> = (0..triplets)
        .map(|_| {
            Triplet::new(
                r.random_range(0..entities),
                r.random_range(0..relations),
                r.random_range(0..entities),
            )
        })
        .collect();
    let graph = MultiRelGraph::build(&ts, &vocab);
    (vocab, ts, graph)
}

pub struct Pipeline {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: QattDecoder,
    pub graph: MultiRelGraph,
    pub batch: QueryBatch,
    pub smoothing: f64,
}

/// Two-layer, four-channel encoder with query attention and BCE over a
/// random 10-entity, 4-relation graph.
pub fn end_to_end_pipeline(seed: u64) -> Pipeline {
    let (vocab, ts, graph) = random_graph(seed, 10, 4, 24);
    let mut r = rng(seed ^ 0xabc);
    let mut store = ParamStore::new();
    let config = ModelConfig::with_dims(4, 8, 8, &[8, 8], rgat::layer::RelationMode::Concat);
    let encoder = Encoder::new(config.clone(), 10, vocab.num_relations(), &mut store, &mut r).unwrap();
    let dec_cfg = DecoderConfig {
        heads: 2,
        query_dim: Some(4),
        ..DecoderConfig::default()
    };
    let decoder = QattDecoder::new(
        dec_cfg,
        4,
        config.output_entity_dim(),
        config.output_relation_dim(),
        &mut store,
        &mut r,
    )
    .unwrap();
    let queries = build_queries(&ts, vocab.num_base_relations());
    let picked: Vec<_> = queries.iter().take(6).collect();
    let batch = QueryBatch::new(&picked, 10);
    Pipeline {
        store,
        encoder,
        decoder,
        graph,
        batch,
        smoothing: 0.1,
    }
}

impl Pipeline {
    pub fn loss(&self, tape: &mut Tape, mode: Mode) -> Var {
        let enc = self.encoder.forward(tape, &self.store, &self.graph, mode).unwrap();
        let out = self
            .decoder
            .forward(tape, &self.store, &enc, &self.batch.subjects, &self.batch.relations)
            .unwrap();
        bce_loss(tape, out.scores, &self.batch.labels, self.smoothing).unwrap()
    }

    pub fn loss_value(&self, mode: Mode) -> f64 {
        let mut tape = Tape::new();
        let l = self.loss(&mut tape, mode);
        tape.value(l).item()
    }

    /// Relative error of the full parameter gradient against central differences.
    pub fn gradient_error(&mut self, mode: Mode) -> f64 {
        self.store.zero_grad();
        let mut tape = Tape::new();
        let l = self.loss(&mut tape, mode);
        tape.backward(l, &mut self.store).unwrap();
        let ids: Vec<_> = self.store.ids().collect();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for id in ids {
            analytic.extend_from_slice(self.store.grad(id).data());
            for j in 0..self.store.value(id).len() {
                let orig = self.store.value(id).data()[j];
                self.store.value_mut(id).data_mut()[j] = orig + FD_STEP;
                let plus = self.loss_value(mode);
                self.store.value_mut(id).data_mut()[j] = orig - FD_STEP;
                let minus = self.loss_value(mode);
                self.store.value_mut(id).data_mut()[j] = orig;
                numeric.push((plus - minus) / (2.0 * FD_STEP));
            }
        }
        self.store.zero_grad();
        rel_error(&analytic, &numeric)
    }
}

/// Loop oracle for one channel of one layer: returns per-edge attention in
/// the graph's edge order and the aggregated entity features.
pub fn layer_channel_oracle(
    graph: &MultiRelGraph,
    e: &Array,
    r: &Array,
    w_e: &Array,
    w_r: &Array,
    w_f: &Array,
    slope: f64,
    activation: Activation,
) -> (Vec<f64>, Array) {
    let d = w_e.rows();
    let project = |x: &[f64], w: &Array| -> Vec<f64> {
        (0..d).map(|i| w.row(i).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    };
    let ek: Vec<Vec<f64>> = (0..e.rows()).map(|i| project(e.row(i), w_e)).collect();
    let rk: Vec<Vec<f64>> = (0..r.rows()).map(|i| project(r.row(i), w_r)).collect();
    let wf = w_f.data();
    let mut alphas = Vec::new();
    let mut out = Array::zeros(&[graph.num_entities(), d]);
    for v in 0..graph.num_entities() {
        let logits: Vec<f64> = graph
            .neighbors(v)
            .iter()
            .map(|&(u, rel)| {
                let concat: Vec<f64> = ek[v].iter().chain(&rk[rel]).chain(&ek[u]).copied().collect();
                let x: f64 = concat.iter().zip(wf).map(|(a, b)| a * b).sum();
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut acc = vec![0.0; d];
        for (&(u, rel), ex) in graph.neighbors(v).iter().zip(&exps) {
            let a = ex / z;
            alphas.push(a);
            for i in 0..d {
                acc[i] += a * ek[u][i] * rk[rel][i];
            }
        }
        for i in 0..d {
            out.data_mut()[v * d + i] = match activation {
                Activation::Elu => {
                    if acc[i] > 0.0 {
                        acc[i]
                    } else {
                        acc[i].exp_m1()
                    }
                }
                Activation::Relu => acc[i].max(0.0),
            };
        }
    }
    (alphas, out)
}

/// Brute-force filtered rank for an entirely explicit candidate list.
pub fn brute_rank(scores: &[f64], gold: EntityId, filter: &HashSet<EntityId>, tie_offset: impl FnOnce(usize) -> usize) -> usize {
    let g = scores[gold];
    let candidates: Vec<usize> = (0..scores.len()).filter(|&o| o != gold && !filter.contains(&o)).collect();
    let greater = candidates.iter().filter(|&&o| scores[o] > g).count();
    let ties = candidates.iter().filter(|&&o| scores[o] == g).count();
    1 + greater + tie_offset(ties)
}

/// Known `(subject, relation) -> objects` by direct scan.
pub fn brute_filter(all: &[Triplet], subject: EntityId, relation: RelationId, num_base: usize) -> HashSet<EntityId> {
    all.iter()
        .filter_map(|t| {
            if relation < num_base && t.subject == subject && t.relation == relation {
                Some(t.object)
            } else if relation >= num_base && t.object == subject && t.relation + num_base == relation {
                Some(t.subject)
            } else {
                None
            }
        })
        .collect()
}

/// One seeded trial of the filtered ranking protocol against the brute-force oracle.
pub fn ranking_oracle_trial(trial: u64) -> std::result::Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(trial);
    let n_e = r.random_range(2..=20);
    let n_r = r.random_range(1..=3);
    let (_, all, _) = random_graph(trial, n_e, n_r, r.random_range(3..30));
    let split = all.len() / 2;
    let (train, test) = all.split_at(split.max(1));
    let filter = FilterIndex::build(&[train, test], n_r);
    // coarse scores so ties occur
    let table = Array::from_fn(n_e * 2 * n_r + 1, n_e, |_, _| r.random_range(0..4) as f64);
    let report = evaluate_with(test, &filter, n_r, trial, 3, |s, rel| {
        Ok(Array::from_fn(s.len(), n_e, |i, o| table.row(s[i] * 2 * n_r + rel[i])[o]))
    })
    .map_err(|e| e.to_string())?;

    let mut expected = Vec::new();
    for (i, t) in test.iter().enumerate() {
        for (dir, s, q, gold) in [
            (Direction::Object, t.subject, t.relation, t.object),
            (Direction::Subject, t.object, t.relation + n_r, t.subject),
        ] {
            let known = brute_filter(&all, s, q, n_r);
            let scores = table.row(s * 2 * n_r + q);
            let rank = brute_rank(scores, gold, &known, |ties| {
                if ties == 0 {
                    0
                } else {
                    ChaCha8Rng::seed_from_u64(query_seed(trial, i, dir)).random_range(0..=ties)
                }
            });
            expected.push(rank);
        }
    }
    let got: Vec<usize> = report.ranks.iter().map(|q| q.rank).collect();
    if got != expected {
        return Err(format!("trial {trial}: ranks {got:?} != {expected:?}"));
    }
    let n = expected.len() as f64;
    let mrr = expected.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    let hits = |k| expected.iter().filter(|&&r| r <= k).count() as f64 / n;
    if report.mrr != mrr || (report.hits1, report.hits3, report.hits10) != (hits(1), hits(3), hits(10)) {
        return Err(format!("trial {trial}: aggregate metrics differ"));
    }
    Ok(())
}

/// Chi-square p-value of gold ranks under all-tied scores.
pub fn tied_rank_uniformity_p(candidates: usize, draws: u64) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let scores = vec![0.5; candidates];
    let mut counts = vec![0u64; candidates];
    for seed in 0..draws {
        let rank = filtered_rank(&scores, 0, None, query_seed(seed, 0, Direction::Object)).unwrap();
        counts[rank - 1] += 1;
    }
    let expected = draws as f64 / candidates as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    1.0 - ChiSquared::new((candidates - 1) as f64).unwrap().cdf(stat)
}
