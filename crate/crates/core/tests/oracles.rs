mod common;

use std::collections::HashSet;

use proptest::prelude::*;

use rgat::autodiff::{Array, Tape};
use rgat::decoder::{DecoderConfig, QattDecoder};
use rgat::eval::filtered_rank;
use rgat::layer::{layer_forward, Activation, Encoder, LayerConfig, LayerParams, ModelConfig, Mode, RelationMode};

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(w: &Array, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|i| dot(w.row(i), x)).collect()
}

#[test]
fn layer_matches_loop_oracle() {
    for seed in 0..10u64 {
        let (vocab, _, graph) = common::random_graph(seed, 12, 3, 30);
        let mut r = common::rng(seed);
        let activation = if seed % 2 == 0 { Activation::Elu } else { Activation::Relu };
        let mut cfg = LayerConfig::new(2, 6, 5, 8).without_dropout();
        cfg.activation = activation;
        let mut store = rgat::autodiff::ParamStore::new();
        let params = LayerParams::init(&mut store, "l", &cfg, &mut r);
        let e = common::uniform(&mut r, 12, 6, -1.0, 1.0);
        let rel = common::uniform(&mut r, vocab.num_relations(), 5, -1.0, 1.0);

        let mut tape = Tape::new();
        let ev = tape.constant(e.clone());
        let rv = tape.constant(rel.clone());
        let out = layer_forward(&mut tape, &store, &graph, ev, rv, &params, &cfg, Mode::Eval, 0).unwrap();
        let got = tape.value(out.entities);

        for (k, ch) in params.channels.iter().enumerate() {
            let (alpha, feats) = common::layer_channel_oracle(
                &graph,
                &e,
                &rel,
                store.value(ch.entity_proj),
                store.value(ch.relation_proj),
                store.value(ch.attention),
                0.2,
                activation,
            );
            let a_got = tape.value(out.attention[k]).data();
            for (x, y) in a_got.iter().zip(&alpha) {
                assert!((x - y).abs() < 1e-12, "alpha {x} vs {y}");
            }
            for v in 0..12 {
                for i in 0..4 {
                    let x = got.row(v)[k * 4 + i];
                    let y = feats.row(v)[i];
                    assert!((x - y).abs() < 1e-12, "feature {x} vs {y}");
                }
            }
        }
    }
}

#[test]
fn decoder_matches_loop_oracle() {
    for seed in 0..10u64 {
        let (vocab, ts, graph) = common::random_graph(seed, 9, 3, 20);
        let mut r = common::rng(seed + 77);
        let mut store = rgat::autodiff::ParamStore::new();
        let config = ModelConfig::with_dims(3, 6, 4, &[6], RelationMode::Concat);
        let enc = Encoder::new(config, 9, vocab.num_relations(), &mut store, &mut r).unwrap();
        let heads = 1 + (seed as usize % 2);
        let dec = QattDecoder::new(
            DecoderConfig {
                query_dim: Some(4),
                heads,
                ..DecoderConfig::default()
            },
            3,
            6,
            6,
            &mut store,
            &mut r,
        )
        .unwrap();
        let subjects: Vec<usize> = ts.iter().take(5).map(|t| t.subject).collect();
        let relations: Vec<usize> = ts.iter().take(5).map(|t| t.relation).collect();

        let mut tape = Tape::new();
        let encoded = enc.forward(&mut tape, &store, &graph, Mode::Eval).unwrap();
        let out = dec.forward(&mut tape, &store, &encoded, &subjects, &relations).unwrap();
        let e_all = tape.value(encoded.entities).clone();
        let r_all = tape.value(encoded.relations).clone();
        let beta_got = tape.value(out.beta);
        let scores_got = tape.value(out.scores);

        let w3 = store.value(dec.w3);
        let w_out = store.value(dec.w_out);
        let head_dim = (4 / heads) as f64;
        for (b, (&s, &q)) in subjects.iter().zip(&relations).enumerate() {
            let es = e_all.row(s);
            let rq = r_all.row(q);
            let slices: Vec<&[f64]> = (0..3).map(|k| &es[k * 2..k * 2 + 2]).collect();
            let mut beta = [0.0; 3];
            for h in &dec.heads {
                let query = matvec(store.value(h.w2), rq);
                let logits: Vec<f64> = slices
                    .iter()
                    .map(|sl| dot(&matvec(store.value(h.w1), sl), &query) / head_dim.sqrt())
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for k in 0..3 {
                    beta[k] += logits[k].exp() / z / heads as f64;
                }
            }
            for k in 0..3 {
                assert!((beta_got.row(b)[k] - beta[k]).abs() < 1e-12);
            }
            let mut qvec = Vec::new();
            for k in 0..3 {
                let joined: Vec<f64> = slices[k].iter().chain(rq).copied().collect();
                qvec.extend(matvec(w3, &joined).into_iter().map(|x| x * beta[k]));
            }
            let hidden: Vec<f64> = matvec(w_out, &qvec).into_iter().map(relu).collect();
            for o in 0..9 {
                let want = dot(&hidden, e_all.row(o));
                assert!((scores_got.row(b)[o] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn ranking_matches_brute_force() {
    for trial in 0..100u64 {
        common::ranking_oracle_trial(trial).unwrap();
    }
}

#[test]
fn tied_ranks_are_uniform() {
    let p = common::tied_rank_uniformity_p(10, 1000);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn filtered_out_candidates_never_count() {
    let scores = [0.0, 5.0, 5.0, 1.0];
    let filter: HashSet<_> = [1, 2].into_iter().collect();
    assert_eq!(filtered_rank(&scores, 0, Some(&filter), 0).unwrap(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_and_beta_are_normalised(seed in 0u64..10_000, n_e in 1usize..100, n_r in 1usize..6, density in 0usize..4) {
        let (vocab, ts, graph) = common::random_graph(seed, n_e, n_r, n_e * density);
        let mut r = common::rng(seed);
        let mut store = rgat::autodiff::ParamStore::new();
        let config = ModelConfig::with_dims(4, 8, 8, &[8], RelationMode::Concat);
        let enc = Encoder::new(config, n_e, vocab.num_relations(), &mut store, &mut r).unwrap();
        let dec = QattDecoder::new(DecoderConfig::default(), 4, 8, 8, &mut store, &mut r).unwrap();
        let mut tape = Tape::new();
        let encoded = enc.forward(&mut tape, &store, &graph, Mode::Train { seed }).unwrap();
        for alpha in &encoded.attention[0] {
            let a = tape.value(*alpha).data();
            for v in 0..n_e {
                let total: f64 = graph.edge_range(v).map(|i| a[i]).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
        let subjects: Vec<usize> = (0..n_e).collect();
        let relations: Vec<usize> = (0..n_e).map(|i| i % vocab.num_relations()).collect();
        let out = dec.forward(&mut tape, &store, &encoded, &subjects, &relations).unwrap();
        let beta = tape.value(out.beta);
        for b in 0..n_e {
            let total: f64 = beta.row(b).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(beta.row(b).iter().all(|&x| x >= 0.0));
        }
        let _ = ts;
    }

    #[test]
    fn every_entity_has_exactly_one_self_loop(seed in 0u64..10_000, n_e in 1usize..40, n_r in 1usize..5, m in 0usize..80) {
        let (_, ts, graph) = common::random_graph(seed, n_e, n_r, m);
        prop_assert_eq!(graph.edge_count(), 2 * ts.len() + n_e);
        for v in 0..n_e {
            let loops = graph.neighbors(v).iter().filter(|&&(u, r)| r == graph.self_loop() && u == v).count();
            prop_assert_eq!(loops, 1);
        }
        let mut round = graph.forward_triplets();
        let mut orig = ts.clone();
        round.sort();
        orig.sort();
        prop_assert_eq!(round, orig);
    }

    #[test]
    fn segment_softmax_sums_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..40), groups in 1usize..6) {
        let segments: Vec<usize> = (0..values.len()).map(|i| i * groups / values.len()).collect();
        let out = rgat::autodiff::segment_softmax(&values, &segments);
        for g in 0..groups {
            let idx: Vec<usize> = (0..values.len()).filter(|&i| segments[i] == g).collect();
            if !idx.is_empty() {
                let total: f64 = idx.iter().map(|&i| out[i]).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_param_count_ignores_channels(pow in 0u32..4, d in 1usize..4) {
        let k = 1usize << pow;
        let width = 8 * d;
        let cfg = LayerConfig::new(k, width, width, width);
        let base = LayerConfig::new(1, width, width, width);
        prop_assert_eq!(cfg.param_count(), base.param_count());
    }

    #[test]
    fn checkpoint_round_trips(seed in 0u64..1000, epoch in 0u64..1000, metric in -1.0f64..1.0) {
        let mut r = common::rng(seed);
        let mut store = rgat::autodiff::ParamStore::new();
        store.add_glorot("a", 3, 4, &mut r);
        store.add_glorot("b", 1, 5, &mut r);
        let ck = rgat::autodiff::Checkpoint::from_store(&store, seed, epoch, metric);
        let back = rgat::autodiff::Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(back, ck);
    }
}
