use super::*;
use crate::numkit::{LstmParams, Unary};
use crate::scene_graph::{GraphEdge, GraphNode, NodeKind};
use crate::testutil::{max_grad_error, max_store_grad_error, random_tensor, synthetic_sequences, FD_TOLERANCE};

fn bare_graph(n: usize, edges: &[(usize, usize, Relation)]) -> SceneGraph {
    SceneGraph {
        nodes: (0..n)
            .map(|id| GraphNode {
                id,
                kind: NodeKind::Ego,
                features: vec![0.0; NODE_FEATURE_DIM],
            })
            .collect(),
        edges: edges
            .iter()
            .map(|&(src, dst, relation)| GraphEdge { src, dst, relation })
            .collect(),
    }
}

fn random_graph(rng: &mut XorShiftRng) -> SceneGraph {
    let n = 1 + rng.below(9);
    let edges: Vec<(usize, usize, Relation)> = (0..rng.below(3 * n + 1))
        .map(|_| (rng.below(n), rng.below(n), Relation::VOCABULARY[rng.below(NUM_RELATIONS)]))
        .collect();
    bare_graph(n, &edges)
}

fn identity_weights(tape: &mut Tape, d: usize) -> MrgcnWeights {
    let self_loop = tape.constant(Tensor::identity(d));
    MrgcnWeights {
        self_loop,
        relations: [self_loop; NUM_RELATIONS],
    }
}

fn random_weights(tape: &mut Tape, rng: &mut XorShiftRng, d_in: usize, d_out: usize) -> MrgcnWeights {
    MrgcnWeights {
        self_loop: tape.constant(random_tensor(rng, &[d_in, d_out])),
        relations: std::array::from_fn(|_| tape.constant(random_tensor(rng, &[d_in, d_out]))),
    }
}

#[test]
fn self_loop_only_layer() {
    let g = bare_graph(1, &[]);
    let adj = RelationalAdjacency::new(&[&g]).unwrap();
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::row(vec![0.5, 2.0, 0.0]));
    let w = identity_weights(&mut tape, 3);
    let out = mrgcn_layer(&mut tape, h, &adj, &w, true).unwrap();
    assert_eq!(tape.value(out).data(), &[0.5, 2.0, 0.0]);
}

#[test]
fn hand_computed_propagation() {
    let g = bare_graph(2, &[(0, 1, Relation::Near)]);
    let adj = RelationalAdjacency::new(&[&g]).unwrap();
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::identity(2));
    let w = identity_weights(&mut tape, 2);
    let out = mrgcn_layer(&mut tape, h, &adj, &w, true).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 0.0, 1.0, 1.0]);
}

#[test]
fn final_layer_skips_activation() {
    let g = bare_graph(1, &[]);
    let adj = RelationalAdjacency::new(&[&g]).unwrap();
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::row(vec![-1.0, 2.0]));
    let w = identity_weights(&mut tape, 2);
    let out = mrgcn_layer(&mut tape, h, &adj, &w, false).unwrap();
    assert_eq!(tape.value(out).data(), &[-1.0, 2.0]);
}

/// Independent dense re-implementation: per-relation normalized adjacency
/// built straight from the edge list.
fn dense_layer(g: &SceneGraph, h: &Tensor, w_self: &Tensor, w_rel: &[Tensor]) -> Vec<f64> {
    let n = g.nodes.len();
    let (d_in, d_out) = w_self.dims2().unwrap();
    let mul = |a: &[f64], rows: usize, b: &Tensor| -> Vec<f64> {
        let mut out = vec![0.0; rows * d_out];
        for i in 0..rows {
            for k in 0..d_in {
                for j in 0..d_out {
                    out[i * d_out + j] += a[i * d_in + k] * b.get(k, j);
                }
            }
        }
        out
    };
    let mut out = mul(h.data(), n, w_self);
    for (r, rel) in Relation::VOCABULARY.iter().enumerate() {
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            let srcs: Vec<usize> = g.edges.iter().filter(|e| e.dst == i && e.relation == *rel).map(|e| e.src).collect();
            for s in &srcs {
                a[i * n + s] += 1.0 / srcs.len() as f64;
            }
        }
        let mut ah = vec![0.0; n * d_in];
        for i in 0..n {
            for j in 0..n {
                for k in 0..d_in {
                    ah[i * d_in + k] += a[i * n + j] * h.data()[j * d_in + k];
                }
            }
        }
        for (o, v) in out.iter_mut().zip(mul(&ah, n, &w_rel[r])) {
            *o += v;
        }
    }
    out.into_iter().map(|v| v.max(0.0)).collect()
}

#[test]
fn matches_dense_adjacency_oracle() {
    let mut rng = XorShiftRng::new(31);
    for _ in 0..50 {
        let g = random_graph(&mut rng);
        let n = g.nodes.len();
        let (d_in, d_out) = (1 + rng.below(5), 1 + rng.below(5));
        let h = random_tensor(&mut rng, &[n, d_in]);
        let adj = RelationalAdjacency::new(&[&g]).unwrap();
        let mut tape = Tape::new();
        let w = random_weights(&mut tape, &mut rng, d_in, d_out);
        let hv = tape.constant(h.clone());
        let out = mrgcn_layer(&mut tape, hv, &adj, &w, true).unwrap();
        let w_rel: Vec<Tensor> = w.relations.iter().map(|v| tape.value(*v).clone()).collect();
        let want = dense_layer(&g, &h, tape.value(w.self_loop), &w_rel);
        for (a, b) in tape.value(out).data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
        for rel in Relation::VOCABULARY {
            let dense = adj.dense(rel);
            for i in 0..n {
                let row: f64 = dense[i * n..(i + 1) * n].iter().sum();
                let has_in = g.edges.iter().any(|e| e.dst == i && e.relation == rel);
                assert!((row - if has_in { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }
}

fn permute(g: &SceneGraph, perm: &[usize]) -> SceneGraph {
    // perm[old] = new
    let mut nodes = g.nodes.clone();
    for (old, node) in g.nodes.iter().enumerate() {
        nodes[perm[old]] = GraphNode { id: perm[old], ..node.clone() };
    }
    let edges = g
        .edges
        .iter()
        .map(|e| GraphEdge {
            src: perm[e.src],
            dst: perm[e.dst],
            relation: e.relation,
        })
        .collect();
    SceneGraph { nodes, edges }
}

#[test]
fn layer_is_permutation_equivariant_and_pool_invariant() {
    let mut rng = XorShiftRng::new(5);
    for _ in 0..20 {
        let g = random_graph(&mut rng);
        let n = g.nodes.len();
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let pg = permute(&g, &perm);
        let h = random_tensor(&mut rng, &[n, 3]);
        let mut ph = Tensor::zeros(&[n, 3]);
        for old in 0..n {
            ph.data_mut()[perm[old] * 3..perm[old] * 3 + 3].copy_from_slice(h.row_slice(old));
        }
        let mut tape = Tape::new();
        let w = random_weights(&mut tape, &mut rng, 3, 4);
        let a = tape.constant(random_tensor(&mut rng, &[4, 1]));
        let run = |tape: &mut Tape, g: &SceneGraph, h: &Tensor| {
            let adj = RelationalAdjacency::new(&[g]).unwrap();
            let hv = tape.constant(h.clone());
            let out = mrgcn_layer(tape, hv, &adj, &w, true).unwrap();
            let pooled = attention_pool(tape, out, a, Arc::new(vec![0..g.nodes.len()])).unwrap();
            (out, pooled)
        };
        let (o1, p1) = run(&mut tape, &g, &h);
        let (o2, p2) = run(&mut tape, &pg, &ph);
        for old in 0..n {
            for (x, y) in tape.value(o1).row_slice(old).iter().zip(tape.value(o2).row_slice(perm[old])) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for (x, y) in tape.value(p1).data().iter().zip(tape.value(p2).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_pool_special_cases() {
    let mut rng = XorShiftRng::new(2);
    let mut tape = Tape::new();
    let single = tape.constant(random_tensor(&mut rng, &[1, 4]));
    let a = tape.constant(random_tensor(&mut rng, &[4, 1]));
    let out = attention_pool(&mut tape, single, a, Arc::new(vec![0..1])).unwrap();
    assert_eq!(tape.value(out).data(), tape.value(single).data());

    let h = random_tensor(&mut rng, &[5, 3]);
    let hv = tape.constant(h.clone());
    let zero = tape.constant(Tensor::zeros(&[3, 1]));
    let out = attention_pool(&mut tape, hv, zero, Arc::new(vec![0..5])).unwrap();
    for j in 0..3 {
        let mean = (0..5).map(|i| h.get(i, j)).sum::<f64>() / 5.0;
        assert!((tape.value(out).data()[j] - mean).abs() < 1e-12);
    }
    assert!(matches!(
        attention_pool(&mut tape, hv, zero, Arc::new(vec![0..0])),
        Err(Error::Contract(_))
    ));
}

#[test]
fn attention_pool_gradients() {
    for seed in 0..10 {
        let mut rng = XorShiftRng::new(seed);
        let inputs = [random_tensor(&mut rng, &[7, 3]), random_tensor(&mut rng, &[3, 1])];
        let err = max_grad_error(&inputs, |t, v| {
            let p = attention_pool(t, v[0], v[1], Arc::new(vec![0..3, 3..7]))?;
            let q = t.unary(Unary::Tanh, p)?;
            t.sum(q)
        });
        assert!(err < FD_TOLERANCE, "seed {seed}: {err}");
    }
}

#[test]
fn mrgcn_layer_gradients() {
    for seed in 0..10 {
        let mut rng = XorShiftRng::new(100 + seed);
        let g = random_graph(&mut rng);
        let n = g.nodes.len();
        let adj = RelationalAdjacency::new(&[&g]).unwrap();
        let mut inputs = vec![random_tensor(&mut rng, &[n, 3]), random_tensor(&mut rng, &[3, 2])];
        inputs.extend((0..NUM_RELATIONS).map(|_| random_tensor(&mut rng, &[3, 2])));
        let err = max_grad_error(&inputs, |t, v| {
            let w = MrgcnWeights {
                self_loop: v[1],
                relations: std::array::from_fn(|r| v[2 + r]),
            };
            let out = mrgcn_layer(t, v[0], &adj, &w, true)?;
            let sq = t.mul(out, out)?;
            t.sum(sq)
        });
        assert!(err < FD_TOLERANCE, "seed {seed}: {err}");
    }
}

fn zero_lstm(tape: &mut Tape, d_in: usize, d_h: usize) -> LstmWeights {
    let mut store = ParameterStore::new();
    let p = LstmParams::init(&mut store, "z", d_in, d_h, &mut XorShiftRng::new(0));
    for id in store.ids().collect::<Vec<_>>() {
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    p.bind(tape, &store, false)
}

#[test]
fn temporal_encode_cases() {
    let mut rng = XorShiftRng::new(9);
    let mut tape = Tape::new();
    let seq = tape.constant(random_tensor(&mut rng, &[4, 3]));
    let zw = zero_lstm(&mut tape, 3, 5);
    let out = temporal_encode(&mut tape, seq, &zw, 5).unwrap();
    assert!(tape.value(out).data().iter().all(|v| *v == 0.0));

    let mut store = ParameterStore::new();
    let params = LstmParams::init(&mut store, "l", 3, 5, &mut rng);
    let w = params.bind(&mut tape, &store, false);
    let one = tape.slice_rows(seq, 0, 1).unwrap();
    let via_encode = temporal_encode(&mut tape, one, &w, 5).unwrap();
    let h0 = tape.constant(Tensor::zeros(&[1, 5]));
    let (direct, _) = lstm_cell(&mut tape, one, h0, h0, &w).unwrap();
    assert_eq!(tape.value(via_encode).data(), tape.value(direct).data());
}

#[test]
fn frame_order_matters() {
    for seed in 0..10 {
        let mut rng = XorShiftRng::new(seed);
        let mut store = ParameterStore::new();
        let params = LstmParams::init(&mut store, "l", 3, 4, &mut rng);
        let x = random_tensor(&mut rng, &[4, 3]);
        let mut reversed = Tensor::zeros(&[4, 3]);
        for t in 0..4 {
            reversed.data_mut()[t * 3..t * 3 + 3].copy_from_slice(x.row_slice(3 - t));
        }
        let mut tape = Tape::new();
        let w = params.bind(&mut tape, &store, false);
        let (a, b) = (tape.constant(x), tape.constant(reversed));
        let ha = temporal_encode(&mut tape, a, &w, 4).unwrap();
        let hb = temporal_encode(&mut tape, b, &w, 4).unwrap();
        let diff: f64 = tape
            .value(ha)
            .data()
            .iter()
            .zip(tape.value(hb).data())
            .map(|(p, q)| (p - q).abs())
            .sum();
        assert!(diff > 1e-9, "seed {seed}");
    }
}

fn small_model(seed: u64) -> SgeModel {
    let cfg = SgeConfig {
        layers: 2,
        hidden: 6,
        d_clip: 5,
    };
    SgeModel::new(cfg, &mut XorShiftRng::new(seed)).unwrap()
}

#[test]
fn forward_is_pure_fixed_length_and_bounded() {
    let seqs = synthetic_sequences(12, 0.3, 4);
    let model = small_model(1);
    let a = sge_forward(&seqs[0], &model).unwrap();
    assert_eq!(a, sge_forward(&seqs[0], &model).unwrap());
    let mut sizes = std::collections::BTreeSet::new();
    for s in seqs.iter().take(5) {
        let nodes: usize = s.graphs.iter().map(|g| g.nodes.len()).sum();
        sizes.insert(nodes);
        let e = sge_forward(s, &model).unwrap();
        assert_eq!(e.len(), 5);
        assert!(e.iter().all(|v| v.is_finite() && v.abs() < 1.0));
    }
    assert!(sizes.len() > 1, "clips should differ in size");

    let batched = sge_embed_all(&seqs, &model, 5).unwrap();
    for (s, b) in seqs.iter().zip(&batched) {
        let single = sge_forward(s, &model).unwrap();
        assert!(single.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}

#[test]
fn varied_frame_counts() {
    let seqs = synthetic_sequences(4, 0.3, 8);
    let model = small_model(2);
    for t in 1..=5 {
        let mut s = seqs[0].clone();
        s.graphs.truncate(t);
        assert_eq!(sge_forward(&s, &model).unwrap().len(), 5);
    }
    let mut short = seqs[1].clone();
    short.graphs.truncate(2);
    assert!(matches!(GraphBatch::new(&[&seqs[0], &short]), Err(Error::Contract(_))));
    let mut empty = seqs[2].clone();
    empty.graphs.clear();
    assert!(sge_forward(&empty, &model).is_err());
}

#[test]
fn full_stack_gradients() {
    let seqs = synthetic_sequences(6, 0.3, 12);
    let refs: Vec<&TemporalGraphSequence> = seqs.iter().take(3).collect();
    let batch = GraphBatch::new(&refs).unwrap();
    let labels: Vec<usize> = refs.iter().map(|s| s.label.index()).collect();
    for seed in 0..10 {
        let model = small_model(seed);
        let head = PretrainHead::new(5, &mut XorShiftRng::new(seed + 50));
        let err = max_store_grad_error(
            &model,
            |m: &mut SgeModel| &mut m.store,
            |tape, m| {
                let emb = m.bind(tape, true).forward(tape, &batch)?;
                let logits = head.logits(tape, emb, false)?;
                tape.softmax_cross_entropy(logits, &labels)
            },
            6,
        );
        assert!(err < FD_TOLERANCE, "seed {seed}: {err}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let model = small_model(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sge.ckpt");
    model.save(&path).unwrap();
    let back = SgeModel::load(model.config.clone(), &path).unwrap();
    assert_eq!(back.store.checksum(), model.store.checksum());
    let wrong = SgeConfig {
        hidden: 7,
        ..model.config.clone()
    };
    assert!(SgeModel::load(wrong, &path).is_err());
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let seqs = synthetic_sequences(16, 0.3, 1);
    let model = small_model(4);
    let before = model.store.checksum();
    let cfg = PretrainConfig {
        epochs: 2,
        learning_rate: 0.0,
        batch_size: 8,
        ..PretrainConfig::default()
    };
    let out = sge_pretrain(&seqs, &seqs, model, &cfg, 0).unwrap();
    assert_eq!(out.model.store.checksum(), before);
    assert_eq!(out.curve.len(), 2);
}

#[test]
fn pretraining_rejects_missing_class() {
    let seqs: Vec<_> = synthetic_sequences(16, 0.3, 1)
        .into_iter()
        .filter(|s| s.label.index() != 2)
        .collect();
    let r = sge_pretrain(&seqs, &[], small_model(0), &PretrainConfig::default(), 0);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn overfits_ten_examples_with_monotone_loss() {
    let all = synthetic_sequences(40, 0.3, 21);
    let mut picked = Vec::new();
    for class in crate::data::AccidentClass::ALL {
        picked.extend(all.iter().filter(|s| s.label == class).take(3).cloned());
    }
    picked.truncate(10);
    let cfg = PretrainConfig {
        epochs: 300,
        learning_rate: 1e-2,
        batch_size: 10,
        ..PretrainConfig::default()
    };
    let model = SgeModel::new(
        SgeConfig {
            layers: 2,
            hidden: 16,
            d_clip: 16,
        },
        &mut XorShiftRng::new(0),
    )
    .unwrap();
    let out = sge_pretrain(&picked, &[], model, &cfg, 0).unwrap();
    let losses: Vec<f64> = out.curve.iter().map(|e| e.train_loss).collect();
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
    }
    assert!(*losses.last().unwrap() < 0.01, "final loss {}", losses.last().unwrap());
}
