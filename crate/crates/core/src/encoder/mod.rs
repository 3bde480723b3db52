//! Scene graph encoder: relational graph convolution per frame, attention
//! pooling to one vector per frame and an LSTM over frames.
//!
//! Many graphs are encoded at once by stacking them block-diagonally; each
//! relation's normalized adjacency is stored compactly as a gather over
//! the nodes that actually receive that relation plus a scatter back.

mod pretrain;

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::numkit::{checkpoint, lstm_cell, LstmParams, LstmWeights, ParamId, ParameterStore, SparseMatrix, Tape, Tensor, Var};
use crate::rng::XorShiftRng;
use crate::scene_graph::{Relation, SceneGraph, TemporalGraphSequence, NODE_FEATURE_DIM};

pub use pretrain::{sge_pretrain, PretrainConfig, PretrainEpoch, PretrainOutcome};

pub const NUM_RELATIONS: usize = Relation::VOCABULARY.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgeConfig {
    /// Number of relational convolution layers.
    pub layers: usize,
    /// Output width of every convolution layer.
    pub hidden: usize,
    /// Clip embedding width (LSTM hidden size).
    pub d_clip: usize,
}

impl Default for SgeConfig {
    fn default() -> Self {
        SgeConfig {
            layers: 2,
            hidden: 64,
            d_clip: 64,
        }
    }
}

impl SgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.d_clip == 0 {
            return Err(Error::Config(format!("encoder sizes must be positive, got {self:?}")));
        }
        Ok(())
    }
}

/// One relation's normalized adjacency, restricted to receiving nodes.
#[derive(Debug, Clone)]
struct RelationBlock {
    relation: usize,
    /// `D x N`: row `k` averages the sources of receiving node `k`.
    gather: Arc<SparseMatrix>,
    /// `N x D`: places row `k` back at its node.
    scatter: Arc<SparseMatrix>,
}

/// Block-diagonal adjacency of one or more scene graphs.
#[derive(Debug, Clone)]
pub struct RelationalAdjacency {
    nodes: usize,
    blocks: Vec<RelationBlock>,
}

impl RelationalAdjacency {
    pub fn new(graphs: &[&SceneGraph]) -> Result<Self> {
        let mut nodes = 0;
        // relation -> destination -> sources
        let mut incoming: Vec<BTreeMap<usize, Vec<usize>>> = vec![BTreeMap::new(); NUM_RELATIONS];
        for g in graphs {
            let n = g.nodes.len();
            for e in &g.edges {
                if e.src >= n || e.dst >= n {
                    return Err(Error::Index(format!(
                        "edge {} -> {} in a graph with {n} nodes",
                        e.src, e.dst
                    )));
                }
                incoming[e.relation.index()]
                    .entry(nodes + e.dst)
                    .or_default()
                    .push(nodes + e.src);
            }
            nodes += n;
        }
        let mut blocks = Vec::new();
        for (relation, by_dst) in incoming.into_iter().enumerate() {
            if by_dst.is_empty() {
                continue;
            }
            let mut gather_rows = Vec::with_capacity(by_dst.len());
            let mut scatter_rows = vec![Vec::new(); nodes];
            for (k, (dst, srcs)) in by_dst.into_iter().enumerate() {
                let w = 1.0 / srcs.len() as f64;
                let mut row: BTreeMap<usize, f64> = BTreeMap::new();
                for s in srcs {
                    *row.entry(s).or_default() += w;
                }
                gather_rows.push(row.into_iter().collect());
                scatter_rows[dst].push((k, 1.0));
            }
            let d = gather_rows.len();
            blocks.push(RelationBlock {
                relation,
                gather: Arc::new(SparseMatrix::new(d, nodes, gather_rows)?),
                scatter: Arc::new(SparseMatrix::new(nodes, d, scatter_rows)?),
            });
        }
        Ok(RelationalAdjacency { nodes, blocks })
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    /// Dense `N x N` normalized adjacency of `relation`, row = receiver.
    pub fn dense(&self, relation: Relation) -> Vec<f64> {
        let mut out = vec![0.0; self.nodes * self.nodes];
        if let Some(b) = self.blocks.iter().find(|b| b.relation == relation.index()) {
            for (k, row) in b.gather.entries.iter().enumerate() {
                let dst = (0..self.nodes)
                    .find(|&i| b.scatter.entries[i].iter().any(|&(c, _)| c == k))
                    .expect("every gathered row is scattered");
                for &(src, w) in row {
                    out[dst * self.nodes + src] += w;
                }
            }
        }
        out
    }
}

/// Layer weights bound on a tape: self-loop plus one matrix per relation.
#[derive(Debug, Clone, Copy)]
pub struct MrgcnWeights {
    pub self_loop: Var,
    pub relations: [Var; NUM_RELATIONS],
}

/// `h_i' = σ(h_i W_self + Σ_r mean_{j→i by r} h_j W_r)`; `σ` is relu when
/// `activate`, identity otherwise.
pub fn mrgcn_layer(tape: &mut Tape, h: Var, adj: &RelationalAdjacency, w: &MrgcnWeights, activate: bool) -> Result<Var> {
    let n = tape.shape(h)[0];
    if n != adj.nodes {
        return Err(Error::dim("mrgcn_layer", tape.shape(h), &[adj.nodes]));
    }
    let mut out = tape.matmul(h, w.self_loop)?;
    for b in &adj.blocks {
        let agg = tape.spmm(b.gather.clone(), h)?;
        let msg = tape.matmul(agg, w.relations[b.relation])?;
        let placed = tape.spmm(b.scatter.clone(), msg)?;
        out = tape.add(out, placed)?;
    }
    if activate {
        tape.relu(out)
    } else {
        Ok(out)
    }
}

/// Attention pooling of node rows within each segment: scores
/// `s_i = tanh(h_i) · a`, softmax per segment, weighted sum of rows.
/// Returns one row per segment.
pub fn attention_pool(tape: &mut Tape, h: Var, a: Var, segments: Arc<Vec<Range<usize>>>) -> Result<Var> {
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Contract("attention pooling over an empty graph".into()));
    }
    let t = tape.tanh(h)?;
    let scores = tape.matmul(t, a)?;
    let alpha = tape.segment_softmax(scores, segments.clone())?;
    tape.segment_weighted_sum(alpha, h, segments)
}

/// Run the LSTM over the rows of `seq` (`T x d`) from a zero state and
/// return the final hidden state (`1 x d_hidden`).
pub fn temporal_encode(tape: &mut Tape, seq: Var, w: &LstmWeights, d_hidden: usize) -> Result<Var> {
    let t_len = tape.shape(seq)[0];
    if t_len == 0 {
        return Err(Error::Contract("temporal encoding of an empty sequence".into()));
    }
    let mut h = tape.constant(Tensor::zeros(&[1, d_hidden]));
    let mut c = tape.constant(Tensor::zeros(&[1, d_hidden]));
    for t in 0..t_len {
        let x = tape.slice_rows(seq, t, 1)?;
        (h, c) = lstm_cell(tape, x, h, c, w)?;
    }
    Ok(h)
}

/// Several clips with the same frame count, stacked for one forward pass.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    features: Tensor,
    adjacency: RelationalAdjacency,
    /// Node range of every frame, clip-major.
    frames: Arc<Vec<Range<usize>>>,
    /// Per time step, selection of that frame's row for every clip.
    steps: Vec<Arc<SparseMatrix>>,
    clips: usize,
}

impl GraphBatch {
    pub fn new(seqs: &[&TemporalGraphSequence]) -> Result<Self> {
        let first = seqs
            .first()
            .ok_or_else(|| Error::Contract("cannot encode an empty batch".into()))?;
        let t_len = first.graphs.len();
        if t_len == 0 {
            return Err(Error::Contract(format!("clip {} has no frames", first.clip_id)));
        }
        if let Some(s) = seqs.iter().find(|s| s.graphs.len() != t_len) {
            return Err(Error::Contract(format!(
                "clips in a batch must share a frame count: {} has {}, expected {t_len}",
                s.clip_id,
                s.graphs.len()
            )));
        }
        let graphs: Vec<&SceneGraph> = seqs.iter().flat_map(|s| s.graphs.iter()).collect();
        let mut data = Vec::new();
        let mut frames = Vec::with_capacity(graphs.len());
        let mut start = 0;
        for g in &graphs {
            if g.nodes.is_empty() {
                return Err(Error::Contract("scene graph without nodes".into()));
            }
            for node in &g.nodes {
                if node.features.len() != NODE_FEATURE_DIM {
                    return Err(Error::dim("node features", &[node.features.len()], &[NODE_FEATURE_DIM]));
                }
                data.extend_from_slice(&node.features);
            }
            frames.push(start..start + g.nodes.len());
            start += g.nodes.len();
        }
        let features = Tensor::new(vec![start, NODE_FEATURE_DIM], data)?;
        let adjacency = RelationalAdjacency::new(&graphs)?;
        let clips = seqs.len();
        let steps = (0..t_len)
            .map(|t| {
                let idx: Vec<usize> = (0..clips).map(|c| c * t_len + t).collect();
                SparseMatrix::selection(&idx, clips * t_len).map(Arc::new)
            })
            .collect::<Result<_>>()?;
        Ok(GraphBatch {
            features,
            adjacency,
            frames: Arc::new(frames),
            steps,
            clips,
        })
    }

    pub fn clips(&self) -> usize {
        self.clips
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerParams {
    self_loop: ParamId,
    relations: [ParamId; NUM_RELATIONS],
}

/// Encoder parameters and their layout inside a [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct SgeModel {
    pub config: SgeConfig,
    pub store: ParameterStore,
    layers: Vec<LayerParams>,
    attention: ParamId,
    lstm: LstmParams,
}

/// Encoder weights bound on a tape.
#[derive(Debug, Clone)]
pub struct BoundSge {
    layers: Vec<MrgcnWeights>,
    attention: Var,
    lstm: LstmWeights,
    d_clip: usize,
}

impl SgeModel {
    pub fn new(config: SgeConfig, rng: &mut XorShiftRng) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let mut layers = Vec::with_capacity(config.layers);
        let mut d_in = NODE_FEATURE_DIM;
        for l in 0..config.layers {
            let self_loop = store.add_glorot(format!("mrgcn{l}.self"), d_in, config.hidden, rng);
            let relations = Relation::VOCABULARY.map(|r| store.add_glorot(format!("mrgcn{l}.{}", r.name()), d_in, config.hidden, rng));
            layers.push(LayerParams { self_loop, relations });
            d_in = config.hidden;
        }
        let attention = store.add_glorot("attention.score", config.hidden, 1, rng);
        let lstm = LstmParams::init(&mut store, "lstm", config.hidden, config.d_clip, rng);
        Ok(SgeModel {
            config,
            store,
            layers,
            attention,
            lstm,
        })
    }

    /// Rebuild from a checkpoint written by [`SgeModel::save`].
    pub fn load(config: SgeConfig, path: &Path) -> Result<Self> {
        let saved = checkpoint::load(path)?;
        let mut model = SgeModel::new(config, &mut XorShiftRng::new(0))?;
        model.store.load_values_from(&saved)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    pub fn d_clip(&self) -> usize {
        self.config.d_clip
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundSge {
        let store = &self.store;
        let mut bind = |id: ParamId| {
            if trainable {
                tape.param(store, id)
            } else {
                tape.frozen(store, id)
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| MrgcnWeights {
                self_loop: bind(l.self_loop),
                relations: l.relations.map(&mut bind),
            })
            .collect();
        let attention = bind(self.attention);
        BoundSge {
            layers,
            attention,
            lstm: self.lstm.bind(tape, store, trainable),
            d_clip: self.config.d_clip,
        }
    }
}

impl BoundSge {
    /// Clip embeddings of a batch, `clips x d_clip`.
    pub fn forward(&self, tape: &mut Tape, batch: &GraphBatch) -> Result<Var> {
        let mut h = tape.constant(batch.features.clone());
        let last = self.layers.len() - 1;
        for (l, w) in self.layers.iter().enumerate() {
            h = mrgcn_layer(tape, h, &batch.adjacency, w, l != last)?;
        }
        let frames = attention_pool(tape, h, self.attention, batch.frames.clone())?;
        let mut hs = tape.constant(Tensor::zeros(&[batch.clips, self.d_clip]));
        let mut cs = tape.constant(Tensor::zeros(&[batch.clips, self.d_clip]));
        for sel in &batch.steps {
            let x = tape.spmm(sel.clone(), frames)?;
            (hs, cs) = lstm_cell(tape, x, hs, cs, &self.lstm)?;
        }
        Ok(hs)
    }
}

/// Clip embedding of one sequence.
pub fn sge_forward(seq: &TemporalGraphSequence, model: &SgeModel) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let batch = GraphBatch::new(&[seq])?;
    let out = bound.forward(&mut tape, &batch)?;
    Ok(tape.value(out).data().to_vec())
}

/// Embeddings of many sequences, evaluated in batches of `chunk` clips.
pub fn sge_embed_all(seqs: &[TemporalGraphSequence], model: &SgeModel, chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for part in seqs.chunks(chunk.max(1)) {
        let refs: Vec<&TemporalGraphSequence> = part.iter().collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let batch = GraphBatch::new(&refs)?;
        let emb = bound.forward(&mut tape, &batch)?;
        let value = tape.value(emb);
        out.extend((0..part.len()).map(|i| value.row_slice(i).to_vec()));
    }
    Ok(out)
}

/// Linear classifier used only while pretraining the encoder.
#[derive(Debug, Clone)]
pub struct PretrainHead {
    pub store: ParameterStore,
    weight: ParamId,
    bias: ParamId,
}

impl PretrainHead {
    pub fn new(d_clip: usize, rng: &mut XorShiftRng) -> Self {
        let mut store = ParameterStore::new();
        let weight = store.add_glorot("pretrain.weight", d_clip, NUM_CLASSES, rng);
        let bias = store.add_zeros("pretrain.bias", &[NUM_CLASSES]);
        PretrainHead { store, weight, bias }
    }

    pub fn logits(&self, tape: &mut Tape, emb: Var, trainable: bool) -> Result<Var> {
        let (w, b) = if trainable {
            (tape.param(&self.store, self.weight), tape.param(&self.store, self.bias))
        } else {
            (tape.frozen(&self.store, self.weight), tape.frozen(&self.store, self.bias))
        };
        let z = tape.matmul(emb, w)?;
        tape.add_bias(z, b)
    }
}

#[cfg(test)]
mod tests;
