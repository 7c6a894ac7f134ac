//! Task-level models assembled from the gated cells: a sequence classifier,
//! a two-tower paraphrase scorer, and a plain sequence reader that serves as
//! an ungated baseline for story answering.

use crate::cells::{
    init_matrix, lstm_step, run_gated_sequence, zero_state, GateKind, GatedLstm, GatedLstmNodes,
    LstmNodes, LstmParams,
};
use crate::data::EncodedStory;
use crate::dropout::Mode;
use crate::graph::{Graph, GraphError, NodeId};
use crate::hierarchical::{
    argmax_lowest, decode_answer_graph, embed_tokens, teacher_forced_scores, DecoderNodes,
    DecoderParams,
};
use crate::params::{self, ParamBlock};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct ClassifierConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub gate: GateKind,
    pub dropout: f64,
}

/// Gated recurrent encoder with a linear readout over the final hidden
/// state.
#[derive(Clone, Debug)]
pub struct SequenceClassifier {
    pub cfg: ClassifierConfig,
    pub embeddings: Tensor,
    pub encoder: GatedLstm,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierNodes {
    pub embeddings: NodeId,
    pub encoder: GatedLstmNodes,
    pub w_out: NodeId,
    pub b_out: NodeId,
}

impl SequenceClassifier {
    pub fn new(cfg: ClassifierConfig, rng: &mut RngStream) -> Self {
        assert!(cfg.classes >= 2, "need at least two classes");
        SequenceClassifier {
            cfg,
            embeddings: init_matrix(cfg.vocab, cfg.embed_dim, cfg.embed_dim, rng),
            encoder: GatedLstm::new(cfg.gate, cfg.embed_dim, cfg.hidden, rng),
            w_out: init_matrix(cfg.classes, cfg.hidden, cfg.hidden, rng),
            b_out: Tensor::zeros(cfg.classes, 1),
        }
    }

    /// Argmax class under eval-mode inference; ties go to the lowest class.
    pub fn predict(&self, tokens: &[usize]) -> Result<usize, GraphError> {
        let mut g = Graph::new();
        let (nodes, _) = params::bind_all(self, &mut g);
        let run = classify_graph(&mut g, &nodes, &self.cfg, tokens, &mut Mode::Eval)?;
        Ok(argmax_lowest(g.value(run.scores).data()))
    }

    /// Eval-mode input gate value at each position.
    pub fn gate_profile(&self, tokens: &[usize]) -> Result<Vec<f64>, GraphError> {
        let mut g = Graph::new();
        let (nodes, _) = params::bind_all(self, &mut g);
        let run = classify_graph(&mut g, &nodes, &self.cfg, tokens, &mut Mode::Eval)?;
        Ok(run.gates.iter().map(|&n| g.value(n).item()).collect())
    }
}

impl ParamBlock for SequenceClassifier {
    type Nodes = ClassifierNodes;

    fn push_names(&self, prefix: &str, out: &mut Vec<String>) {
        out.push(format!("{prefix}embeddings"));
        self.encoder.push_names(&format!("{prefix}encoder."), out);
        out.push(format!("{prefix}w_out"));
        out.push(format!("{prefix}b_out"));
    }

    fn push_tensors<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        out.push(&self.embeddings);
        self.encoder.push_tensors(out);
        out.push(&self.w_out);
        out.push(&self.b_out);
    }

    fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.embeddings);
        self.encoder.push_tensors_mut(out);
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
    }

    fn bind(&self, g: &mut Graph, ids: &mut Vec<NodeId>) -> ClassifierNodes {
        let embeddings = g.leaf(self.embeddings.clone());
        ids.push(embeddings);
        let encoder = self.encoder.bind(g, ids);
        let w_out = g.leaf(self.w_out.clone());
        ids.push(w_out);
        let b_out = g.leaf(self.b_out.clone());
        ids.push(b_out);
        ClassifierNodes {
            embeddings,
            encoder,
            w_out,
            b_out,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierRun {
    pub scores: NodeId,
    pub gates: Vec<NodeId>,
}

/// Embed, dropout, encode, and project one sequence to class scores.
pub fn classify_graph(
    g: &mut Graph,
    nodes: &ClassifierNodes,
    cfg: &ClassifierConfig,
    tokens: &[usize],
    mode: &mut Mode,
) -> Result<ClassifierRun, GraphError> {
    if tokens.is_empty() {
        return Err(GraphError::EmptyInput { op: "classify" });
    }
    let embeds = embed_tokens(g, nodes.embeddings, tokens)?;
    let mut xs = Vec::with_capacity(embeds.len());
    for e in embeds {
        xs.push(mode.dropout(g, e, cfg.dropout)?);
    }
    let start = zero_state(g, cfg.hidden);
    let (states, gates) = run_gated_sequence(g, &nodes.encoder, &xs, start)?;
    let y = states.last().expect("nonempty sequence").y;
    let wy = g.matmul(nodes.w_out, y)?;
    let scores = g.add(wy, nodes.b_out)?;
    Ok(ClassifierRun { scores, gates })
}

#[derive(Clone, Copy, Debug)]
pub struct ScorerConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub gate: GateKind,
    pub dropout: f64,
}

/// Two gated encoders over a shared embedding table; sentence similarity is
/// the cosine of their final hidden states.
#[derive(Clone, Debug)]
pub struct ParaphraseScorer {
    pub cfg: ScorerConfig,
    pub embeddings: Tensor,
    pub left: GatedLstm,
    pub right: GatedLstm,
}

#[derive(Clone, Copy, Debug)]
pub struct ScorerNodes {
    pub embeddings: NodeId,
    pub left: GatedLstmNodes,
    pub right: GatedLstmNodes,
}

impl ParaphraseScorer {
    pub fn new(cfg: ScorerConfig, rng: &mut RngStream) -> Self {
        ParaphraseScorer {
            cfg,
            embeddings: init_matrix(cfg.vocab, cfg.embed_dim, cfg.embed_dim, rng),
            left: GatedLstm::new(cfg.gate, cfg.embed_dim, cfg.hidden, rng),
            right: GatedLstm::new(cfg.gate, cfg.embed_dim, cfg.hidden, rng),
        }
    }

    /// Eval-mode cosine between the two sentence encodings.
    pub fn cosine(&self, left: &[usize], right: &[usize]) -> Result<f64, GraphError> {
        let mut g = Graph::new();
        let (nodes, _) = params::bind_all(self, &mut g);
        let run = encode_pair_graph(&mut g, &nodes, &self.cfg, left, right, &mut Mode::Eval)?;
        let hl = g.value(run.h_left);
        let hr = g.value(run.h_right);
        let (nl, nr) = (hl.sq_norm().sqrt(), hr.sq_norm().sqrt());
        if nl == 0.0 || nr == 0.0 {
            return Err(GraphError::Domain {
                op: "cosine",
                value: 0.0,
            });
        }
        let dot: f64 = hl
            .data()
            .iter()
            .zip(hr.data().iter())
            .map(|(a, b)| a * b)
            .sum();
        Ok(dot / (nl * nr))
    }
}

impl ParamBlock for ParaphraseScorer {
    type Nodes = ScorerNodes;

    fn push_names(&self, prefix: &str, out: &mut Vec<String>) {
        out.push(format!("{prefix}embeddings"));
        self.left.push_names(&format!("{prefix}left."), out);
        self.right.push_names(&format!("{prefix}right."), out);
    }

    fn push_tensors<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        out.push(&self.embeddings);
        self.left.push_tensors(out);
        self.right.push_tensors(out);
    }

    fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.embeddings);
        self.left.push_tensors_mut(out);
        self.right.push_tensors_mut(out);
    }

    fn bind(&self, g: &mut Graph, ids: &mut Vec<NodeId>) -> ScorerNodes {
        let embeddings = g.leaf(self.embeddings.clone());
        ids.push(embeddings);
        ScorerNodes {
            embeddings,
            left: self.left.bind(g, ids),
            right: self.right.bind(g, ids),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PairRun {
    pub h_left: NodeId,
    pub h_right: NodeId,
    pub gates_left: Vec<NodeId>,
    pub gates_right: Vec<NodeId>,
}

pub fn encode_pair_graph(
    g: &mut Graph,
    nodes: &ScorerNodes,
    cfg: &ScorerConfig,
    left: &[usize],
    right: &[usize],
    mode: &mut Mode,
) -> Result<PairRun, GraphError> {
    let encode = |g: &mut Graph,
                  tower: &GatedLstmNodes,
                  tokens: &[usize],
                  mode: &mut Mode|
     -> Result<(NodeId, Vec<NodeId>), GraphError> {
        if tokens.is_empty() {
            return Err(GraphError::EmptyInput { op: "encode_pair" });
        }
        let embeds = embed_tokens(g, nodes.embeddings, tokens)?;
        let mut xs = Vec::with_capacity(embeds.len());
        for e in embeds {
            xs.push(mode.dropout(g, e, cfg.dropout)?);
        }
        let start = zero_state(g, cfg.hidden);
        let (states, gates) = run_gated_sequence(g, tower, &xs, start)?;
        Ok((states.last().expect("nonempty sequence").y, gates))
    };
    let (h_left, gates_left) = encode(g, &nodes.left, left, mode)?;
    let (h_right, gates_right) = encode(g, &nodes.right, right, mode)?;
    Ok(PairRun {
        h_left,
        h_right,
        gates_left,
        gates_right,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct ReaderConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub h_dec: usize,
    pub dropout: f64,
}

/// Ungated baseline for story answering: one plain LSTM reads every fact
/// token and then the question, and the shared decoder emits the answer.
#[derive(Clone, Debug)]
pub struct PlainSeqReader {
    pub cfg: ReaderConfig,
    pub embeddings: Tensor,
    pub encoder: LstmParams,
    pub decoder: DecoderParams,
}

#[derive(Clone, Copy, Debug)]
pub struct ReaderNodes {
    pub embeddings: NodeId,
    pub encoder: LstmNodes,
    pub decoder: DecoderNodes,
}

impl PlainSeqReader {
    pub fn new(cfg: ReaderConfig, rng: &mut RngStream) -> Self {
        PlainSeqReader {
            cfg,
            embeddings: init_matrix(cfg.vocab, cfg.embed_dim, cfg.embed_dim, rng),
            encoder: LstmParams::new(cfg.embed_dim, cfg.hidden, rng),
            decoder: DecoderParams::new(cfg.embed_dim, cfg.hidden, cfg.h_dec, cfg.vocab, rng),
        }
    }

    pub fn answer(
        &self,
        story: &EncodedStory,
        max_len: usize,
    ) -> Result<(Vec<usize>, bool), GraphError> {
        let mut g = Graph::new();
        let (nodes, _) = params::bind_all(self, &mut g);
        let y = read_story_graph(&mut g, &nodes, &self.cfg, story, &mut Mode::Eval)?;
        let decoded = decode_answer_graph(&mut g, &nodes.decoder, nodes.embeddings, y, max_len)?;
        Ok((decoded.tokens, decoded.truncated))
    }
}

impl ParamBlock for PlainSeqReader {
    type Nodes = ReaderNodes;

    fn push_names(&self, prefix: &str, out: &mut Vec<String>) {
        out.push(format!("{prefix}embeddings"));
        self.encoder.push_names(&format!("{prefix}encoder."), out);
        self.decoder.push_names(&format!("{prefix}decoder."), out);
    }

    fn push_tensors<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        out.push(&self.embeddings);
        self.encoder.push_tensors(out);
        self.decoder.push_tensors(out);
    }

    fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.embeddings);
        self.encoder.push_tensors_mut(out);
        self.decoder.push_tensors_mut(out);
    }

    fn bind(&self, g: &mut Graph, ids: &mut Vec<NodeId>) -> ReaderNodes {
        let embeddings = g.leaf(self.embeddings.clone());
        ids.push(embeddings);
        ReaderNodes {
            embeddings,
            encoder: self.encoder.bind(g, ids),
            decoder: self.decoder.bind(g, ids),
        }
    }
}

/// Read all fact tokens in order, then the question tokens, through the
/// plain encoder; returns the final hidden state.
pub fn read_story_graph(
    g: &mut Graph,
    nodes: &ReaderNodes,
    cfg: &ReaderConfig,
    story: &EncodedStory,
    mode: &mut Mode,
) -> Result<NodeId, GraphError> {
    let tokens: Vec<usize> = story
        .facts
        .iter()
        .flatten()
        .chain(story.question.iter())
        .copied()
        .collect();
    if tokens.is_empty() {
        return Err(GraphError::EmptyInput { op: "read_story" });
    }
    let embeds = embed_tokens(g, nodes.embeddings, &tokens)?;
    let mut state = zero_state(g, cfg.hidden);
    for e in embeds {
        let x = mode.dropout(g, e, cfg.dropout)?;
        state = lstm_step(g, &nodes.encoder, x, &state)?;
    }
    Ok(state.y)
}

/// Teacher-forced score sequence for the reader baseline.
pub fn reader_teacher_scores(
    g: &mut Graph,
    nodes: &ReaderNodes,
    cfg: &ReaderConfig,
    story: &EncodedStory,
    mode: &mut Mode,
) -> Result<(Vec<NodeId>, Vec<usize>), GraphError> {
    let y = read_story_graph(g, nodes, cfg, story, mode)?;
    teacher_forced_scores(g, &nodes.decoder, nodes.embeddings, y, &story.answer)
}
