//! Two-level gated story model.
//!
//! A word-gated fact encoder turns each fact into a vector; a fact-gated
//! stacked LSTM consumes those vectors concatenated with the averaged
//! question embedding; an LSTM decoder emits the answer token by token,
//! ending at `<EOS>`. Word gates expose which tokens mattered, fact gates
//! which facts.

use serde::{Deserialize, Serialize};

use crate::cells::{
    init_matrix, lstm_step, run_gated_sequence, stacked_gated_step_with, zero_state, GateKind,
    GatedLstm, GatedLstmNodes, LstmParams, State, StackedGatedParams, StackedGatedNodes,
};
use crate::data::{EncodedStory, EOS_ID};
use crate::dropout::Mode;
use crate::graph::{Graph, GraphError, NodeId};
use crate::params::{self, ParamBlock};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HgConfig {
    pub vocab: usize,
    pub d_emb: usize,
    pub h_fact: usize,
    pub h_question: usize,
    pub h_hl: usize,
    pub hl_layers: usize,
    pub h_dec: usize,
    pub gate: GateKind,
    /// Concatenate the question encoder's final state into the high-level
    /// input alongside the question average.
    pub use_question_final: bool,
    pub dropout_input: f64,
    pub dropout_hl: f64,
}

impl HgConfig {
    /// Reference hyperparameters: 50-d embeddings, fact hidden 30,
    /// 6 high-level layers of hidden 20, quadratic gates, dropout 0.3/0.5.
    pub fn new(vocab: usize) -> Self {
        HgConfig {
            vocab,
            d_emb: 50,
            h_fact: 30,
            h_question: 30,
            h_hl: 20,
            hl_layers: 6,
            h_dec: 20,
            gate: GateKind::Quad,
            use_question_final: false,
            dropout_input: 0.3,
            dropout_hl: 0.5,
        }
    }

    /// Width of the high-level input vector: question average plus fact
    /// vector, plus the question final state when configured.
    pub fn hl_input_dim(&self) -> usize {
        self.d_emb
            + self.h_fact
            + if self.use_question_final {
                self.h_question
            } else {
                0
            }
    }
}

/// Answer decoder: plain LSTM over shared embeddings, initialized from the
/// high-level state through learned affine maps, with a score projection
/// over the vocabulary.
#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub lstm: LstmParams,
    pub init_m_w: Tensor,
    pub init_m_b: Tensor,
    pub init_y_w: Tensor,
    pub init_y_b: Tensor,
    pub out_proj: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderNodes {
    pub lstm: crate::cells::LstmNodes,
    pub init_m_w: NodeId,
    pub init_m_b: NodeId,
    pub init_y_w: NodeId,
    pub init_y_b: NodeId,
    pub out_proj: NodeId,
}

impl DecoderParams {
    /// `ctx_dim` is the width of the encoding the initial state is mapped
    /// from; `h_dec` the decoder's own hidden width.
    pub fn new(
        d_emb: usize,
        ctx_dim: usize,
        h_dec: usize,
        vocab: usize,
        rng: &mut RngStream,
    ) -> Self {
        DecoderParams {
            lstm: LstmParams::new(d_emb, h_dec, rng),
            init_m_w: init_matrix(h_dec, ctx_dim, ctx_dim, rng),
            init_m_b: Tensor::zeros(h_dec, 1),
            init_y_w: init_matrix(h_dec, ctx_dim, ctx_dim, rng),
            init_y_b: Tensor::zeros(h_dec, 1),
            out_proj: init_matrix(vocab, h_dec, h_dec, rng),
        }
    }
}

impl ParamBlock for DecoderParams {
    type Nodes = DecoderNodes;

    fn push_names(&self, prefix: &str, out: &mut Vec<String>) {
        self.lstm.push_names(&format!("{prefix}lstm."), out);
        for n in ["init_m_w", "init_m_b", "init_y_w", "init_y_b", "out_proj"] {
            out.push(format!("{prefix}{n}"));
        }
    }

    fn push_tensors<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        self.lstm.push_tensors(out);
        out.extend([
            &self.init_m_w,
            &self.init_m_b,
            &self.init_y_w,
            &self.init_y_b,
            &self.out_proj,
        ]);
    }

    fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.lstm.push_tensors_mut(out);
        out.extend([
            &mut self.init_m_w,
            &mut self.init_m_b,
            &mut self.init_y_w,
            &mut self.init_y_b,
            &mut self.out_proj,
        ]);
    }

    fn bind(&self, g: &mut Graph, ids: &mut Vec<NodeId>) -> DecoderNodes {
        let lstm = self.lstm.bind(g, ids);
        let mut leaf = |t: &Tensor| {
            let id = g.leaf(t.clone());
            ids.push(id);
            id
        };
        DecoderNodes {
            lstm,
            init_m_w: leaf(&self.init_m_w),
            init_m_b: leaf(&self.init_m_b),
            init_y_w: leaf(&self.init_y_w),
            init_y_b: leaf(&self.init_y_b),
            out_proj: leaf(&self.out_proj),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HgParams {
    pub cfg: HgConfig,
    pub embeddings: Tensor,
    pub fact: GatedLstm,
    pub question: GatedLstm,
    pub hl: StackedGatedParams,
    pub decoder: DecoderParams,
}

#[derive(Clone, Debug)]
pub struct HgNodes {
    pub embeddings: NodeId,
    pub fact: GatedLstmNodes,
    pub question: GatedLstmNodes,
    pub hl: StackedGatedNodes,
    pub decoder: DecoderNodes,
}

impl HgParams {
    pub fn new(cfg: HgConfig, rng: &mut RngStream) -> Self {
        assert!(cfg.vocab >= 3, "vocabulary must at least hold the specials");
        assert!(cfg.hl_layers >= 1);
        let embeddings = init_matrix(cfg.vocab, cfg.d_emb, cfg.d_emb, rng);
        let fact = GatedLstm::new(cfg.gate, cfg.d_emb, cfg.h_fact, rng);
        let question = GatedLstm::new(cfg.gate, cfg.d_emb, cfg.h_question, rng);
        let hl = StackedGatedParams::new(cfg.gate, cfg.hl_input_dim(), cfg.h_hl, cfg.hl_layers, rng);
        let decoder = DecoderParams::new(cfg.d_emb, cfg.h_hl, cfg.h_dec, cfg.vocab, rng);
        HgParams {
            cfg,
            embeddings,
            fact,
            question,
            hl,
            decoder,
        }
    }
}

impl ParamBlock for HgParams {
    type Nodes = HgNodes;

    fn push_names(&self, prefix: &str, out: &mut Vec<String>) {
        out.push(format!("{prefix}embeddings"));
        self.fact.push_names(&format!("{prefix}fact."), out);
        self.question.push_names(&format!("{prefix}question."), out);
        self.hl.push_names(&format!("{prefix}hl."), out);
        self.decoder.push_names(&format!("{prefix}decoder."), out);
    }

    fn push_tensors<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        out.push(&self.embeddings);
        self.fact.push_tensors(out);
        self.question.push_tensors(out);
        self.hl.push_tensors(out);
        self.decoder.push_tensors(out);
    }

    fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.embeddings);
        self.fact.push_tensors_mut(out);
        self.question.push_tensors_mut(out);
        self.hl.push_tensors_mut(out);
        self.decoder.push_tensors_mut(out);
    }

    fn bind(&self, g: &mut Graph, ids: &mut Vec<NodeId>) -> HgNodes {
        let embeddings = g.leaf(self.embeddings.clone());
        ids.push(embeddings);
        HgNodes {
            embeddings,
            fact: self.fact.bind(g, ids),
            question: self.question.bind(g, ids),
            hl: self.hl.bind(g, ids),
            decoder: self.decoder.bind(g, ids),
        }
    }
}

pub fn embed_tokens(
    g: &mut Graph,
    embeddings: NodeId,
    ids: &[usize],
) -> Result<Vec<NodeId>, GraphError> {
    ids.iter().map(|&i| g.embed_row(embeddings, i)).collect()
}

/// Encode one fact: embedded tokens through the word-gated cell. Returns the
/// final hidden state and the per-word gate nodes.
pub fn encode_fact_graph(
    g: &mut Graph,
    nodes: &HgNodes,
    cfg: &HgConfig,
    ids: &[usize],
    mode: &mut Mode,
) -> Result<(NodeId, Vec<NodeId>), GraphError> {
    if ids.is_empty() {
        return Err(GraphError::EmptyInput { op: "encode_fact" });
    }
    let embeds = embed_tokens(g, nodes.embeddings, ids)?;
    let mut xs = Vec::with_capacity(embeds.len());
    for e in embeds {
        xs.push(mode.dropout(g, e, cfg.dropout_input)?);
    }
    let start = zero_state(g, cfg.h_fact);
    let (states, gates) = run_gated_sequence(g, &nodes.fact, &xs, start)?;
    Ok((states.last().expect("nonempty sequence").y, gates))
}

#[derive(Clone, Copy, Debug)]
pub struct QuestionEncoding {
    /// Mean of the question word embeddings.
    pub q_avg: NodeId,
    /// Final hidden state of the gated question encoder.
    pub q_final: NodeId,
}

/// Encode the question. The embedding mean is summed in sorted-id order so
/// it is exactly invariant to word order; the gated encoder runs in the
/// original order.
pub fn encode_question_graph(
    g: &mut Graph,
    nodes: &HgNodes,
    cfg: &HgConfig,
    ids: &[usize],
    mode: &mut Mode,
) -> Result<QuestionEncoding, GraphError> {
    if ids.is_empty() {
        return Err(GraphError::EmptyInput { op: "encode_question" });
    }
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let mean_embeds = embed_tokens(g, nodes.embeddings, &sorted)?;
    let mut acc = mean_embeds[0];
    for &e in &mean_embeds[1..] {
        acc = g.add(acc, e)?;
    }
    let q_avg = g.scale(acc, 1.0 / ids.len() as f64);

    let embeds = embed_tokens(g, nodes.embeddings, ids)?;
    let mut xs = Vec::with_capacity(embeds.len());
    for e in embeds {
        xs.push(mode.dropout(g, e, cfg.dropout_input)?);
    }
    let start = zero_state(g, cfg.h_question);
    let (states, _) = run_gated_sequence(g, &nodes.question, &xs, start)?;
    Ok(QuestionEncoding {
        q_avg,
        q_final: states.last().expect("nonempty sequence").y,
    })
}

/// Node handles produced by encoding one story.
#[derive(Clone, Debug)]
pub struct StoryGraph {
    pub fact_vectors: Vec<NodeId>,
    pub word_gates: Vec<Vec<NodeId>>,
    pub fact_gates: Vec<NodeId>,
    pub hl_final: NodeId,
}

/// Encode facts, condition on the question, and run the high-level stack.
/// The high-level input per fact is `[q_avg ∥ fact_vector]` (plus `q_final`
/// when configured) and its gate sees that full vector.
pub fn encode_story_graph(
    g: &mut Graph,
    nodes: &HgNodes,
    cfg: &HgConfig,
    story: &EncodedStory,
    mode: &mut Mode,
) -> Result<StoryGraph, GraphError> {
    if story.facts.is_empty() {
        return Err(GraphError::EmptyInput { op: "encode_story" });
    }
    let q = encode_question_graph(g, nodes, cfg, &story.question, mode)?;

    let mut fact_vectors = Vec::with_capacity(story.facts.len());
    let mut word_gates = Vec::with_capacity(story.facts.len());
    for fact in &story.facts {
        let (v, wg) = encode_fact_graph(g, nodes, cfg, fact, mode)?;
        fact_vectors.push(v);
        word_gates.push(wg);
    }

    let mut hl_state: Vec<State> = (0..cfg.hl_layers).map(|_| zero_state(g, cfg.h_hl)).collect();
    let mut fact_gates = Vec::with_capacity(story.facts.len());
    for &fv in &fact_vectors {
        let x = if cfg.use_question_final {
            g.concat_rows(&[q.q_avg, fv, q.q_final])?
        } else {
            g.concat_rows(&[q.q_avg, fv])?
        };
        let (next, gate) = stacked_gated_step_with(g, &nodes.hl, x, &hl_state, |g, _, input| {
            mode.dropout(g, input, cfg.dropout_hl)
        })?;
        hl_state = next;
        fact_gates.push(gate);
    }

    Ok(StoryGraph {
        fact_vectors,
        word_gates,
        fact_gates,
        hl_final: hl_state.last().expect("at least one layer").y,
    })
}

fn decoder_start(
    g: &mut Graph,
    dec: &DecoderNodes,
    context: NodeId,
) -> Result<State, GraphError> {
    let mw = g.matmul(dec.init_m_w, context)?;
    let m = g.add(mw, dec.init_m_b)?;
    let yw = g.matmul(dec.init_y_w, context)?;
    let y = g.add(yw, dec.init_y_b)?;
    Ok(State { m, y })
}

fn decode_step(
    g: &mut Graph,
    dec: &DecoderNodes,
    embeddings: NodeId,
    state: &State,
    input_id: usize,
) -> Result<(State, NodeId), GraphError> {
    let x = g.embed_row(embeddings, input_id)?;
    let next = lstm_step(g, &dec.lstm, x, state)?;
    let scores = g.matmul(dec.out_proj, next.y)?;
    Ok((next, scores))
}

pub(crate) fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decode result. `scores` has one entry per emitted position,
/// including the final `<EOS>` (or the truncation point).
#[derive(Clone, Debug)]
pub struct DecodedAnswer {
    pub tokens: Vec<usize>,
    pub scores: Vec<NodeId>,
    pub truncated: bool,
}

/// Free-running greedy decoding from the story representation. Emission
/// stops at `<EOS>` or after `max_len` scores; argmax ties go to the lowest
/// token id.
pub fn decode_answer_graph(
    g: &mut Graph,
    dec: &DecoderNodes,
    embeddings: NodeId,
    context: NodeId,
    max_len: usize,
) -> Result<DecodedAnswer, GraphError> {
    if max_len == 0 {
        return Err(GraphError::EmptyInput { op: "decode_answer" });
    }
    let mut state = decoder_start(g, dec, context)?;
    let mut input_id = EOS_ID;
    let mut tokens = Vec::new();
    let mut scores = Vec::new();
    let mut truncated = true;
    for _ in 0..max_len {
        let (next, s) = decode_step(g, dec, embeddings, &state, input_id)?;
        state = next;
        scores.push(s);
        let emitted = argmax_lowest(g.value(s).data());
        if emitted == EOS_ID {
            truncated = false;
            break;
        }
        tokens.push(emitted);
        input_id = emitted;
    }
    Ok(DecodedAnswer {
        tokens,
        scores,
        truncated,
    })
}

/// Teacher-forced decoding for training: inputs are `<EOS>` followed by the
/// reference answer, targets are the answer followed by `<EOS>`. Returns one
/// score vector per target.
pub fn teacher_forced_scores(
    g: &mut Graph,
    dec: &DecoderNodes,
    embeddings: NodeId,
    context: NodeId,
    answer: &[usize],
) -> Result<(Vec<NodeId>, Vec<usize>), GraphError> {
    let mut state = decoder_start(g, dec, context)?;
    let mut scores = Vec::with_capacity(answer.len() + 1);
    for &input_id in std::iter::once(&EOS_ID).chain(answer.iter()) {
        let (next, s) = decode_step(g, dec, embeddings, &state, input_id)?;
        state = next;
        scores.push(s);
    }
    let targets: Vec<usize> = answer.iter().copied().chain(std::iter::once(EOS_ID)).collect();
    Ok((scores, targets))
}

/// Value-level story encoding for evaluation and inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct StoryEncoding {
    pub fact_vectors: Vec<Tensor>,
    pub word_gates: Vec<Vec<f64>>,
    pub fact_gates: Vec<f64>,
    pub hl_final: Tensor,
}

pub fn encode_story(params: &HgParams, story: &EncodedStory) -> Result<StoryEncoding, GraphError> {
    let mut g = Graph::new();
    let (nodes, _) = params::bind_all(params, &mut g);
    let sg = encode_story_graph(&mut g, &nodes, &params.cfg, story, &mut Mode::Eval)?;
    Ok(StoryEncoding {
        fact_vectors: sg.fact_vectors.iter().map(|&n| g.value(n).clone()).collect(),
        word_gates: sg
            .word_gates
            .iter()
            .map(|ws| ws.iter().map(|&n| g.value(n).item()).collect())
            .collect(),
        fact_gates: sg.fact_gates.iter().map(|&n| g.value(n).item()).collect(),
        hl_final: g.value(sg.hl_final).clone(),
    })
}

/// Encode a story and decode an answer, returning emitted token ids and
/// whether decoding was truncated at `max_len`.
pub fn answer_story(
    params: &HgParams,
    story: &EncodedStory,
    max_len: usize,
) -> Result<(Vec<usize>, bool), GraphError> {
    let mut g = Graph::new();
    let (nodes, _) = params::bind_all(params, &mut g);
    let sg = encode_story_graph(&mut g, &nodes, &params.cfg, story, &mut Mode::Eval)?;
    let decoded =
        decode_answer_graph(&mut g, &nodes.decoder, nodes.embeddings, sg.hl_final, max_len)?;
    Ok((decoded.tokens, decoded.truncated))
}
