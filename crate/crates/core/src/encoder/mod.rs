//! Utterance encoder, node initialization and graph encoders.

mod gat;

use rand::Rng;

pub use gat::{GatLayer, GraphEncoder};

use crate::corpus::{Conversation, Vocabulary};
use crate::graph::{ActionGraph, DiscourseGraph, EdgeList};
use crate::nn::{sinusoidal_positions, FeedForward, LayerNorm, MultiHeadAttention};
use crate::tensor::{Mask, ParamId, ParamStore, Tape, Var};
use crate::{Error, Result};

/// Post-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ln_attn: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct UtteranceEncoder {
    /// Token embedding table `[vocab, d]`, shared with the decoder input.
    pub embed: ParamId,
    pub embed_ln: LayerNorm,
    pub layers: Vec<EncoderLayer>,
    pub dropout: f64,
    pub max_positions: usize,
}

/// Looks up `ids`, adds sinusoidal positions. Returns `[len, d]`.
pub fn embed_tokens(
    tape: &mut Tape,
    store: &ParamStore,
    embed: ParamId,
    ids: &[usize],
    max_positions: usize,
) -> Result<Var> {
    let shape = store.value(embed).shape();
    let (vocab, d) = (shape[0], shape[1]);
    if ids.len() > max_positions {
        return Err(Error::TooLong {
            len: ids.len(),
            max: max_positions,
        });
    }
    if let Some(&id) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::TokenOutOfRange { id, vocab });
    }
    let table = tape.param(store, embed);
    let tokens = tape.index_select(table, ids)?;
    let pos = tape.constant(sinusoidal_positions(ids.len(), d));
    Ok(tape.add(tokens, pos)?)
}

impl UtteranceEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        embed: ParamId,
        d: usize,
        ffn_dim: usize,
        layers: usize,
        heads: usize,
        dropout: f64,
        max_positions: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let embed_ln = LayerNorm::new(store, "enc.embed_ln", d)?;
        let layers = (0..layers)
            .map(|l| {
                let p = format!("enc.layer{l}");
                Ok(EncoderLayer {
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, heads, rng)?,
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d)?,
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, ffn_dim, d, rng)?,
                    ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), d)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            embed,
            embed_ln,
            layers,
            dropout,
            max_positions,
        })
    }

    /// Encodes one flat id sequence. Positions with `valid[i] == false` are
    /// excluded as attention keys.
    pub fn encode_ids(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize], valid: &[bool]) -> Result<Var> {
        let x = embed_tokens(tape, store, self.embed, ids, self.max_positions)?;
        let mut x = self.embed_ln.forward(tape, store, x)?;
        x = tape.dropout(x, self.dropout)?;
        let mask = valid.iter().any(|v| !v).then(|| Mask::keys(valid));
        for layer in &self.layers {
            let a = layer.attn.forward(tape, store, x, x, mask.as_ref())?;
            let a = tape.dropout(a, self.dropout)?;
            let r = tape.add(x, a)?;
            x = layer.ln_attn.forward(tape, store, r)?;
            let f = layer.ffn.forward(tape, store, x, self.dropout)?;
            let f = tape.dropout(f, self.dropout)?;
            let r = tape.add(x, f)?;
            x = layer.ln_ffn.forward(tape, store, r)?;
        }
        Ok(x)
    }
}

/// Encoder output over the flattened conversation.
#[derive(Clone, Debug)]
pub struct EncodedConversation {
    /// `[positions, d]`
    pub token_states: Var,
    pub token_mask: Vec<bool>,
    /// Flat position of each utterance's start token.
    pub utterance_offsets: Vec<usize>,
    /// `[utterances, d]`: the start-token states.
    pub anchors: Var,
}

/// Concatenates tokenized utterances with a separator between neighbours.
pub fn flatten_conversation(conv: &Conversation) -> (Vec<usize>, Vec<usize>) {
    let mut ids = Vec::new();
    let mut offsets = Vec::with_capacity(conv.utterances.len());
    for (i, u) in conv.utterances.iter().enumerate() {
        if i > 0 {
            ids.push(Vocabulary::SEP);
        }
        offsets.push(ids.len());
        if u.tokens.first() == Some(&Vocabulary::UTT_START) {
            ids.extend(&u.tokens);
        } else {
            ids.push(Vocabulary::UTT_START);
            ids.extend(&u.tokens);
        }
    }
    (ids, offsets)
}

pub fn encode_utterances(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &UtteranceEncoder,
    conv: &Conversation,
) -> Result<EncodedConversation> {
    encode_utterances_padded(tape, store, encoder, conv, 0)
}

/// Like [`encode_utterances`] with `pad` masked padding positions appended.
pub fn encode_utterances_padded(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &UtteranceEncoder,
    conv: &Conversation,
    pad: usize,
) -> Result<EncodedConversation> {
    let (mut ids, offsets) = flatten_conversation(conv);
    let real = ids.len();
    ids.resize(real + pad, Vocabulary::PAD);
    let mask: Vec<bool> = (0..ids.len()).map(|i| i < real).collect();
    let states = encoder.encode_ids(tape, store, &ids, &mask)?;
    let anchors = tape.index_select(states, &offsets)?;
    Ok(EncodedConversation {
        token_states: states,
        token_mask: mask,
        utterance_offsets: offsets,
        anchors,
    })
}

/// Node `i` starts from the start-token state of utterance `i`.
pub fn init_discourse_nodes(enc: &EncodedConversation, graph: &DiscourseGraph) -> Result<Var> {
    if graph.node_count != enc.utterance_offsets.len() {
        return Err(Error::Invalid(format!(
            "discourse graph has {} nodes for {} utterances",
            graph.node_count,
            enc.utterance_offsets.len()
        )));
    }
    Ok(enc.anchors)
}

/// `[UTT_START] + ids` of every action-node surface.
pub fn action_node_ids(graph: &ActionGraph, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
    graph
        .nodes
        .iter()
        .map(|n| {
            let content = vocab.encode(&n.surface);
            if content.is_empty() {
                return Err(Error::Invalid(format!("action node `{}` has no tokens", n.surface)));
            }
            Ok(std::iter::once(Vocabulary::UTT_START).chain(content).collect())
        })
        .collect()
}

/// Each node phrase is encoded on its own and its token states averaged.
/// `None` for a graph without nodes.
pub fn init_action_nodes(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &UtteranceEncoder,
    node_ids: &[Vec<usize>],
) -> Result<Option<Var>> {
    if node_ids.is_empty() {
        return Ok(None);
    }
    let rows = node_ids
        .iter()
        .map(|ids| {
            let states = encoder.encode_ids(tape, store, ids, &vec![true; ids.len()])?;
            let d = tape.shape(states)[1];
            let mean = tape.mean_axis(states, 0)?;
            Ok(tape.reshape(mean, vec![1, d])?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(tape.concat(&rows, 0)?))
}

#[derive(Clone, Debug)]
pub struct EncodedGraph {
    /// `[nodes, d]`, `None` when the graph has no nodes.
    pub node_states: Option<Var>,
    pub edges: EdgeList,
}

pub fn encode_graph(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &GraphEncoder,
    init: Option<Var>,
    edges: EdgeList,
) -> Result<EncodedGraph> {
    let node_states = match init {
        Some(v) => Some(encoder.forward(tape, store, v, &edges)?),
        None => None,
    };
    Ok(EncodedGraph { node_states, edges })
}
