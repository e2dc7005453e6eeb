//! Multi-granularity transformer decoder.
//!
//! Each layer runs, in order: masked self-attention, cross-attention over
//! every encoder token (giving `xU`), graph cross-attentions fused into `xS`
//! according to the [`FusionStrategy`], the gated residual `xU + alpha * xS`,
//! and a position-wise feed-forward block. All residual sublayers are
//! post-norm.

use rand::Rng;

use crate::config::FusionStrategy;
use crate::encoder::{embed_tokens, EncodedConversation, EncodedGraph};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Mask, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Graph-side weights of one layer. Which members exist depends on the
/// strategy the model was built for.
#[derive(Clone, Debug, Default)]
pub struct GraphBlock {
    pub discourse_attn: Option<MultiHeadAttention>,
    pub action_attn: Option<MultiHeadAttention>,
    /// `2d -> d -> d` for parallel fusion, `d -> d -> d` for a single graph.
    pub fuse: Option<FeedForward>,
    /// ReZero gate.
    pub alpha: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ln_self: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub graph: GraphBlock,
    /// Applied to `xU + alpha * xS`, or to `xU` alone without graphs.
    pub ln_fuse: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: ParamId,
    pub embed_ln: LayerNorm,
    pub layers: Vec<DecoderLayer>,
    /// `[d, vocab]`, no bias.
    pub out_proj: Linear,
    pub dropout: f64,
    pub max_positions: usize,
}

/// Graph states a layer attends to.
#[derive(Clone, Copy, Debug, Default)]
pub struct GraphMemory {
    pub discourse: Option<Var>,
    pub action: Option<Var>,
}

impl GraphMemory {
    pub fn from_encoded(discourse: Option<&EncodedGraph>, action: Option<&EncodedGraph>) -> Self {
        Self {
            discourse: discourse.and_then(|g| g.node_states),
            action: action.and_then(|g| g.node_states),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecodeOutput {
    /// `[positions, vocab]`
    pub logits: Var,
    /// Token embeddings plus positions, `[positions, d]`, before the input
    /// norm.
    pub embeddings: Var,
    /// Some graph attention had no nodes and contributed zeros.
    pub empty_graph: bool,
}

impl DecoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        index: usize,
        d: usize,
        ffn_dim: usize,
        heads: usize,
        graph_heads: usize,
        strategy: FusionStrategy,
        rezero_init: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let p = format!("dec.layer{index}");
        let mut graph = GraphBlock::default();
        if strategy.uses_discourse() {
            graph.discourse_attn = Some(MultiHeadAttention::new(
                store,
                &format!("{p}.graph.discourse_attn"),
                d,
                graph_heads,
                rng,
            )?);
        }
        if strategy.uses_action() {
            graph.action_attn = Some(MultiHeadAttention::new(
                store,
                &format!("{p}.graph.action_attn"),
                d,
                graph_heads,
                rng,
            )?);
        }
        let fuse_in = match strategy {
            FusionStrategy::Parallel => Some(2 * d),
            FusionStrategy::DiscourseOnly | FusionStrategy::ActionOnly => Some(d),
            _ => None,
        };
        if let Some(din) = fuse_in {
            graph.fuse = Some(FeedForward::new(store, &format!("{p}.graph.fuse"), din, d, d, rng)?);
        }
        if strategy != FusionStrategy::None {
            graph.alpha = Some(store.add(format!("{p}.graph.alpha"), Tensor::scalar(rezero_init))?);
        }
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, heads, rng)?,
            ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), d)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), d, heads, rng)?,
            ln_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), d)?,
            graph,
            ln_fuse: LayerNorm::new(store, &format!("{p}.ln_fuse"), d)?,
            ffn: FeedForward::new(store, &format!("{p}.ffn"), d, ffn_dim, d, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), d)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y: Var,
        enc: &EncodedConversation,
        graphs: GraphMemory,
        strategy: FusionStrategy,
        dropout: f64,
        empty_graph: &mut bool,
    ) -> Result<Var> {
        let n = tape.shape(y)[0];
        let causal = Mask::causal(n);
        let sa = self.self_attn.forward(tape, store, y, y, Some(&causal))?;
        let sa = tape.dropout(sa, dropout)?;
        let r = tape.add(y, sa)?;
        let y1 = self.ln_self.forward(tape, store, r)?;

        let key_mask = enc.token_mask.iter().any(|v| !v).then(|| Mask::keys(&enc.token_mask));
        let ca = self
            .cross_attn
            .forward(tape, store, y1, enc.token_states, key_mask.as_ref())?;
        let ca = tape.dropout(ca, dropout)?;
        let r = tape.add(y1, ca)?;
        let xu = self.ln_cross.forward(tape, store, r)?;

        let fused = match strategy {
            FusionStrategy::None => xu,
            _ => {
                let xs = match strategy {
                    FusionStrategy::Parallel => fuse_parallel(tape, store, xu, graphs, &self.graph, empty_graph)?,
                    FusionStrategy::SequentialDiscourseFirst | FusionStrategy::SequentialActionFirst => {
                        fuse_sequential(tape, store, xu, graphs, &self.graph, strategy, empty_graph)?
                    }
                    _ => fuse_single(tape, store, xu, graphs, &self.graph, strategy, empty_graph)?,
                };
                let alpha = self.graph.alpha.ok_or(Error::MissingGraph(strategy.name()))?;
                let alpha = tape.param(store, alpha);
                let xs = tape.dropout(xs, dropout)?;
                let gated = tape.mul(alpha, xs)?;
                tape.add(xu, gated)?
            }
        };
        let x = self.ln_fuse.forward(tape, store, fused)?;

        let f = self.ffn.forward(tape, store, x, dropout)?;
        let f = tape.dropout(f, dropout)?;
        let r = tape.add(x, f)?;
        Ok(self.ln_ffn.forward(tape, store, r)?)
    }
}

/// Cross-attention from `query` to graph nodes; zeros when the graph is empty.
fn graph_attention(
    tape: &mut Tape,
    store: &ParamStore,
    attn: Option<&MultiHeadAttention>,
    query: Var,
    nodes: Option<Var>,
    which: &'static str,
    empty_graph: &mut bool,
) -> Result<Var> {
    let attn = attn.ok_or(Error::MissingGraph(which))?;
    match nodes {
        Some(m) => Ok(attn.forward(tape, store, query, m, None)?),
        None => {
            *empty_graph = true;
            log::debug!("{which} graph has no nodes; its attention contributes zeros");
            let shape = tape.shape(query).to_vec();
            Ok(tape.constant(Tensor::zeros(shape)))
        }
    }
}

/// `xS = FFN([xD || xA])`.
pub fn fuse_parallel(
    tape: &mut Tape,
    store: &ParamStore,
    xu: Var,
    graphs: GraphMemory,
    block: &GraphBlock,
    empty_graph: &mut bool,
) -> Result<Var> {
    let xd = graph_attention(
        tape,
        store,
        block.discourse_attn.as_ref(),
        xu,
        graphs.discourse,
        "discourse",
        empty_graph,
    )?;
    let xa = graph_attention(
        tape,
        store,
        block.action_attn.as_ref(),
        xu,
        graphs.action,
        "action",
        empty_graph,
    )?;
    let cat = tape.concat(&[xd, xa], 1)?;
    let fuse = block.fuse.as_ref().ok_or(Error::MissingGraph("parallel"))?;
    Ok(fuse.forward(tape, store, cat, 0.0)?)
}

/// `xS = FFN(xD)` or `FFN(xA)`.
pub fn fuse_single(
    tape: &mut Tape,
    store: &ParamStore,
    xu: Var,
    graphs: GraphMemory,
    block: &GraphBlock,
    strategy: FusionStrategy,
    empty_graph: &mut bool,
) -> Result<Var> {
    let x = if strategy == FusionStrategy::DiscourseOnly {
        graph_attention(
            tape,
            store,
            block.discourse_attn.as_ref(),
            xu,
            graphs.discourse,
            "discourse",
            empty_graph,
        )?
    } else {
        graph_attention(
            tape,
            store,
            block.action_attn.as_ref(),
            xu,
            graphs.action,
            "action",
            empty_graph,
        )?
    };
    let fuse = block.fuse.as_ref().ok_or(Error::MissingGraph(strategy.name()))?;
    Ok(fuse.forward(tape, store, x, 0.0)?)
}

/// `t = xU + attn(xU, first)`, `xS = attn(t, second)`.
pub fn fuse_sequential(
    tape: &mut Tape,
    store: &ParamStore,
    xu: Var,
    graphs: GraphMemory,
    block: &GraphBlock,
    strategy: FusionStrategy,
    empty_graph: &mut bool,
) -> Result<Var> {
    let disc = (block.discourse_attn.as_ref(), graphs.discourse, "discourse");
    let act = (block.action_attn.as_ref(), graphs.action, "action");
    let (first, second) = if strategy == FusionStrategy::SequentialActionFirst {
        (act, disc)
    } else {
        (disc, act)
    };
    let x1 = graph_attention(tape, store, first.0, xu, first.1, first.2, empty_graph)?;
    let t = tape.add(xu, x1)?;
    graph_attention(tape, store, second.0, t, second.1, second.2, empty_graph)
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        embed: ParamId,
        d: usize,
        ffn_dim: usize,
        layers: usize,
        heads: usize,
        graph_heads: usize,
        strategy: FusionStrategy,
        rezero_init: f64,
        dropout: f64,
        max_positions: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let embed_ln = LayerNorm::new(store, "dec.embed_ln", d)?;
        let layers = (0..layers)
            .map(|i| DecoderLayer::new(store, i, d, ffn_dim, heads, graph_heads, strategy, rezero_init, rng))
            .collect::<Result<_>>()?;
        let out_proj = Linear::new(store, "dec.out_proj", d, vocab, false, rng)?;
        Ok(Self {
            embed,
            embed_ln,
            layers,
            out_proj,
            dropout,
            max_positions,
        })
    }

    pub fn alphas(&self) -> Vec<ParamId> {
        self.layers.iter().filter_map(|l| l.graph.alpha).collect()
    }

    /// Logits for every prefix position in one causal pass.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prefix: &[usize],
        enc: &EncodedConversation,
        graphs: GraphMemory,
        strategy: FusionStrategy,
    ) -> Result<DecodeOutput> {
        if prefix.is_empty() {
            return Err(Error::Invalid("decoder prefix is empty".into()));
        }
        let embeddings = embed_tokens(tape, store, self.embed, prefix, self.max_positions)?;
        let mut y = self.embed_ln.forward(tape, store, embeddings)?;
        y = tape.dropout(y, self.dropout)?;
        let mut empty_graph = false;
        for layer in &self.layers {
            y = layer.forward(tape, store, y, enc, graphs, strategy, self.dropout, &mut empty_graph)?;
        }
        let logits = project_logits(tape, store, &self.out_proj, y)?;
        Ok(DecodeOutput {
            logits,
            embeddings,
            empty_graph,
        })
    }
}

/// `[positions, d] -> [positions, vocab]`.
pub fn project_logits(tape: &mut Tape, store: &ParamStore, proj: &Linear, y: Var) -> Result<Var> {
    let d = store.value(proj.w).shape()[0];
    if tape.shape(y).last() != Some(&d) {
        return Err(Error::Invalid(format!(
            "state width {:?} does not match projection input {d}",
            tape.shape(y)
        )));
    }
    Ok(proj.forward(tape, store, y)?)
}
