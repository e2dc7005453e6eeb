//! Whole-model assembly and example preparation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, FusionStrategy};
use crate::corpus::{tokenize, AnnotationBundle, Conversation, Vocabulary};
use crate::decoder::{DecodeOutput, Decoder, GraphMemory};
use crate::encoder::{
    action_node_ids, encode_graph, encode_utterances, init_action_nodes, init_discourse_nodes, EncodedConversation,
    EncodedGraph, GraphEncoder, UtteranceEncoder,
};
use crate::graph::{
    build_action_graph, build_discourse_graph, naive_svo_extract, transform_pov, ActionGraph, DiscourseGraph,
    DiscourseRelation,
};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor};
use crate::{Error, Result};

/// A conversation with everything the model consumes.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    /// Tokenized.
    pub conversation: Conversation,
    pub discourse: DiscourseGraph,
    pub action: ActionGraph,
    /// `[UTT_START] + ids` per action node.
    pub action_tokens: Vec<Vec<usize>>,
    /// `[SUM_START] + summary ids + [EOS]`; empty without a reference.
    pub target: Vec<usize>,
}

impl Example {
    /// Reference summary tokens without the start and end markers.
    pub fn reference_tokens(&self) -> &[usize] {
        match self.target.len() {
            0 => &[],
            n => &self.target[1..n - 1],
        }
    }
}

/// Where action triples come from when preparing an example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TripleSourceMode {
    /// Annotation triples; none when the bundle is missing.
    #[default]
    Annotated,
    /// Rule-based extraction over the point-of-view-rewritten turns.
    Naive,
}

/// Builds graphs and token ids for one conversation.
pub fn prepare_example(
    conv: &Conversation,
    bundle: Option<&AnnotationBundle>,
    vocab: &Vocabulary,
    mode: TripleSourceMode,
) -> Result<Example> {
    let empty = AnnotationBundle::default();
    let bundle = bundle.unwrap_or(&empty);
    let discourse = build_discourse_graph(conv, &bundle.discourse_edges)?;
    let triples = match mode {
        TripleSourceMode::Annotated => bundle.action_triples.clone(),
        TripleSourceMode::Naive => naive_svo_extract(&transform_pov(conv, &bundle.coref_clusters)),
    };
    let action = build_action_graph(&triples)?;
    let action_tokens = action_node_ids(&action, vocab)?;
    let target = match &conv.reference_summary {
        Some(s) => std::iter::once(Vocabulary::SUM_START)
            .chain(vocab.encode(s))
            .chain(std::iter::once(Vocabulary::EOS))
            .collect(),
        None => Vec::new(),
    };
    Ok(Example {
        id: conv.id.clone(),
        conversation: tokenize(conv, vocab),
        discourse,
        action,
        action_tokens,
        target,
    })
}

/// [`prepare_example`] over a loaded corpus.
pub fn prepare_corpus(
    corpus: &[(Conversation, Option<AnnotationBundle>)],
    vocab: &Vocabulary,
    mode: TripleSourceMode,
) -> Result<Vec<Example>> {
    corpus
        .iter()
        .map(|(c, b)| prepare_example(c, b.as_ref(), vocab, mode))
        .collect()
}

/// Encoder-side outputs for one example.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub conversation: EncodedConversation,
    pub discourse: Option<EncodedGraph>,
    pub action: Option<EncodedGraph>,
}

impl Encoded {
    pub fn graphs(&self) -> GraphMemory {
        GraphMemory::from_encoded(self.discourse.as_ref(), self.action.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub vocab_size: usize,
    pub params: ParamStore,
    pub encoder: UtteranceEncoder,
    pub discourse_encoder: Option<GraphEncoder>,
    pub action_encoder: Option<GraphEncoder>,
    pub decoder: Decoder,
}

/// Parameters trained with the new-module learning rate: graph encoders,
/// graph cross-attentions, the fusion network and the ReZero gates.
pub fn is_new_module(name: &str) -> bool {
    name.starts_with("graph_enc.") || name.contains(".graph.")
}

impl Model {
    pub fn init(config: &Config, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let (e, d) = (&config.encoder, &config.decoder);
        let dim = e.model_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let embed = params.add("embed.token", Tensor::randn(vec![vocab_size, dim], 1.0, &mut rng))?;
        let encoder = UtteranceEncoder::new(
            &mut params,
            embed,
            dim,
            e.ffn_dim,
            e.encoder_layers,
            e.encoder_heads,
            e.dropout,
            e.max_positions,
            &mut rng,
        )?;
        let strategy = d.fusion_strategy;
        let discourse_relations = if e.reverse_discourse_edges {
            2 * DiscourseRelation::COUNT - 1
        } else {
            DiscourseRelation::COUNT
        };
        let mut graph_encoder = |name: &str, relations: usize, params: &mut ParamStore| {
            GraphEncoder::new(
                params,
                name,
                dim,
                e.gat_layers,
                e.gat_heads,
                relations,
                e.relation_embed_dim,
                e.dropout,
                &mut rng,
            )
        };
        let discourse_encoder = strategy
            .uses_discourse()
            .then(|| graph_encoder("graph_enc.discourse", discourse_relations, &mut params))
            .transpose()?;
        let action_encoder = strategy
            .uses_action()
            .then(|| graph_encoder("graph_enc.action", 2, &mut params))
            .transpose()?;
        let decoder = Decoder::new(
            &mut params,
            embed,
            dim,
            d.ffn_dim,
            d.decoder_layers,
            d.decoder_heads,
            d.graph_attn_heads,
            strategy,
            d.rezero_init,
            d.dropout,
            e.max_positions,
            vocab_size,
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            vocab_size,
            params,
            encoder,
            discourse_encoder,
            action_encoder,
            decoder,
        })
    }

    pub fn strategy(&self) -> FusionStrategy {
        self.config.decoder.fusion_strategy
    }

    pub fn alpha_ids(&self) -> Vec<ParamId> {
        self.decoder.alphas()
    }

    /// Current per-layer gate values.
    pub fn alphas(&self) -> Vec<f64> {
        self.alpha_ids()
            .into_iter()
            .map(|id| self.params.value(id).data()[0])
            .collect()
    }

    /// Sets every gate to `value` and stops it from training.
    pub fn freeze_alphas(&mut self, value: f64) {
        for id in self.alpha_ids() {
            let p = self.params.get_mut(id);
            p.value = Tensor::scalar(value);
            p.requires_grad = false;
        }
    }

    /// `(base, new)` parameter groups.
    pub fn param_groups(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        self.params.iter().map(|(id, p)| (id, is_new_module(&p.name))).fold(
            (Vec::new(), Vec::new()),
            |(mut base, mut new), (id, is_new)| {
                if is_new {
                    new.push(id)
                } else {
                    base.push(id)
                }
                (base, new)
            },
        )
    }

    pub fn encode(&self, tape: &mut Tape, example: &Example) -> Result<Encoded> {
        self.encode_with(tape, &self.params, example)
    }

    /// Encodes with an explicit parameter store of the same layout.
    pub fn encode_with(&self, tape: &mut Tape, params: &ParamStore, example: &Example) -> Result<Encoded> {
        let conversation = encode_utterances(tape, params, &self.encoder, &example.conversation)?;
        let discourse = match &self.discourse_encoder {
            Some(g) => {
                let init = init_discourse_nodes(&conversation, &example.discourse)?;
                let edges = example.discourse.edge_list(self.config.encoder.reverse_discourse_edges);
                Some(encode_graph(tape, params, g, Some(init), edges)?)
            }
            None => None,
        };
        let action = match &self.action_encoder {
            Some(g) => {
                let init = init_action_nodes(tape, params, &self.encoder, &example.action_tokens)?;
                Some(encode_graph(tape, params, g, init, example.action.edge_list())?)
            }
            None => None,
        };
        Ok(Encoded {
            conversation,
            discourse,
            action,
        })
    }

    pub fn decode_forward(&self, tape: &mut Tape, encoded: &Encoded, prefix: &[usize]) -> Result<DecodeOutput> {
        self.decode_forward_with(tape, &self.params, encoded, prefix, self.strategy())
    }

    /// Decoder pass with an explicit store and a strategy override. `None`
    /// works for any model; other strategies need the graphs and weights
    /// the model was built with.
    pub fn decode_forward_with(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        encoded: &Encoded,
        prefix: &[usize],
        strategy: FusionStrategy,
    ) -> Result<DecodeOutput> {
        if strategy.uses_discourse() && encoded.discourse.is_none() {
            return Err(Error::MissingGraph(strategy.name()));
        }
        if strategy.uses_action() && encoded.action.is_none() {
            return Err(Error::MissingGraph(strategy.name()));
        }
        self.decoder
            .forward(tape, params, prefix, &encoded.conversation, encoded.graphs(), strategy)
    }

    /// Summed token NLL and token count for one example under teacher forcing.
    pub fn example_nll(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        example: &Example,
    ) -> Result<(crate::tensor::Var, usize)> {
        let t = &example.target;
        if t.len() < 2 {
            return Err(Error::Invalid(format!(
                "example `{}` has no target summary",
                example.id
            )));
        }
        let encoded = self.encode_with(tape, params, example)?;
        let out = self.decode_forward_with(tape, params, &encoded, &t[..t.len() - 1], self.strategy())?;
        let nll = tape.cross_entropy_sum(out.logits, &t[1..], Some(Vocabulary::PAD))?;
        let count = t[1..].iter().filter(|&&x| x != Vocabulary::PAD).count();
        Ok((nll, count))
    }
}
