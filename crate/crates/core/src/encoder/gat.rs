use rand::Rng;

use crate::graph::EdgeList;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::Result;

/// Relation-aware graph attention.
///
/// Per head `k` and edge `i <- j` with relation `r`:
/// `s = LeakyReLU_0.2(a_k . [W_k v_i || W_k v_j || E_k[r]])`, `alpha = softmax`
/// of `s` over the incoming edges of `i`, and `h_i = ELU(sum_j alpha W_k v_j)`.
/// Heads are concatenated, or averaged when `average` is set.
#[derive(Clone, Debug)]
pub struct GatLayer {
    /// `[d_in, heads * d_out]`
    pub w: ParamId,
    /// `[heads, 2 * d_out + relation_dim]`
    pub a: ParamId,
    /// `[relation_count, heads * relation_dim]`
    pub relations: ParamId,
    pub heads: usize,
    pub d_out: usize,
    pub relation_dim: usize,
    pub average: bool,
}

#[allow(clippy::too_many_arguments)]
impl GatLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        heads: usize,
        relation_count: usize,
        relation_dim: usize,
        average: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w_std = (2.0 / (d_in + heads * d_out) as f64).sqrt();
        let k = 2 * d_out + relation_dim;
        let a_std = (2.0 / (k + 1) as f64).sqrt();
        Ok(Self {
            w: store.add(
                format!("{name}.w"),
                Tensor::randn(vec![d_in, heads * d_out], w_std, rng),
            )?,
            a: store.add(format!("{name}.a"), Tensor::randn(vec![heads, k], a_std, rng))?,
            relations: store.add(
                format!("{name}.relations"),
                Tensor::randn(vec![relation_count, heads * relation_dim], 0.5, rng),
            )?,
            heads,
            d_out,
            relation_dim,
            average,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, nodes: Var, edges: &EdgeList) -> Result<Var> {
        Ok(self.forward_with_attention(tape, store, nodes, edges)?.0)
    }

    /// Also returns the `[edges, heads]` attention coefficients.
    pub fn forward_with_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        nodes: Var,
        edges: &EdgeList,
    ) -> Result<(Var, Var)> {
        let n = tape.shape(nodes)[0];
        if n != edges.node_count {
            return Err(TensorError::InvalidArgument {
                op: "gat",
                reason: format!("{n} node vectors for a {}-node graph", edges.node_count),
            }
            .into());
        }
        if let Some(i) = edges.isolated_node() {
            return Err(TensorError::InvalidArgument {
                op: "gat",
                reason: format!("node {i} has no incoming edge"),
            }
            .into());
        }
        let (h, d) = (self.heads, self.d_out);
        let e = edges.len();
        let w = tape.param(store, self.w);
        let wv = tape.matmul(nodes, w)?;
        let wv = tape.reshape(wv, vec![n, h, d])?;
        let wi = tape.index_select(wv, &edges.targets)?;
        let wj = tape.index_select(wv, &edges.sources)?;
        let table = tape.param(store, self.relations);
        let rel = tape.index_select(table, &edges.relations)?;
        let rel = tape.reshape(rel, vec![e, h, self.relation_dim])?;
        let cat = tape.concat(&[wi, wj, rel], 2)?;
        let a = tape.param(store, self.a);
        let prod = tape.mul(cat, a)?;
        let score = tape.sum_axis(prod, 2)?;
        let score = tape.leaky_relu(score, 0.2);
        let alpha = tape.segment_softmax(score, &edges.targets)?;
        let alpha3 = tape.reshape(alpha, vec![e, h, 1])?;
        let msg = tape.mul(wj, alpha3)?;
        let agg = tape.scatter_add(msg, &edges.targets, n)?;
        let out = tape.elu(agg);
        let out = if self.average {
            tape.mean_axis(out, 1)?
        } else {
            tape.reshape(out, vec![n, h * d])?
        };
        Ok((out, alpha))
    }
}

/// Stack of GAT layers with a residual connection around each.
#[derive(Clone, Debug)]
pub struct GraphEncoder {
    pub layers: Vec<GatLayer>,
    pub dropout: f64,
}

impl GraphEncoder {
    /// Intermediate layers concatenate `heads` heads of width `d / heads`;
    /// the last layer averages heads of width `d`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        layers: usize,
        heads: usize,
        relation_count: usize,
        relation_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| {
                let last = l + 1 == layers;
                let d_out = if last { d } else { d / heads };
                GatLayer::new(
                    store,
                    &format!("{name}.layer{l}"),
                    d,
                    d_out,
                    heads,
                    relation_count,
                    relation_dim,
                    last,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, dropout })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, init: Var, edges: &EdgeList) -> Result<Var> {
        let mut h = init;
        for layer in &self.layers {
            let out = layer.forward(tape, store, h, edges)?;
            let out = tape.dropout(out, self.dropout)?;
            h = tape.add(h, out)?;
        }
        Ok(h)
    }
}
