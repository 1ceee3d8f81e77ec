//! Video and text parsers driven by modality-shared decomposition tokens.
//!
//! A parser layer lets the tokens exchange information (self-attention),
//! then query the modality features (cross-attention), then applies a
//! residual feed-forward step. After the last layer the token outputs are
//! fused with the global (CLS) row and stacked under the local rows to form
//! the multiview embedding.

use crate::error::{Error, Result};
use crate::nn::{attention, Binding, LayerNorm, Linear, ParamGroup, ParamId, ParamStore, SelfAttention};
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;

/// Scale of the normal initialization of the decomposition tokens. Tokens
/// much smaller than the projected features produce near-identical queries,
/// and the layer stack then maps them to numerically identical outputs that
/// the diversity term cannot pull apart.
pub const ADT_INIT_STD: f64 = 1.0;

/// The learnable decomposition tokens `E0`, one bank shared by both parsers.
#[derive(Clone, Copy, Debug)]
pub struct AdtBank {
    pub tokens: ParamId,
    pub k: usize,
    pub d: usize,
}

impl AdtBank {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, k: usize, d: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::contract("token bank needs k >= 1 and d >= 1"));
        }
        let tokens = store.add("adt.tokens", Tensor::randn(&[k, d], ADT_INIT_STD, rng), ParamGroup::Head);
        Ok(Self { tokens, k, d })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ParserLayerParams {
    pub self_attn: SelfAttention,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub ffn: Linear,
    pub ffn_norm: LayerNorm,
}

impl ParserLayerParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        let group = ParamGroup::Head;
        Self {
            self_attn: SelfAttention::new(store, &format!("{name}.sa"), d, heads, group, rng),
            query: Linear::new(store, &format!("{name}.cross_q"), d, d, group, rng),
            key: Linear::unbiased(store, &format!("{name}.cross_k"), d, d, group, rng),
            value: Linear::new(store, &format!("{name}.cross_v"), d, d, group, rng),
            ffn: Linear::new(store, &format!("{name}.ffn"), d, d, group, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d, group),
        }
    }
}

/// How the per-layer feed-forward residual is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FeedForward {
    /// `E' + LN(GELU(Linear(E')))`
    #[default]
    NormGelu,
    /// `E' + Linear(E')`
    Linear,
}

#[derive(Clone, Debug)]
pub struct Parser {
    pub layers: Vec<ParserLayerParams>,
    pub adt_norm: LayerNorm,
    pub cls_norm: LayerNorm,
    pub heads: usize,
    pub feed_forward: FeedForward,
}

impl Parser {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_layers: usize,
        heads: usize,
        feed_forward: FeedForward,
        rng: &mut R,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| ParserLayerParams::new(store, &format!("{name}.layer{i}"), d, heads, rng))
            .collect();
        Self {
            layers,
            adt_norm: LayerNorm::new(store, &format!("{name}.adt_norm"), d, ParamGroup::Head),
            cls_norm: LayerNorm::new(store, &format!("{name}.cls_norm"), d, ParamGroup::Head),
            heads,
            feed_forward,
        }
    }
}

/// Output of a parser, as graph handles.
#[derive(Clone, Copy, Debug)]
pub struct MultiviewEmbedding {
    /// Frame or token rows, `L x d`.
    pub local: Var,
    /// Last-layer token outputs `E_N`, `k x d`, before CLS fusion.
    pub adt_out: Var,
    /// Global row, `1 x d`.
    pub cls: Var,
    /// `concat(local, LN(E_N) + LN(cls))`, `(L + k) x d`.
    pub multiview: Var,
}

/// One parser layer: token self-attention, cross-attention into the
/// features, residual feed-forward.
pub fn parser_layer_forward(
    g: &mut Graph,
    bind: &Binding,
    layer: &ParserLayerParams,
    e_prev: Var,
    features: Var,
    heads: usize,
    feed_forward: FeedForward,
) -> Result<Var> {
    if g.dims(e_prev).1 != g.dims(features).1 {
        return Err(Error::shape("parser_layer", g.shape(e_prev), g.shape(features)));
    }
    let e_hat = layer.self_attn.forward(g, bind, e_prev)?;
    let q = layer.query.forward(g, bind, e_hat)?;
    let k = layer.key.forward(g, bind, features)?;
    let v = layer.value.forward(g, bind, features)?;
    let e_cross = attention(g, q, k, v, heads)?;
    let ff = layer.ffn.forward(g, bind, e_cross)?;
    let ff = match feed_forward {
        FeedForward::NormGelu => {
            let act = g.gelu(ff);
            layer.ffn_norm.forward(g, bind, act)?
        }
        FeedForward::Linear => ff,
    };
    g.add(e_cross, ff)
}

/// Fuses `E_N` with the CLS row and stacks the result under the local rows.
pub fn assemble_multiview(
    g: &mut Graph,
    bind: &Binding,
    parser: &Parser,
    local: Var,
    adt_out: Var,
    cls: Var,
) -> Result<MultiviewEmbedding> {
    let en = parser.adt_norm.forward(g, bind, adt_out)?;
    let cn = parser.cls_norm.forward(g, bind, cls)?;
    let fused = g.add_row(en, cn)?;
    let multiview = g.concat_rows(&[local, fused])?;
    Ok(MultiviewEmbedding {
        local,
        adt_out,
        cls,
        multiview,
    })
}

/// Runs every parser layer starting from the shared bank, then assembles
/// the multiview embedding.
pub fn parse(
    g: &mut Graph,
    bind: &Binding,
    bank: &AdtBank,
    parser: &Parser,
    features: Var,
    cls: Var,
) -> Result<MultiviewEmbedding> {
    if parser.layers.is_empty() {
        return Err(Error::contract("parser needs at least one layer"));
    }
    let mut e = bind.var(bank.tokens);
    for layer in &parser.layers {
        e = parser_layer_forward(g, bind, layer, e, features, parser.heads, parser.feed_forward)?;
    }
    assemble_multiview(g, bind, parser, features, e, cls)
}
