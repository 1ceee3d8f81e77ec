//! Named parameters and the small layers shared by encoders, parsers, and
//! the communication head.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Epsilon used by every layer normalization in the model.
pub const LN_EPS: f64 = 1e-5;

/// Optimizer group a parameter belongs to; groups get separate learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    /// Frozen parameters are bound as constants and never updated.
    pub frozen: bool,
}

/// Flat, ordered collection of every parameter of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, value: Tensor, group: ParamGroup, frozen: bool) -> ParamId {
        debug_assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name: name.to_string(),
            value,
            group,
            frozen,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add(&mut self, name: &str, value: Tensor, group: ParamGroup) -> ParamId {
        self.push(name, value, group, false)
    }

    pub fn add_frozen(&mut self, name: &str, value: Tensor, group: ParamGroup) -> ParamId {
        self.push(name, value, group, true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_param", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Inserts every parameter as a leaf; trainable ones require gradients.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| g.leaf(p.value.clone(), !p.frozen))
                .collect(),
        }
    }

    /// Inserts every parameter as a constant, for evaluation.
    pub fn bind_constant(&self, g: &mut Graph) -> Binding {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| g.constant(p.value.clone()))
                .collect(),
        }
    }
}

/// Graph handles for the parameters of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// `y = x W + b` with `W` of shape `d_in x d_out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let mut lin = Self::unbiased(store, name, d_in, d_out, group, rng);
        lin.bias = Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[d_out]), group));
        lin
    }

    /// `y = x W`. Used for attention keys, where a bias only shifts every
    /// score of a query by the same amount and so has no effect.
    pub fn unbiased<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let w = Tensor::randn(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng);
        Self {
            weight: store.add(&format!("{name}.weight"), w, group),
            bias: None,
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: Var) -> Result<Var> {
        let y = g.matmul(x, bind.var(self.weight))?;
        match self.bias {
            Some(b) => g.add_row(y, bind.var(b)),
            None => Ok(y),
        }
    }

    /// Sets the weight to the identity and the bias to zero.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        let n = store.value(self.weight).rows();
        store.set(self.weight, Tensor::eye(n))?;
        if let Some(bias) = self.bias {
            let b = Tensor::zeros(store.value(bias).shape());
            store.set(bias, b)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, group: ParamGroup) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[d], 1.0), group),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[d]), group),
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: Var) -> Result<Var> {
        g.layer_norm(x, bind.var(self.gamma), bind.var(self.beta), LN_EPS)
    }
}

/// Multi-head scaled dot-product attention, `softmax(Q K^T / sqrt(d_h)) V`
/// per head with heads concatenated along columns.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = g.dims(q).1;
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::contract(format!(
            "width {d} is not divisible into {heads} heads"
        )));
    }
    if g.dims(k).1 != d {
        return Err(Error::shape("attention", g.shape(q), g.shape(k)));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    if heads == 1 {
        return attend(g, q, k, v, scale);
    }
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, s, e)?;
        let kh = g.slice_cols(k, s, e)?;
        let vh = g.slice_cols(v, s, e)?;
        outs.push(attend(g, qh, kh, vh, scale)?);
    }
    g.concat_cols(&outs)
}

fn attend(g: &mut Graph, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, scale);
    let weights = g.softmax_rows(scores)?;
    g.matmul(weights, v)
}

#[derive(Clone, Copy, Debug)]
struct AttnProjections {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

/// Self-attention block with a residual connection: `x + Attn(x)`.
///
/// The parameter-free form uses `x` directly as queries, keys, and values
/// and has no output map.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttention {
    proj: Option<AttnProjections>,
    heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let proj = AttnProjections {
            q: Linear::new(store, &format!("{name}.q"), d, d, group, rng),
            k: Linear::unbiased(store, &format!("{name}.k"), d, d, group, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, group, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, group, rng),
        };
        Self {
            proj: Some(proj),
            heads,
        }
    }

    pub fn parameter_free(heads: usize) -> Self {
        Self { proj: None, heads }
    }

    pub fn is_parameter_free(&self) -> bool {
        self.proj.is_none()
    }

    /// Sets every projection to the identity map.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = &self.proj {
            for lin in [p.q, p.k, p.v, p.o] {
                lin.set_identity(store)?;
            }
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: Var) -> Result<Var> {
        let mixed = match &self.proj {
            Some(p) => {
                let q = p.q.forward(g, bind, x)?;
                let k = p.k.forward(g, bind, x)?;
                let v = p.v.forward(g, bind, x)?;
                let a = attention(g, q, k, v, self.heads)?;
                p.o.forward(g, bind, a)?
            }
            None => attention(g, x, x, x, self.heads)?,
        };
        g.add(x, mixed)
    }
}
