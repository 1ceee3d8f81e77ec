//! Cross-modal aggregation and relevance-weighted pooling of two multiview
//! embeddings.
//!
//! With `S = f'_v f'_t^T`, every video row attends over the text rows
//! (`f_tx`, one text aggregate per video slot) and every text row attends
//! over the video rows (`f_vx`, one video aggregate per text slot). Each
//! aggregate then passes through a residual self-attention block. The
//! row-wise agreement between a modality's rows and the aggregate built for
//! them becomes a softmax weight, and the pooled vector is the weighted sum
//! of that modality's rows. The row correspondence is what makes the
//! diagonal of `f'_v f_tx^T` well defined.

use crate::error::{Error, Result};
use crate::nn::{Binding, ParamGroup, ParamStore, SelfAttention};
use crate::tensor::{Graph, Var};
use rand::Rng;

/// Parameters of the communication head.
#[derive(Clone, Copy, Debug)]
pub struct CommHead {
    /// Refines the text aggregates gathered for video rows (`f_tx`).
    pub text_to_video: SelfAttention,
    /// Refines the video aggregates gathered for text rows (`f_vx`).
    pub video_to_text: SelfAttention,
}

impl CommHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            text_to_video: SelfAttention::new(store, "comm.tx", d, heads, ParamGroup::Head, rng),
            video_to_text: SelfAttention::new(store, "comm.vx", d, heads, ParamGroup::Head, rng),
        }
    }

    pub fn parameter_free(heads: usize) -> Self {
        Self {
            text_to_video: SelfAttention::parameter_free(heads),
            video_to_text: SelfAttention::parameter_free(heads),
        }
    }

    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        self.text_to_video.set_identity(store)?;
        self.video_to_text.set_identity(store)
    }
}

/// Intermediate and final quantities of one video-text pooling.
#[derive(Clone, Copy, Debug)]
pub struct PooledPair {
    /// Pooled video vector, `1 x d`.
    pub f_tilde_v: Var,
    /// Pooled text vector, `1 x d`.
    pub f_tilde_t: Var,
    /// Video row weights, `1 x (L_v + k)`.
    pub s_v: Var,
    /// Text row weights, `1 x (L_t + k)`.
    pub s_t: Var,
    /// Text aggregates, one per video row.
    pub f_tx: Var,
    /// Video aggregates, one per text row.
    pub f_vx: Var,
}

/// Returns `(f_tx, f_vx)`: `f_tx` has the video row count, `f_vx` the text
/// row count. Inputs are expected to have unit-norm rows.
pub fn cross_modal_aggregate(
    g: &mut Graph,
    bind: &Binding,
    head: &CommHead,
    fv: Var,
    ft: Var,
) -> Result<(Var, Var)> {
    if g.dims(fv).1 != g.dims(ft).1 {
        return Err(Error::shape("cross_modal_aggregate", g.shape(fv), g.shape(ft)));
    }
    let s = g.matmul_nt(fv, ft)?;
    let over_text = g.softmax_rows(s)?;
    let gathered_t = g.matmul(over_text, ft)?;
    let f_tx = head.text_to_video.forward(g, bind, gathered_t)?;

    let st = g.transpose(s);
    let over_video = g.softmax_rows(st)?;
    let gathered_v = g.matmul(over_video, fv)?;
    let f_vx = head.video_to_text.forward(g, bind, gathered_v)?;
    Ok((f_tx, f_vx))
}

/// Softmax over rows of `<f[r], cross[r]>`, then the weighted sum of the
/// rows of `f`. Returns `(pooled 1 x d, weights 1 x R)`.
pub fn partial_alignment_pool(g: &mut Graph, f: Var, cross: Var) -> Result<(Var, Var)> {
    let (rf, d) = g.dims(f);
    let (rc, dc) = g.dims(cross);
    if rf != rc || d != dc {
        return Err(Error::contract(format!(
            "pooling needs one cross row per row: {:?} vs {:?}",
            g.shape(f),
            g.shape(cross)
        )));
    }
    let diag = g.row_dot(f, cross)?;
    let weights = g.softmax_rows(diag)?;
    let pooled = g.matmul(weights, f)?;
    Ok((pooled, weights))
}

pub fn pool_pair(g: &mut Graph, bind: &Binding, head: &CommHead, fv: Var, ft: Var) -> Result<PooledPair> {
    let (f_tx, f_vx) = cross_modal_aggregate(g, bind, head, fv, ft)?;
    let (f_tilde_v, s_v) = partial_alignment_pool(g, fv, f_tx)?;
    let (f_tilde_t, s_t) = partial_alignment_pool(g, ft, f_vx)?;
    Ok(PooledPair {
        f_tilde_v,
        f_tilde_t,
        s_v,
        s_t,
        f_tx,
        f_vx,
    })
}

/// Cosine of the two pooled vectors. Rows of `fv` and `ft` must already be
/// unit-norm.
pub fn pair_cosine(g: &mut Graph, bind: &Binding, head: &CommHead, fv: Var, ft: Var) -> Result<Var> {
    let pair = pool_pair(g, bind, head, fv, ft)?;
    let v = g.l2_normalize_rows(pair.f_tilde_v, 1e-12)?;
    let t = g.l2_normalize_rows(pair.f_tilde_t, 1e-12)?;
    g.row_dot(v, t)
}

/// Temperature-scaled cosine of the pooled pair; `temperature` is a
/// one-element node.
pub fn pair_similarity(
    g: &mut Graph,
    bind: &Binding,
    head: &CommHead,
    fv: Var,
    ft: Var,
    temperature: Var,
) -> Result<Var> {
    let cos = pair_cosine(g, bind, head, fv, ft)?;
    g.scale_by(cos, temperature)
}
