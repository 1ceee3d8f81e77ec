//! Symmetric contrastive alignment, the ADT diversity penalty, and their
//! weighted sum.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};
use serde::{Deserialize, Serialize};

/// Default weight of the diversity term.
pub const DEFAULT_ALPHA: f64 = 0.1;

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct AlignmentVars {
    pub l_v2t: Var,
    pub l_t2v: Var,
    pub l_align: Var,
}

/// Symmetric InfoNCE over a `B x B` score matrix whose diagonal holds the
/// positive pairs; rows index videos, columns index queries.
pub fn alignment_loss(g: &mut Graph, scores: Var) -> Result<AlignmentVars> {
    let (b, c) = g.dims(scores);
    if b != c {
        return Err(Error::contract(format!(
            "alignment loss needs a square score matrix, got {:?}",
            g.shape(scores)
        )));
    }
    let l_v2t = diagonal_nll(g, scores)?;
    let st = g.transpose(scores);
    let l_t2v = diagonal_nll(g, st)?;
    let l_align = g.add(l_v2t, l_t2v)?;
    Ok(AlignmentVars {
        l_v2t,
        l_t2v,
        l_align,
    })
}

fn diagonal_nll(g: &mut Graph, scores: Var) -> Result<Var> {
    let logp = g.log_softmax_rows(scores)?;
    let d = g.diag(logp)?;
    let m = g.mean_all(d);
    Ok(g.scale(m, -1.0))
}

#[derive(Clone, Copy, Debug)]
pub struct DiversityVars {
    /// `0.5 (raw_t + raw_v)`.
    pub l_div: Var,
    pub raw_t: Var,
    pub raw_v: Var,
}

/// Squared Frobenius norm of the Gram matrix of `e` with its diagonal zeroed.
pub fn gram_off_diagonal(g: &mut Graph, e: Var, normalize_rows: bool) -> Result<Var> {
    let e = if normalize_rows {
        g.l2_normalize_rows(e, NORM_EPS)?
    } else {
        e
    };
    let m = g.matmul_nt(e, e)?;
    let off = g.zero_diag(m)?;
    Ok(g.sum_squares(off))
}

/// Diversity penalty of one sample's text and video ADT outputs.
pub fn diversity_loss(g: &mut Graph, en_t: Var, en_v: Var, normalize_rows: bool) -> Result<DiversityVars> {
    let raw_t = gram_off_diagonal(g, en_t, normalize_rows)?;
    let raw_v = gram_off_diagonal(g, en_v, normalize_rows)?;
    let sum = g.add(raw_t, raw_v)?;
    Ok(DiversityVars {
        l_div: g.scale(sum, 0.5),
        raw_t,
        raw_v,
    })
}

/// Mean of [`diversity_loss`] over `(en_t, en_v)` pairs.
pub fn batch_diversity_loss(g: &mut Graph, pairs: &[(Var, Var)], normalize_rows: bool) -> Result<DiversityVars> {
    if pairs.is_empty() {
        return Err(Error::contract("diversity loss over an empty batch"));
    }
    let mut raws_t = Vec::with_capacity(pairs.len());
    let mut raws_v = Vec::with_capacity(pairs.len());
    for &(t, v) in pairs {
        raws_t.push(gram_off_diagonal(g, t, normalize_rows)?);
        raws_v.push(gram_off_diagonal(g, v, normalize_rows)?);
    }
    let inv = 1.0 / pairs.len() as f64;
    let st = g.concat_cols(&raws_t)?;
    let st = g.sum_all(st);
    let raw_t = g.scale(st, inv);
    let sv = g.concat_cols(&raws_v)?;
    let sv = g.sum_all(sv);
    let raw_v = g.scale(sv, inv);
    let sum = g.add(raw_t, raw_v)?;
    Ok(DiversityVars {
        l_div: g.scale(sum, 0.5),
        raw_t,
        raw_v,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub align: AlignmentVars,
    /// Absent when the model has no ADT outputs; the term is then zero.
    pub div: Option<DiversityVars>,
    pub total: Var,
    pub alpha: f64,
}

pub fn total_loss(g: &mut Graph, align: AlignmentVars, div: Option<DiversityVars>, alpha: f64) -> Result<LossVars> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::contract(format!("alpha must be finite and non-negative, got {alpha}")));
    }
    let total = match div {
        Some(d) if alpha > 0.0 => {
            let w = g.scale(d.l_div, alpha);
            g.add(align.l_align, w)?
        }
        _ => align.l_align,
    };
    Ok(LossVars {
        align,
        div,
        total,
        alpha,
    })
}

/// Scalar snapshot of every loss component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_v2t: f64,
    pub l_t2v: f64,
    pub l_align: f64,
    pub l_div_t: f64,
    pub l_div_v: f64,
    pub l_div: f64,
    pub total: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    pub fn read(g: &Graph, vars: &LossVars) -> Result<Self> {
        let (l_div_t, l_div_v, l_div) = match vars.div {
            Some(d) => (g.scalar(d.raw_t)?, g.scalar(d.raw_v)?, g.scalar(d.l_div)?),
            None => (0.0, 0.0, 0.0),
        };
        Ok(Self {
            l_v2t: g.scalar(vars.align.l_v2t)?,
            l_t2v: g.scalar(vars.align.l_t2v)?,
            l_align: g.scalar(vars.align.l_align)?,
            l_div_t,
            l_div_v,
            l_div,
            total: g.scalar(vars.total)?,
            alpha: vars.alpha,
        })
    }

    pub fn is_finite(&self) -> bool {
        [self.l_v2t, self.l_t2v, self.l_align, self.l_div, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}
