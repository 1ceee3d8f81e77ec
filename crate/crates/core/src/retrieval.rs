//! Query x candidate score matrices, ranking metrics, and dual-softmax
//! rescoring.
//!
//! Score matrices hold raw cosines: the learned temperature is a positive
//! scale and does not change rankings, so it is left out here and applied
//! only where a softmax needs it.

use crate::dual_comm::{pair_cosine, CommHead};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Graph, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Temperatures applied before the row and column softmax of DSL.
pub const DEFAULT_DSL_TEMPERATURES: (f64, f64) = (100.0, 100.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMethod {
    #[serde(rename = "t2vparser")]
    T2vParser,
    GlobalMean,
    TokenwiseMax,
}

impl ScoringMethod {
    pub const ALL: [ScoringMethod; 3] = [Self::T2vParser, Self::GlobalMean, Self::TokenwiseMax];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::T2vParser => "t2vparser",
            Self::GlobalMean => "global_mean",
            Self::TokenwiseMax => "tokenwise_max",
        }
    }
}

impl fmt::Display for ScoringMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoringMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown scoring method {s:?}")))
    }
}

/// A pair scorer over row matrices whose rows are already unit-norm.
#[derive(Clone, Copy, Debug)]
pub enum Scorer<'a> {
    T2vParser { store: &'a ParamStore, head: &'a CommHead },
    GlobalMean,
    TokenwiseMax,
}

impl Scorer<'_> {
    pub fn method(&self) -> ScoringMethod {
        match self {
            Scorer::T2vParser { .. } => ScoringMethod::T2vParser,
            Scorer::GlobalMean => ScoringMethod::GlobalMean,
            Scorer::TokenwiseMax => ScoringMethod::TokenwiseMax,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = (dot(a, a) * dot(b, b)).sqrt();
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

fn mean_row(t: &Tensor) -> Vec<f64> {
    let (r, c) = t.dims2();
    let mut m = vec![0.0; c];
    for i in 0..r {
        for (acc, x) in m.iter_mut().zip(t.row(i)) {
            *acc += x;
        }
    }
    m.iter_mut().for_each(|x| *x /= r as f64);
    m
}

/// Cosine of the mean rows.
pub fn global_mean_score(query: &Tensor, candidate: &Tensor) -> f64 {
    cosine(&mean_row(query), &mean_row(candidate))
}

/// Mean over query rows of the best cosine against any candidate row.
pub fn tokenwise_max_score(query: &Tensor, candidate: &Tensor) -> f64 {
    let q = query.rows();
    let total: f64 = (0..q)
        .map(|i| {
            (0..candidate.rows())
                .map(|j| cosine(query.row(i), candidate.row(j)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    total / q as f64
}

/// `Q x C` matrix of scores between text queries and video candidates.
pub fn score_matrix(queries: &[Tensor], candidates: &[Tensor], scorer: &Scorer<'_>) -> Result<Tensor> {
    if queries.is_empty() || candidates.is_empty() {
        return Err(Error::contract("score matrix needs at least one query and one candidate"));
    }
    let rows: Vec<Vec<f64>> = queries
        .par_iter()
        .map(|q| score_row(q, candidates, scorer))
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

fn score_row(query: &Tensor, candidates: &[Tensor], scorer: &Scorer<'_>) -> Result<Vec<f64>> {
    match scorer {
        Scorer::GlobalMean => Ok(candidates.iter().map(|c| global_mean_score(query, c)).collect()),
        Scorer::TokenwiseMax => Ok(candidates.iter().map(|c| tokenwise_max_score(query, c)).collect()),
        Scorer::T2vParser { store, head } => {
            let mut g = Graph::new();
            let bind = store.bind_constant(&mut g);
            let ft = g.constant(query.clone());
            candidates
                .iter()
                .map(|c| {
                    let fv = g.constant(c.clone());
                    let s = pair_cosine(&mut g, &bind, head, fv, ft)?;
                    g.scalar(s)
                })
                .collect()
        }
    }
}

fn check_truth(scores: &Tensor, truth: &[usize]) -> Result<(usize, usize)> {
    let (q, c) = scores.dims2();
    if truth.len() != q {
        return Err(Error::contract(format!("{} ground-truth entries for {q} queries", truth.len())));
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= c) {
        return Err(Error::contract(format!("ground truth {t} is not among {c} candidates")));
    }
    Ok((q, c))
}

/// 1-based rank of each query's correct candidate. Equal scores rank the
/// lower candidate index first.
pub fn ranks(scores: &Tensor, truth: &[usize]) -> Result<Vec<usize>> {
    check_truth(scores, truth)?;
    Ok(truth
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = scores.row(i);
            let st = row[t];
            1 + row
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > st || (s == st && j < t))
                .count()
        })
        .collect())
}

/// Percentage of queries whose correct candidate ranks within the top `k`.
pub fn recall_at_k(scores: &Tensor, truth: &[usize], k: usize) -> Result<f64> {
    let (q, c) = check_truth(scores, truth)?;
    if k == 0 || k > c {
        return Err(Error::contract(format!("k = {k} must lie in 1..={c}")));
    }
    let hits = ranks(scores, truth)?.into_iter().filter(|&r| r <= k).count();
    Ok(100.0 * hits as f64 / q as f64)
}

pub fn median_rank(scores: &Tensor, truth: &[usize]) -> Result<f64> {
    let mut r = ranks(scores, truth)?;
    if r.is_empty() {
        return Err(Error::contract("median rank of no queries"));
    }
    r.sort_unstable();
    let n = r.len();
    Ok(if n % 2 == 1 {
        r[n / 2] as f64
    } else {
        (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
    })
}

fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    xs.iter_mut().for_each(|x| *x /= z);
}

/// Elementwise product of the row softmax of `t_row * s` and the column
/// softmax of `t_col * s`.
pub fn dual_softmax_rescore(scores: &Tensor, temperatures: (f64, f64)) -> Result<Tensor> {
    if !scores.is_finite() {
        return Err(Error::Numeric {
            op: "dual_softmax_rescore",
            detail: "non-finite score".into(),
        });
    }
    let (q, c) = scores.dims2();
    let mut by_row: Vec<f64> = scores.data().iter().map(|s| s * temperatures.0).collect();
    for row in by_row.chunks_mut(c) {
        softmax_in_place(row);
    }
    let mut col = vec![0.0; q];
    let mut out = by_row;
    for j in 0..c {
        for i in 0..q {
            col[i] = scores.get(i, j) * temperatures.1;
        }
        softmax_in_place(&mut col);
        for i in 0..q {
            out[i * c + j] *= col[i];
        }
    }
    Tensor::new(vec![q, c], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub method: ScoringMethod,
    pub dsl: bool,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: f64,
    pub seed: u64,
    pub corpus_manifest_hash: String,
    #[serde(skip)]
    pub score_matrix: Option<Tensor>,
}

impl RetrievalReport {
    /// Metrics of `scores`; R@k with `k` beyond the candidate count is
    /// computed at the candidate count.
    pub fn from_scores(
        method: ScoringMethod,
        dsl: bool,
        scores: Tensor,
        truth: &[usize],
        seed: u64,
        corpus_manifest_hash: String,
    ) -> Result<Self> {
        let c = scores.cols();
        let r = |k: usize| recall_at_k(&scores, truth, k.min(c));
        Ok(Self {
            method,
            dsl,
            r1: r(1)?,
            r5: r(5)?,
            r10: r(10)?,
            medr: median_rank(&scores, truth)?,
            seed,
            corpus_manifest_hash,
            score_matrix: Some(scores),
        })
    }

    /// The score matrix as one JSON array per line.
    pub fn matrix_jsonl(&self) -> Option<String> {
        let m = self.score_matrix.as_ref()?;
        let mut out = String::new();
        for i in 0..m.rows() {
            out.push_str(&serde_json::to_string(m.row(i)).expect("finite floats serialize"));
            out.push('\n');
        }
        Some(out)
    }
}
