//! Training configuration, the optimization loop, evaluation, and the
//! ablation grid.

mod ablate;
mod adam;
mod checkpoint;

pub use ablate::{ablate, AblationCell, AblationSummary, ABLATION_GRID_SIZE};
pub use adam::{adam_step, Adam, AdamHyper};
pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::model::{mean_pairwise_cosine, ModelSpec, ModelVariant, Pair, T2vModel};
use crate::nn::ParamGroup;
use crate::objectives::LossBreakdown;
use crate::retrieval::{dual_softmax_rescore, score_matrix, RetrievalReport, Scorer, ScoringMethod};
use crate::synth::{derive_seed, inject_caption_noise, QueryKind, SyntheticCorpus};
use crate::tensor::{Graph, Tensor};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const STREAM_EPOCH: u64 = 21;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub d: usize,
    pub k: usize,
    pub parser_layers: usize,
    pub heads: usize,
    pub alpha: f64,
    pub temperature_init: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub seed: u64,
    pub diversity_normalize_rows: bool,
    pub eq3_literal: bool,
    pub doc_video_training: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 32,
            k: 8,
            parser_layers: 8,
            heads: 1,
            alpha: 0.1,
            temperature_init: 1.0 / 0.07,
            batch_size: 16,
            epochs: 30,
            lr_encoder: 3e-3,
            lr_head: 3e-3,
            seed: 0,
            diversity_normalize_rows: true,
            eq3_literal: false,
            doc_video_training: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        for (n, lr) in [("lr_encoder", self.lr_encoder), ("lr_head", self.lr_head)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{n} must be finite and >= 0, got {lr}"));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self, corpus: &SyntheticCorpus, variant: ModelVariant) -> ModelSpec {
        ModelSpec {
            d: self.d,
            k: self.k,
            parser_layers: self.parser_layers,
            heads: self.heads,
            eq3_literal: self.eq3_literal,
            temperature_init: self.temperature_init,
            raw_width: corpus.spec().raw_width,
            vocab: corpus.spec().vocab,
            seed: self.seed,
            variant,
        }
    }

    pub fn learning_rate(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.lr_encoder,
            ParamGroup::Head => self.lr_head,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Failed(#[from] Error),
    /// Training hit a non-finite loss; `last_good` holds the state before the
    /// failing step.
    #[error("training aborted at step {step}: {reason}")]
    Aborted {
        step: u64,
        reason: String,
        last_good: Box<Checkpoint>,
    },
}

impl TrainError {
    pub fn kind(&self) -> &'static str {
        match self {
            TrainError::Failed(e) => e.kind(),
            TrainError::Aborted { .. } => "numeric",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    /// One entry per optimizer step.
    pub trace: Vec<LossBreakdown>,
    /// Kind of each sampled query, per step.
    pub sampled_kinds: Vec<Vec<QueryKind>>,
}

struct VideoQueries<'a> {
    captions: Vec<&'a [u32]>,
    document: Option<Vec<u32>>,
}

fn collect_queries(corpus: &SyntheticCorpus, video: usize) -> VideoQueries<'_> {
    VideoQueries {
        captions: corpus
            .captions_of(video)
            .map(|q| q.segments[0].tokens.as_slice())
            .collect(),
        document: corpus.document_of(video).map(|d| d.tokens()),
    }
}

pub fn train(config: &TrainConfig, corpus: &SyntheticCorpus, variant: ModelVariant) -> std::result::Result<TrainRun, TrainError> {
    config.validate()?;
    let model = T2vModel::new(config.model_spec(corpus, variant))?;
    let optimizer = Adam::new(&model.store);
    let mut ckpt = Checkpoint {
        config: config.clone(),
        manifest_hash: corpus.manifest.hash(),
        model,
        optimizer,
    };
    let train_ids = corpus.manifest.splits.train.clone();
    if train_ids.len() < 2 {
        return Err(Error::contract("training needs at least two training videos").into());
    }
    let queries: Vec<VideoQueries<'_>> = train_ids.iter().map(|&v| collect_queries(corpus, v)).collect();
    if queries.iter().any(|q| q.captions.is_empty()) {
        return Err(Error::contract("every training video needs a caption").into());
    }

    let mut trace = Vec::new();
    let mut sampled_kinds = Vec::new();
    let mut order: Vec<usize> = (0..train_ids.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_EPOCH, epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut kinds = Vec::with_capacity(chunk.len());
            let batch: Vec<Pair<'_>> = chunk
                .iter()
                .map(|&i| {
                    let q = &queries[i];
                    let use_doc = config.doc_video_training && q.document.is_some() && rng.random_bool(0.5);
                    let tokens: &[u32] = if use_doc {
                        kinds.push(QueryKind::Document);
                        q.document.as_deref().expect("checked")
                    } else {
                        kinds.push(QueryKind::Caption);
                        q.captions.choose(&mut rng).expect("checked")
                    };
                    Pair {
                        frames: &corpus.videos[train_ids[i]].frames,
                        tokens,
                    }
                })
                .collect();

            match optimizer_step(&mut ckpt, config, &batch) {
                Ok(breakdown) => trace.push(breakdown),
                Err(Error::Numeric { op, detail }) => {
                    return Err(TrainError::Aborted {
                        step: ckpt.optimizer.t + 1,
                        reason: format!("{op}: {detail}"),
                        last_good: Box::new(ckpt),
                    })
                }
                Err(e) => return Err(e.into()),
            }
            sampled_kinds.push(kinds);
        }
    }
    Ok(TrainRun {
        checkpoint: ckpt,
        trace,
        sampled_kinds,
    })
}

/// Forward, backward and one Adam update. A non-finite loss or gradient
/// leaves the checkpoint untouched.
fn optimizer_step(ckpt: &mut Checkpoint, config: &TrainConfig, batch: &[Pair<'_>]) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let bind = ckpt.model.store.bind(&mut g);
    let loss = ckpt
        .model
        .batch_loss(&mut g, &bind, batch, config.alpha, config.diversity_normalize_rows)?;
    let breakdown = LossBreakdown::read(&g, &loss)?;
    if !breakdown.is_finite() {
        return Err(Error::Numeric {
            op: "total_loss",
            detail: format!("non-finite loss {}", breakdown.total),
        });
    }
    let mut grads = g.backward(loss.total)?;
    let per_param: Vec<Option<Tensor>> = bind.vars().iter().map(|&v| grads.take(v)).collect();
    ckpt.optimizer
        .step(&mut ckpt.model.store, &per_param, |gr| config.learning_rate(gr))?;
    ckpt.model.clamp_temperature();
    Ok(breakdown)
}

/// Mean over `videos` of the mean off-diagonal cosine among each video's
/// `k` token outputs.
pub fn multiview_similarity_stat(model: &T2vModel, corpus: &SyntheticCorpus, videos: &[usize]) -> Result<f64> {
    if model.adt_bank().is_none() {
        return Err(Error::contract("the model has no decomposition tokens"));
    }
    if videos.is_empty() {
        return Err(Error::contract("no videos to measure"));
    }
    let frames: Vec<&Tensor> = videos.iter().map(|&v| &corpus.videos[v].frames).collect();
    let outs = model.video_adt_outputs(&frames)?;
    Ok(outs.iter().map(mean_pairwise_cosine).sum::<f64>() / outs.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub method: ScoringMethod,
    /// Temperature pair for dual-softmax rescoring.
    pub dsl: Option<(f64, f64)>,
    pub noise_ratio: f64,
    pub noise_seed: u64,
    pub queries: QueryKind,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            method: ScoringMethod::T2vParser,
            dsl: None,
            noise_ratio: 0.0,
            noise_seed: 0,
            queries: QueryKind::Caption,
        }
    }
}

/// Text-to-video retrieval over the test split: queries are the chosen kind
/// of test query, candidates are the test videos.
pub fn evaluate(ckpt: &Checkpoint, corpus: &SyntheticCorpus, opts: &EvalOptions) -> Result<RetrievalReport> {
    if ckpt.manifest_hash != corpus.manifest.hash() {
        return Err(Error::contract(
            "checkpoint was trained on a different corpus (manifest hash mismatch)",
        ));
    }
    let candidates = &corpus.manifest.splits.test;
    let position = |v: usize| candidates.iter().position(|&c| c == v);
    let mut token_lists = Vec::new();
    let mut truth = Vec::new();
    for q in corpus.queries.iter().filter(|q| q.kind == opts.queries) {
        let Some(t) = position(q.video) else { continue };
        let q = if opts.noise_ratio > 0.0 {
            inject_caption_noise(q, corpus, opts.noise_ratio, opts.noise_seed)?
        } else {
            q.clone()
        };
        token_lists.push(q.tokens());
        truth.push(t);
    }
    if token_lists.is_empty() {
        return Err(Error::contract("the test split has no queries of the requested kind"));
    }
    let model = &ckpt.model;
    let frames: Vec<&Tensor> = candidates.iter().map(|&v| &corpus.videos[v].frames).collect();
    let video_rows = model.video_rows(&frames)?;
    let tokens: Vec<&[u32]> = token_lists.iter().map(Vec::as_slice).collect();
    let text_rows = model.text_rows(&tokens)?;
    let scorer = match opts.method {
        ScoringMethod::T2vParser => Scorer::T2vParser {
            store: &model.store,
            head: model.comm_head(),
        },
        ScoringMethod::GlobalMean => Scorer::GlobalMean,
        ScoringMethod::TokenwiseMax => Scorer::TokenwiseMax,
    };
    let mut scores = score_matrix(&text_rows, &video_rows, &scorer)?;
    if let Some(t) = opts.dsl {
        scores = dual_softmax_rescore(&scores, t)?;
    }
    RetrievalReport::from_scores(
        opts.method,
        opts.dsl.is_some(),
        scores,
        &truth,
        ckpt.config.seed,
        ckpt.manifest_hash.clone(),
    )
}
