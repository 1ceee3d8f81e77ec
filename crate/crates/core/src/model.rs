//! The full retrieval model: encoders, shared decomposition tokens, both
//! parsers, the communication head, and the learned temperature.

use crate::dual_comm::{pair_cosine, CommHead};
use crate::encoders::{EncodedSequence, Encoder, EncoderConfig, EncoderKind, Modality, RawInput};
use crate::error::{Error, Result};
use crate::nn::{Binding, ParamGroup, ParamId, ParamStore};
use crate::objectives::{alignment_loss, batch_diversity_loss, total_loss, LossVars};
use crate::parser::{parse, AdtBank, FeedForward, Parser};
use crate::retrieval::ScoringMethod;
use crate::synth::derive_seed;
use crate::tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Upper bound on the learned temperature.
pub const MAX_TEMPERATURE: f64 = 100.0;

const ROW_EPS: f64 = 1e-12;

/// Which rows represent a sample before pooling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingVariant {
    /// Local rows plus CLS-fused token outputs.
    #[default]
    Multiview,
    /// Local rows only; no parsers.
    Local,
    /// Local rows plus the CLS row; no parsers.
    GlobalLocal,
}

impl EmbeddingVariant {
    pub const ALL: [EmbeddingVariant; 3] = [Self::Multiview, Self::Local, Self::GlobalLocal];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Multiview => "multiview",
            Self::Local => "local",
            Self::GlobalLocal => "global_local",
        }
    }

    pub fn uses_parsers(self) -> bool {
        self == Self::Multiview
    }
}

/// Architecture choices that are not training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVariant {
    /// Scorer used in the training loss.
    pub pooling: ScoringMethod,
    pub embedding: EmbeddingVariant,
    pub encoder: EncoderKind,
    pub comm_parameter_free: bool,
    pub learn_temperature: bool,
}

impl Default for ModelVariant {
    fn default() -> Self {
        Self {
            pooling: ScoringMethod::T2vParser,
            embedding: EmbeddingVariant::Multiview,
            encoder: EncoderKind::TrainableSmall,
            comm_parameter_free: false,
            learn_temperature: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d: usize,
    pub k: usize,
    pub parser_layers: usize,
    pub heads: usize,
    pub eq3_literal: bool,
    pub temperature_init: f64,
    pub raw_width: usize,
    pub vocab: usize,
    pub seed: u64,
    pub variant: ModelVariant,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::contract(format!(
                "need d, k, heads >= 1 with heads dividing d (d={}, k={}, heads={})",
                self.d, self.k, self.heads
            )));
        }
        if self.variant.embedding.uses_parsers() && self.parser_layers == 0 {
            return Err(Error::contract("parser_layers must be >= 1"));
        }
        if !(self.temperature_init > 0.0 && self.temperature_init <= MAX_TEMPERATURE) {
            return Err(Error::contract(format!(
                "temperature_init must lie in (0, {MAX_TEMPERATURE}], got {}",
                self.temperature_init
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Parsers {
    bank: AdtBank,
    video: Parser,
    text: Parser,
}

/// One sample's pooled-ready rows plus, for multiview models, `E_N`.
#[derive(Clone, Copy, Debug)]
pub struct SampleEmbedding {
    /// Unit-norm rows.
    pub rows: Var,
    pub adt_out: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct T2vModel {
    pub spec: ModelSpec,
    pub store: ParamStore,
    video_encoder: Encoder,
    text_encoder: Encoder,
    parsers: Option<Parsers>,
    comm: CommHead,
    logit_scale: ParamId,
}

/// One training pair: a video's frames and a query's tokens.
#[derive(Clone, Copy, Debug)]
pub struct Pair<'a> {
    pub frames: &'a Tensor,
    pub tokens: &'a [u32],
}

impl T2vModel {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let enc = |modality, stream, width| EncoderConfig {
            kind: spec.variant.encoder,
            modality,
            d: spec.d,
            seed: derive_seed(spec.seed, stream, 0),
            input_width: width,
        };
        let video_encoder = Encoder::new(&mut store, "video_enc", enc(Modality::Video, 11, spec.raw_width))?;
        let text_encoder = Encoder::new(&mut store, "text_enc", enc(Modality::Text, 12, spec.vocab))?;

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 13, 0));
        let ff = if spec.eq3_literal {
            FeedForward::Linear
        } else {
            FeedForward::NormGelu
        };
        let parsers = if spec.variant.embedding.uses_parsers() {
            let bank = AdtBank::new(&mut store, spec.k, spec.d, &mut rng)?;
            let video = Parser::new(&mut store, "video_parser", spec.d, spec.parser_layers, spec.heads, ff, &mut rng);
            let text = Parser::new(&mut store, "text_parser", spec.d, spec.parser_layers, spec.heads, ff, &mut rng);
            Some(Parsers { bank, video, text })
        } else {
            None
        };
        let comm = if spec.variant.comm_parameter_free {
            CommHead::parameter_free(spec.heads)
        } else {
            CommHead::new(&mut store, spec.d, spec.heads, &mut rng)
        };
        let scale = Tensor::scalar(spec.temperature_init.ln());
        let logit_scale = if spec.variant.learn_temperature {
            store.add("logit_scale", scale, ParamGroup::Head)
        } else {
            store.add_frozen("logit_scale", scale, ParamGroup::Head)
        };
        Ok(Self {
            spec,
            store,
            video_encoder,
            text_encoder,
            parsers,
            comm,
            logit_scale,
        })
    }

    pub fn comm_head(&self) -> &CommHead {
        &self.comm
    }

    pub fn logit_scale(&self) -> ParamId {
        self.logit_scale
    }

    /// The shared token bank, absent for variants without parsers.
    pub fn adt_bank(&self) -> Option<&AdtBank> {
        self.parsers.as_ref().map(|p| &p.bank)
    }

    pub fn temperature_value(&self) -> f64 {
        self.store.value(self.logit_scale).data()[0].exp()
    }

    /// Keeps the temperature at or below [`MAX_TEMPERATURE`].
    pub fn clamp_temperature(&mut self) {
        let cap = MAX_TEMPERATURE.ln();
        let v = &mut self.store.value_mut(self.logit_scale).data_mut()[0];
        if *v > cap {
            *v = cap;
        }
    }

    pub fn temperature(&self, g: &mut Graph, bind: &Binding) -> Var {
        g.exp(bind.var(self.logit_scale))
    }

    fn finish(&self, g: &mut Graph, bind: &Binding, enc: EncodedSequence, parser: Option<&Parser>) -> Result<SampleEmbedding> {
        let (rows, adt_out) = match (self.spec.variant.embedding, &self.parsers, parser) {
            (EmbeddingVariant::Multiview, Some(p), Some(parser)) => {
                let mv = parse(g, bind, &p.bank, parser, enc.local, enc.cls)?;
                (mv.multiview, Some(mv.adt_out))
            }
            (EmbeddingVariant::GlobalLocal, ..) => (g.concat_rows(&[enc.local, enc.cls])?, None),
            _ => (enc.local, None),
        };
        Ok(SampleEmbedding {
            rows: g.l2_normalize_rows(rows, ROW_EPS)?,
            adt_out,
        })
    }

    pub fn embed_video(&self, g: &mut Graph, bind: &Binding, frames: &Tensor) -> Result<SampleEmbedding> {
        let enc = self.video_encoder.encode(g, bind, RawInput::Frames(frames))?;
        let parser = self.parsers.as_ref().map(|p| &p.video);
        self.finish(g, bind, enc, parser)
    }

    pub fn embed_text(&self, g: &mut Graph, bind: &Binding, tokens: &[u32]) -> Result<SampleEmbedding> {
        let enc = self.text_encoder.encode(g, bind, RawInput::Tokens(tokens))?;
        let parser = self.parsers.as_ref().map(|p| &p.text);
        self.finish(g, bind, enc, parser)
    }

    /// Cosine between one video and one text under `method`.
    pub fn pair_cosine(&self, g: &mut Graph, bind: &Binding, video: Var, text: Var, method: ScoringMethod) -> Result<Var> {
        match method {
            ScoringMethod::T2vParser => pair_cosine(g, bind, &self.comm, video, text),
            ScoringMethod::GlobalMean => {
                let v = g.mean_rows(video);
                let t = g.mean_rows(text);
                let v = g.l2_normalize_rows(v, ROW_EPS)?;
                let t = g.l2_normalize_rows(t, ROW_EPS)?;
                g.row_dot(v, t)
            }
            ScoringMethod::TokenwiseMax => {
                let sim = g.matmul_nt(text, video)?;
                let best = g.row_max(sim);
                Ok(g.mean_all(best))
            }
        }
    }

    /// `B x B` temperature-scaled scores, rows indexing videos and columns
    /// indexing texts.
    pub fn score_batch(&self, g: &mut Graph, bind: &Binding, videos: &[SampleEmbedding], texts: &[SampleEmbedding]) -> Result<Var> {
        let method = self.spec.variant.pooling;
        let cos = if method == ScoringMethod::GlobalMean {
            let vm: Vec<Var> = videos.iter().map(|v| g.mean_rows(v.rows)).collect();
            let tm: Vec<Var> = texts.iter().map(|t| g.mean_rows(t.rows)).collect();
            let v = g.concat_rows(&vm)?;
            let t = g.concat_rows(&tm)?;
            let v = g.l2_normalize_rows(v, ROW_EPS)?;
            let t = g.l2_normalize_rows(t, ROW_EPS)?;
            g.matmul_nt(v, t)?
        } else {
            let mut rows = Vec::with_capacity(videos.len());
            for v in videos {
                let cells = texts
                    .iter()
                    .map(|t| self.pair_cosine(g, bind, v.rows, t.rows, method))
                    .collect::<Result<Vec<_>>>()?;
                rows.push(g.concat_cols(&cells)?);
            }
            g.concat_rows(&rows)?
        };
        let temp = self.temperature(g, bind);
        g.scale_by(cos, temp)
    }

    /// Total loss of a batch of positive pairs.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        bind: &Binding,
        batch: &[Pair<'_>],
        alpha: f64,
        normalize_rows: bool,
    ) -> Result<LossVars> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut videos = Vec::with_capacity(batch.len());
        let mut texts = Vec::with_capacity(batch.len());
        for p in batch {
            videos.push(self.embed_video(g, bind, p.frames)?);
            texts.push(self.embed_text(g, bind, p.tokens)?);
        }
        let scores = self.score_batch(g, bind, &videos, &texts)?;
        let align = alignment_loss(g, scores)?;
        let div = if self.parsers.is_some() {
            let pairs: Vec<(Var, Var)> = texts
                .iter()
                .zip(&videos)
                .map(|(t, v)| (t.adt_out.expect("parsers"), v.adt_out.expect("parsers")))
                .collect();
            Some(batch_diversity_loss(g, &pairs, normalize_rows)?)
        } else {
            None
        };
        total_loss(g, align, div, alpha)
    }

    fn embed_many<T: Sync>(&self, items: &[T], f: impl Fn(&Self, &mut Graph, &Binding, &T) -> Result<Tensor> + Sync) -> Result<Vec<Tensor>> {
        items
            .par_chunks(16)
            .map(|chunk| {
                let mut g = Graph::new();
                let bind = self.store.bind_constant(&mut g);
                chunk.iter().map(|x| f(self, &mut g, &bind, x)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<Vec<_>>>>()
            .map(|v| v.into_iter().flatten().collect())
    }

    /// Unit-norm row matrices of videos, without gradients.
    pub fn video_rows(&self, frames: &[&Tensor]) -> Result<Vec<Tensor>> {
        self.embed_many(frames, |m, g, b, f| {
            let e = m.embed_video(g, b, f)?;
            Ok(g.value(e.rows).clone())
        })
    }

    pub fn text_rows(&self, tokens: &[&[u32]]) -> Result<Vec<Tensor>> {
        self.embed_many(tokens, |m, g, b, t| {
            let e = m.embed_text(g, b, t)?;
            Ok(g.value(e.rows).clone())
        })
    }

    /// Video-side `E_N` of each video; empty for variants without parsers.
    pub fn video_adt_outputs(&self, frames: &[&Tensor]) -> Result<Vec<Tensor>> {
        if self.parsers.is_none() {
            return Ok(Vec::new());
        }
        self.embed_many(frames, |m, g, b, f| {
            let e = m.embed_video(g, b, f)?;
            Ok(g.value(e.adt_out.expect("parsers")).clone())
        })
    }
}

/// Mean off-diagonal cosine among the rows of `e`; zero for a single row.
pub fn mean_pairwise_cosine(e: &Tensor) -> f64 {
    let k = e.rows();
    if k < 2 {
        return 0.0;
    }
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                let (a, b) = (e.row(i), e.row(j));
                let n = norm(a) * norm(b);
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                sum += if n == 0.0 { 0.0 } else { dot / n };
            }
        }
    }
    sum / (k * (k - 1)) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    pub(crate) fn tiny_spec(variant: ModelVariant) -> ModelSpec {
        ModelSpec {
            d: 8,
            k: 2,
            parser_layers: 1,
            heads: 1,
            eq3_literal: false,
            temperature_init: 1.0 / 0.07,
            raw_width: 6,
            vocab: 12,
            seed: 5,
            variant,
        }
    }

    fn frames(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[3, 6], 1.0, &mut rng)
    }

    #[test]
    fn parsers_share_one_token_bank() {
        let mut model = T2vModel::new(tiny_spec(ModelVariant::default())).unwrap();
        let bank = *model.adt_bank().unwrap();
        let f = frames(1);
        let toks = [1u32, 4, 7];
        let embed = |m: &T2vModel| {
            let mut g = Graph::new();
            let b = m.store.bind(&mut g);
            let v = m.embed_video(&mut g, &b, &f).unwrap();
            let t = m.embed_text(&mut g, &b, &toks).unwrap();
            (g.value(v.adt_out.unwrap()).clone(), g.value(t.adt_out.unwrap()).clone())
        };
        let before = embed(&model);
        assert_eq!(model.store.iter().filter(|(_, p)| p.name.starts_with("adt")).count(), 1);
        let bumped = Tensor::full(&[2, 8], 0.5);
        model.store.set(bank.tokens, bumped).unwrap();
        let after = embed(&model);
        assert_ne!(before.0, after.0);
        assert_ne!(before.1, after.1);
    }

    #[test]
    fn multiview_rows_are_unit_norm_with_l_plus_k_rows() {
        let model = T2vModel::new(tiny_spec(ModelVariant::default())).unwrap();
        let rows = model.video_rows(&[&frames(2)]).unwrap();
        assert_eq!(rows[0].shape(), &[5, 8]);
        for i in 0..5 {
            let n: f64 = rows[0].row(i).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let text = model.text_rows(&[&[3, 3, 9, 0]]).unwrap();
        assert_eq!(text[0].shape(), &[6, 8]);
    }

    #[test]
    fn embedding_variants_change_row_counts() {
        for (emb, rows) in [(EmbeddingVariant::Local, 3), (EmbeddingVariant::GlobalLocal, 4)] {
            let v = ModelVariant {
                embedding: emb,
                ..ModelVariant::default()
            };
            let model = T2vModel::new(tiny_spec(v)).unwrap();
            assert!(model.adt_bank().is_none());
            assert_eq!(model.video_rows(&[&frames(2)]).unwrap()[0].rows(), rows);
        }
    }

    #[test]
    fn temperature_starts_at_init_and_clamps() {
        let mut model = T2vModel::new(tiny_spec(ModelVariant::default())).unwrap();
        assert!((model.temperature_value() - 1.0 / 0.07).abs() < 1e-9);
        let id = model.logit_scale();
        model.store.set(id, Tensor::scalar(10.0)).unwrap();
        model.clamp_temperature();
        assert!((model.temperature_value() - MAX_TEMPERATURE).abs() < 1e-9);
    }

    #[test]
    fn pairwise_cosine_statistic() {
        assert_eq!(mean_pairwise_cosine(&Tensor::from_rows(&[[1.0, 2.0]]).unwrap()), 0.0);
        let dup = Tensor::from_rows(&[[0.3, 0.4], [0.3, 0.4], [0.6, 0.8]]).unwrap();
        assert!((mean_pairwise_cosine(&dup) - 1.0).abs() < 1e-12);
        assert_eq!(mean_pairwise_cosine(&Tensor::eye(3)), 0.0);
    }

    fn check_batch_loss(variant: ModelVariant) {
        let model = T2vModel::new(tiny_spec(variant)).unwrap();
        let fa = frames(3);
        let fb = frames(4);
        let batch = [
            Pair { frames: &fa, tokens: &[1, 5, 2] },
            Pair { frames: &fb, tokens: &[7, 0] },
        ];
        let params = model.store.values();
        let report = grad_check(
            |g, vars| {
                let bind = Binding::from_vars(vars.to_vec());
                Ok(model.batch_loss(g, &bind, &batch, 0.1, true)?.total)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{variant:?}: {report:?}");
    }

    #[test]
    fn batch_loss_gradients_match_finite_differences() {
        check_batch_loss(ModelVariant::default());
        for pooling in [ScoringMethod::GlobalMean, ScoringMethod::TokenwiseMax] {
            check_batch_loss(ModelVariant {
                pooling,
                ..ModelVariant::default()
            });
        }
    }

    #[test]
    fn score_batch_matches_the_eval_scorer() {
        use crate::retrieval::{score_matrix, Scorer};
        let model = T2vModel::new(tiny_spec(ModelVariant::default())).unwrap();
        let fs = [frames(6), frames(7), frames(8)];
        let ts: [&[u32]; 3] = [&[1, 2], &[3, 4, 5], &[9]];
        let mut g = Graph::new();
        let bind = model.store.bind_constant(&mut g);
        let vs: Vec<_> = fs.iter().map(|f| model.embed_video(&mut g, &bind, f).unwrap()).collect();
        let tt: Vec<_> = ts.iter().map(|t| model.embed_text(&mut g, &bind, t).unwrap()).collect();
        let s = model.score_batch(&mut g, &bind, &vs, &tt).unwrap();
        let s = g.value(s).clone();

        let vrows = model.video_rows(&fs.iter().collect::<Vec<_>>()).unwrap();
        let trows = model.text_rows(&ts).unwrap();
        let m = score_matrix(&trows, &vrows, &Scorer::T2vParser { store: &model.store, head: model.comm_head() }).unwrap();
        let temp = model.temperature_value();
        for i in 0..3 {
            for j in 0..3 {
                assert!((s.get(i, j) - temp * m.get(j, i)).abs() < 1e-10);
            }
        }
    }
}
