//! Small stand-in encoders that turn raw frames or token ids into local rows
//! plus a CLS row.
//!
//! `FrozenRandom` is a fixed seeded projection (video) or embedding table
//! (text) followed by a fixed CLS map; none of its parameters is trainable.
//! `TrainableSmall` adds one residual self-attention block and a layer norm
//! on top of a learned projection or table.

use crate::error::{Error, Result};
use crate::nn::{Binding, LayerNorm, Linear, ParamGroup, ParamId, ParamStore, SelfAttention};
use crate::tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Longest accepted token sequence.
pub const MAX_TEXT_TOKENS: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    FrozenRandom,
    TrainableSmall,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Video,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub modality: Modality,
    pub d: usize,
    pub seed: u64,
    /// Raw frame width for video, vocabulary size for text.
    pub input_width: usize,
}

pub enum RawInput<'a> {
    /// `L x raw_width` frame features.
    Frames(&'a Tensor),
    Tokens(&'a [u32]),
}

#[derive(Clone, Copy, Debug)]
pub struct EncodedSequence {
    /// `L x d`.
    pub local: Var,
    /// `1 x d`.
    pub cls: Var,
    pub modality: Modality,
    pub len: usize,
}

#[derive(Clone, Copy, Debug)]
struct Refiner {
    attn: SelfAttention,
    norm: LayerNorm,
}

/// Parameter handles of one encoder inside a model's [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    /// Video: `raw_width x d` projection weight. Text: `vocab x d` table.
    input: ParamId,
    input_bias: Option<ParamId>,
    refiner: Option<Refiner>,
    cls: Linear,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, config: EncoderConfig) -> Result<Self> {
        if config.d == 0 || config.input_width == 0 {
            return Err(Error::contract("encoder widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, w) = (config.d, config.input_width);
        let group = ParamGroup::Encoder;
        let frozen = config.kind == EncoderKind::FrozenRandom;
        let add = |store: &mut ParamStore, n: &str, t: Tensor| {
            let n = format!("{name}.{n}");
            if frozen {
                store.add_frozen(&n, t, group)
            } else {
                store.add(&n, t, group)
            }
        };
        let (input, input_bias) = match config.modality {
            Modality::Video => {
                let wt = Tensor::randn(&[w, d], 1.0 / (w as f64).sqrt(), &mut rng);
                let b = add(store, "proj.bias", Tensor::zeros(&[d]));
                (add(store, "proj.weight", wt), Some(b))
            }
            Modality::Text => (add(store, "embed", Tensor::randn(&[w, d], 1.0, &mut rng)), None),
        };
        let refiner = (!frozen).then(|| Refiner {
            attn: SelfAttention::new(store, &format!("{name}.sa"), d, 1, group, &mut rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d, group),
        });
        let cls_w = Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng);
        let cls = Linear {
            weight: add(store, "cls.weight", cls_w),
            bias: Some(add(store, "cls.bias", Tensor::zeros(&[d]))),
        };
        Ok(Self {
            config,
            input,
            input_bias,
            refiner,
            cls,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn encode(&self, g: &mut Graph, bind: &Binding, raw: RawInput<'_>) -> Result<EncodedSequence> {
        let cfg = &self.config;
        let x = match (cfg.modality, raw) {
            (Modality::Video, RawInput::Frames(frames)) => {
                if frames.cols() != cfg.input_width {
                    return Err(Error::shape("encode_video", frames.shape(), &[cfg.input_width]));
                }
                let f = g.constant(frames.clone());
                let y = g.matmul(f, bind.var(self.input))?;
                g.add_row(y, bind.var(self.input_bias.expect("video projection has a bias")))?
            }
            (Modality::Text, RawInput::Tokens(tokens)) => {
                if tokens.is_empty() {
                    return Err(Error::contract("cannot encode an empty token sequence"));
                }
                if tokens.len() > MAX_TEXT_TOKENS {
                    return Err(Error::contract(format!(
                        "{} tokens exceed the {MAX_TEXT_TOKENS}-token limit",
                        tokens.len()
                    )));
                }
                if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.input_width) {
                    return Err(Error::contract(format!(
                        "token {t} is outside the vocabulary of {}",
                        cfg.input_width
                    )));
                }
                let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
                g.gather_rows(bind.var(self.input), &ids)?
            }
            (m, _) => {
                return Err(Error::contract(format!("raw input does not match the {m:?} encoder")));
            }
        };
        let local = match &self.refiner {
            Some(r) => {
                let y = r.attn.forward(g, bind, x)?;
                r.norm.forward(g, bind, y)?
            }
            None => x,
        };
        let mean = g.mean_rows(local);
        let cls = self.cls.forward(g, bind, mean)?;
        Ok(EncodedSequence {
            local,
            cls,
            modality: cfg.modality,
            len: g.dims(local).0,
        })
    }
}

/// Builds a standalone encoder from `cfg` and encodes `raw` into `g`.
pub fn encode_sequence(g: &mut Graph, raw: RawInput<'_>, cfg: &EncoderConfig) -> Result<EncodedSequence> {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "enc", cfg.clone())?;
    let bind = store.bind(g);
    enc.encode(g, &bind, raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn video_cfg(kind: EncoderKind, seed: u64) -> EncoderConfig {
        EncoderConfig {
            kind,
            modality: Modality::Video,
            d: 32,
            seed,
            input_width: 16,
        }
    }

    fn text_cfg(kind: EncoderKind) -> EncoderConfig {
        EncoderConfig {
            kind,
            modality: Modality::Text,
            d: 8,
            seed: 3,
            input_width: 20,
        }
    }

    fn frames(l: usize) -> Tensor {
        let data = (0..l * 16).map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0).collect();
        Tensor::new(vec![l, 16], data).unwrap()
    }

    fn encode_values(raw: RawInput<'_>, cfg: &EncoderConfig) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let e = encode_sequence(&mut g, raw, cfg).unwrap();
        (g.value(e.local).clone(), g.value(e.cls).clone())
    }

    #[test]
    fn encoding_is_deterministic() {
        let f = frames(12);
        for kind in [EncoderKind::FrozenRandom, EncoderKind::TrainableSmall] {
            let a = encode_values(RawInput::Frames(&f), &video_cfg(kind, 5));
            let b = encode_values(RawInput::Frames(&f), &video_cfg(kind, 5));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn twelve_frames_give_twelve_rows() {
        let f = frames(12);
        let mut g = Graph::new();
        let e = encode_sequence(&mut g, RawInput::Frames(&f), &video_cfg(EncoderKind::TrainableSmall, 1)).unwrap();
        assert_eq!(g.shape(e.local), &[12, 32]);
        assert_eq!(g.shape(e.cls), &[1, 32]);
        assert_eq!(e.len, 12);
    }

    #[test]
    fn distinct_seeds_give_distinct_encoders() {
        let f = frames(3);
        for kind in [EncoderKind::FrozenRandom, EncoderKind::TrainableSmall] {
            let a = encode_values(RawInput::Frames(&f), &video_cfg(kind, 1));
            let b = encode_values(RawInput::Frames(&f), &video_cfg(kind, 2));
            assert_ne!(a.0, b.0);
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let mut g = Graph::new();
        let cfg = text_cfg(EncoderKind::TrainableSmall);
        let kind = |r: Result<EncodedSequence>| r.unwrap_err().kind();
        assert_eq!(kind(encode_sequence(&mut g, RawInput::Tokens(&[]), &cfg)), "contract");
        assert_eq!(kind(encode_sequence(&mut g, RawInput::Tokens(&[3, 20]), &cfg)), "contract");
        let long = vec![1u32; MAX_TEXT_TOKENS + 1];
        assert_eq!(kind(encode_sequence(&mut g, RawInput::Tokens(&long), &cfg)), "contract");
        let f = frames(2);
        assert_eq!(kind(encode_sequence(&mut g, RawInput::Frames(&f), &cfg)), "contract");
    }

    #[test]
    fn frozen_encoder_receives_no_gradients() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "v", video_cfg(EncoderKind::FrozenRandom, 4)).unwrap();
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let f = frames(4);
        let e = enc.encode(&mut g, &bind, RawInput::Frames(&f)).unwrap();
        let s = g.sum_squares(e.cls);
        let grads = g.backward(s).unwrap();
        assert!(store.iter().all(|(id, p)| p.frozen && grads.get(bind.var(id)).is_none()));
    }

    #[test]
    fn trainable_text_encoder_passes_grad_check() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "t", text_cfg(EncoderKind::TrainableSmall)).unwrap();
        let params = store.values();
        let report = grad_check(
            |g, vars| {
                let bind = Binding::from_vars(vars.to_vec());
                let e = enc.encode(g, &bind, RawInput::Tokens(&[4, 7, 4, 19]))?;
                let a = g.sum_squares(e.local);
                let b = g.sum_squares(e.cls);
                g.add(a, b)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
