//! Aspect-structured synthetic retrieval corpora.
//!
//! Every video is a temporal sequence of segments, one per aspect, whose
//! frames are noisy copies of the aspect's latent vector. A caption names a
//! single aspect of its video through the aspect's token phrase; a document
//! concatenates the captions of most of the video's aspects in temporal
//! order. Aspects are drawn from a shared pool, so unrelated videos share
//! content and a caption alone is ambiguous.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on pairwise cosine between aspect latents.
pub const MAX_ASPECT_COSINE: f64 = 0.3;

/// Fraction of a video's aspects a document covers at minimum.
pub const DOC_COVERAGE: f64 = 0.75;

const MAX_REJECTIONS: usize = 100_000;

/// Splitmix64 of `(seed, stream, index)`; independent streams per video.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_POOL: u64 = 1;
const STREAM_VIDEO: u64 = 2;
const STREAM_SPLIT: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub train_videos: usize,
    pub test_videos: usize,
    /// Aspects per video.
    pub a_count: usize,
    /// Frames per video.
    pub frames: usize,
    pub aspect_pool: usize,
    /// Width of raw frame features.
    pub raw_width: usize,
    pub vocab: usize,
    pub phrase_len: usize,
    /// Standard deviation of per-frame Gaussian noise around the latent.
    pub frame_noise: f64,
    /// Probability that a caption token is replaced by a random token.
    pub token_noise: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train_videos: 200,
            test_videos: 50,
            a_count: 6,
            frames: 12,
            aspect_pool: 40,
            raw_width: 64,
            vocab: 256,
            phrase_len: 3,
            frame_noise: 0.3,
            token_noise: 0.1,
        }
    }
}

impl CorpusSpec {
    pub fn videos(&self) -> usize {
        self.train_videos + self.test_videos
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(m));
        if self.videos() < 2 {
            return fail(format!("need at least 2 videos, got {}", self.videos()));
        }
        if !(2..=16).contains(&self.a_count) {
            return fail(format!("a_count must be in 2..=16, got {}", self.a_count));
        }
        if self.frames < self.a_count {
            return fail(format!(
                "{} frames cannot hold {} aspects",
                self.frames, self.a_count
            ));
        }
        if self.aspect_pool < self.a_count {
            return fail(format!(
                "aspect pool of {} is smaller than a_count {}",
                self.aspect_pool, self.a_count
            ));
        }
        if self.raw_width == 0 || self.phrase_len == 0 {
            return fail("raw_width and phrase_len must be positive".into());
        }
        if self.vocab < self.aspect_pool * self.phrase_len {
            return fail(format!(
                "vocab {} cannot give {} aspects disjoint phrases of {} tokens",
                self.vocab, self.aspect_pool, self.phrase_len
            ));
        }
        if !(self.frame_noise >= 0.0 && self.frame_noise.is_finite()) {
            return fail(format!("frame_noise must be finite and >= 0, got {}", self.frame_noise));
        }
        if !(0.0..=1.0).contains(&self.token_noise) {
            return fail(format!("token_noise must be in [0, 1], got {}", self.token_noise));
        }
        Ok(())
    }

    /// Aspects covered by a document, `ceil(0.75 a)` at minimum.
    pub fn doc_coverage_range(&self) -> (usize, usize) {
        let lo = (DOC_COVERAGE * self.a_count as f64).ceil() as usize;
        (lo, lo.max(self.a_count - 1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aspect {
    pub id: usize,
    pub latent: Vec<f64>,
    pub phrase: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub id: usize,
    /// Aspect ids in temporal order, one segment each.
    pub aspects: Vec<usize>,
    /// Frame count of each segment, parallel to `aspects`.
    pub segment_frames: Vec<usize>,
    /// `frames x raw_width`.
    pub frames: Tensor,
}

impl SyntheticVideo {
    pub fn duration(&self) -> usize {
        self.aspects.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Caption,
    Document,
}

/// A run of tokens describing one aspect, taken from `source_video`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySegment {
    pub aspect: usize,
    pub source_video: usize,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub id: usize,
    pub video: usize,
    pub kind: QueryKind,
    pub segments: Vec<QuerySegment>,
}

impl SyntheticQuery {
    pub fn tokens(&self) -> Vec<u32> {
        self.segments.iter().flat_map(|s| s.tokens.iter().copied()).collect()
    }

    pub fn covered_aspects(&self) -> BTreeSet<usize> {
        self.segments.iter().map(|s| s.aspect).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub videos: usize,
    pub captions_per_video: usize,
    pub a_count: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub seed: u64,
    pub counts: CorpusCounts,
    pub splits: Splits,
    pub spec: CorpusSpec,
}

impl CorpusManifest {
    /// Hex SHA-256 of the manifest's JSON line.
    pub fn hash(&self) -> String {
        let line = serde_json::to_string(self).expect("manifest serializes");
        hex::encode(Sha256::digest(line.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub manifest: CorpusManifest,
    pub aspects: Vec<Aspect>,
    pub videos: Vec<SyntheticVideo>,
    /// Captions first, grouped by video, then one document per video.
    pub queries: Vec<SyntheticQuery>,
}

impl SyntheticCorpus {
    pub fn spec(&self) -> &CorpusSpec {
        &self.manifest.spec
    }

    pub fn captions_of(&self, video: usize) -> impl Iterator<Item = &SyntheticQuery> {
        self.queries
            .iter()
            .filter(move |q| q.video == video && q.kind == QueryKind::Caption)
    }

    pub fn document_of(&self, video: usize) -> Option<&SyntheticQuery> {
        self.queries
            .iter()
            .find(|q| q.video == video && q.kind == QueryKind::Document)
    }

    pub fn count(&self, kind: QueryKind) -> usize {
        self.queries.iter().filter(|q| q.kind == kind).count()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn gaussian_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn aspect_pool(spec: &CorpusSpec) -> Result<Vec<Aspect>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_POOL, 0));
    let mut latents: Vec<Vec<f64>> = Vec::with_capacity(spec.aspect_pool);
    let mut rejections = 0;
    while latents.len() < spec.aspect_pool {
        let mut v = gaussian_vec(spec.raw_width, &mut rng);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        // unit norm, scaled so entries have unit variance
        let s = (spec.raw_width as f64).sqrt() / norm;
        v.iter_mut().for_each(|x| *x *= s);
        if latents.iter().all(|u| cosine(u, &v) < MAX_ASPECT_COSINE) {
            latents.push(v);
        } else {
            rejections += 1;
            if rejections > MAX_REJECTIONS {
                return Err(Error::contract(format!(
                    "cannot separate {} aspects in width {} below cosine {MAX_ASPECT_COSINE}",
                    spec.aspect_pool, spec.raw_width
                )));
            }
        }
    }
    let mut tokens: Vec<u32> = (0..spec.vocab as u32).collect();
    tokens.shuffle(&mut rng);
    Ok(latents
        .into_iter()
        .enumerate()
        .map(|(id, latent)| Aspect {
            id,
            latent,
            phrase: tokens[id * spec.phrase_len..(id + 1) * spec.phrase_len].to_vec(),
        })
        .collect())
}

fn noisy_phrase<R: Rng>(phrase: &[u32], spec: &CorpusSpec, rng: &mut R) -> Vec<u32> {
    phrase
        .iter()
        .map(|&t| {
            if rng.random::<f64>() < spec.token_noise {
                rng.random_range(0..spec.vocab as u32)
            } else {
                t
            }
        })
        .collect()
}

struct GeneratedVideo {
    video: SyntheticVideo,
    captions: Vec<QuerySegment>,
    doc_aspects: Vec<usize>,
}

fn generate_video(spec: &CorpusSpec, pool: &[Aspect], id: usize) -> GeneratedVideo {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_VIDEO, id as u64));
    let a = spec.a_count;
    let aspects: Vec<usize> = index::sample(&mut rng, pool.len(), a).into_vec();

    let mut segment_frames = vec![1usize; a];
    for _ in 0..spec.frames - a {
        segment_frames[rng.random_range(0..a)] += 1;
    }
    let mut data = Vec::with_capacity(spec.frames * spec.raw_width);
    for (&asp, &n) in aspects.iter().zip(&segment_frames) {
        for _ in 0..n {
            for &x in &pool[asp].latent {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push(x + spec.frame_noise * e);
            }
        }
    }
    let frames = Tensor::new(vec![spec.frames, spec.raw_width], data).expect("frame count");

    let captions = aspects
        .iter()
        .map(|&asp| QuerySegment {
            aspect: asp,
            source_video: id,
            tokens: noisy_phrase(&pool[asp].phrase, spec, &mut rng),
        })
        .collect();

    let (lo, hi) = spec.doc_coverage_range();
    let c = rng.random_range(lo..=hi);
    let mut keep = index::sample(&mut rng, a, c).into_vec();
    keep.sort_unstable();
    GeneratedVideo {
        video: SyntheticVideo {
            id,
            aspects,
            segment_frames,
            frames,
        },
        captions,
        doc_aspects: keep,
    }
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let pool = aspect_pool(spec)?;
    let generated: Vec<GeneratedVideo> = (0..spec.videos()).map(|i| generate_video(spec, &pool, i)).collect();

    let mut queries = Vec::new();
    for g in &generated {
        for seg in &g.captions {
            queries.push(SyntheticQuery {
                id: queries.len(),
                video: g.video.id,
                kind: QueryKind::Caption,
                segments: vec![seg.clone()],
            });
        }
    }
    for g in &generated {
        queries.push(SyntheticQuery {
            id: queries.len(),
            video: g.video.id,
            kind: QueryKind::Document,
            segments: g.doc_aspects.iter().map(|&i| g.captions[i].clone()).collect(),
        });
    }

    let mut order: Vec<usize> = (0..spec.videos()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_SPLIT, 0)));
    let mut train = order[..spec.train_videos].to_vec();
    let mut test = order[spec.train_videos..].to_vec();
    train.sort_unstable();
    test.sort_unstable();

    Ok(SyntheticCorpus {
        manifest: CorpusManifest {
            format_version: FORMAT_VERSION,
            seed: spec.seed,
            counts: CorpusCounts {
                videos: spec.videos(),
                captions_per_video: spec.a_count,
                a_count: spec.a_count,
                frames: spec.frames,
            },
            splits: Splits { train, test },
            spec: spec.clone(),
        },
        aspects: pool,
        videos: generated.into_iter().map(|g| g.video).collect(),
        queries,
    })
}

/// Replaces `round(ratio * segments)` segments of `query` with caption
/// segments of other videos. Foreign segments prefer aspects absent from the
/// query's video, so at ratio 1 no covered aspect belongs to it whenever the
/// pool allows.
pub fn inject_caption_noise(
    query: &SyntheticQuery,
    corpus: &SyntheticCorpus,
    ratio: f64,
    seed: u64,
) -> Result<SyntheticQuery> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::contract(format!("noise ratio must be in [0, 1], got {ratio}")));
    }
    if corpus.videos.len() < 2 {
        return Err(Error::contract("noise injection needs at least two videos"));
    }
    let n = query.segments.len();
    let replace = (ratio * n as f64).round() as usize;
    let mut out = query.clone();
    if replace == 0 {
        return Ok(out);
    }
    let own: BTreeSet<usize> = corpus.videos[query.video].aspects.iter().copied().collect();
    let others: Vec<usize> = (0..corpus.videos.len()).filter(|&v| v != query.video).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, query.id as u64, query.video as u64));
    let slots = index::sample(&mut rng, n, replace).into_vec();
    for slot in slots {
        let mut fallback = None;
        let mut chosen = None;
        for _ in 0..64 {
            let v = *others.choose(&mut rng).expect("non-empty");
            let caps: Vec<&SyntheticQuery> = corpus.captions_of(v).collect();
            let Some(cap) = caps.choose(&mut rng) else { continue };
            let seg = &cap.segments[0];
            if !own.contains(&seg.aspect) {
                chosen = Some(seg.clone());
                break;
            }
            fallback.get_or_insert_with(|| seg.clone());
        }
        match chosen.or(fallback) {
            Some(seg) => out.segments[slot] = seg,
            None => return Err(Error::contract("other videos have no captions to borrow")),
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Manifest(CorpusManifest),
    Aspect(Aspect),
    Video(SyntheticVideo),
    Query(SyntheticQuery),
}

pub fn save_corpus(corpus: &SyntheticCorpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_corpus(corpus, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_corpus<W: Write>(corpus: &SyntheticCorpus, w: &mut W) -> Result<()> {
    let mut line = |r: &Record| -> Result<()> {
        serde_json::to_writer(&mut *w, r).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
        Ok(())
    };
    line(&Record::Manifest(corpus.manifest.clone()))?;
    for a in &corpus.aspects {
        line(&Record::Aspect(a.clone()))?;
    }
    for v in &corpus.videos {
        line(&Record::Video(v.clone()))?;
    }
    for q in &corpus.queries {
        line(&Record::Query(q.clone()))?;
    }
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<SyntheticCorpus> {
    read_corpus(BufReader::new(std::fs::File::open(path)?))
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<SyntheticCorpus> {
    let mut manifest = None;
    let (mut aspects, mut videos, mut queries) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in r.lines().enumerate() {
        let n = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if n == 1 {
            let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: n,
                detail: e.to_string(),
            })?;
            let found = v.get("format_version").and_then(|x| x.as_u64());
            if found != Some(FORMAT_VERSION as u64) {
                return Err(Error::Version {
                    found: found.unwrap_or(0) as u32,
                    expected: FORMAT_VERSION,
                });
            }
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n,
            detail: e.to_string(),
        })?;
        match (rec, n) {
            (Record::Manifest(m), 1) => manifest = Some(m),
            (Record::Manifest(_), _) => {
                return Err(Error::Parse {
                    line: n,
                    detail: "manifest must be the first record".into(),
                })
            }
            (_, 1) => {
                return Err(Error::Parse {
                    line: 1,
                    detail: "first record must be the manifest".into(),
                })
            }
            (Record::Aspect(a), _) => aspects.push(a),
            (Record::Video(v), _) => videos.push(v),
            (Record::Query(q), _) => queries.push(q),
        }
    }
    let manifest = manifest.ok_or(Error::Parse {
        line: 1,
        detail: "empty corpus file".into(),
    })?;
    let corpus = SyntheticCorpus {
        manifest,
        aspects,
        videos,
        queries,
    };
    check_consistency(&corpus)?;
    Ok(corpus)
}

fn check_consistency(c: &SyntheticCorpus) -> Result<()> {
    let m = &c.manifest;
    if c.videos.len() != m.counts.videos {
        return Err(Error::contract(format!(
            "manifest declares {} videos, file holds {}",
            m.counts.videos,
            c.videos.len()
        )));
    }
    if c.videos.iter().enumerate().any(|(i, v)| v.id != i) {
        return Err(Error::contract("video ids must be dense and ordered"));
    }
    let aspect_ok = |a: usize| a < c.aspects.len();
    for q in &c.queries {
        if q.video >= c.videos.len() || q.segments.iter().any(|s| !aspect_ok(s.aspect)) {
            return Err(Error::contract(format!("query {} references unknown ids", q.id)));
        }
    }
    for &v in m.splits.train.iter().chain(&m.splits.test) {
        if v >= c.videos.len() {
            return Err(Error::contract(format!("split references unknown video {v}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            train_videos: 40,
            test_videos: 10,
            a_count: 4,
            seed: 11,
            ..CorpusSpec::default()
        }
    }

    fn bytes(c: &SyntheticCorpus) -> Vec<u8> {
        let mut out = Vec::new();
        write_corpus(c, &mut out).unwrap();
        out
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = generate_corpus(&small_spec()).unwrap();
        let b = generate_corpus(&small_spec()).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
        let c = generate_corpus(&CorpusSpec { seed: 12, ..small_spec() }).unwrap();
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn counts_follow_the_spec() {
        let c = generate_corpus(&small_spec()).unwrap();
        assert_eq!(c.videos.len(), 50);
        assert_eq!(c.count(QueryKind::Document), 50);
        assert_eq!(c.count(QueryKind::Caption), 200);
        assert_eq!(c.manifest.format_version, 1);
    }

    #[test]
    fn aspect_latents_are_separated() {
        let c = generate_corpus(&small_spec()).unwrap();
        let mut sum = 0.0;
        let mut pairs = 0;
        for (i, a) in c.aspects.iter().enumerate() {
            for b in &c.aspects[i + 1..] {
                let cos = cosine(&a.latent, &b.latent);
                assert!(cos < MAX_ASPECT_COSINE);
                sum += cos;
                pairs += 1;
            }
        }
        assert!(sum / (pairs as f64) < MAX_ASPECT_COSINE);
    }

    #[test]
    fn structure_invariants_hold() {
        let spec = small_spec();
        let c = generate_corpus(&spec).unwrap();
        let (lo, _) = spec.doc_coverage_range();
        for v in &c.videos {
            let distinct: BTreeSet<_> = v.aspects.iter().collect();
            assert_eq!(distinct.len(), spec.a_count);
            assert!(v.segment_frames.iter().all(|&n| n >= 1));
            assert_eq!(v.segment_frames.iter().sum::<usize>(), spec.frames);
            let own: BTreeSet<usize> = v.aspects.iter().copied().collect();
            for cap in c.captions_of(v.id) {
                let cov = cap.covered_aspects();
                assert_eq!(cov.len(), 1);
                assert!(cov.is_subset(&own) && cov.len() < own.len());
            }
            let doc = c.document_of(v.id).unwrap();
            assert!(doc.segments.len() >= lo && doc.covered_aspects().is_subset(&own));
            let pos = |a: usize| v.aspects.iter().position(|&x| x == a).unwrap();
            assert!(doc.segments.windows(2).all(|w| pos(w[0].aspect) < pos(w[1].aspect)));
        }
        let m = &c.manifest.splits;
        assert_eq!(m.train.len(), 40);
        assert!(m.train.iter().all(|v| !m.test.contains(v)));
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let bad = CorpusSpec { frames: 3, ..small_spec() };
        assert_eq!(generate_corpus(&bad).unwrap_err().kind(), "contract");
        let bad = CorpusSpec { train_videos: 1, test_videos: 0, ..small_spec() };
        assert!(generate_corpus(&bad).is_err());
        let bad = CorpusSpec { a_count: 17, frames: 20, aspect_pool: 40, ..small_spec() };
        assert!(generate_corpus(&bad).is_err());
    }

    #[test]
    fn noise_replaces_the_rounded_count() {
        let c = generate_corpus(&small_spec()).unwrap();
        for v in 0..10 {
            let doc = c.document_of(v).unwrap();
            assert_eq!(&inject_caption_noise(doc, &c, 0.0, 3).unwrap(), doc);

            let noisy = inject_caption_noise(doc, &c, 0.25, 3).unwrap();
            let want = (0.25 * doc.segments.len() as f64).round() as usize;
            let foreign = noisy.segments.iter().filter(|s| s.source_video != v).count();
            assert_eq!(foreign, want);

            let all = inject_caption_noise(doc, &c, 1.0, 3).unwrap();
            let own: BTreeSet<usize> = c.videos[v].aspects.iter().copied().collect();
            assert!(all.segments.iter().all(|s| s.source_video != v));
            assert!(all.covered_aspects().is_disjoint(&own));
        }
    }

    #[test]
    fn four_segment_quarter_noise_replaces_one() {
        let spec = CorpusSpec { a_count: 5, ..small_spec() };
        let c = generate_corpus(&spec).unwrap();
        let doc = c.queries.iter().find(|q| q.kind == QueryKind::Document && q.segments.len() == 4).unwrap();
        let noisy = inject_caption_noise(doc, &c, 0.25, 9).unwrap();
        let changed = noisy.segments.iter().zip(&doc.segments).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 1);
    }

    #[test]
    fn single_video_corpus_cannot_be_noised() {
        let mut c = generate_corpus(&small_spec()).unwrap();
        c.videos.truncate(1);
        let doc = c.document_of(0).unwrap().clone();
        assert_eq!(inject_caption_noise(&doc, &c, 0.5, 0).unwrap_err().kind(), "contract");
    }

    #[test]
    fn round_trip_is_exact() {
        let spec = CorpusSpec { train_videos: 3, test_videos: 2, ..small_spec() };
        let c = generate_corpus(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        save_corpus(&c, &path).unwrap();
        let back = load_corpus(&path).unwrap();
        assert_eq!(back, c);
        let first = std::fs::read_to_string(&path).unwrap();
        let manifest: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        assert_eq!(manifest["format_version"], 1);
        assert_eq!(manifest["record"], "manifest");
    }

    #[test]
    fn corrupt_line_is_named() {
        let spec = CorpusSpec { train_videos: 3, test_videos: 2, ..small_spec() };
        let c = generate_corpus(&spec).unwrap();
        let text = String::from_utf8(bytes(&c)).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let half = lines[6].len() / 2;
        lines[6].truncate(half);
        let broken = lines.join("\n");
        match read_corpus(broken.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let spec = CorpusSpec { train_videos: 3, test_videos: 2, ..small_spec() };
        let c = generate_corpus(&spec).unwrap();
        let text = String::from_utf8(bytes(&c)).unwrap().replacen("\"format_version\":1", "\"format_version\":2", 1);
        assert_eq!(read_corpus(text.as_bytes()).unwrap_err().kind(), "version");
    }

    #[test]
    fn derived_seeds_differ_across_streams() {
        let s: BTreeSet<u64> = (0..4).flat_map(|a| (0..50).map(move |b| derive_seed(7, a, b))).collect();
        assert_eq!(s.len(), 200);
    }
}
