//! The ablation grid: pooling x embedding x diversity term x document pairs.

use super::{evaluate, train, EvalOptions, TrainConfig, TrainError};
use crate::error::{Error, Result};
use crate::model::{EmbeddingVariant, ModelVariant};
use crate::retrieval::{RetrievalReport, ScoringMethod};
use crate::synth::{QueryKind, SyntheticCorpus};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const ABLATION_GRID_SIZE: usize = 36;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub pooling: ScoringMethod,
    pub embedding: EmbeddingVariant,
    pub diversity: bool,
    pub documents: bool,
    /// Cell whose trained model was reused, when training would be identical.
    pub reused_from: Option<String>,
    pub caption_r1: f64,
    pub document_r1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub seed: u64,
    pub corpus_manifest_hash: String,
    pub cells: Vec<AblationCell>,
    /// Default model trained and scored with a fixed unit temperature.
    pub unit_temperature: AblationCell,
}

fn cell_name(p: ScoringMethod, e: EmbeddingVariant, div: bool, doc: bool) -> String {
    format!("{}__{}__div{}__doc{}", p.as_str(), e.as_str(), div as u8, doc as u8)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.into()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn reports(ckpt: &super::Checkpoint, corpus: &SyntheticCorpus, method: ScoringMethod) -> Result<(RetrievalReport, RetrievalReport)> {
    let opts = |queries| EvalOptions {
        method,
        queries,
        ..EvalOptions::default()
    };
    Ok((
        evaluate(ckpt, corpus, &opts(QueryKind::Caption))?,
        evaluate(ckpt, corpus, &opts(QueryKind::Document))?,
    ))
}

/// Trains and evaluates every grid cell, writing one caption-query report
/// per cell into `out_dir`, the unit-temperature run into `out_dir/extra`,
/// and `summary.json`.
///
/// Without parsers the diversity term is absent, so the `div1` cell of a
/// parser-free embedding reuses the `div0` model.
pub fn ablate(config: &TrainConfig, corpus: &SyntheticCorpus, out_dir: &Path) -> std::result::Result<AblationSummary, TrainError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir.join("extra")).map_err(Error::from)?;
    let mut trained: HashMap<String, super::Checkpoint> = HashMap::new();
    let mut cells = Vec::with_capacity(ABLATION_GRID_SIZE);
    for pooling in ScoringMethod::ALL {
        for embedding in EmbeddingVariant::ALL {
            for documents in [false, true] {
                for diversity in [false, true] {
                    let name = cell_name(pooling, embedding, diversity, documents);
                    let reuse = (diversity && !embedding.uses_parsers())
                        .then(|| cell_name(pooling, embedding, false, documents));
                    let ckpt = match &reuse {
                        Some(src) => trained[src].clone(),
                        None => {
                            let cfg = TrainConfig {
                                alpha: if diversity { config.alpha } else { 0.0 },
                                doc_video_training: documents,
                                ..config.clone()
                            };
                            let variant = ModelVariant {
                                pooling,
                                embedding,
                                ..ModelVariant::default()
                            };
                            train(&cfg, corpus, variant)?.checkpoint
                        }
                    };
                    let (caption, document) = reports(&ckpt, corpus, pooling)?;
                    write_json(&out_dir.join(format!("{name}.json")), &caption)?;
                    cells.push(AblationCell {
                        name: name.clone(),
                        pooling,
                        embedding,
                        diversity,
                        documents,
                        reused_from: reuse,
                        caption_r1: caption.r1,
                        document_r1: document.r1,
                    });
                    trained.insert(name, ckpt);
                }
            }
        }
    }

    let cfg = TrainConfig {
        temperature_init: 1.0,
        ..config.clone()
    };
    let variant = ModelVariant {
        learn_temperature: false,
        ..ModelVariant::default()
    };
    let ckpt = train(&cfg, corpus, variant)?.checkpoint;
    let (caption, document) = reports(&ckpt, corpus, ScoringMethod::T2vParser)?;
    let name = "unit_temperature".to_string();
    write_json(&out_dir.join("extra").join(format!("{name}.json")), &caption)?;
    let unit_temperature = AblationCell {
        name,
        pooling: ScoringMethod::T2vParser,
        embedding: EmbeddingVariant::Multiview,
        diversity: config.alpha > 0.0,
        documents: config.doc_video_training,
        reused_from: None,
        caption_r1: caption.r1,
        document_r1: document.r1,
    };

    let summary = AblationSummary {
        seed: config.seed,
        corpus_manifest_hash: corpus.manifest.hash(),
        cells,
        unit_temperature,
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}
