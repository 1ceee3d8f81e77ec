//! Shared fixtures for the benchmarks.

use t2vparser::synth::generate_corpus;
use t2vparser::{CorpusSpec, ModelVariant, SyntheticCorpus, T2vModel, TrainConfig};

/// Default-sized model and corpus, as used by a training run.
pub struct Fixture {
    pub corpus: SyntheticCorpus,
    pub model: T2vModel,
    pub config: TrainConfig,
}

pub fn fixture(variant: ModelVariant) -> Fixture {
    let corpus = generate_corpus(&CorpusSpec::default()).expect("default spec is valid");
    let config = TrainConfig {
        parser_layers: 4,
        ..TrainConfig::default()
    };
    let model = T2vModel::new(config.model_spec(&corpus, variant)).expect("default model is valid");
    Fixture { corpus, model, config }
}

impl Fixture {
    /// First `n` training videos with their first caption.
    pub fn pairs(&self, n: usize) -> Vec<(usize, Vec<u32>)> {
        self.corpus.manifest.splits.train[..n]
            .iter()
            .map(|&v| (v, self.corpus.captions_of(v).next().expect("every video has a caption").tokens()))
            .collect()
    }
}
