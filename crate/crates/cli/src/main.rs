//! Command-line front end: corpus generation, training, evaluation and the
//! ablation grid. Failures print a single JSON line on stderr.

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use t2vparser::model::ModelVariant;
use t2vparser::retrieval::{ScoringMethod, DEFAULT_DSL_TEMPERATURES};
use t2vparser::synth::{generate_corpus, load_corpus, save_corpus, CorpusSpec, QueryKind, SyntheticCorpus};
use t2vparser::train::{ablate, evaluate, train, Checkpoint, EvalOptions, TrainConfig, TrainError};

const CORPUS_FILE: &str = "corpus.jsonl";

#[derive(Parser)]
#[command(name = "t2vparser", version, about = "Partial-alignment text-video retrieval on synthetic corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    T2vparser,
    #[value(name = "global_mean")]
    GlobalMean,
    #[value(name = "tokenwise_max")]
    TokenwiseMax,
}

impl From<Method> for ScoringMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::T2vparser => ScoringMethod::T2vParser,
            Method::GlobalMean => ScoringMethod::GlobalMean,
            Method::TokenwiseMax => ScoringMethod::TokenwiseMax,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Queries {
    Caption,
    Document,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus into <out>/corpus.jsonl.
    GenData {
        /// JSON corpus spec; omitted fields take their defaults.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// JSON training config; omitted fields take their defaults.
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory (or corpus file).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scorer used inside the training loss.
        #[arg(long, value_enum, default_value = "t2vparser")]
        pooling: Method,
        /// Optional JSONL file receiving one loss breakdown per step.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate text-to-video retrieval on the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// Rescore with dual softmax before ranking.
        #[arg(long)]
        dsl: bool,
        /// Fraction of each query's segments replaced by foreign captions.
        #[arg(long, default_value_t = 0.0)]
        noise_ratio: f64,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        #[arg(long, value_enum, default_value = "caption")]
        queries: Queries,
        #[arg(long)]
        report: PathBuf,
        /// Optional JSONL file receiving the query x video score matrix.
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Train and evaluate every cell of the ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<t2vparser::Error> for Failure {
    fn from(e: t2vparser::Error) -> Self {
        Self {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        Self {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self {
            kind: "io",
            message: e.to_string(),
        }
    }
}

fn with_path<T, E: Into<Failure>>(path: &Path, r: Result<T, E>) -> Result<T, Failure> {
    r.map_err(|e| {
        let mut f = e.into();
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = with_path(path, std::fs::read_to_string(path))?;
    serde_json::from_str(&text).map_err(|e| Failure {
        kind: "parse",
        message: format!("{}: {e}", path.display()),
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    with_path(path, std::fs::write(path, text))
}

fn corpus_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(CORPUS_FILE)
    } else {
        data.to_path_buf()
    }
}

fn load_data(data: &Path) -> Result<SyntheticCorpus, Failure> {
    let path = corpus_path(data);
    with_path(&path, load_corpus(&path))
}

fn load_config(path: &Path) -> Result<TrainConfig, Failure> {
    let config: TrainConfig = read_json(path)?;
    with_path(path, config.validate())?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { spec, out } => {
            let s: CorpusSpec = read_json(&spec)?;
            let corpus = with_path(&spec, generate_corpus(&s))?;
            with_path(&out, std::fs::create_dir_all(&out))?;
            let path = out.join(CORPUS_FILE);
            with_path(&path, save_corpus(&corpus, &path))?;
        }
        Command::Train {
            config,
            data,
            out,
            pooling,
            trace,
        } => {
            let config = load_config(&config)?;
            let corpus = load_data(&data)?;
            let variant = ModelVariant {
                pooling: pooling.into(),
                ..ModelVariant::default()
            };
            match train(&config, &corpus, variant) {
                Ok(run) => {
                    with_path(&out, run.checkpoint.save(&out))?;
                    if let Some(path) = trace {
                        let mut text = String::new();
                        for step in &run.trace {
                            text += &serde_json::to_string(step).expect("plain struct");
                            text.push('\n');
                        }
                        write_text(&path, &text)?;
                    }
                }
                Err(TrainError::Aborted {
                    step,
                    reason,
                    last_good,
                }) => {
                    let mut keep = out.clone().into_os_string();
                    keep.push(".last_good");
                    let keep = PathBuf::from(keep);
                    with_path(&keep, last_good.save(&keep))?;
                    return Err(Failure {
                        kind: "numeric",
                        message: format!(
                            "training aborted at step {step}: {reason}; last good state saved to {}",
                            keep.display()
                        ),
                    });
                }
                Err(e) => return Err(e.into()),
            }
        }
        Command::Eval {
            ckpt,
            data,
            method,
            dsl,
            noise_ratio,
            noise_seed,
            queries,
            report,
            matrix,
        } => {
            let checkpoint = with_path(&ckpt, Checkpoint::load(&ckpt))?;
            let corpus = load_data(&data)?;
            let opts = EvalOptions {
                method: method.into(),
                dsl: dsl.then_some(DEFAULT_DSL_TEMPERATURES),
                noise_ratio,
                noise_seed,
                queries: match queries {
                    Queries::Caption => QueryKind::Caption,
                    Queries::Document => QueryKind::Document,
                },
            };
            let result = evaluate(&checkpoint, &corpus, &opts)?;
            let text = serde_json::to_string_pretty(&result).expect("plain struct");
            write_text(&report, &(text + "\n"))?;
            if let Some(path) = matrix {
                write_text(&path, &result.matrix_jsonl().unwrap_or_default())?;
            }
        }
        Command::Ablate { config, data, out } => {
            let config = load_config(&config)?;
            let corpus = load_data(&data)?;
            ablate(&config, &corpus, &out)?;
        }
    }
    Ok(())
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&text).trim_start_matches("error: ");
            return fail("usage", first, 2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f.kind, &f.message, 1),
    }
}
