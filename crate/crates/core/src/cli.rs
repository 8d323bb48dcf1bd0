//! The `retro-desk` command suite.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::corpus::{
    documents_from_records, read_jsonl, read_token_cache, tokenize, write_jsonl, write_token_cache, CorpusRecord, Document,
};
use crate::dedup::{dedup_filter, MinHasher, DEFAULT_NUM_HASHES, DEFAULT_SHINGLE_LEN};
use crate::embedder::{ChunkEmbedder, DEFAULT_EMBED_SEED};
use crate::error::{ensure, Error, Result};
use crate::eval::{
    default_alphas, evaluate, filtered_bpb, tune_knnlm, write_bpb_csv, write_file, write_histogram_csv, write_records_jsonl,
    EvalRecord, OverlapSource,
};
use crate::index::{precompute_neighbors, ChunkIndex, IndexOptions, NeighborFile, SearchMode};
use crate::model::{init_params, retrofit_params, ModelConfig, NeighborMode};
use crate::pipeline;
use crate::sampler::{sample, Decoding, IndexRetriever, SampleDump, SampleOptions};
use crate::synthetic::{generate, SyntheticConfig};
use crate::train::{load_model, save_model, train, LrSchedule, TrainConfig, TrainExample, TrainOutputs};

/// Neighbours per evaluation chunk used for the overlap `r(C)`.
pub const OVERLAP_NEIGHBORS: usize = 10;

#[derive(Debug, Parser)]
#[command(name = "retro-desk", version, about = "Desk-scale retrieval-enhanced transformer pipeline")]
pub struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize a JSONL corpus into a token cache.
    Ingest(IngestArgs),
    /// Drop training documents that near-duplicate any evaluation document.
    Dedup(DedupArgs),
    /// Embed every chunk of a corpus and build the retrieval index.
    BuildIndex(BuildIndexArgs),
    /// Retrieve neighbours for every chunk of every training sequence.
    PrecomputeNeighbors(PrecomputeArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Freeze a trained model and train fresh retrieval components on top.
    Retrofit(RetrofitArgs),
    /// Score a corpus chunk by chunk and write bits-per-byte metrics.
    Eval(EvalArgs),
    /// Filtered bits-per-byte curve from evaluation records.
    LeakageCurve(LeakageArgs),
    /// Generate a continuation, retrieving at every chunk boundary.
    Sample(SampleArgs),
    /// Tune the kNN-LM baseline on a validation corpus.
    KnnlmTune(KnnArgs),
    /// Write the synthetic lookup corpus.
    GenSynthetic(GenArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct DedupArgs {
    /// Training corpus (token cache or JSONL).
    #[arg(long)]
    pub train: PathBuf,
    /// Evaluation corpus (token cache or JSONL).
    #[arg(long)]
    pub eval: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub threshold: f64,
    #[arg(long, default_value_t = DEFAULT_NUM_HASHES)]
    pub hashes: usize,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub chunk_len: usize,
    /// Skip the coarse quantizer; queries always scan every entry.
    #[arg(long)]
    pub exact: bool,
    /// Centroid count, default `round(sqrt(T))`.
    #[arg(long)]
    pub centroids: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_EMBED_SEED)]
    pub embed_seed: u64,
    /// Default neighbour count stored in the index header.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    /// Centroids probed per query; 0 searches exactly.
    #[arg(long, default_value_t = 4)]
    pub nprobe: usize,
}

impl SearchArgs {
    pub fn mode(&self) -> SearchMode {
        match self.nprobe {
            0 => SearchMode::Exact,
            n => SearchMode::Approximate { nprobe: n },
        }
    }
}

#[derive(Debug, Args)]
pub struct PrecomputeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    /// Neighbours per chunk, default from the index header.
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 8)]
    pub chunk_len: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 32)]
    pub d_enc: usize,
    #[arg(long, default_value_t = 2)]
    pub enc_layers: usize,
    /// Comma-separated 1-based decoder layers with chunked cross-attention.
    #[arg(long, value_delimiter = ',')]
    pub cca_layers: Option<Vec<usize>>,
    /// Neighbours per chunk the model consumes.
    #[arg(long = "k", default_value_t = 2)]
    pub num_neighbors: usize,
    /// `both`, `neighbors_only` or `continuations_only`.
    #[arg(long, default_value = "both")]
    pub neighbor_mode: String,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    /// Train a plain decoder without retrieval.
    #[arg(long)]
    pub no_retrieval: bool,
}

impl ModelArgs {
    pub fn config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::small(self.seq_len, self.chunk_len, self.d_model, self.layers);
        ensure!(self.heads >= 1 && self.d_model % self.heads == 0, "--heads must divide --d-model");
        cfg.heads = self.heads;
        cfg.head_dim = self.d_model / self.heads;
        cfg.d_enc = self.d_enc;
        cfg.enc_d_ffw = 4 * self.d_enc;
        cfg.enc_layers = self.enc_layers;
        if let Some(p) = &self.cca_layers {
            cfg.cca_layers = p.clone();
        }
        if self.no_retrieval {
            cfg.cca_layers.clear();
        }
        cfg.num_neighbors = self.num_neighbors;
        cfg.neighbor_mode = NeighborMode::parse(&self.neighbor_mode)?;
        cfg.dropout = self.dropout;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 2e-4)]
    pub min_lr: f64,
    /// Warmup steps, default a tenth of `--steps`.
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub weight_decay: f64,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// JSONL training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Also write the checkpoint every this many steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

impl OptimArgs {
    pub fn config(&self, seed: u64, k: usize) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch,
            max_steps: self.steps,
            schedule: LrSchedule::WarmupCosine {
                warmup: self.warmup.unwrap_or(self.steps / 10),
                peak: self.lr,
                min: self.min_lr,
                cosine_len: self.steps,
            },
            weight_decay: self.weight_decay,
            seed,
            k_train: k,
            grad_clip: self.grad_clip,
            ..TrainConfig::default()
        }
    }

    fn outputs(&self, checkpoint: &Path) -> TrainOutputs {
        TrainOutputs {
            log: self.log.clone(),
            checkpoint: self.checkpoint_every.map(|n| (checkpoint.to_path_buf(), n)),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Precomputed neighbours; required unless `--no-retrieval`.
    #[arg(long)]
    pub neighbors: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct RetrofitArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub neighbors: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Comma-separated decoder layers to receive chunked cross-attention.
    #[arg(long, value_delimiter = ',')]
    pub cca_layers: Option<Vec<usize>>,
    #[arg(long, default_value_t = 32)]
    pub d_enc: usize,
    #[arg(long, default_value_t = 2)]
    pub enc_layers: usize,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Evaluation corpus; JSONL answer spans are scored separately.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Training index: supplies neighbours and the overlap `r(C)`.
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub retrieval: Switch,
    /// Report bits per byte over chunks with `r(C) <= alpha` only.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Directory for `records.jsonl`, `bpb.csv`, `histogram.csv` and `summary.json`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Debug, Args)]
pub struct LeakageArgs {
    /// `records.jsonl` written by `eval`.
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    /// Comma-separated thresholds, default `0, 0.125, ..., 1`.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long, default_value = "")]
    pub prompt: String,
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
    /// Sample at this temperature instead of decoding greedily.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// JSON dump with neighbours and overlap depths.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Debug, Args)]
pub struct KnnArgs {
    /// Model whose final hidden states key the datastore; retrieval is off.
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus the datastore is built from.
    #[arg(long)]
    pub datastore: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    /// Datastore size cap in tokens; sequences are taken in corpus order.
    #[arg(long, default_value_t = 200_000)]
    pub max_datastore_tokens: usize,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    /// Starting kernel sharpness, default the inverse mean nearest distance.
    #[arg(long)]
    pub alpha0: Option<f64>,
    /// JSONL trace of every evaluated `(lambda, alpha)`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 30_000)]
    pub train_docs: usize,
    #[arg(long, default_value_t = 1000)]
    pub fact_docs: usize,
    #[arg(long, default_value_t = 300)]
    pub valid_docs: usize,
    #[arg(long, default_value_t = 500)]
    pub eval_docs: usize,
    /// Facts reserved for each of validation and evaluation.
    #[arg(long, default_value_t = 400)]
    pub held_out: usize,
    #[arg(long, default_value_t = 8)]
    pub chunk_len: usize,
}

/// A corpus read from either a token cache or JSONL; JSONL keeps its records.
pub struct LoadedCorpus {
    pub docs: Vec<Document>,
    pub records: Option<Vec<CorpusRecord>>,
}

pub fn load_corpus(path: &Path) -> Result<LoadedCorpus> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let records = read_jsonl(path)?;
        Ok(LoadedCorpus { docs: documents_from_records(&records)?, records: Some(records) })
    } else {
        Ok(LoadedCorpus { docs: read_token_cache(path)?, records: None })
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_vec_pretty(value).expect("value serializes");
    s.push(b'\n');
    write_file(path, &s)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn retrieval_examples(cfg: &ModelConfig, docs: &[Document], neighbors: Option<&Path>) -> Result<Vec<TrainExample>> {
    let seqs = pipeline::sequences(docs, cfg)?;
    let nf = match neighbors {
        Some(p) => {
            let nf = NeighborFile::load(p)?;
            if nf.chunk_len != cfg.chunk_len {
                return Err(Error::format(p, format!("chunk length {} does not match the model's {}", nf.chunk_len, cfg.chunk_len)));
            }
            if nf.k < cfg.num_neighbors {
                return Err(Error::format(p, format!("holds {} neighbours per chunk, the model needs {}", nf.k, cfg.num_neighbors)));
            }
            Some(nf)
        }
        None => None,
    };
    pipeline::examples(&seqs, nf.as_ref())
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    retrieval: bool,
    chunks: usize,
    bytes: usize,
    bpb: f64,
    alpha: Option<f64>,
    bpb_alpha: Option<f64>,
    answer_loss_nats: Option<f64>,
}

#[derive(Debug, Serialize)]
struct KnnSummary {
    lambda: f64,
    alpha: f64,
    k: usize,
    alpha0: f64,
    datastore_size: usize,
    valid_tokens: usize,
    lm_perplexity: f64,
    knnlm_perplexity: f64,
}

/// Runs one command and returns its one-line report.
pub fn run(cli: Cli) -> Result<String> {
    let seed = cli.seed;
    let report = match cli.command {
        Command::Ingest(a) => {
            let records = read_jsonl(&a.input)?;
            let docs = documents_from_records(&records)?;
            write_token_cache(&a.output, &docs)?;
            let tokens: usize = docs.iter().map(|d| d.tokens.len()).sum();
            format!("ingested {} documents, {tokens} tokens", docs.len())
        }
        Command::Dedup(a) => {
            let train_docs = load_corpus(&a.train)?.docs;
            let eval_docs = load_corpus(&a.eval)?.docs;
            let hasher = MinHasher::new(a.hashes, DEFAULT_SHINGLE_LEN, seed)?;
            let kept = dedup_filter(&train_docs, &eval_docs, &hasher, a.threshold)?;
            write_token_cache(&a.output, &kept)?;
            format!("kept {} of {} training documents", kept.len(), train_docs.len())
        }
        Command::BuildIndex(a) => {
            let docs = load_corpus(&a.corpus)?.docs;
            let emb = pipeline::embedder(a.chunk_len, a.embed_seed)?;
            let chunks = pipeline::document_chunks(&docs, a.chunk_len)?;
            let opts = IndexOptions {
                approximate: !a.exact,
                num_centroids: a.centroids,
                seed,
                default_k: a.k,
                ..IndexOptions::default()
            };
            let index = ChunkIndex::build(&chunks, &emb, &opts)?;
            index.save(&a.output)?;
            format!("indexed {} chunks into {} lists", index.len(), index.num_centroids())
        }
        Command::PrecomputeNeighbors(a) => {
            let docs = load_corpus(&a.corpus)?.docs;
            let index = ChunkIndex::load(&a.index)?;
            let emb = index.embedder()?;
            let m = index.chunk_len();
            let seqs = crate::corpus::make_sequences(&docs, a.seq_len, m, a.seq_len)?;
            let nf = precompute_neighbors(&seqs, &index, &emb, a.k.unwrap_or(index.default_k()), a.search.mode())?;
            nf.save(&a.output)?;
            format!("{} neighbour records for {} sequences", nf.record_count(), seqs.len())
        }
        Command::Train(a) => {
            let cfg = a.model.config()?;
            ensure!(
                !cfg.retrieval_enabled() || a.neighbors.is_some(),
                "--neighbors is required when training with retrieval"
            );
            let docs = load_corpus(&a.corpus)?.docs;
            let neighbors = if cfg.retrieval_enabled() { a.neighbors.as_deref() } else { None };
            let data = retrieval_examples(&cfg, &docs, neighbors)?;
            let tc = a.optim.config(seed, cfg.num_neighbors);
            let mut store = init_params(&cfg, seed)?;
            let log = train(&mut store, &cfg, &tc, &data, &a.optim.outputs(&a.output))?;
            save_model(&a.output, &cfg, &store)?;
            log.last().map_or_else(String::new, |l| format!("step {} loss {:.4} nats/token", l.step, l.loss_nats))
        }
        Command::Retrofit(a) => {
            let (base_cfg, base) = load_model(&a.base)?;
            let mut cfg = base_cfg.clone();
            cfg.cca_layers = a.cca_layers.unwrap_or_else(|| crate::model::default_cca_layers(cfg.layers));
            cfg.d_enc = a.d_enc;
            cfg.enc_d_ffw = 4 * a.d_enc;
            cfg.enc_layers = a.enc_layers;
            cfg.num_neighbors = a.k;
            cfg.validate()?;
            let docs = load_corpus(&a.corpus)?.docs;
            let data = retrieval_examples(&cfg, &docs, Some(&a.neighbors))?;
            let mut store = retrofit_params(&base, &base_cfg, &cfg, seed)?;
            let tc = a.optim.config(seed, cfg.num_neighbors);
            let log = train(&mut store, &cfg, &tc, &data, &a.optim.outputs(&a.output))?;
            save_model(&a.output, &cfg, &store)?;
            log.last().map_or_else(String::new, |l| format!("step {} loss {:.4} nats/token", l.step, l.loss_nats))
        }
        Command::Eval(a) => {
            let (cfg, store) = load_model(&a.model)?;
            let corpus = load_corpus(&a.corpus)?;
            let index = ChunkIndex::load(&a.index)?;
            let emb = index.embedder()?;
            if index.chunk_len() != cfg.chunk_len {
                return Err(Error::format(&a.index, format!("chunk length {} does not match the model's {}", index.chunk_len(), cfg.chunk_len)));
            }
            let seqs = pipeline::sequences(&corpus.docs, &cfg)?;
            let retrieving = a.retrieval == Switch::On && cfg.retrieval_enabled();
            let data = if retrieving {
                let nf = precompute_neighbors(&seqs, &index, &emb, cfg.num_neighbors, a.search.mode())?;
                pipeline::examples(&seqs, Some(&nf))?
            } else {
                pipeline::examples(&seqs, None)?
            };
            let neighbors: Option<Vec<Vec<Vec<Vec<u32>>>>> = if retrieving {
                Some(data.iter().map(|e| e.neighbors.clone().expect("retrieving")).collect())
            } else {
                None
            };
            let overlap = OverlapSource { index: &index, embedder: &emb as &dyn ChunkEmbedder, k: OVERLAP_NEIGHBORS, mode: a.search.mode() };
            let records = evaluate(&store, &cfg, &seqs, neighbors.as_deref(), &overlap)?;
            let all = filtered_bpb(&records, 1.0)?;
            let answer_loss_nats = match &corpus.records {
                Some(r) if r.iter().any(|r| !r.answer_spans.is_empty()) => {
                    let pos = pipeline::answer_positions(r, &seqs);
                    Some(pipeline::positions_loss(&store, &cfg, &data, &pos)?)
                }
                _ => None,
            };
            let bpb_alpha = match a.alpha {
                Some(alpha) => Some(filtered_bpb(&records, alpha)?.bpb),
                None => None,
            };
            create_dir(&a.out_dir)?;
            write_records_jsonl(&a.out_dir.join("records.jsonl"), &records)?;
            write_bpb_csv(&a.out_dir.join("bpb.csv"), &records, &default_alphas())?;
            write_histogram_csv(&a.out_dir.join("histogram.csv"), &records)?;
            let summary = EvalSummary {
                retrieval: retrieving,
                chunks: all.chunks,
                bytes: all.bytes,
                bpb: all.bpb,
                alpha: a.alpha,
                bpb_alpha,
                answer_loss_nats,
            };
            write_json(&a.out_dir.join("summary.json"), &summary)?;
            let mut line = format!("bpb {} over {} chunks", bpb_alpha.unwrap_or(all.bpb), all.chunks);
            if let Some(l) = answer_loss_nats {
                line.push_str(&format!(", answer loss {l:.4} nats/token"));
            }
            line
        }
        Command::LeakageCurve(a) => {
            let text = std::fs::read_to_string(&a.records).map_err(|e| Error::io(&a.records, e))?;
            let records: Vec<EvalRecord> = text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(&a.records, format!("line {}: {e}", i + 1))))
                .collect::<Result<_>>()?;
            let alphas = a.alphas.unwrap_or_else(default_alphas);
            write_bpb_csv(&a.output, &records, &alphas)?;
            if let Some(h) = &a.histogram {
                write_histogram_csv(h, &records)?;
            }
            format!("{} thresholds over {} chunks", alphas.len(), records.len())
        }
        Command::Sample(a) => {
            let (cfg, store) = load_model(&a.model)?;
            let index = ChunkIndex::load(&a.index)?;
            let emb = index.embedder()?;
            let mut retriever = IndexRetriever::new(&index, &emb, cfg.num_neighbors, a.search.mode());
            let decoding = match a.temperature {
                Some(t) => Decoding::Temperature(t),
                None => Decoding::Greedy,
            };
            let opts = SampleOptions { steps: a.steps, decoding, seed };
            let out = sample(&store, &cfg, &tokenize(a.prompt.as_bytes()), &opts, &mut retriever)?;
            let dump = SampleDump::new(&out, cfg.chunk_len)?;
            if let Some(p) = &a.output {
                dump.save(p)?;
            }
            dump.text
        }
        Command::KnnlmTune(a) => {
            let (cfg, store) = load_model(&a.model)?;
            let mut lm_cfg = cfg.clone();
            lm_cfg.cca_layers.clear();
            let ds_docs = load_corpus(&a.datastore)?.docs;
            let mut ds_data = pipeline::examples(&pipeline::sequences(&ds_docs, &lm_cfg)?, None)?;
            let mut budget = a.max_datastore_tokens;
            ds_data.retain(|e| {
                let keep = e.tokens.len() <= budget;
                if keep {
                    budget -= e.tokens.len();
                }
                keep
            });
            let valid_docs = load_corpus(&a.valid)?.docs;
            let valid = pipeline::examples(&pipeline::sequences(&valid_docs, &lm_cfg)?, None)?;
            let ds = pipeline::build_datastore(&store, &lm_cfg, &ds_data)?;
            ensure!(!ds.is_empty(), "empty datastore");
            let stream = pipeline::knn_stream(&store, &lm_cfg, &ds, &valid, a.k)?;
            ensure!(!stream.is_empty(), "no validation tokens");
            let alpha0 = match a.alpha0 {
                Some(x) => x,
                None => {
                    let mean = stream.iter().map(|s| s.hits[0].1).sum::<f64>() / stream.len() as f64;
                    if mean > 0.0 { 1.0 / mean } else { 1.0 }
                }
            };
            let (params, trace) = tune_knnlm(&stream, alpha0, a.k)?;
            if let Some(p) = &a.trace {
                let mut buf = Vec::new();
                for t in &trace {
                    serde_json::to_writer(&mut buf, t).expect("trace serializes");
                    buf.push(b'\n');
                }
                write_file(p, &buf)?;
            }
            let summary = KnnSummary {
                lambda: params.lambda,
                alpha: params.alpha,
                k: params.k,
                alpha0,
                datastore_size: ds.len(),
                valid_tokens: stream.len(),
                lm_perplexity: crate::eval::knnlm_perplexity(&stream, 0.0, alpha0),
                knnlm_perplexity: crate::eval::knnlm_perplexity(&stream, params.lambda, params.alpha),
            };
            write_json(&a.output, &summary)?;
            format!(
                "lambda {} alpha {:.6}: perplexity {:.4} (LM alone {:.4})",
                summary.lambda, summary.alpha, summary.knnlm_perplexity, summary.lm_perplexity
            )
        }
        Command::GenSynthetic(a) => {
            let cfg = SyntheticConfig {
                seed,
                chunk_len: a.chunk_len,
                num_train_docs: a.train_docs,
                num_fact_docs: a.fact_docs,
                num_valid_docs: a.valid_docs,
                num_eval_docs: a.eval_docs,
                held_out_facts: a.held_out,
                ..SyntheticConfig::default()
            };
            let c = generate(&cfg)?;
            create_dir(&a.out_dir)?;
            write_jsonl(&a.out_dir.join("train.jsonl"), &c.train)?;
            write_jsonl(&a.out_dir.join("valid.jsonl"), &c.valid)?;
            write_jsonl(&a.out_dir.join("eval.jsonl"), &c.eval)?;
            format!("{} train, {} valid, {} eval documents, {} facts", c.train.len(), c.valid.len(), c.eval.len(), c.facts.len())
        }
    };
    Ok(report)
}

/// Entry point of the binary: parses `std::env::args`, honours
/// `RETRO_DESK_THREADS`, runs and maps failures to exit codes.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Ok(v) = std::env::var("RETRO_DESK_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: RETRO_DESK_THREADS must be a positive integer, got {v:?}");
                return 2;
            }
        }
    }
    match run(cli) {
        Ok(report) => {
            println!("{report}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
