use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use apirec::corpus::{extract_code_examples, load_raw_examples, parse_api_docs, Corpus, DEFAULT_MIN_API_COUNT};
use apirec::decompose::{TaskQuery, DEFAULT_MAX_SUBTASKS};
use apirec::embedding::{
    build_index, ApiIndex, CachedEmbedder, EmbedText, Embedder, HashingEmbedder, RemoteEmbedder,
    RemoteEmbedderConfig,
};
use apirec::eval::{self, Benchmark, BenchmarkFormat, MetricsReport};
use apirec::example_bank::{build_example_bank, ExampleBank, DEFAULT_KE};
use apirec::jsonl;
use apirec::llm::{Cassette, LlmContext, LlmProvider, LlmSettings, RecordingProvider, RemoteLlm, ReplayProvider};
use apirec::pipeline::{assemble_codegen_prompt, Engine, Mode, PipelineConfig};
use apirec::prompts::PromptTemplates;
use apirec::rerank::DEFAULT_KP;
use apirec::{Error, HttpConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "apirec", version, about = "Recommend library APIs for a programming task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge API documentation JSONL files into a validated corpus.
    Ingest(IngestArgs),
    /// Precompute the API embedding index for a corpus.
    Index(IndexArgs),
    /// Summarize documentation code examples into a few-shot example bank.
    BuildExamples(BuildExamplesArgs),
    /// Recommend APIs for one task.
    Recommend(RecommendArgs),
    /// Score one or more modes on an API recommendation benchmark.
    Evaluate(EvaluateArgs),
    /// Compute pass@k from per-task (n, c) records.
    PassAtK(PassAtKArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// API documentation JSONL files, one record per line.
    #[arg(long, num_args = 0..)]
    docs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Keep only these libraries (default: all).
    #[arg(long = "library", num_args = 1..)]
    libraries: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedderKind {
    /// Offline hashed bag-of-words vectors.
    Hash,
    /// OpenAI-compatible embeddings endpoint.
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedTextArg {
    Description,
    NameAndDescription,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long, value_enum, default_value = "hash")]
    embedder: EmbedderKind,
    /// Model for --embedder remote.
    #[arg(long, default_value = "text-embedding-ada-002")]
    embedding_model: String,
    /// Vector dimension of --embedding-model.
    #[arg(long, default_value_t = 1536)]
    embedding_dim: usize,
    /// Persistent cache for remote embeddings.
    #[arg(long)]
    embed_cache: Option<PathBuf>,
    #[command(flatten)]
    http: HttpArgs,
}

#[derive(Args)]
struct HttpArgs {
    #[arg(long, env = "APIREC_BASE_URL", default_value = "https://api.openai.com/v1")]
    base_url: String,
    #[arg(long, env = "APIREC_API_KEY", hide_env_values = true)]
    api_key: Option<String>,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
    /// Concurrent requests allowed per provider.
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
}

impl HttpArgs {
    fn config(&self) -> HttpConfig {
        HttpConfig {
            base_url: self.base_url.clone(),
            api_key: self.api_key.clone(),
            timeout: std::time::Duration::from_secs(self.timeout_secs),
            max_in_flight: self.max_in_flight.max(1),
            ..HttpConfig::default()
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LlmMode {
    Remote,
    Replay,
    Record,
}

#[derive(Args)]
struct LlmArgs {
    /// replay: answer only from --cassette; record: call the remote model
    /// and append new exchanges to --cassette; remote: call the model.
    #[arg(long, value_enum, default_value = "replay")]
    llm_mode: LlmMode,
    #[arg(long)]
    cassette: Option<PathBuf>,
    #[arg(long, default_value = "gpt-3.5-turbo")]
    model: String,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1.0)]
    top_p: f64,
    #[arg(long, default_value_t = 1024)]
    max_tokens: u32,
    /// Directory of prompt template overrides (summarize.txt, decompose.txt, ...).
    #[arg(long)]
    prompts: Option<PathBuf>,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "name-and-description")]
    embed_text: EmbedTextArg,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Args)]
struct BuildExamplesArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Raw code examples JSONL ({"id","code","api_ids","source"}).
    #[arg(long)]
    examples: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Drop examples using fewer distinct corpus APIs than this.
    #[arg(long, default_value_t = DEFAULT_MIN_API_COUNT)]
    min_apis: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    llm: LlmArgs,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Example bank; without it decomposition is zero-shot.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Prebuilt index; built in memory when absent.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Restrict retrieval to these libraries.
    #[arg(long = "scope", num_args = 1..)]
    scope: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_KE)]
    ke: usize,
    #[arg(long, default_value_t = DEFAULT_KP)]
    kp: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_SUBTASKS)]
    max_subtasks: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    llm: LlmArgs,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Args)]
struct RecommendArgs {
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value = "capir", value_parser = parse_mode)]
    mode: Mode,
    /// Write the full run trace (prompts, replies, intermediate lists) here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write a code-generation prompt using the recommended APIs here.
    #[arg(long)]
    codegen_prompt: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Benchmark JSONL ({"id","task","gold_api_ids"}).
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = eval::DEFAULT_KS)]
    ks: Vec<usize>,
    /// Modes to compare, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "capir", value_parser = parse_mode)]
    mode: Vec<Mode>,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct PassAtKArgs {
    /// JSONL of {"task_id","n","c"}.
    #[arg(long)]
    records: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 10, 100])]
    ks: Vec<u64>,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum EmbedderChoice {
    Hash(HashingEmbedder),
    Remote(Box<CachedEmbedder<RemoteEmbedder>>),
}

impl EmbedderChoice {
    fn new(args: &EmbedArgs) -> Result<Self> {
        Ok(match args.embedder {
            EmbedderKind::Hash => Self::Hash(HashingEmbedder::new()),
            EmbedderKind::Remote => {
                let inner = RemoteEmbedder::new(RemoteEmbedderConfig {
                    http: args.http.config(),
                    model: args.embedding_model.clone(),
                    dim: args.embedding_dim,
                });
                Self::Remote(Box::new(match &args.embed_cache {
                    Some(path) => CachedEmbedder::open(inner, path)?,
                    None => CachedEmbedder::in_memory(inner),
                }))
            }
        })
    }

    fn get(&self) -> &dyn Embedder {
        match self {
            Self::Hash(e) => e,
            Self::Remote(e) => e.as_ref(),
        }
    }

    fn finish(&self) -> Result<()> {
        if let Self::Remote(e) = self {
            e.save()?;
        }
        Ok(())
    }
}

struct LlmSetup {
    provider: Box<dyn LlmProvider>,
    settings: LlmSettings,
    templates: PromptTemplates,
}

impl LlmSetup {
    fn new(args: &LlmArgs, http: &HttpArgs) -> Result<Self> {
        let provider: Box<dyn LlmProvider> = match (args.llm_mode, &args.cassette) {
            (LlmMode::Replay, Some(path)) => Box::new(ReplayProvider::open(path)?),
            (LlmMode::Replay, None) => Box::new(ReplayProvider::new(Cassette::default())),
            (LlmMode::Record, Some(path)) => Box::new(RecordingProvider::open(RemoteLlm::new(http.config()), path)?),
            (LlmMode::Record, None) => bail!("--llm-mode record needs --cassette"),
            (LlmMode::Remote, _) => Box::new(RemoteLlm::new(http.config())),
        };
        let templates = match &args.prompts {
            Some(dir) => PromptTemplates::with_overrides(dir)?,
            None => PromptTemplates::default(),
        };
        Ok(Self {
            provider,
            settings: LlmSettings {
                model_id: args.model.clone(),
                temperature: args.temperature,
                top_p: args.top_p,
                max_tokens: args.max_tokens,
            },
            templates,
        })
    }

    fn context(&self) -> LlmContext<'_> {
        LlmContext::new(self.provider.as_ref(), &self.settings, &self.templates)
    }
}

fn embed_text(arg: EmbedTextArg) -> EmbedText {
    match arg {
        EmbedTextArg::Description => EmbedText::Description,
        EmbedTextArg::NameAndDescription => EmbedText::NameAndDescription,
    }
}

fn cmd_ingest(args: &IngestArgs) -> Result<()> {
    let corpus = parse_api_docs(&args.docs, &args.libraries)?;
    corpus.write_jsonl(&args.out)?;
    println!("ingested {} records", corpus.len());
    Ok(())
}

fn cmd_index(args: &IndexArgs) -> Result<()> {
    let corpus = Corpus::load(&args.corpus)?;
    let embedder = EmbedderChoice::new(&args.embed)?;
    let index = build_index(&corpus, embedder.get(), embed_text(args.embed_text), args.jobs)?;
    index.save(&args.out)?;
    embedder.finish()?;
    println!("indexed {} records with {}", index.len(), index.provider_id());
    Ok(())
}

fn cmd_build_examples(args: &BuildExamplesArgs) -> Result<()> {
    let corpus = Corpus::load(&args.corpus)?;
    let raws = load_raw_examples(&args.examples)?;
    let n_raw = raws.len();
    let extraction = extract_code_examples(&corpus, raws, args.min_apis);
    let embedder = EmbedderChoice::new(&args.embed)?;
    let llm = LlmSetup::new(&args.llm, &args.embed.http)?;
    let built = build_example_bank(&extraction.examples, &corpus, &llm.context(), embedder.get(), args.jobs)?;
    built.bank.save(&args.out)?;
    embedder.finish()?;
    println!(
        "examples: {} read, {} kept, {} below --min-apis {}, {} unresolved api refs",
        n_raw,
        extraction.examples.len(),
        extraction.below_threshold.len(),
        args.min_apis,
        extraction.unresolved.len()
    );
    println!(
        "bank: {} pairs built, {} skipped",
        built.bank.len(),
        extraction.below_threshold.len() + built.failures.len()
    );
    for f in &built.failures {
        println!("skipped {}: {}", f.example_id, f.reason);
    }
    Ok(())
}

/// Loaded corpus, index, bank and providers for the pipeline commands.
struct Loaded {
    corpus: Corpus,
    index: ApiIndex,
    bank: ExampleBank,
    embedder: EmbedderChoice,
    llm: LlmSetup,
    config: PipelineConfig,
    scope: Option<Vec<String>>,
}

impl Loaded {
    fn new(args: &PipelineArgs) -> Result<Self> {
        let corpus = Corpus::load(&args.corpus)?;
        let embedder = EmbedderChoice::new(&args.embed)?;
        let index = match &args.index {
            Some(path) => ApiIndex::load(path)?,
            None => build_index(&corpus, embedder.get(), EmbedText::default(), args.jobs)?,
        };
        let bank = match &args.bank {
            Some(path) => ExampleBank::load(path, embedder.get())
                .with_context(|| format!("loading example bank {}", path.display()))?,
            None => ExampleBank::empty(embedder.get()),
        };
        Ok(Self {
            llm: LlmSetup::new(&args.llm, &args.embed.http)?,
            corpus,
            index,
            bank,
            embedder,
            config: PipelineConfig {
                k_e: args.ke,
                k_p: args.kp,
                max_subtasks: args.max_subtasks,
                jobs: args.jobs,
            },
            scope: (!args.scope.is_empty()).then(|| args.scope.clone()),
        })
    }

    fn engine(&self) -> Result<Engine<'_>> {
        Ok(Engine::new(
            &self.corpus,
            &self.index,
            &self.bank,
            self.embedder.get(),
            self.llm.context(),
            self.config.clone(),
        )?)
    }

    fn query(&self, text: &str) -> TaskQuery {
        let q = TaskQuery::new(text);
        match &self.scope {
            Some(s) => q.with_scope(s.clone()),
            None => q,
        }
    }
}

fn cmd_recommend(args: &RecommendArgs) -> Result<()> {
    let loaded = Loaded::new(&args.pipeline)?;
    let engine = loaded.engine()?;
    let task = loaded.query(&args.task);
    let rec = engine.run(&task, args.k, args.mode)?;
    for (i, api) in rec.apis.iter().enumerate() {
        let desc = loaded.corpus.get(&api.api_id)?.description.as_str();
        println!("{}. {} — {}", i + 1, api.api_id, desc);
    }
    if let Some(path) = &args.codegen_prompt {
        let prompt = assemble_codegen_prompt(&task, &rec.apis, &loaded.corpus, &loaded.llm.templates)?;
        std::fs::write(path, prompt).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.trace {
        jsonl::write_json(path, &engine.trace(rec))?;
    }
    loaded.embedder.finish()?;
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let loaded = Loaded::new(&args.pipeline)?;
    let Benchmark::ApiRec(samples) = eval::load_benchmark(&args.dataset, BenchmarkFormat::ApiRec)? else {
        unreachable!()
    };
    eval::check_gold(&samples, &loaded.corpus)?;
    let engine = loaded.engine()?;
    let mut reports: Vec<MetricsReport> = Vec::new();
    for &mode in &args.mode {
        let report = eval::evaluate(
            &samples,
            |s, k| {
                let rec = engine.run(&loaded.query(&s.task), k, mode)?;
                Ok(rec.apis.into_iter().map(|a| a.api_id).collect())
            },
            &args.ks,
            mode.as_str(),
            args.pipeline.jobs,
        )?;
        if report.n_failed > 0 {
            eprintln!("{mode}: {} of {} samples failed", report.n_failed, samples.len());
        }
        reports.push(report);
    }
    print!("{}", eval::render_table(&reports));
    if let Some(path) = &args.report {
        jsonl::write_json(path, &json!({ "dataset": args.dataset, "reports": reports }))?;
    }
    loaded.embedder.finish()?;
    Ok(())
}

fn cmd_pass_at_k(args: &PassAtKArgs) -> Result<()> {
    let records = eval::load_pass_records(&args.records)?;
    let report = eval::pass_report(&records, &args.ks)?;
    println!("tasks: {}", report.n_tasks);
    for (k, v) in &report.per_k {
        println!("pass@{k}: {:.2}", v * 100.0);
    }
    if let Some(path) = &args.report {
        jsonl::write_json(path, &report)?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let transport = err
        .chain()
        .filter_map(|e| e.downcast_ref::<Error>())
        .any(Error::is_transport);
    if transport {
        2
    } else {
        1
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Index(a) => cmd_index(a),
        Command::BuildExamples(a) => cmd_build_examples(a),
        Command::Recommend(a) => cmd_recommend(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::PassAtK(a) => cmd_pass_at_k(a),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn output_paths(cli: &Cli) -> Vec<&Path> {
    let mut out: Vec<&Path> = Vec::new();
    match &cli.command {
        Command::Ingest(a) => out.push(&a.out),
        Command::Index(a) => out.push(&a.out),
        Command::BuildExamples(a) => out.push(&a.out),
        Command::Recommend(a) => out.extend(a.trace.iter().chain(&a.codegen_prompt).map(PathBuf::as_path)),
        Command::Evaluate(a) => out.extend(a.report.as_deref()),
        Command::PassAtK(a) => out.extend(a.report.as_deref()),
    }
    out
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("APIREC_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = output_paths(&cli)
        .into_iter()
        .try_for_each(ensure_parent)
        .and_then(|_| run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
