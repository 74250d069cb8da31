//! `cograg` — build the tagged knowledge base, run retrieval queries,
//! predict cognitive routing, and evaluate the pipeline end to end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 provider error.

use clap::{Args, Parser, Subcommand};
use cograg_core::cogpred::{consolidate, predict_binary, predict_level, RoutingCategory};
use cograg_core::eval::{
    compute_report, emit_report, load_exam, run_eval, stage, ExamMode, Method, ReportFormat,
    RunConfig,
};
use cograg_core::kb::{deduplicate, KnowledgeBase, Tag};
use cograg_core::llm::{ChatProvider, Embedder, MockHashEmbedder, RemoteChat, RemoteEmbedder, ScriptedMock};
use cograg_core::prompts::PromptRegistry;
use cograg_core::retrieval::{
    bm25_search, dense_search, hybrid_search, tag_constrained_search, Bm25Params, RankedList,
    DEFAULT_RRF_K,
};
use std::collections::BTreeSet;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

/// Default seed for the deterministic hash embedder; ingest and query
/// embeddings must agree on it.
const DEFAULT_EMBED_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "cograg", version, about = "Cognition-routed retrieval QA pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a corpus file, embed it, and persist the knowledge base.
    Ingest(IngestArgs),
    /// Evaluate an exam file with one of the pipeline methods.
    Eval(EvalArgs),
    /// Predict cognitive levels / routing categories for an exam file.
    Predict(PredictArgs),
    /// Run a single retrieval query against a persisted knowledge base.
    Retrieve(RetrieveArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Line-delimited corpus records (question, answer, source, tags).
    #[arg(long)]
    corpus: PathBuf,
    /// Output path for the persisted knowledge base.
    #[arg(long)]
    out: PathBuf,
    /// Semantic-duplicate threshold (cosine); omit to skip deduplication.
    #[arg(long)]
    dedup: Option<f64>,
    /// Embedding dimension for the mock hash embedder.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Seed for the mock hash embedder.
    #[arg(long, default_value_t = DEFAULT_EMBED_SEED)]
    embed_seed: u64,
    /// Use the remote embeddings endpoint (COGRAG_EMB_URL) instead of the mock.
    #[arg(long)]
    remote_embedder: bool,
}

#[derive(Args)]
struct ProviderArgs {
    /// Replay a recorded mock script (line-delimited tag/index/reply).
    #[arg(long, value_name = "SCRIPT")]
    mock: Option<PathBuf>,
    /// Use the remote chat endpoint from COGRAG_LLM_URL / COGRAG_LLM_KEY.
    #[arg(long)]
    remote: bool,
    /// Prompt registry file overriding the built-in templates.
    #[arg(long)]
    prompts: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    kb: PathBuf,
    #[arg(long)]
    exam: PathBuf,
    /// baseline | bm25 | dense | hybrid | cograg | cograg_plus
    #[arg(long)]
    method: String,
    /// Evaluate only Single or Scenario items.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, default_value_t = 50)]
    alpha: u8,
    #[arg(long, default_value_t = 35)]
    beta: u8,
    #[arg(long, default_value_t = 5)]
    topk: usize,
    #[arg(long, default_value_t = 1024)]
    budget: usize,
    /// Output-token budget for structured proofs.
    #[arg(long, default_value_t = 256)]
    proof_tokens: u32,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// table | machine
    #[arg(long, default_value = "table")]
    format: String,
    /// Write a line-delimited run log (provider calls + item outcomes).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Disable the reinforced-retrieval stage (ablation).
    #[arg(long)]
    no_rr: bool,
    /// Disable constrained reasoning (ablation).
    #[arg(long)]
    no_cr: bool,
    /// Replace constrained reasoning with free-form chain-of-thought.
    #[arg(long)]
    standard_cot: bool,
    /// Inject the predicted cognitive level into baseline-style prompts.
    #[arg(long)]
    cog_injection: bool,
    /// Disable few-shot exemplars in level prediction.
    #[arg(long)]
    no_few_shot: bool,
    /// Predict LOW/HIGH directly instead of five-way mapping.
    #[arg(long)]
    direct_binary: bool,
    /// Disable the LLM verifier tier of the consistency check.
    #[arg(long)]
    no_verifier: bool,
    #[arg(long, default_value_t = DEFAULT_EMBED_SEED)]
    embed_seed: u64,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    exam: PathBuf,
    /// Include the built-in few-shot exemplars.
    #[arg(long)]
    few_shot: bool,
    /// Direct two-way LOW/HIGH prediction instead of five-way mapping.
    #[arg(long)]
    direct_binary: bool,
    #[arg(long)]
    mode: Option<String>,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    kb: PathBuf,
    #[arg(long)]
    query: String,
    /// Comma-separated tag codes (for tag_dense), e.g. T1,T3.
    #[arg(long)]
    tags: Option<String>,
    /// bm25 | dense | hybrid | tag_dense
    #[arg(long, default_value = "tag_dense")]
    method: String,
    #[arg(long, default_value_t = 5)]
    topk: usize,
    #[arg(long, default_value_t = DEFAULT_EMBED_SEED)]
    embed_seed: u64,
}

enum CliError {
    Usage(String),
    Data(String),
    Provider(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Provider(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Provider(m) => m,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not usage errors.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Retrieve(args) => cmd_retrieve(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn load_registry(path: &Option<PathBuf>) -> Result<PromptRegistry, CliError> {
    match path {
        Some(p) => PromptRegistry::from_file(p).map_err(data_err),
        None => Ok(PromptRegistry::default()),
    }
}

enum Provider {
    Mock(ScriptedMock),
    Remote(RemoteChat),
}

impl ChatProvider for Provider {
    fn complete(
        &self,
        request: &cograg_core::ChatRequest,
    ) -> Result<cograg_core::ChatResponse, cograg_core::LlmError> {
        match self {
            Provider::Mock(p) => p.complete(request),
            Provider::Remote(p) => p.complete(request),
        }
    }
}

impl Provider {
    fn calls(&self) -> Vec<cograg_core::llm::CallRecord> {
        match self {
            Provider::Mock(p) => p.call_log().snapshot(),
            Provider::Remote(p) => p.call_log().snapshot(),
        }
    }
}

fn build_provider(args: &ProviderArgs) -> Result<Provider, CliError> {
    match (&args.mock, args.remote) {
        (Some(path), false) => Ok(Provider::Mock(
            ScriptedMock::from_path(path).map_err(data_err)?,
        )),
        (None, true) => Ok(Provider::Remote(
            RemoteChat::from_env().map_err(|e| CliError::Usage(e.to_string()))?,
        )),
        (Some(_), true) => Err(CliError::Usage("--mock and --remote are exclusive".into())),
        (None, false) => Err(CliError::Usage(
            "choose a provider: --mock <script> or --remote".into(),
        )),
    }
}

fn parse_mode(mode: &Option<String>) -> Result<Option<ExamMode>, CliError> {
    mode.as_deref()
        .map(|m| ExamMode::from_str(m).map_err(CliError::Usage))
        .transpose()
}

fn cmd_ingest(args: IngestArgs) -> Result<(), CliError> {
    let file = std::fs::File::open(&args.corpus).map_err(data_err)?;
    let kb = KnowledgeBase::ingest(BufReader::new(file)).map_err(data_err)?;
    let ingested = kb.len();

    let embedder: Box<dyn Embedder> = if args.remote_embedder {
        Box::new(RemoteEmbedder::from_env(args.dim).map_err(|e| CliError::Usage(e.to_string()))?)
    } else {
        Box::new(MockHashEmbedder::new(args.dim, args.embed_seed))
    };

    let mut kb = match args.dedup {
        Some(threshold) => {
            let kept = deduplicate(kb.entries(), threshold, embedder.as_ref())
                .map_err(|e| match e {
                    cograg_core::kb::KbError::Parameter(_) => CliError::Usage(e.to_string()),
                    other => CliError::Provider(other.to_string()),
                })?;
            println!("deduplicated: {} -> {} entries", ingested, kept.len());
            KnowledgeBase::from_entries(kept).map_err(data_err)?
        }
        None => kb,
    };
    kb.embed_corpus(embedder.as_ref())
        .map_err(|e| CliError::Provider(e.to_string()))?;
    kb.save(&args.out).map_err(data_err)?;

    println!("entries: {}", kb.len());
    for (tag, ids) in kb.tag_index() {
        println!("{} {}: {}", tag.code(), tag.label(), ids.len());
    }
    println!("saved: {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let method = Method::from_str(&args.method).map_err(CliError::Usage)?;
    let format = ReportFormat::from_str(&args.format).map_err(CliError::Usage)?;
    let mode = parse_mode(&args.mode)?;
    if !(args.alpha <= 100 && args.beta <= 100) {
        return Err(CliError::Usage("alpha and beta must be in 0..=100".into()));
    }

    let kb = KnowledgeBase::load(&args.kb).map_err(data_err)?;
    let exam = std::fs::File::open(&args.exam).map_err(data_err)?;
    let items = load_exam(BufReader::new(exam), mode).map_err(data_err)?;
    if items.is_empty() {
        return Err(CliError::Data("exam file has no matching items".into()));
    }

    let registry = load_registry(&args.provider.prompts)?;
    let provider = build_provider(&args.provider)?;
    let dim = if kb.embeddings().dim() > 0 { kb.embeddings().dim() } else { 64 };
    let embedder: Box<dyn Embedder> = if args.provider.remote {
        Box::new(RemoteEmbedder::from_env(dim).map_err(|e| CliError::Usage(e.to_string()))?)
    } else {
        Box::new(MockHashEmbedder::new(dim, args.embed_seed))
    };

    let mut config = RunConfig::new(method);
    config.alpha = args.alpha;
    config.beta = args.beta;
    config.top_k = args.topk;
    config.budget = args.budget;
    config.proof_max_tokens = args.proof_tokens;
    config.workers = args.workers;
    if args.no_rr {
        config.flags.rr_enabled = false;
    }
    if args.no_cr {
        config.flags.cr_enabled = false;
    }
    config.flags.standard_cot = args.standard_cot;
    config.flags.cog_injection = args.cog_injection;
    if args.no_few_shot {
        config.flags.few_shot_level = false;
    }
    config.flags.direct_binary = args.direct_binary;
    if args.no_verifier {
        config.flags.verifier = false;
    }

    let records = run_eval(&items, &config, &kb, &provider, embedder.as_ref(), &registry);
    let report = compute_report(records).map_err(data_err)?;
    print!("{}", emit_report(&report, format));

    if let Some(path) = &args.out {
        cograg_core::eval::write_run_log(path, &report.items, &provider.calls())
            .map_err(data_err)?;
        eprintln!("run log: {}", path.display());
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let mode = parse_mode(&args.mode)?;
    let exam = std::fs::File::open(&args.exam).map_err(data_err)?;
    let items = load_exam(BufReader::new(exam), mode).map_err(data_err)?;
    let registry = load_registry(&args.provider.prompts)?;
    let provider = build_provider(&args.provider)?;

    let mut hits = 0usize;
    let mut low = (0usize, 0usize);
    let mut high = (0usize, 0usize);
    for item in &items {
        let gold_cat = consolidate(item.level);
        let (category, shown) = if args.direct_binary {
            let (category, defaulted) = predict_binary(
                &item.stem,
                &item.options,
                &provider,
                &registry,
                args.few_shot,
                &stage::tag(stage::PREDICT, &item.id),
            )
            .map_err(|e| CliError::Provider(e.to_string()))?;
            let shown = format!(
                "{}{}",
                category.name(),
                if defaulted { " (defaulted)" } else { "" }
            );
            (category, shown)
        } else {
            let pred = predict_level(
                &item.stem,
                &item.options,
                &provider,
                &registry,
                args.few_shot,
                &stage::tag(stage::PREDICT, &item.id),
            )
            .map_err(|e| CliError::Provider(e.to_string()))?;
            let category = consolidate(pred.level);
            let shown = format!(
                "{} -> {}{}",
                pred.level.name(),
                category.name(),
                if pred.defaulted { " (defaulted)" } else { "" }
            );
            (category, shown)
        };
        let hit = category == gold_cat;
        hits += hit as usize;
        let bucket = if gold_cat == RoutingCategory::Low { &mut low } else { &mut high };
        bucket.0 += hit as usize;
        bucket.1 += 1;
        println!(
            "{}\t{}\tgold {} ({})\t{}",
            item.id,
            shown,
            item.level.name(),
            gold_cat.name(),
            if hit { "hit" } else { "miss" }
        );
    }
    let pct = |n: usize, d: usize| {
        if d == 0 { "-".to_string() } else { format!("{:.1}", 100.0 * n as f64 / d as f64) }
    };
    println!(
        "routing hit rate: overall {}% (low {}%, high {}%)",
        pct(hits, items.len()),
        pct(low.0, low.1),
        pct(high.0, high.1)
    );
    Ok(())
}

fn cmd_retrieve(args: RetrieveArgs) -> Result<(), CliError> {
    let kb = KnowledgeBase::load(&args.kb).map_err(data_err)?;
    let tags = match &args.tags {
        Some(spec) => {
            let mut set = BTreeSet::new();
            for part in spec.split(',') {
                set.insert(Tag::from_str(part).map_err(|e| CliError::Usage(e.to_string()))?);
            }
            set
        }
        None => Tag::ALL.into_iter().collect(),
    };
    let dim = if kb.embeddings().dim() > 0 { kb.embeddings().dim() } else { 64 };
    let embedder = MockHashEmbedder::new(dim, args.embed_seed);

    let ranked: RankedList = match args.method.to_ascii_lowercase().as_str() {
        "bm25" => bm25_search(&kb, &args.query, args.topk, Bm25Params::default()),
        "dense" => {
            let qv = embedder
                .embed_one(&args.query)
                .map_err(|e| CliError::Provider(e.to_string()))?;
            dense_search(&kb, &qv, None, args.topk).map_err(data_err)?
        }
        "hybrid" => hybrid_search(
            &kb,
            &args.query,
            args.topk,
            Bm25Params::default(),
            DEFAULT_RRF_K,
            &embedder,
        )
        .map_err(data_err)?,
        "tag_dense" => {
            tag_constrained_search(&kb, &args.query, &tags, args.topk, &embedder)
                .map_err(data_err)?
        }
        other => return Err(CliError::Usage(format!("unknown retrieval method `{other}`"))),
    };

    if ranked.is_empty() {
        println!("(no results)");
        return Ok(());
    }
    for (id, score) in &ranked.items {
        let entry = kb.entry_by_id(*id).expect("ranked id exists");
        println!("{id}\t{score:.6}\t{}", entry.question);
    }
    Ok(())
}
