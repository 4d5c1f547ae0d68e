use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ret_core::fixtures::{gen_fixtures, FixtureSpec};
use ret_core::gradcheck::{grad_check, grad_check_with_fault, GradCheckConfig};
use ret_core::pipeline::{
    build_index, evaluate, load_eval, query_gate_summary, search_all, train_model, Corpus,
    LoadedItem,
};
use ret_core::tape::BackwardFault;
use ret_core::{DualEncoder, EncodeOptions, Error, RetrievalIndex, RunConfig};
use serde_json::json;

/// Recurrent multimodal fusion encoder for late-interaction retrieval.
#[derive(Parser, Debug)]
#[command(name = "ret", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic planted-retrieval corpus.
    GenFixtures(GenFixturesArgs),
    /// Train query and document encoders on a fixture corpus.
    Train(TrainArgs),
    /// Encode one item into late-interaction tokens.
    Encode(EncodeArgs),
    /// Encode every corpus document into an index file.
    Index(IndexArgs),
    /// Rank indexed documents for one query.
    Search(SearchArgs),
    /// Report recall metrics for an eval file.
    Eval(EvalArgs),
    /// Compare analytic and numerical gradients on a tiny model.
    GradCheck(GradCheckArgs),
    /// Per-layer mean gate activations over eval queries.
    GateTrace(GateTraceArgs),
}

#[derive(Args, Debug)]
struct GenFixturesArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    train_queries: usize,
    #[arg(long, default_value_t = 32)]
    test_queries: usize,
    #[arg(long, default_value_t = 256)]
    docs: usize,
    #[arg(long)]
    text_dim: Option<usize>,
    #[arg(long)]
    vis_dim: Option<usize>,
    #[arg(long, default_value_t = 3)]
    text_depth: usize,
    #[arg(long, default_value_t = 6)]
    vis_depth: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.1)]
    missing_image_rate: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Output model file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Print a progress line every N steps.
    #[arg(long, default_value_t = 50)]
    log_every: u64,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SideArg {
    Query,
    Document,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SideArg::Query)]
    side: SideArg,
    #[arg(long, default_value = "item")]
    id: String,
    /// Text feature file.
    #[arg(long)]
    text: PathBuf,
    /// Visual feature file.
    #[arg(long)]
    vis: Option<PathBuf>,
    /// Ignore visual features even if given.
    #[arg(long)]
    mask_visual: bool,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Output index file.
    #[arg(long)]
    index: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, default_value = "query")]
    id: String,
    #[arg(long)]
    text: PathBuf,
    #[arg(long)]
    vis: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    /// Eval file, one JSON record per line.
    #[arg(long)]
    eval: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    samples_per_group: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args, Debug)]
struct GateTraceArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Use at most this many queries.
    #[arg(long, default_value_t = 100)]
    limit: usize,
    /// Also write the table as tab-separated text.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure with its exit status.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 1, error }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Config(_)) => 1,
            _ => 2,
        };
        Failure { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn load_config(common: &Common) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(usage)?;
    }
    cfg.apply_env().map_err(|e| usage(e.into()))?;
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(anyhow!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| usage(e.into()))?;
    }
    Ok(cfg)
}

fn required(flag: Option<&PathBuf>, cfg: Option<&PathBuf>, name: &str) -> std::result::Result<PathBuf, Failure> {
    flag.or(cfg)
        .cloned()
        .ok_or_else(|| usage(anyhow!("missing --{name} (or `{name}` in the config)")))
}

fn emit(out: &mut impl Write, value: serde_json::Value) -> CmdResult {
    writeln!(out, "{value}").map_err(|e| Failure {
        code: 2,
        error: e.into(),
    })
}

fn load_model(path: &Path) -> std::result::Result<DualEncoder, Failure> {
    DualEncoder::load(path)
        .with_context(|| format!("loading model {}", path.display()))
        .map_err(Failure::from)
}

fn load_index(path: &Path) -> std::result::Result<RetrievalIndex, Failure> {
    RetrievalIndex::read(path)
        .with_context(|| format!("loading index {}", path.display()))
        .map_err(Failure::from)
}

fn load_query(id: &str, text: &Path, vis: Option<&Path>) -> std::result::Result<LoadedItem, Failure> {
    let (text, vis) = ret_core::fixtures::load_item(text, vis).context("loading features")?;
    Ok(LoadedItem {
        id: id.to_string(),
        text,
        vis,
    })
}

fn gen_fixtures_cmd(a: GenFixturesArgs, out: &mut impl Write) -> CmdResult {
    let cfg = load_config(&a.common)?;
    let dir = required(a.out.as_ref(), cfg.out.as_ref(), "out")?;
    let defaults = FixtureSpec::default();
    let spec = FixtureSpec {
        train_queries: a.train_queries,
        test_queries: a.test_queries,
        docs: a.docs,
        text_dim: a.text_dim.or(cfg.text_dim).unwrap_or(defaults.text_dim),
        vis_dim: a.vis_dim.or(cfg.vis_dim).unwrap_or(defaults.vis_dim),
        text_depth: a.text_depth,
        vis_depth: a.vis_depth,
        noise: a.noise,
        missing_image_rate: a.missing_image_rate,
        seed: cfg.seed,
        ..defaults
    };
    spec.validate()?;
    let manifest = gen_fixtures(&spec, &dir)?;
    emit(
        out,
        json!({
            "event": "fixtures",
            "out": dir.display().to_string(),
            "queries": manifest.queries.len(),
            "docs": manifest.docs.len(),
            "seed": spec.seed,
        }),
    )
}

fn train_cmd(a: TrainArgs, out: &mut impl Write) -> CmdResult {
    let cfg = load_config(&a.common)?;
    let dir = required(a.fixtures.as_ref(), cfg.fixtures.as_ref(), "fixtures")?;
    let model_path = required(a.model.as_ref(), cfg.model.as_ref(), "model")?;
    cfg.validate()?;
    let corpus = Corpus::load(&dir).with_context(|| format!("loading corpus {}", dir.display()))?;
    let every = a.log_every.max(1);
    let mut log_err = None;
    let model = train_model(&cfg, &corpus, |r| {
        if (r.step % every == 0 || r.step + 1 == cfg.steps) && log_err.is_none() {
            let line = json!({"event": "step", "step": r.step, "loss": r.loss, "lr": r.lr});
            if let Err(e) = writeln!(out, "{line}") {
                log_err = Some(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(Failure {
            code: 2,
            error: e.into(),
        });
    }
    model.save(&model_path)?;
    emit(
        out,
        json!({
            "event": "trained",
            "model": model_path.display().to_string(),
            "steps": cfg.steps,
            "seed": cfg.seed,
        }),
    )
}

fn encode_cmd(a: EncodeArgs, out: &mut impl Write) -> CmdResult {
    let cfg = load_config(&a.common)?;
    let model = load_model(&required(a.model.as_ref(), cfg.model.as_ref(), "model")?)?;
    let item = load_query(&a.id, &a.text, a.vis.as_deref())?;
    let enc = match a.side {
        SideArg::Query => model.query_encoder(),
        SideArg::Document => model.doc_encoder(),
    };
    let opts = EncodeOptions {
        mask_visual: a.mask_visual,
        trace: false,
    };
    let (tokens, _) = enc.encode(&item.id, &item.text, item.vis.as_ref(), opts)?;
    emit(
        out,
        json!({
            "id": item.id,
            "side": format!("{:?}", tokens.side).to_lowercase(),
            "tokens": tokens.tokens().to_rows(),
        }),
    )
}

fn index_cmd(a: IndexArgs, out: &mut impl Write) -> CmdResult {
    let cfg = load_config(&a.common)?;
    let model = load_model(&required(a.model.as_ref(), cfg.model.as_ref(), "model")?)?;
    let dir = required(a.fixtures.as_ref(), cfg.fixtures.as_ref(), "fixtures")?;
    let path = required(a.index.as_ref(), cfg.index.as_ref(), "index")?;
    let corpus = Corpus::load(&dir).with_context(|| format!("loading corpus {}", dir.display()))?;
    let index = build_index(&model, &corpus.docs)?;
    index.write(&path)?;
    emit(
        out,
        json!({"event": "indexed", "index": path.display().to_string(), "docs": index.len()}),
    )
}

fn search_cmd(a: SearchArgs, out: &mut impl Write) -> CmdResult {
    let cfg = load_config(&a.common)?;
    let model = load_model(&required(a.model.as_ref(), cfg.model.as_ref(), "model")?)?;
    let index = load_index(&required(a.index.as_ref(), cfg.index.as_ref(), "index")?)?;
    if a.top_k == 0 {
        return Err(usage(anyhow!("--top-k must be >= 1")));
    }
    let query = load_query(&a.id, &a.text, a.vis.as_deref())?;
    let results = search_all(&model, &index, std::slice::from_ref(&query), a.top_k)?;
    for (rank, hit) in results[0].hits.iter().enumerate() {
        emit(
            out,
            json!({"query_id": query.id, "rank": rank + 1, "doc_id": hit.doc_id, "score": hit.score}),
        )?;
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs, out: &mut impl Write) -> CmdResult {
    let cfg = load_config(&a.common)?;
    let model = load_model(&required(a.model.as_ref(), cfg.model.as_ref(), "model")?)?;
    let index = load_index(&required(a.index.as_ref(), cfg.index.as_ref(), "index")?)?;
    let eval_path = required(a.eval.as_ref(), cfg.eval.as_ref(), "eval")?;
    let (queries, records) =
        load_eval(&eval_path).with_context(|| format!("loading eval file {}", eval_path.display()))?;
    let s = evaluate(&model, &index, &queries, &records)?;
    for (name, value) in [
        ("R@1", s.recall_at_1),
        ("R@5", s.recall_at_5),
        ("R@10", s.recall_at_10),
        ("PR@5", s.pseudo_recall_at_5),
    ] {
        emit(out, json!({"metric": name, "value": value, "queries": s.queries}))?;
    }
    Ok(())
}

fn grad_check_cmd(a: GradCheckArgs, out: &mut impl Write) -> CmdResult {
    let cfg = load_config(&a.common)?;
    let mut gc = GradCheckConfig::default();
    if let Some(n) = a.samples_per_group {
        gc.samples_per_group = n;
    }
    if let Some(t) = a.tolerance {
        gc.tolerance = t;
    }
    let report = if a.inject_fault {
        grad_check_with_fault(&gc, cfg.seed, BackwardFault::SigmoidScale)?
    } else {
        grad_check(&gc, cfg.seed)?
    };
    for g in &report.groups {
        emit(
            out,
            json!({"group": g.group, "samples": g.samples, "max_rel_error": g.max_rel_error}),
        )?;
    }
    emit(
        out,
        json!({
            "event": "grad_check",
            "samples": report.samples,
            "max_rel_error": report.max_rel_error,
            "tolerance": report.tolerance,
            "passed": report.passed,
        }),
    )?;
    if report.passed {
        Ok(())
    } else {
        Err(Failure {
            code: 2,
            error: anyhow!(
                "gradient check failed: max relative error {:.3e} > {:.1e}",
                report.max_rel_error,
                report.tolerance
            ),
        })
    }
}

fn gate_trace_cmd(a: GateTraceArgs, out: &mut impl Write) -> CmdResult {
    let cfg = load_config(&a.common)?;
    let model = load_model(&required(a.model.as_ref(), cfg.model.as_ref(), "model")?)?;
    let eval_path = required(a.eval.as_ref(), cfg.eval.as_ref(), "eval")?;
    let (mut queries, _) =
        load_eval(&eval_path).with_context(|| format!("loading eval file {}", eval_path.display()))?;
    queries.truncate(a.limit.max(1));
    let rows = query_gate_summary(&model, &queries)?;
    let mut table = String::from("layer\tforget\tinput_text\tinput_vis\n");
    for (l, g) in rows.iter().enumerate() {
        emit(
            out,
            json!({
                "layer": l + 1,
                "forget": g.forget,
                "input_text": g.input_text,
                "input_vis": g.input_vis,
                "queries": queries.len(),
            }),
        )?;
        table.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\n",
            l + 1,
            g.forget,
            g.input_text,
            g.input_vis
        ));
    }
    if let Some(path) = a.out.as_ref().or(cfg.out.as_ref()) {
        std::fs::write(path, table).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::GenFixtures(a) => gen_fixtures_cmd(a, &mut out),
        Command::Train(a) => train_cmd(a, &mut out),
        Command::Encode(a) => encode_cmd(a, &mut out),
        Command::Index(a) => index_cmd(a, &mut out),
        Command::Search(a) => search_cmd(a, &mut out),
        Command::Eval(a) => eval_cmd(a, &mut out),
        Command::GradCheck(a) => grad_check_cmd(a, &mut out),
        Command::GateTrace(a) => gate_trace_cmd(a, &mut out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
