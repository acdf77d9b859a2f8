use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use colexp_core::pipeline::{self, RunConfig, SweepParameter, RECORDS_FILE, REPORT_FILE};

#[derive(Parser)]
#[command(
    name = "colexp",
    version,
    about = "Expand abbreviated column names with an LLM and score the results"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster tables into groups and summarize tables and groups.
    Summarize(Common),
    /// Expand column names into E2 records.
    Expand(Common),
    /// Make token expansions consistent across the collection.
    Revise(Common),
    /// Summarize, expand and revise; evaluate when gold labels are given.
    Run(Common),
    /// Score an E2 records file against gold labels.
    Eval(EvalArgs),
    /// Run the pipeline once per value of k or p.
    Sweep(SweepArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Table schemas (JSONL).
    #[arg(long)]
    schemas: Option<PathBuf>,
    /// Groups from an earlier `summarize` (JSONL).
    #[arg(long)]
    groups: Option<PathBuf>,
    /// E2 records from an earlier `expand` (JSONL).
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long)]
    synonyms: Option<PathBuf>,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// TOML file; its settings take precedence over command-line flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Replay replies from a mock script instead of calling a provider.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    /// Save every exchange as a mock script.
    #[arg(long)]
    record_script: Option<PathBuf>,
    /// Tables per summarizer batch.
    #[arg(long)]
    k: Option<usize>,
    /// Columns per generator batch.
    #[arg(long)]
    p: Option<usize>,
    /// Peer tables sampled as context.
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Feed tables to the summarizer in a seeded random order.
    #[arg(long)]
    shuffle_tables: bool,
    #[arg(long)]
    no_context: bool,
    #[arg(long)]
    no_table_names: bool,
    #[arg(long)]
    no_rules: bool,
    #[arg(long)]
    no_cot: bool,
    #[arg(long)]
    no_reviser: bool,
    /// Plain few-shot prompting; implies every ablation flag.
    #[arg(long)]
    baseline: bool,
    /// Maximum concurrent LLM requests.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Disable thread-level parallelism.
    #[arg(long)]
    sequential: bool,
    /// `offline-trigram` or `remote:<endpoint>`.
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long)]
    min_token_length: Option<usize>,
    #[arg(long)]
    max_candidates: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    synonyms: Option<PathBuf>,
    #[arg(long, default_value = "offline-trigram")]
    embedder: String,
    /// Where to write the JSON report.
    #[arg(long, default_value = REPORT_FILE)]
    report: PathBuf,
    #[arg(long)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Param {
    K,
    P,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    param: Param,
    /// Comma-separated values, e.g. 20,25,30,35,40.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    #[command(flatten)]
    common: Common,
}

fn apply_flags(c: &Common) -> RunConfig {
    let mut cfg = RunConfig::default();
    macro_rules! set {
        ($($field:ident => $target:ident),* $(,)?) => {
            $(if let Some(v) = &c.$field { cfg.$target = v.clone().into(); })*
        };
    }
    set!(output_dir => output_dir, model => model_id, endpoint => endpoint, api_key_env => api_key_env,
        k => k, p => p, q => q, seed => seed, parallelism => parallelism, embedder => embedder,
        min_token_length => min_token_length);
    cfg.schemas = c.schemas.clone();
    cfg.groups = c.groups.clone();
    cfg.records = c.records.clone();
    cfg.gold = c.gold.clone();
    cfg.synonyms = c.synonyms.clone();
    cfg.cache_dir = c.cache_dir.clone();
    cfg.mock_script = c.mock_script.clone();
    cfg.record_script = c.record_script.clone();
    cfg.max_candidates = c.max_candidates;
    cfg.shuffle_tables |= c.shuffle_tables;
    cfg.no_context |= c.no_context;
    cfg.no_table_names |= c.no_table_names;
    cfg.no_rules |= c.no_rules;
    cfg.no_cot |= c.no_cot;
    cfg.no_reviser |= c.no_reviser;
    cfg.baseline |= c.baseline;
    cfg.sequential |= c.sequential;
    cfg
}

/// Flags first, then every key present in the config file on top.
fn resolve(c: &Common) -> Result<RunConfig> {
    let cfg = apply_flags(c);
    let Some(path) = &c.config else { return Ok(cfg) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut merged = serde_json::to_value(&cfg)?;
    let overlay = serde_json::to_value(file)?;
    if let (Some(m), Some(o)) = (merged.as_object_mut(), overlay.as_object()) {
        for (k, v) in o {
            m.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(merged).with_context(|| format!("invalid settings in {}", path.display()))
}

fn gateway(
    cfg: &RunConfig,
) -> Result<(
    colexp_core::gateway::Gateway,
    Option<std::sync::Arc<colexp_core::gateway::ScriptRecorder>>,
)> {
    Ok(pipeline::build_gateway(cfg)?)
}

fn print_stats(gw: &colexp_core::gateway::Gateway) {
    let s = gw.stats();
    eprintln!(
        "llm requests: {} ({} cached, {} provider calls)",
        s.requests, s.cache_hits, s.provider_calls
    );
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Summarize(c) => {
            let cfg = resolve(&c)?;
            let (gw, rec) = gateway(&cfg)?;
            let groups = pipeline::run_summarize_stage(&cfg, &gw)?;
            pipeline::save_recording(&cfg, rec.as_deref())?;
            print_stats(&gw);
            println!("{} group(s) written to {}", groups.len(), cfg.output_dir.display());
        }
        Command::Expand(c) => {
            let cfg = resolve(&c)?;
            let (gw, rec) = gateway(&cfg)?;
            let result = pipeline::run_expand_stage(&cfg, &gw);
            pipeline::save_recording(&cfg, rec.as_deref())?;
            print_stats(&gw);
            let fallbacks = result?;
            println!(
                "records written to {} ({fallbacks} identity fallback(s))",
                cfg.output_dir.join(RECORDS_FILE).display()
            );
        }
        Command::Revise(c) => {
            let cfg = resolve(&c)?;
            let (gw, rec) = gateway(&cfg)?;
            let q = pipeline::run_revise_stage(&cfg, &gw)?;
            pipeline::save_recording(&cfg, rec.as_deref())?;
            print_stats(&gw);
            for (t, e) in q.iter() {
                println!("{t} => {e}");
            }
            println!("{} unique rule(s) applied", q.len());
        }
        Command::Run(c) => {
            let cfg = resolve(&c)?;
            let (gw, rec) = gateway(&cfg)?;
            let result = pipeline::run_pipeline(&cfg, &gw);
            pipeline::save_recording(&cfg, rec.as_deref())?;
            print_stats(&gw);
            let manifest = result?;
            println!(
                "{} record(s), {} fallback(s), {} unique rule(s); outputs in {}",
                manifest.records,
                manifest.fallbacks,
                manifest.unique_rules.len(),
                cfg.output_dir.display()
            );
            if let Some(gold) = &cfg.gold {
                let report = pipeline::run_eval(
                    &cfg.output_dir.join(RECORDS_FILE),
                    gold,
                    cfg.synonyms.as_deref(),
                    &cfg.embedder,
                    &cfg.output_dir.join(REPORT_FILE),
                    cfg.execution(),
                )?;
                print!("{}", report.render_table());
            }
        }
        Command::Eval(a) => {
            let exec = if a.sequential {
                colexp_core::par::Execution::Sequential
            } else {
                colexp_core::par::Execution::Parallel
            };
            let report = pipeline::run_eval(&a.records, &a.gold, a.synonyms.as_deref(), &a.embedder, &a.report, exec)?;
            print!("{}", report.render_table());
        }
        Command::Sweep(a) => {
            let cfg = resolve(&a.common)?;
            if a.values.is_empty() {
                bail!("--values needs at least one value");
            }
            let param = match a.param {
                Param::K => SweepParameter::K,
                Param::P => SweepParameter::P,
            };
            let (gw, rec) = gateway(&cfg)?;
            let report = pipeline::run_sweep(&cfg, param, &a.values, &gw)?;
            pipeline::save_recording(&cfg, rec.as_deref())?;
            print_stats(&gw);
            print!("{}", report.render_table());
        }
    }
    Ok(())
}
