//! End-to-end runs: configuration, gateway construction, the
//! summarize → expand → revise pipeline, evaluation, and parameter sweeps.
//! Every run leaves a `manifest.json` next to its outputs.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetError};
use crate::eval::{self, Aggregates, EvalError, MetricReport};
use crate::gateway::{
    Gateway, GatewayStats, HttpProvider, MockProvider, Provider, ResponseCache, ScriptRecorder, DEFAULT_API_KEY_ENV,
    DEFAULT_ENDPOINT, DEFAULT_MODEL, DEFAULT_PARALLELISM,
};
use crate::generator::{self, GeneratorConfig, GeneratorError};
use crate::model::{E2Record, TableGroup, TableSchema};
use crate::par::Execution;
use crate::prompts::{TemplatePaths, Templates};
use crate::reviser::{self, ReviserConfig, UniqueRuleSet};
use crate::summarizer::{self, SummarizerConfig};

pub const RECORDS_FILE: &str = "e2_records.jsonl";
pub const GROUPS_FILE: &str = "groups.jsonl";
pub const ANNOTATED_SCHEMAS_FILE: &str = "schemas_annotated.jsonl";
pub const UNIQUE_RULES_FILE: &str = "unique_rules.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schemas: Option<PathBuf>,
    /// Groups from an earlier summarize step; used by `expand` and `revise`.
    pub groups: Option<PathBuf>,
    /// Records from an earlier expand step; used by `revise`.
    pub records: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub templates: TemplatePaths,
    pub model_id: String,
    pub endpoint: String,
    pub api_key_env: String,
    pub k: usize,
    pub p: usize,
    pub q: usize,
    pub seed: u64,
    pub no_context: bool,
    pub no_table_names: bool,
    pub no_rules: bool,
    pub no_cot: bool,
    pub no_reviser: bool,
    pub baseline: bool,
    pub parallelism: usize,
    pub sequential: bool,
    pub shuffle_tables: bool,
    pub mock_script: Option<PathBuf>,
    pub record_script: Option<PathBuf>,
    pub embedder: String,
    pub min_token_length: usize,
    pub max_candidates: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schemas: None,
            groups: None,
            records: None,
            gold: None,
            synonyms: None,
            cache_dir: None,
            output_dir: PathBuf::from("out"),
            templates: TemplatePaths::default(),
            model_id: DEFAULT_MODEL.to_string(),
            endpoint: DEFAULT_ENDPOINT.to_string(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            k: 30,
            p: 10,
            q: 100,
            seed: 0,
            no_context: false,
            no_table_names: false,
            no_rules: false,
            no_cot: false,
            no_reviser: false,
            baseline: false,
            parallelism: DEFAULT_PARALLELISM,
            sequential: false,
            shuffle_tables: false,
            mock_script: None,
            record_script: None,
            embedder: "offline-trigram".to_string(),
            min_token_length: 2,
            max_candidates: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k == 0 {
            return Err(PipelineError::Config("k must be at least 1".into()));
        }
        if self.p == 0 {
            return Err(PipelineError::Config("p must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(PipelineError::Config("parallelism must be at least 1".into()));
        }
        Ok(())
    }

    /// The configuration actually run: baseline mode switches off context,
    /// table names, rules, reasoning and the reviser.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        if c.baseline {
            c.no_context = true;
            c.no_table_names = true;
            c.no_rules = true;
            c.no_cot = true;
            c.no_reviser = true;
        }
        c
    }

    pub fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    pub fn summarizer_config(&self) -> SummarizerConfig {
        SummarizerConfig {
            batch_size_k: self.k,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let c = self.effective();
        GeneratorConfig {
            batch_size_p: c.p,
            context_sample_q: c.q,
            seed: c.seed,
            rules_enabled: !c.no_rules,
            cot_enabled: !c.no_cot,
            context_enabled: !c.no_context,
            table_names_enabled: !c.no_table_names,
            baseline: c.baseline,
        }
    }

    pub fn reviser_config(&self) -> ReviserConfig {
        let c = self.effective();
        ReviserConfig {
            min_token_length: c.min_token_length,
            max_candidates: c.max_candidates,
            context_enabled: !c.no_context,
            table_names_enabled: !c.no_table_names,
        }
    }

    fn require<'a>(&self, path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, PipelineError> {
        path.as_deref()
            .ok_or_else(|| PipelineError::Config(format!("no {what} file configured")))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Gateway for a configuration: a scripted mock when `mock_script` is set,
/// otherwise the HTTP provider with the credential from `api_key_env`.
/// Returns the recorder too when `record_script` is set.
pub fn build_gateway(config: &RunConfig) -> Result<(Gateway, Option<Arc<ScriptRecorder>>), PipelineError> {
    let provider: Arc<dyn Provider> = match &config.mock_script {
        Some(p) => Arc::new(MockProvider::from_script(p).map_err(io_err(p))?),
        None => Arc::new(
            HttpProvider::from_env(config.endpoint.clone(), &config.api_key_env)
                .map_err(|e| PipelineError::Config(e.to_string()))?,
        ),
    };
    let cache = match &config.cache_dir {
        Some(d) => ResponseCache::on_disk(d).map_err(io_err(d))?,
        None => ResponseCache::in_memory(),
    };
    let mut gateway = Gateway::new(provider)
        .with_cache(cache)
        .with_parallelism(config.parallelism);
    let recorder = config.record_script.as_ref().map(|_| Arc::new(ScriptRecorder::new()));
    if let Some(r) = &recorder {
        gateway = gateway.with_recorder(r.clone());
    }
    Ok((gateway, recorder))
}

/// Writes the recorded script if recording was requested.
pub fn save_recording(config: &RunConfig, recorder: Option<&ScriptRecorder>) -> Result<(), PipelineError> {
    if let (Some(path), Some(r)) = (&config.record_script, recorder) {
        r.write(path).map_err(io_err(path))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: u128,
}

/// Fields that vary between otherwise identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeInfo {
    pub timings: Vec<StageTiming>,
    pub gateway: GatewayStats,
    pub cache_hit_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: RunStatus,
    pub failure: Option<String>,
    pub config: RunConfig,
    /// Order in which the summarizer saw the tables.
    pub table_order: Vec<String>,
    pub stages_run: Vec<String>,
    pub records: usize,
    pub fallbacks: usize,
    pub revision_candidates: Vec<String>,
    pub unique_rules: UniqueRuleSet,
    pub runtime: RuntimeInfo,
}

/// In-memory result of a pipeline run. When a stage fails, `failure` names
/// it and the other fields hold whatever was finished.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub records: Vec<E2Record>,
    pub groups: Vec<TableGroup>,
    /// Schemas in input order, with summaries when the summarizer ran.
    pub schemas: Vec<TableSchema>,
    pub table_order: Vec<String>,
    pub stages_run: Vec<String>,
    pub fallbacks: usize,
    pub candidates: Vec<String>,
    pub unique_rules: UniqueRuleSet,
    pub timings: Vec<StageTiming>,
    pub failure: Option<(&'static str, String)>,
}

/// Summarizer processing order: input order, or a seeded shuffle of it.
pub fn table_order(schemas: &[TableSchema], shuffle: bool, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..schemas.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

fn timed<T>(timings: &mut Vec<StageTiming>, stage: &str, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    timings.push(StageTiming {
        stage: stage.to_string(),
        millis: start.elapsed().as_millis(),
    });
    out
}

/// Runs the stages enabled by `config` over `schemas`.
pub fn execute(config: &RunConfig, schemas: &[TableSchema], templates: &Templates, gateway: &Gateway) -> PipelineRun {
    let cfg = config.effective();
    let exec = cfg.execution();
    let order = table_order(schemas, cfg.shuffle_tables, cfg.seed);
    let mut run = PipelineRun {
        records: Vec::new(),
        groups: Vec::new(),
        schemas: schemas.to_vec(),
        table_order: order.iter().map(|&i| schemas[i].name.clone()).collect(),
        stages_run: Vec::new(),
        fallbacks: 0,
        candidates: Vec::new(),
        unique_rules: UniqueRuleSet::new(),
        timings: Vec::new(),
        failure: None,
    };

    if !cfg.no_context {
        let ordered: Vec<TableSchema> = order.iter().map(|&i| schemas[i].clone()).collect();
        let result = timed(&mut run.timings, "summarize", || {
            summarizer::run_summarizer(
                &ordered,
                &cfg.summarizer_config(),
                gateway,
                &cfg.model_id,
                &templates.summarizer,
                exec,
            )
        });
        run.stages_run.push("summarize".into());
        match result {
            Ok(out) => {
                let by_name: HashMap<&str, &TableSchema> = out.schemas.iter().map(|s| (s.name.as_str(), s)).collect();
                run.schemas = schemas.iter().map(|s| by_name[s.name.as_str()].clone()).collect();
                run.groups = out.groups;
            }
            Err(e) => {
                run.failure = Some(("summarize", e.to_string()));
                return run;
            }
        }
    }

    let result = timed(&mut run.timings, "expand", || {
        generator::run_generator(
            &run.schemas,
            &run.groups,
            &cfg.generator_config(),
            templates,
            gateway,
            &cfg.model_id,
            exec,
        )
    });
    run.stages_run.push("expand".into());
    match result {
        Ok(out) => {
            run.records = out.records;
            run.fallbacks = out.fallbacks;
        }
        Err(e) => {
            if let GeneratorError::Batches { partial, .. } = &e {
                run.records = partial.records.clone();
                run.fallbacks = partial.fallbacks;
            }
            run.failure = Some(("expand", e.to_string()));
            return run;
        }
    }

    if !cfg.no_reviser {
        let result = timed(&mut run.timings, "revise", || {
            reviser::run_reviser(
                &run.records,
                &run.groups,
                &run.schemas,
                &cfg.reviser_config(),
                &templates.reviser,
                gateway,
                &cfg.model_id,
                exec,
            )
        });
        run.stages_run.push("revise".into());
        match result {
            Ok(out) => {
                run.records = out.records;
                run.candidates = out.candidates;
                run.unique_rules = out.unique_rules;
            }
            Err(e) => run.failure = Some(("revise", e.to_string())),
        }
    }
    run
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn manifest_for(config: &RunConfig, run: &PipelineRun, gateway: &Gateway) -> Manifest {
    let stats = gateway.stats();
    Manifest {
        status: if run.failure.is_some() {
            RunStatus::Failed
        } else {
            RunStatus::Complete
        },
        failure: run.failure.as_ref().map(|(s, m)| format!("{s}: {m}")),
        config: config.effective(),
        table_order: run.table_order.clone(),
        stages_run: run.stages_run.clone(),
        records: run.records.len(),
        fallbacks: run.fallbacks,
        revision_candidates: run.candidates.clone(),
        unique_rules: run.unique_rules.clone(),
        runtime: RuntimeInfo {
            timings: run.timings.clone(),
            gateway: stats,
            cache_hit_rate: stats.cache_hit_rate(),
        },
    }
}

/// Writes whatever `run` holds plus the manifest into `dir`.
pub fn write_run(
    config: &RunConfig,
    run: &PipelineRun,
    gateway: &Gateway,
    dir: &Path,
) -> Result<Manifest, PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    dataset::write_e2_records(&run.records, dir.join(RECORDS_FILE))?;
    dataset::write_groups(&run.groups, dir.join(GROUPS_FILE))?;
    dataset::write_schemas(&run.schemas, dir.join(ANNOTATED_SCHEMAS_FILE))?;
    write_json(&run.unique_rules, &dir.join(UNIQUE_RULES_FILE))?;
    let manifest = manifest_for(config, run, gateway);
    write_json(&manifest, &dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Loads inputs, runs every enabled stage, and writes outputs into
/// `config.output_dir`. On a stage failure the finished part is still
/// written, with the manifest marked failed.
pub fn run_pipeline(config: &RunConfig, gateway: &Gateway) -> Result<Manifest, PipelineError> {
    config.validate()?;
    let schemas = dataset::load_schemas(config.require(&config.schemas, "schemas")?)?;
    let templates = Templates::load(&config.templates).map_err(|e| PipelineError::Config(e.to_string()))?;
    let run = execute(config, &schemas, &templates, gateway);
    let manifest = write_run(config, &run, gateway, &config.output_dir)?;
    match run.failure {
        Some((stage, message)) => Err(PipelineError::Stage { stage, message }),
        None => Ok(manifest),
    }
}

/// Summarize stage alone: writes groups and annotated schemas.
pub fn run_summarize_stage(config: &RunConfig, gateway: &Gateway) -> Result<Vec<TableGroup>, PipelineError> {
    config.validate()?;
    let cfg = config.effective();
    let schemas = dataset::load_schemas(cfg.require(&cfg.schemas, "schemas")?)?;
    let templates = Templates::load(&cfg.templates).map_err(|e| PipelineError::Config(e.to_string()))?;
    let order = table_order(&schemas, cfg.shuffle_tables, cfg.seed);
    let ordered: Vec<TableSchema> = order.iter().map(|&i| schemas[i].clone()).collect();
    let out = summarizer::run_summarizer(
        &ordered,
        &cfg.summarizer_config(),
        gateway,
        &cfg.model_id,
        &templates.summarizer,
        cfg.execution(),
    )
    .map_err(|e| PipelineError::Stage {
        stage: "summarize",
        message: e.to_string(),
    })?;
    let by_name: HashMap<&str, &TableSchema> = out.schemas.iter().map(|s| (s.name.as_str(), s)).collect();
    let annotated: Vec<TableSchema> = schemas.iter().map(|s| by_name[s.name.as_str()].clone()).collect();
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    dataset::write_groups(&out.groups, dir.join(GROUPS_FILE))?;
    dataset::write_schemas(&annotated, dir.join(ANNOTATED_SCHEMAS_FILE))?;
    Ok(out.groups)
}

fn load_groups_opt(config: &RunConfig) -> Result<Vec<TableGroup>, PipelineError> {
    match &config.groups {
        Some(p) => Ok(dataset::load_groups(p)?),
        None => Ok(Vec::new()),
    }
}

/// Expand stage alone. Uses `groups` when configured; `schemas` may be an
/// annotated schema file from the summarize stage.
pub fn run_expand_stage(config: &RunConfig, gateway: &Gateway) -> Result<usize, PipelineError> {
    config.validate()?;
    let cfg = config.effective();
    let schemas = dataset::load_schemas(cfg.require(&cfg.schemas, "schemas")?)?;
    let groups = load_groups_opt(&cfg)?;
    let templates = Templates::load(&cfg.templates).map_err(|e| PipelineError::Config(e.to_string()))?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let result = generator::run_generator(
        &schemas,
        &groups,
        &cfg.generator_config(),
        &templates,
        gateway,
        &cfg.model_id,
        cfg.execution(),
    );
    match result {
        Ok(out) => {
            dataset::write_e2_records(&out.records, dir.join(RECORDS_FILE))?;
            Ok(out.fallbacks)
        }
        Err(e) => {
            if let GeneratorError::Batches { partial, .. } = &e {
                dataset::write_e2_records(&partial.records, dir.join(RECORDS_FILE))?;
            }
            Err(PipelineError::Stage {
                stage: "expand",
                message: e.to_string(),
            })
        }
    }
}

/// Revise stage alone over a records file.
pub fn run_revise_stage(config: &RunConfig, gateway: &Gateway) -> Result<UniqueRuleSet, PipelineError> {
    config.validate()?;
    let cfg = config.effective();
    let records = dataset::load_e2_records(cfg.require(&cfg.records, "records")?)?;
    let schemas = match &cfg.schemas {
        Some(p) => dataset::load_schemas(p)?,
        None => Vec::new(),
    };
    let groups = load_groups_opt(&cfg)?;
    let templates = Templates::load(&cfg.templates).map_err(|e| PipelineError::Config(e.to_string()))?;
    let out = reviser::run_reviser(
        &records,
        &groups,
        &schemas,
        &cfg.reviser_config(),
        &templates.reviser,
        gateway,
        &cfg.model_id,
        cfg.execution(),
    )
    .map_err(|e| PipelineError::Stage {
        stage: "revise",
        message: e.to_string(),
    })?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    dataset::write_e2_records(&out.records, dir.join(RECORDS_FILE))?;
    write_json(&out.unique_rules, &dir.join(UNIQUE_RULES_FILE))?;
    Ok(out.unique_rules)
}

/// Scores a records file against gold labels and writes the report.
pub fn run_eval(
    records_path: &Path,
    gold_path: &Path,
    synonyms_path: Option<&Path>,
    embedder_spec: &str,
    report_path: &Path,
    exec: Execution,
) -> Result<MetricReport, PipelineError> {
    let records = dataset::load_e2_records(records_path)?;
    let gold = dataset::load_gold(gold_path)?;
    let lexicon = match synonyms_path {
        Some(p) => dataset::load_synonyms(p)?,
        None => dataset::SynonymLexicon::new(),
    };
    let embedder = eval::embedder_from_spec(embedder_spec)?;
    let name = gold_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let report = eval::evaluate(&name, &records, &gold, &lexicon, embedder.as_ref(), exec)?;
    if let Some(parent) = report_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    dataset::write_report(&report, report_path)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParameter {
    K,
    P,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::K => "k",
            SweepParameter::P => "p",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub aggregates: Option<Aggregates>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub parameter: SweepParameter,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn render_table(&self) -> String {
        use dataset::format_percent as pct;
        let mut s = format!(
            "{:<6}{:>9}{:>9}{:>10}{:>9}{:>9}{:>10}\n",
            self.parameter.name(),
            "EM",
            "F1",
            "Emb-F1",
            "syn-EM",
            "syn-F1",
            "syn-Emb"
        );
        for r in &self.rows {
            match (&r.aggregates, &r.error) {
                (Some(a), _) => s.push_str(&format!(
                    "{:<6}{:>9}{:>9}{:>10}{:>9}{:>9}{:>10}\n",
                    r.value,
                    pct(a.em),
                    pct(a.word_f1),
                    pct(a.embed_f1),
                    pct(a.syn_em),
                    pct(a.syn_word_f1),
                    pct(a.syn_embed_f1)
                )),
                (None, Some(e)) => s.push_str(&format!("{:<6}failed: {e}\n", r.value)),
                (None, None) => s.push_str(&format!("{:<6}no gold labels configured\n", r.value)),
            }
        }
        s
    }
}

/// One pipeline run (and evaluation, when gold labels are configured) per
/// value, sequentially, through one shared gateway. Each value gets its own
/// subdirectory `<param>=<value>`; failures are recorded and the sweep
/// moves on.
pub fn run_sweep(
    config: &RunConfig,
    parameter: SweepParameter,
    values: &[usize],
    gateway: &Gateway,
) -> Result<SweepReport, PipelineError> {
    if values.is_empty() {
        return Err(PipelineError::Config("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = config.clone();
        match parameter {
            SweepParameter::K => c.k = v,
            SweepParameter::P => c.p = v,
        }
        c.output_dir = config.output_dir.join(format!("{}={v}", parameter.name()));
        let outcome = run_pipeline(&c, gateway).and_then(|_| match &c.gold {
            Some(gold) => run_eval(
                &c.output_dir.join(RECORDS_FILE),
                gold,
                c.synonyms.as_deref(),
                &c.embedder,
                &c.output_dir.join(REPORT_FILE),
                c.execution(),
            )
            .map(|r| Some(r.aggregates)),
            None => Ok(None),
        });
        rows.push(match outcome {
            Ok(aggregates) => SweepRow {
                value: v,
                aggregates,
                error: None,
            },
            Err(e) => {
                log::warn!("sweep {}={v} failed: {e}", parameter.name());
                SweepRow {
                    value: v,
                    aggregates: None,
                    error: Some(e.to_string()),
                }
            }
        });
    }
    let report = SweepReport { parameter, rows };
    fs::create_dir_all(&config.output_dir).map_err(io_err(&config.output_dir))?;
    write_json(&report, &config.output_dir.join("sweep.json"))?;
    let txt = config.output_dir.join("sweep.txt");
    fs::write(&txt, report.render_table()).map_err(io_err(&txt))?;
    Ok(report)
}
