//! Column-name expansion. Columns of each table go to the LLM in batches of
//! `p`, together with context about related tables, the rule block, and
//! worked exemplars. Each reply is parsed into one [`E2Record`] per column.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::model::{
    is_numeric_token, is_valid_expansion, ColumnName, E2Record, ExpansionRule, TableGroup, TableSchema, TokenSequence,
    DELIMITERS,
};
use crate::par::{self, Execution};
use crate::prompts::{self, render, Templates};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub batch_size_p: usize,
    pub context_sample_q: usize,
    pub seed: u64,
    pub rules_enabled: bool,
    pub cot_enabled: bool,
    pub context_enabled: bool,
    pub table_names_enabled: bool,
    /// Plain few-shot prompting with no context, rules, or reasoning.
    pub baseline: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            batch_size_p: 10,
            context_sample_q: 100,
            seed: 0,
            rules_enabled: true,
            cot_enabled: true,
            context_enabled: true,
            table_names_enabled: true,
            baseline: false,
        }
    }
}

impl GeneratorConfig {
    fn uses_cot(&self) -> bool {
        self.cot_enabled && !self.baseline
    }
}

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("batch size p must be at least 1")]
    ZeroBatchSize,
    #[error("{} batch(es) failed; first: table `{}`: {}", .failures.len(), .failures[0].0, .failures[0].1)]
    Batches {
        failures: Vec<(String, String)>,
        partial: GeneratorOutput,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GeneratorOutput {
    pub records: Vec<E2Record>,
    /// Columns that fell back to the identity record.
    pub fallbacks: usize,
}

fn table_seed(seed: u64, table: &str) -> u64 {
    let digest = Sha256::digest(table.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    seed ^ u64::from_le_bytes(b)
}

/// Context block for one table: its own name (when table names are on),
/// then up to `q` peers from its group, each as `name: summary`. Peers are
/// sampled with a per-table seeded RNG and listed in schema order, so the
/// block does not depend on how groups were assembled.
pub fn build_context(
    table: &TableSchema,
    group: Option<&TableGroup>,
    schemas: &[TableSchema],
    config: &GeneratorConfig,
) -> String {
    if !config.context_enabled || config.baseline {
        return String::new();
    }
    let mut out = String::from("Context:\n");
    if config.table_names_enabled {
        out.push_str(&format!("Target table: {}\n", table.name));
    } else if let Some(s) = &table.summary {
        out.push_str(&format!("Target table summary: {s}\n"));
    }
    let peers: Vec<&TableSchema> = match group {
        Some(g) => schemas
            .iter()
            .filter(|s| s.name != table.name && g.members.contains(&s.name))
            .collect(),
        None => Vec::new(),
    };
    let chosen: Vec<&TableSchema> = if peers.len() > config.context_sample_q {
        let mut rng = ChaCha8Rng::seed_from_u64(table_seed(config.seed, &table.name));
        let mut idx = rand::seq::index::sample(&mut rng, peers.len(), config.context_sample_q).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| peers[i]).collect()
    } else {
        peers
    };
    if !chosen.is_empty() {
        out.push_str("Related tables:\n");
        for p in chosen {
            let summary = p.summary.as_deref().unwrap_or("");
            if config.table_names_enabled {
                out.push_str(&format!("- {}: {}\n", p.name, summary));
            } else {
                out.push_str(&format!("- {summary}\n"));
            }
        }
    }
    if out == "Context:\n" {
        return String::new();
    }
    out.push('\n');
    out
}

fn rules_block() -> String {
    let mut s = String::from("Rules:\n");
    for (i, r) in prompts::GENERATOR_RULES.iter().enumerate() {
        s.push_str(&format!("{}. {}\n", i + 1, r));
    }
    s.push('\n');
    s
}

/// Full user prompt for one batch.
pub fn expansion_prompt(
    table: &TableSchema,
    columns: &[ColumnName],
    context: &str,
    templates: &Templates,
    config: &GeneratorConfig,
) -> String {
    let listing: Vec<&str> = columns.iter().map(ColumnName::as_str).collect();
    let listing = listing.join("\n");
    if config.baseline {
        return render(&templates.baseline, &[("columns", &listing)]);
    }
    let of_table = if config.table_names_enabled {
        format!(" of table {}", table.name)
    } else {
        String::new()
    };
    let (exemplars, task) = if config.uses_cot() {
        (&templates.cot_exemplars, prompts::COT_TASK)
    } else {
        (&templates.direct_exemplars, prompts::DIRECT_TASK)
    };
    let rules = if config.rules_enabled {
        rules_block()
    } else {
        String::new()
    };
    let examples = format!("Examples:\n{}\n", exemplars.trim_end());
    let task = render(task, &[("of_table", &of_table), ("columns", &listing)]);
    render(
        &templates.generator,
        &[
            ("context", context),
            ("rules", &rules),
            ("examples", &format!("{examples}\n")),
            ("task", &task),
        ],
    )
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
struct ReplyBlock {
    column: String,
    tokens: Option<Vec<String>>,
    rules: Vec<(String, String)>,
    expansion: Option<String>,
}

fn unmark(s: &str) -> &str {
    s.trim().trim_matches(|c| c == '*' || c == '`' || c == '"').trim()
}

fn field<'a>(line: &'a str, name: &str) -> Option<&'a str> {
    let line = line.trim_start_matches(['-', '*', ' ']);
    let head = line.get(..name.len())?;
    if !head.eq_ignore_ascii_case(name) {
        return None;
    }
    let rest = line[name.len()..].trim_start_matches('*');
    rest.strip_prefix(':').map(|r| unmark(r.trim_start_matches('*')))
}

fn parse_blocks(reply: &str) -> Vec<ReplyBlock> {
    let mut blocks: Vec<ReplyBlock> = Vec::new();
    for line in reply.lines() {
        let line = line.trim();
        if let Some(c) = field(line, "column") {
            blocks.push(ReplyBlock {
                column: c.to_string(),
                ..Default::default()
            });
            continue;
        }
        let Some(block) = blocks.last_mut() else { continue };
        if let Some(t) = field(line, "tokens") {
            block.tokens = Some(t.split('|').map(|t| unmark(t).to_string()).collect());
        } else if let Some(e) = field(line, "expansion") {
            block.expansion = Some(e.to_string());
        } else if let Some((tok, exp)) = line.split_once("=>") {
            let tok = unmark(tok.trim_start_matches(['-', '*', ' ']));
            block.rules.push((tok.to_string(), unmark(exp).to_string()));
        }
    }
    blocks
}

fn record_from_tokens(table: &str, column: &ColumnName, block: &ReplyBlock) -> Result<E2Record, String> {
    let tokens = block.tokens.as_ref().ok_or("missing Tokens line")?;
    let seq = TokenSequence::align(column.as_str(), tokens)
        .ok_or_else(|| format!("tokens [{}] do not spell `{column}`", tokens.join(" | ")))?;
    if block.rules.len() != tokens.len() {
        return Err(format!(
            "{} tokens but {} expansion rules",
            tokens.len(),
            block.rules.len()
        ));
    }
    let mut rules = Vec::with_capacity(tokens.len());
    for (tok, (rule_tok, exp)) in tokens.iter().zip(&block.rules) {
        if rule_tok != tok {
            return Err(format!("rule for `{rule_tok}` where token `{tok}` was expected"));
        }
        rules.push(ExpansionRule::new(tok.clone(), exp.clone()));
    }
    let record = E2Record::new(table, column.clone(), seq, rules).map_err(|e| e.to_string())?;
    record.validate().map_err(|e| e.to_string())?;
    Ok(record)
}

fn token_fits(token: &str, phrase: &str) -> bool {
    if is_numeric_token(token) {
        token == phrase
    } else {
        is_valid_expansion(token, phrase)
    }
}

/// Assigns contiguous word runs of `words` to `tokens` so each token is a
/// subsequence of its run. Shorter leading runs are tried first.
fn partition_words(tokens: &[String], words: &[&str]) -> Option<Vec<String>> {
    let Some((first, rest)) = tokens.split_first() else {
        return words.is_empty().then(Vec::new);
    };
    let max_take = words.len().checked_sub(rest.len())?;
    (1..=max_take).find_map(|take| {
        let phrase = words[..take].join(" ");
        if !token_fits(first, &phrase) {
            return None;
        }
        let mut tail = partition_words(rest, &words[take..])?;
        tail.insert(0, phrase);
        Some(tail)
    })
}

/// Builds a record from a bare `name -> expansion` answer (no reasoning
/// given). The name is split only at explicit delimiter characters and the
/// expansion words are distributed over the pieces.
pub fn record_from_expansion(table: &str, column: &ColumnName, expansion: &str) -> Result<E2Record, String> {
    let mut tokens = Vec::new();
    let mut delimiters = Vec::new();
    let mut current = String::new();
    for ch in column.as_str().chars() {
        let s = ch.to_string();
        if !s.is_empty() && DELIMITERS.contains(&s.as_str()) {
            tokens.push(std::mem::take(&mut current));
            delimiters.push(s);
        } else {
            current.push(ch);
        }
    }
    tokens.push(current);
    let seq = if tokens.iter().any(String::is_empty) {
        TokenSequence::whole(column)
    } else {
        TokenSequence { tokens, delimiters }
    };
    let words: Vec<&str> = expansion.split_whitespace().collect();
    let parts = partition_words(&seq.tokens, &words)
        .ok_or_else(|| format!("`{expansion}` does not contain the letters of `{column}` in order"))?;
    let rules = seq
        .tokens
        .iter()
        .zip(parts)
        .map(|(t, e)| ExpansionRule::new(t.clone(), e))
        .collect();
    let record = E2Record::new(table, column.clone(), seq, rules).map_err(|e| e.to_string())?;
    record.validate().map_err(|e| e.to_string())?;
    Ok(record)
}

fn find_block<'a>(blocks: &'a [ReplyBlock], column: &ColumnName) -> Option<&'a ReplyBlock> {
    blocks
        .iter()
        .find(|b| b.column == column.as_str())
        .or_else(|| blocks.iter().find(|b| b.column.eq_ignore_ascii_case(column.as_str())))
}

fn records_from_reply(
    table: &str,
    columns: &[ColumnName],
    reply: &str,
    config: &GeneratorConfig,
) -> Vec<Result<E2Record, String>> {
    let blocks = parse_blocks(reply);
    columns
        .iter()
        .map(|c| {
            let block = find_block(&blocks, c).ok_or_else(|| "no answer block for this column".to_string())?;
            if config.uses_cot() {
                record_from_tokens(table, c, block)
            } else {
                let e = block.expansion.as_deref().ok_or("missing Expansion line")?;
                record_from_expansion(table, c, e)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchOutput {
    pub records: Vec<E2Record>,
    pub fallbacks: usize,
}

/// Expands up to `p` columns of one table. Columns whose answers fail
/// validation are re-asked once; a second failure yields the flagged
/// identity record.
pub fn expand_batch(
    table: &TableSchema,
    columns: &[ColumnName],
    context: &str,
    templates: &Templates,
    config: &GeneratorConfig,
    gateway: &Gateway,
    model_id: &str,
) -> Result<BatchOutput, GatewayError> {
    let user = expansion_prompt(table, columns, context, templates, config);
    let reply = gateway.complete(&CompletionRequest::new(model_id, prompts::GENERATOR_SYSTEM, user))?;
    let mut results = records_from_reply(&table.name, columns, &reply.text, config);

    let failing: Vec<usize> = (0..columns.len()).filter(|&i| results[i].is_err()).collect();
    if !failing.is_empty() {
        let retry_cols: Vec<ColumnName> = failing.iter().map(|&i| columns[i].clone()).collect();
        let problems: Vec<String> = failing
            .iter()
            .map(|&i| {
                format!(
                    "- {}: {}",
                    columns[i],
                    results[i].as_ref().err().map(String::as_str).unwrap_or("")
                )
            })
            .collect();
        log::debug!("table {}: re-asking {} column(s)", table.name, retry_cols.len());
        let user = expansion_prompt(table, &retry_cols, context, templates, config)
            + &render(prompts::GENERATOR_CORRECTION, &[("problems", &problems.join("\n"))]);
        let reply = gateway.complete(&CompletionRequest::new(model_id, prompts::GENERATOR_SYSTEM, user))?;
        let retried = records_from_reply(&table.name, &retry_cols, &reply.text, config);
        for (&i, r) in failing.iter().zip(retried) {
            results[i] = r;
        }
    }

    let mut fallbacks = 0;
    let records = results
        .into_iter()
        .zip(columns)
        .map(|(r, c)| {
            r.unwrap_or_else(|problem| {
                log::warn!("table {}: column {c} falls back to identity ({problem})", table.name);
                fallbacks += 1;
                E2Record::identity(&table.name, c.clone())
            })
        })
        .collect();
    Ok(BatchOutput { records, fallbacks })
}

/// Expands every column of every table. Output follows table order, then
/// column order within each table.
pub fn run_generator(
    schemas: &[TableSchema],
    groups: &[TableGroup],
    config: &GeneratorConfig,
    templates: &Templates,
    gateway: &Gateway,
    model_id: &str,
    exec: Execution,
) -> Result<GeneratorOutput, GeneratorError> {
    if config.batch_size_p == 0 {
        return Err(GeneratorError::ZeroBatchSize);
    }
    let group_of: HashMap<&str, &TableGroup> = groups
        .iter()
        .flat_map(|g| g.members.iter().map(move |m| (m.as_str(), g)))
        .collect();
    let contexts: Vec<String> = schemas
        .iter()
        .map(|t| build_context(t, group_of.get(t.name.as_str()).copied(), schemas, config))
        .collect();
    let jobs: Vec<(usize, &[ColumnName])> = schemas
        .iter()
        .enumerate()
        .flat_map(|(i, t)| t.columns.chunks(config.batch_size_p).map(move |c| (i, c)))
        .collect();
    let results = par::map_blocking(&jobs, exec, gateway.parallelism(), |(i, cols)| {
        expand_batch(&schemas[*i], cols, &contexts[*i], templates, config, gateway, model_id)
    });

    let mut out = GeneratorOutput::default();
    let mut failures = Vec::new();
    for ((i, _), r) in jobs.iter().zip(results) {
        match r {
            Ok(b) => {
                out.fallbacks += b.fallbacks;
                out.records.extend(b.records);
            }
            Err(e) => failures.push((schemas[*i].name.clone(), e.to_string())),
        }
    }
    if failures.is_empty() {
        Ok(out)
    } else {
        Err(GeneratorError::Batches { failures, partial: out })
    }
}
