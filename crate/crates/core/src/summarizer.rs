//! Clusters tables into topical groups and summarizes each group and table.
//!
//! Tables are sent to the LLM in consecutive batches of `k`. Each batch
//! reply names groups and per-table summaries; groups from all batches are
//! then merged whenever their summaries agree after normalization.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::model::{GroupId, TableGroup, TableSchema};
use crate::par::{self, Execution};
use crate::prompts::{self, render};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SummarizerConfig {
    pub batch_size_k: usize,
    pub seed: u64,
    pub table_summary_max_words: usize,
    pub group_summary_max_words: usize,
}

impl Default for SummarizerConfig {
    fn default() -> Self {
        Self {
            batch_size_k: 30,
            seed: 0,
            table_summary_max_words: 40,
            group_summary_max_words: 12,
        }
    }
}

#[derive(Debug, Error)]
pub enum SummarizerError {
    #[error("batch size k must be at least 1")]
    ZeroBatchSize,
    #[error("no tables to summarize")]
    NoTables,
    #[error("batch of {} tables exceeds k = {k}", .tables)]
    BatchTooLarge { tables: usize, k: usize },
    #[error("unusable clustering reply for batch [{}]: {problem}", .tables.join(", "))]
    Malformed { tables: Vec<String>, problem: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Output of one batch: groups with batch-local ids plus a summary per table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSummary {
    pub groups: Vec<TableGroup>,
    pub table_summaries: HashMap<String, String>,
}

pub(crate) fn cap_words(text: &str, max: usize) -> String {
    text.split_whitespace().take(max.max(1)).collect::<Vec<_>>().join(" ")
}

/// Lowercase, trim, collapse internal whitespace.
pub fn normalize_summary(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn strip_markup(s: &str) -> &str {
    s.trim().trim_matches(|c| c == '*' || c == '`' || c == '"').trim()
}

/// Parses the `GROUP:` / `- table: summary` layout. Lines that match
/// neither form are ignored; every batch table must be listed exactly once.
fn parse_clustering(reply: &str, tables: &[&TableSchema], cfg: &SummarizerConfig) -> Result<BatchSummary, String> {
    let known: HashSet<&str> = tables.iter().map(|t| t.name.as_str()).collect();
    // Longest names first so `Address:` never shadows `AddressType:`.
    let mut by_len: Vec<&str> = known.iter().copied().collect();
    by_len.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));

    let mut groups: Vec<(String, Vec<String>)> = Vec::new();
    let mut summaries: HashMap<String, String> = HashMap::new();
    for raw in reply.lines() {
        let line = raw.trim();
        if let Some(rest) = strip_prefix_ci(line.trim_start_matches(['#', '*', ' ']), "group:") {
            let summary = cap_words(strip_markup(rest), cfg.group_summary_max_words);
            if summary.is_empty() {
                return Err("a GROUP line has an empty summary".into());
            }
            groups.push((summary, Vec::new()));
            continue;
        }
        let Some(item) = line.strip_prefix('-').or_else(|| line.strip_prefix('*')) else {
            continue;
        };
        let item = item.trim().trim_start_matches(['*', '`']);
        let Some(name) = by_len.iter().find(|n| {
            item.strip_prefix(**n)
                .map(|r| r.trim_start_matches(['*', '`']).trim_start().starts_with(':'))
                .unwrap_or(false)
        }) else {
            return Err(format!("unknown table in line `{line}`"));
        };
        let summary = item[name.len()..].trim_start_matches(['*', '`']).trim_start()[1..].trim();
        let summary = cap_words(strip_markup(summary), cfg.table_summary_max_words);
        if summary.is_empty() {
            return Err(format!("table `{name}` has an empty summary"));
        }
        let Some(group) = groups.last_mut() else {
            return Err(format!("table `{name}` is listed before any GROUP line"));
        };
        if summaries.insert(name.to_string(), summary).is_some() {
            return Err(format!("table `{name}` is listed more than once"));
        }
        group.1.push(name.to_string());
    }
    let missing: Vec<&str> = tables
        .iter()
        .map(|t| t.name.as_str())
        .filter(|n| !summaries.contains_key(*n))
        .collect();
    if !missing.is_empty() {
        return Err(format!("tables missing from the reply: {}", missing.join(", ")));
    }
    let groups = groups
        .into_iter()
        .filter(|(_, members)| !members.is_empty())
        .enumerate()
        .map(|(i, (summary, members))| TableGroup {
            id: GroupId(i as u32),
            summary,
            members,
        })
        .collect();
    Ok(BatchSummary {
        groups,
        table_summaries: summaries,
    })
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let head = s.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &s[prefix.len()..])
}

pub fn clustering_prompt(tables: &[&TableSchema], template: &str) -> String {
    let listing: Vec<String> = tables.iter().map(|t| t.signature()).collect();
    render(
        template,
        &[("count", &tables.len().to_string()), ("tables", &listing.join("\n"))],
    )
}

/// Clusters one batch of at most `k` tables. A reply that cannot be parsed
/// earns one re-prompt with a format reminder; a second failure is an error.
pub fn summarize_batch(
    tables: &[&TableSchema],
    config: &SummarizerConfig,
    gateway: &Gateway,
    model_id: &str,
    template: &str,
) -> Result<BatchSummary, SummarizerError> {
    if config.batch_size_k == 0 {
        return Err(SummarizerError::ZeroBatchSize);
    }
    if tables.is_empty() {
        return Err(SummarizerError::NoTables);
    }
    if tables.len() > config.batch_size_k {
        return Err(SummarizerError::BatchTooLarge {
            tables: tables.len(),
            k: config.batch_size_k,
        });
    }
    let user = clustering_prompt(tables, template);
    let first = gateway.complete(&CompletionRequest::new(
        model_id,
        prompts::SUMMARIZER_SYSTEM,
        user.clone(),
    ))?;
    let problem = match parse_clustering(&first.text, tables, config) {
        Ok(b) => return Ok(b),
        Err(p) => p,
    };
    log::debug!("clustering reply rejected ({problem}); re-prompting");
    let retry_user = user + &render(prompts::SUMMARIZER_REMINDER, &[("problem", &problem)]);
    let second = gateway.complete(&CompletionRequest::new(
        model_id,
        prompts::SUMMARIZER_SYSTEM,
        retry_user,
    ))?;
    parse_clustering(&second.text, tables, config).map_err(|problem| SummarizerError::Malformed {
        tables: tables.iter().map(|t| t.name.clone()).collect(),
        problem,
    })
}

/// Unions groups whose summaries match after normalization. Member order and
/// the first-seen summary casing are kept; ids are reassigned in output
/// order.
pub fn global_merge(groups: Vec<TableGroup>) -> Vec<TableGroup> {
    let mut out: Vec<TableGroup> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for g in groups {
        let key = normalize_summary(&g.summary);
        match slot.get(&key) {
            Some(&i) => {
                for m in g.members {
                    if !out[i].members.contains(&m) {
                        out[i].members.push(m);
                    }
                }
            }
            None => {
                slot.insert(key, out.len());
                out.push(g);
            }
        }
    }
    for (i, g) in out.iter_mut().enumerate() {
        g.id = GroupId(i as u32);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummarizerOutput {
    pub groups: Vec<TableGroup>,
    /// Input schemas, in input order, with `summary` filled in.
    pub schemas: Vec<TableSchema>,
}

/// Splits `schemas` into consecutive batches of `k`, clusters each batch,
/// then merges groups across batches.
pub fn run_summarizer(
    schemas: &[TableSchema],
    config: &SummarizerConfig,
    gateway: &Gateway,
    model_id: &str,
    template: &str,
    exec: Execution,
) -> Result<SummarizerOutput, SummarizerError> {
    if config.batch_size_k == 0 {
        return Err(SummarizerError::ZeroBatchSize);
    }
    if schemas.is_empty() {
        return Err(SummarizerError::NoTables);
    }
    let batches: Vec<Vec<&TableSchema>> = schemas
        .chunks(config.batch_size_k)
        .map(|c| c.iter().collect())
        .collect();
    let results = par::try_map_blocking(&batches, exec, gateway.parallelism(), |batch| {
        summarize_batch(batch, config, gateway, model_id, template)
    })?;

    let mut all_groups = Vec::new();
    let mut summaries = HashMap::new();
    for r in results {
        all_groups.extend(r.groups);
        summaries.extend(r.table_summaries);
    }
    let groups = global_merge(all_groups);
    let schemas = schemas
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.summary = summaries.get(&t.name).cloned();
            t
        })
        .collect();
    Ok(SummarizerOutput { groups, schemas })
}
