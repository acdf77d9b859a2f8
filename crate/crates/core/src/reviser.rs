//! Lake-wide consistency pass over generated records. Tokens that received
//! several different expansions are put to the LLM, which decides whether
//! one expansion should apply everywhere; the accepted decisions are then
//! written back into the records.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::model::{assemble_expansion, is_valid_expansion, E2Record, TableGroup, TableSchema};
use crate::par::{self, Execution};
use crate::prompts::{self, render};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReviserConfig {
    pub min_token_length: usize,
    /// Upper bound on adjudicated tokens; `None` sends every candidate.
    pub max_candidates: Option<usize>,
    pub context_enabled: bool,
    pub table_names_enabled: bool,
}

impl Default for ReviserConfig {
    fn default() -> Self {
        Self {
            min_token_length: 2,
            max_candidates: None,
            context_enabled: true,
            table_names_enabled: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum ReviserError {
    #[error("unique rule `{token} => {expansion}` does not contain the token's letters in order")]
    InvalidRule { token: String, expansion: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub expansion: String,
    /// Number of distinct columns using this expansion for the token.
    pub frequency: usize,
    pub sample_table: String,
}

/// Case-folded token → observed expansions. Expansions that differ only in
/// case count as one and keep the first-seen spelling.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleIndex {
    entries: BTreeMap<String, Vec<Observation>>,
}

impl RuleIndex {
    pub fn build(records: &[E2Record]) -> Self {
        type Users<'a> = BTreeSet<(&'a str, &'a str)>;
        let mut raw: BTreeMap<String, Vec<(String, Observation, Users)>> = BTreeMap::new();
        for r in records {
            for rule in &r.rules {
                let list = raw.entry(rule.token.to_lowercase()).or_default();
                let folded = rule.expansion.to_lowercase();
                let slot = match list.iter().position(|(f, _, _)| *f == folded) {
                    Some(i) => i,
                    None => {
                        list.push((
                            folded,
                            Observation {
                                expansion: rule.expansion.clone(),
                                frequency: 0,
                                sample_table: r.table_name.clone(),
                            },
                            BTreeSet::new(),
                        ));
                        list.len() - 1
                    }
                };
                list[slot].2.insert((r.table_name.as_str(), r.column.as_str()));
            }
        }
        let entries = raw
            .into_iter()
            .map(|(tok, list)| {
                let obs = list
                    .into_iter()
                    .map(|(_, mut o, users)| {
                        o.frequency = users.len();
                        o
                    })
                    .collect();
                (tok, obs)
            })
            .collect();
        Self { entries }
    }

    pub fn get(&self, token: &str) -> Option<&[Observation]> {
        self.entries.get(&token.to_lowercase()).map(Vec::as_slice)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[Observation])> {
        self.entries.iter().map(|(t, o)| (t.as_str(), o.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Tokens with at least two expansions and at least `min_token_length`
/// characters, most frequent first (ties by token).
pub fn select_candidates(index: &RuleIndex, min_token_length: usize, cap: Option<usize>) -> Vec<String> {
    let mut c: Vec<(usize, &str)> = index
        .entries()
        .filter(|(t, obs)| obs.len() >= 2 && t.chars().count() >= min_token_length)
        .map(|(t, obs)| (obs.iter().map(|o| o.frequency).sum(), t))
        .collect();
    c.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
    c.into_iter()
        .take(cap.unwrap_or(usize::MAX))
        .map(|(_, t)| t.to_string())
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UniqueRuleSet {
    rules: BTreeMap<String, String>,
}

impl UniqueRuleSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, token: &str, expansion: &str) -> Result<(), ReviserError> {
        if !is_valid_expansion(token, expansion) {
            return Err(ReviserError::InvalidRule {
                token: token.into(),
                expansion: expansion.into(),
            });
        }
        self.rules.insert(token.to_lowercase(), expansion.to_string());
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<&str> {
        self.rules.get(&token.to_lowercase()).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.rules.iter().map(|(t, e)| (t.as_str(), e.as_str()))
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Verdict {
    Unique(String),
    NotUnique,
}

fn parse_verdict(reply: &str) -> Option<Verdict> {
    let line = reply
        .lines()
        .map(|l| l.trim().trim_matches(|c| c == '*' || c == '`').trim())
        .rfind(|l| l.len() >= 7 && l[..7].eq_ignore_ascii_case("answer:"))?;
    let body = line[7..].trim().trim_matches('*').trim();
    let upper = body.to_ascii_uppercase();
    if upper.starts_with("NOT UNIQUE") {
        return Some(Verdict::NotUnique);
    }
    if upper.starts_with("UNIQUE") {
        let (_, exp) = body.split_once("=>")?;
        let exp = exp.trim().trim_matches(|c| c == '"' || c == '`' || c == '*').trim();
        return (!exp.is_empty()).then(|| Verdict::Unique(exp.to_string()));
    }
    None
}

fn sample_schema(table: &str, schemas: &HashMap<&str, &TableSchema>, table_names: bool) -> String {
    let Some(s) = schemas.get(table) else {
        return if table_names { table.to_string() } else { String::new() };
    };
    if table_names {
        return s.signature();
    }
    let cols: Vec<&str> = s.columns.iter().map(|c| c.as_str()).collect();
    match &s.summary {
        Some(sum) => format!("a table described as \"{sum}\" with columns ({})", cols.join(", ")),
        None => format!("a table with columns ({})", cols.join(", ")),
    }
}

/// User prompt for one candidate token.
pub fn adjudication_prompt(
    token: &str,
    observations: &[Observation],
    group_summaries: &[String],
    schemas: &HashMap<&str, &TableSchema>,
    config: &ReviserConfig,
    template: &str,
) -> String {
    let groups = if config.context_enabled && !group_summaries.is_empty() {
        let mut s = String::from("The tables in this collection fall into these groups:\n");
        for g in group_summaries {
            s.push_str(&format!("- {g}\n"));
        }
        s.push('\n');
        s
    } else {
        String::new()
    };
    let obs: Vec<String> = observations
        .iter()
        .map(|o| {
            format!(
                "- \"{token}\" => \"{}\" (in {} column name(s); example: {})",
                o.expansion,
                o.frequency,
                sample_schema(&o.sample_table, schemas, config.table_names_enabled)
            )
        })
        .collect();
    render(
        template,
        &[("groups", &groups), ("token", token), ("observations", &obs.join("\n"))],
    )
}

fn gate(token: &str, answer: &str, observations: &[Observation]) -> Option<String> {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    if !is_valid_expansion(token, answer) {
        return None;
    }
    let a = norm(answer);
    observations
        .iter()
        .find(|o| norm(&o.expansion) == a)
        .map(|o| o.expansion.clone())
}

/// Asks whether `token` has one expansion lake-wide. The answer is kept only
/// when it is one of the observed expansions; a malformed reply gets one
/// retry and then counts as no decision.
#[allow(clippy::too_many_arguments)]
pub fn adjudicate(
    token: &str,
    observations: &[Observation],
    group_summaries: &[String],
    schemas: &HashMap<&str, &TableSchema>,
    config: &ReviserConfig,
    template: &str,
    gateway: &Gateway,
    model_id: &str,
) -> Result<Option<String>, GatewayError> {
    let user = adjudication_prompt(token, observations, group_summaries, schemas, config, template);
    let mut verdict = parse_verdict(
        &gateway
            .complete(&CompletionRequest::new(model_id, prompts::REVISER_SYSTEM, user.clone()))?
            .text,
    );
    if verdict.is_none() {
        let retry = user + prompts::REVISER_REMINDER;
        verdict = parse_verdict(
            &gateway
                .complete(&CompletionRequest::new(model_id, prompts::REVISER_SYSTEM, retry))?
                .text,
        );
    }
    Ok(match verdict {
        Some(Verdict::Unique(e)) => {
            let kept = gate(token, &e, observations);
            if kept.is_none() {
                log::info!("token {token}: rejected proposed expansion `{e}`");
            }
            kept
        }
        Some(Verdict::NotUnique) => None,
        None => {
            log::warn!("token {token}: no usable answer after retry");
            None
        }
    })
}

/// Rewrites every rule whose token is in `q`. Records without such a token
/// are returned as they are.
pub fn apply_unique_rules(records: &[E2Record], q: &UniqueRuleSet) -> Vec<E2Record> {
    records
        .iter()
        .map(|r| {
            let touches = r
                .rules
                .iter()
                .any(|rule| q.get(&rule.token).is_some_and(|e| e != rule.expansion));
            if !touches {
                return r.clone();
            }
            let mut out = r.clone();
            for rule in &mut out.rules {
                if let Some(e) = q.get(&rule.token) {
                    rule.expansion = e.to_string();
                }
            }
            if let Err(e) = assemble_expansion(&mut out) {
                log::warn!("{}.{}: unique rules not applied ({e})", r.table_name, r.column);
                return r.clone();
            }
            out
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviserOutput {
    pub records: Vec<E2Record>,
    pub unique_rules: UniqueRuleSet,
    pub candidates: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
pub fn run_reviser(
    records: &[E2Record],
    groups: &[TableGroup],
    schemas: &[TableSchema],
    config: &ReviserConfig,
    template: &str,
    gateway: &Gateway,
    model_id: &str,
    exec: Execution,
) -> Result<ReviserOutput, ReviserError> {
    let index = RuleIndex::build(records);
    let candidates = select_candidates(&index, config.min_token_length, config.max_candidates);
    let summaries: Vec<String> = groups
        .iter()
        .map(|g| g.summary.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let by_name: HashMap<&str, &TableSchema> = schemas.iter().map(|s| (s.name.as_str(), s)).collect();
    let decisions = par::try_map_blocking(&candidates, exec, gateway.parallelism(), |tok| {
        let obs = index.get(tok).unwrap_or(&[]);
        adjudicate(tok, obs, &summaries, &by_name, config, template, gateway, model_id)
    })?;
    let mut q = UniqueRuleSet::new();
    for (tok, d) in candidates.iter().zip(decisions) {
        if let Some(e) = d {
            q.insert(tok, &e)?;
        }
    }
    log::info!(
        "reviser: {} candidate token(s), {} unique rule(s)",
        candidates.len(),
        q.len()
    );
    Ok(ReviserOutput {
        records: apply_unique_rules(records, &q),
        unique_rules: q,
        candidates,
    })
}
