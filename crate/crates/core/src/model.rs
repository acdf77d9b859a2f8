//! Column names, their token/delimiter decomposition, and the per-column
//! expansion records produced by the generator.
//!
//! A column name is modelled as `t1 d1 t2 ... d(n-1) tn`: tokens separated by
//! delimiters drawn from a small fixed set. Tokenization itself always comes
//! from the LLM; this module only validates what it is handed.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

/// Delimiters permitted between two tokens. The empty string marks a
/// boundary with no separator character (`eSal` = `e` + `Sal`).
pub const DELIMITERS: [&str; 5] = ["_", "-", " ", ".", ""];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("column name is empty")]
    EmptyColumn,
    #[error("table name is empty")]
    EmptyTable,
    #[error("table `{table}` has no columns")]
    NoColumns { table: String },
    #[error("table `{table}` lists column `{column}` more than once")]
    DuplicateColumn { table: String, column: String },
    #[error("token sequence has {tokens} tokens but {delimiters} delimiters")]
    DelimiterCount { tokens: usize, delimiters: usize },
    #[error("empty token in sequence")]
    EmptyToken,
    #[error("delimiter {0:?} is not allowed")]
    BadDelimiter(String),
    #[error("{rules} rules for {tokens} tokens")]
    Alignment { rules: usize, tokens: usize },
    #[error("rule {index} is for token `{rule}` but the token is `{token}`")]
    RuleTokenMismatch { index: usize, rule: String, token: String },
    #[error("`{expansion}` does not contain the characters of `{token}` in order")]
    NotSubsequence { token: String, expansion: String },
    #[error("numeric token `{token}` must expand to itself, got `{expansion}`")]
    NumericExpanded { token: String, expansion: String },
    #[error("token `{token}` is expanded both as `{first}` and `{second}` in one column")]
    ConflictingRules {
        token: String,
        first: String,
        second: String,
    },
    #[error("tokens do not reconstruct `{raw}` (got `{rebuilt}`)")]
    Reconstruction { raw: String, rebuilt: String },
    #[error("group has no members")]
    EmptyGroup,
    #[error("group summary is empty")]
    EmptySummary,
}

/// An abbreviated column name exactly as it appears in a schema.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ColumnName(String);

impl ColumnName {
    pub fn new(raw: impl Into<String>) -> Result<Self, ModelError> {
        let raw = raw.into();
        if raw.trim().is_empty() {
            return Err(ModelError::EmptyColumn);
        }
        Ok(Self(raw))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ColumnName {
    type Error = ModelError;

    fn try_from(raw: String) -> Result<Self, Self::Error> {
        Self::new(raw)
    }
}

impl From<ColumnName> for String {
    fn from(c: ColumnName) -> Self {
        c.0
    }
}

impl fmt::Display for ColumnName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub delimiters: Vec<String>,
}

impl TokenSequence {
    /// Checks the structural invariants: non-empty tokens, one fewer
    /// delimiter than tokens, every delimiter from [`DELIMITERS`].
    pub fn new(tokens: Vec<String>, delimiters: Vec<String>) -> Result<Self, ModelError> {
        if tokens.is_empty() || tokens.iter().any(|t| t.is_empty()) {
            return Err(ModelError::EmptyToken);
        }
        if delimiters.len() + 1 != tokens.len() {
            return Err(ModelError::DelimiterCount {
                tokens: tokens.len(),
                delimiters: delimiters.len(),
            });
        }
        if let Some(bad) = delimiters.iter().find(|d| !DELIMITERS.contains(&d.as_str())) {
            return Err(ModelError::BadDelimiter(bad.clone()));
        }
        Ok(Self { tokens, delimiters })
    }

    /// A one-token sequence covering the whole raw name.
    pub fn whole(column: &ColumnName) -> Self {
        Self {
            tokens: vec![column.as_str().to_string()],
            delimiters: Vec::new(),
        }
    }

    /// Derives the delimiters for an LLM-supplied token list by locating each
    /// token in `raw` in order. Between consecutive tokens at most one
    /// delimiter character may appear. Returns `None` when the tokens do not
    /// tile the raw name.
    pub fn align(raw: &str, tokens: &[String]) -> Option<Self> {
        if tokens.is_empty() || tokens.iter().any(|t| t.is_empty()) {
            return None;
        }
        let mut rest = raw.strip_prefix(tokens[0].as_str())?;
        let mut delimiters = Vec::with_capacity(tokens.len() - 1);
        for token in &tokens[1..] {
            let found = DELIMITERS.iter().rev().find_map(|d| {
                // Empty delimiter is tried first (reversed order puts it first).
                rest.strip_prefix(d)
                    .and_then(|r| r.strip_prefix(token.as_str()))
                    .map(|r| (d, r))
            });
            let (d, r) = found?;
            delimiters.push((*d).to_string());
            rest = r;
        }
        if !rest.is_empty() {
            return None;
        }
        Some(Self {
            tokens: tokens.to_vec(),
            delimiters,
        })
    }

    /// Interleaves tokens and delimiters back into a single string.
    pub fn rebuild(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                if let Some(d) = self.delimiters.get(i - 1) {
                    out.push_str(d);
                }
            }
            out.push_str(t);
        }
        out
    }
}

/// True iff interleaving the sequence reproduces `column` character for
/// character and the sequence is structurally well formed.
pub fn validate_token_sequence(column: &ColumnName, seq: &TokenSequence) -> bool {
    seq.tokens.len() == seq.delimiters.len() + 1
        && seq.tokens.iter().all(|t| !t.is_empty())
        && seq.delimiters.iter().all(|d| DELIMITERS.contains(&d.as_str()))
        && seq.rebuild() == column.as_str()
}

/// Case-insensitive subsequence test: every character of `token` appears in
/// `expansion` in the same order. Spaces and punctuation in the expansion are
/// ordinary characters to skip over.
pub fn is_valid_expansion(token: &str, expansion: &str) -> bool {
    let mut haystack = expansion.chars().flat_map(char::to_lowercase);
    token
        .chars()
        .flat_map(char::to_lowercase)
        .all(|needle| haystack.any(|c| c == needle))
}

pub fn is_numeric_token(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| c.is_ascii_digit())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpansionRule {
    pub token: String,
    pub expansion: String,
}

impl ExpansionRule {
    pub fn new(token: impl Into<String>, expansion: impl Into<String>) -> Self {
        Self {
            token: token.into(),
            expansion: expansion.into(),
        }
    }

    pub fn identity(token: &str) -> Self {
        Self::new(token, token)
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if is_numeric_token(&self.token) {
            if self.expansion != self.token {
                return Err(ModelError::NumericExpanded {
                    token: self.token.clone(),
                    expansion: self.expansion.clone(),
                });
            }
            return Ok(());
        }
        if self.expansion.trim().is_empty() || !is_valid_expansion(&self.token, &self.expansion) {
            return Err(ModelError::NotSubsequence {
                token: self.token.clone(),
                expansion: self.expansion.clone(),
            });
        }
        Ok(())
    }
}

/// "Expansion & explanation" record for one column: how the name was split
/// and what each token stands for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct E2Record {
    #[serde(rename = "table")]
    pub table_name: String,
    pub column: ColumnName,
    #[serde(flatten)]
    pub token_sequence: TokenSequence,
    pub rules: Vec<ExpansionRule>,
    pub expansion: String,
    /// Set when the generator gave up on the column and emitted the
    /// identity record.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

impl E2Record {
    /// Builds a record and assembles its expansion. Does not run
    /// [`E2Record::validate`].
    pub fn new(
        table_name: impl Into<String>,
        column: ColumnName,
        token_sequence: TokenSequence,
        rules: Vec<ExpansionRule>,
    ) -> Result<Self, ModelError> {
        let mut record = Self {
            table_name: table_name.into(),
            column,
            token_sequence,
            rules,
            expansion: String::new(),
            fallback: false,
        };
        assemble_expansion(&mut record)?;
        Ok(record)
    }

    /// The record used when no valid expansion could be obtained: the whole
    /// name as one token mapped to itself.
    pub fn identity(table_name: impl Into<String>, column: ColumnName) -> Self {
        let seq = TokenSequence::whole(&column);
        let rules = vec![ExpansionRule::identity(column.as_str())];
        let mut record = Self {
            table_name: table_name.into(),
            expansion: column.as_str().to_string(),
            column,
            token_sequence: seq,
            rules,
            fallback: true,
        };
        record.expansion = join_expansions(&record.rules);
        record
    }

    /// Checks every record invariant: reconstruction, rule alignment,
    /// subsequence property, numeric identity, one expansion per token within
    /// the column, and assembled expansion.
    pub fn validate(&self) -> Result<(), ModelError> {
        let seq = &self.token_sequence;
        TokenSequence::new(seq.tokens.clone(), seq.delimiters.clone())?;
        if !validate_token_sequence(&self.column, seq) {
            return Err(ModelError::Reconstruction {
                raw: self.column.to_string(),
                rebuilt: seq.rebuild(),
            });
        }
        check_alignment(seq, &self.rules)?;
        let mut seen: Vec<&ExpansionRule> = Vec::new();
        for rule in &self.rules {
            rule.check()?;
            if let Some(prev) = seen
                .iter()
                .find(|r| r.token == rule.token && r.expansion != rule.expansion)
            {
                return Err(ModelError::ConflictingRules {
                    token: rule.token.clone(),
                    first: prev.expansion.clone(),
                    second: rule.expansion.clone(),
                });
            }
            seen.push(rule);
        }
        let assembled = join_expansions(&self.rules);
        if assembled != self.expansion {
            return Err(ModelError::Reconstruction {
                raw: assembled,
                rebuilt: self.expansion.clone(),
            });
        }
        Ok(())
    }
}

fn check_alignment(seq: &TokenSequence, rules: &[ExpansionRule]) -> Result<(), ModelError> {
    if rules.len() != seq.tokens.len() {
        return Err(ModelError::Alignment {
            rules: rules.len(),
            tokens: seq.tokens.len(),
        });
    }
    for (index, (rule, token)) in rules.iter().zip(&seq.tokens).enumerate() {
        if &rule.token != token {
            return Err(ModelError::RuleTokenMismatch {
                index,
                rule: rule.token.clone(),
                token: token.clone(),
            });
        }
    }
    Ok(())
}

fn join_expansions(rules: &[ExpansionRule]) -> String {
    rules
        .iter()
        .map(|r| r.expansion.split_whitespace().collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Joins the per-token expansions with single spaces, stores the result in
/// `record.expansion`, and returns it.
pub fn assemble_expansion(record: &mut E2Record) -> Result<String, ModelError> {
    check_alignment(&record.token_sequence, &record.rules)?;
    record.expansion = join_expansions(&record.rules);
    Ok(record.expansion.clone())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<ColumnName>,
    pub summary: Option<String>,
}

impl TableSchema {
    pub fn new(name: impl Into<String>, columns: Vec<ColumnName>) -> Result<Self, ModelError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(ModelError::EmptyTable);
        }
        if columns.is_empty() {
            return Err(ModelError::NoColumns { table: name });
        }
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c.as_str()) {
                return Err(ModelError::DuplicateColumn {
                    table: name,
                    column: c.to_string(),
                });
            }
        }
        Ok(Self {
            name,
            columns,
            summary: None,
        })
    }

    /// Convenience constructor for literal column lists.
    pub fn from_strs(name: &str, columns: &[&str]) -> Result<Self, ModelError> {
        let cols = columns
            .iter()
            .map(|c| ColumnName::new(*c))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(name, cols)
    }

    /// `Name(col1, col2, ...)`
    pub fn signature(&self) -> String {
        let cols: Vec<&str> = self.columns.iter().map(ColumnName::as_str).collect();
        format!("{}({})", self.name, cols.join(", "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub u32);

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableGroup {
    pub id: GroupId,
    pub summary: String,
    pub members: Vec<String>,
}

impl TableGroup {
    pub fn new(id: GroupId, summary: impl Into<String>, members: Vec<String>) -> Result<Self, ModelError> {
        let summary = summary.into();
        if summary.trim().is_empty() {
            return Err(ModelError::EmptySummary);
        }
        if members.is_empty() {
            return Err(ModelError::EmptyGroup);
        }
        Ok(Self { id, summary, members })
    }
}
