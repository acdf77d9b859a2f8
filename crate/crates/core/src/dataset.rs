//! File formats: line-delimited JSON for schemas, gold labels, groups and E2
//! records; a plain-text `a = b = c` format for synonym classes.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::MetricReport;
use crate::model::{ColumnName, E2Record, ModelError, TableGroup, TableSchema};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate table `{table}`")]
    DuplicateTable { path: PathBuf, line: usize, table: String },
    #[error("{path}:{line}: duplicate gold label for `{table}`.`{column}`")]
    DuplicateGold {
        path: PathBuf,
        line: usize,
        table: String,
        column: String,
    },
    #[error("{path}:{line}: {source}")]
    Invalid {
        path: PathBuf,
        line: usize,
        #[source]
        source: ModelError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Yields `(line_number, line)` for every non-blank line.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn parse_line<T: DeserializeOwned>(path: &Path, line_no: usize, line: &str) -> Result<T, DatasetError> {
    serde_json::from_str(line).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message: e.to_string(),
    })
}

fn write_lines<T: Serialize>(items: &[T], path: &Path) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("record serialization cannot fail");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Serialize, Deserialize)]
struct SchemaLine {
    #[serde(alias = "table")]
    table_name: String,
    columns: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    summary: Option<String>,
}

/// Loads tables in file order. Order is significant: summarizer batches are
/// consecutive slices of this list.
pub fn load_schemas(path: impl AsRef<Path>) -> Result<Vec<TableSchema>, DatasetError> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let rec: SchemaLine = parse_line(path, line_no, &line)?;
        let invalid = |source| DatasetError::Invalid {
            path: path.to_path_buf(),
            line: line_no,
            source,
        };
        let columns = rec
            .columns
            .into_iter()
            .map(ColumnName::new)
            .collect::<Result<Vec<_>, _>>()
            .map_err(invalid)?;
        let mut table = TableSchema::new(rec.table_name, columns).map_err(invalid)?;
        table.summary = rec.summary.filter(|s| !s.trim().is_empty());
        if !seen.insert(table.name.clone()) {
            return Err(DatasetError::DuplicateTable {
                path: path.to_path_buf(),
                line: line_no,
                table: table.name,
            });
        }
        out.push(table);
    }
    Ok(out)
}

pub fn write_schemas(schemas: &[TableSchema], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let lines: Vec<SchemaLine> = schemas
        .iter()
        .map(|t| SchemaLine {
            table_name: t.name.clone(),
            columns: t.columns.iter().map(|c| c.to_string()).collect(),
            summary: t.summary.clone(),
        })
        .collect();
    write_lines(&lines, path.as_ref())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    #[serde(alias = "table")]
    pub table_name: String,
    #[serde(rename = "column")]
    pub column_raw: String,
    #[serde(rename = "gold", default)]
    pub gold_expansion: String,
    #[serde(default)]
    pub excluded: bool,
}

pub fn load_gold(path: impl AsRef<Path>) -> Result<Vec<GoldLabel>, DatasetError> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let mut label: GoldLabel = parse_line(path, line_no, &line)?;
        if label.excluded {
            label.gold_expansion.clear();
        } else if label.gold_expansion.trim().is_empty() {
            return Err(DatasetError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!(
                    "missing gold expansion for `{}`.`{}` (set \"excluded\": true to skip it)",
                    label.table_name, label.column_raw
                ),
            });
        }
        if !seen.insert((label.table_name.clone(), label.column_raw.clone())) {
            return Err(DatasetError::DuplicateGold {
                path: path.to_path_buf(),
                line: line_no,
                table: label.table_name,
                column: label.column_raw,
            });
        }
        out.push(label);
    }
    Ok(out)
}

pub fn write_gold(labels: &[GoldLabel], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_lines(labels, path.as_ref())
}

/// Groups of interchangeable words or phrases.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymLexicon {
    classes: Vec<BTreeSet<String>>,
}

impl SynonymLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a lexicon from raw classes, normalizing phrases and merging
    /// classes that share a phrase.
    pub fn from_classes<I, C, S>(classes: I) -> Self
    where
        I: IntoIterator<Item = C>,
        C: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut lex = Self::new();
        for class in classes {
            lex.add_class(class.into_iter().map(|s| normalize_phrase(s.as_ref())));
        }
        lex
    }

    pub fn classes(&self) -> &[BTreeSet<String>] {
        &self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Adds a class, unioning it with every existing class it overlaps.
    /// Adding a class that is already covered is a no-op.
    pub fn add_class(&mut self, phrases: impl IntoIterator<Item = String>) {
        let mut merged: BTreeSet<String> = phrases.into_iter().filter(|p| !p.is_empty()).collect();
        let (overlapping, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.classes)
            .into_iter()
            .partition(|c| !c.is_disjoint(&merged));
        for c in overlapping {
            merged.extend(c);
        }
        self.classes = rest;
        if merged.len() >= 2 {
            self.classes.push(merged);
        }
        self.classes.sort();
    }

    pub fn merge(&mut self, other: &SynonymLexicon) {
        for c in &other.classes {
            self.add_class(c.iter().cloned());
        }
    }
}

/// Lowercase and collapse whitespace.
fn normalize_phrase(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_synonyms(text: &str, path: &Path) -> Result<SynonymLexicon, DatasetError> {
    let mut lex = SynonymLexicon::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let phrases: BTreeSet<String> = line
            .split('=')
            .map(normalize_phrase)
            .filter(|p| !p.is_empty())
            .collect();
        if phrases.len() < 2 {
            return Err(DatasetError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("synonym class needs at least two phrases: `{line}`"),
            });
        }
        lex.add_class(phrases);
    }
    Ok(lex)
}

pub fn load_synonyms(path: impl AsRef<Path>) -> Result<SynonymLexicon, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_synonyms(&text, path)
}

pub fn write_synonyms(lex: &SynonymLexicon, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let mut text = String::new();
    for class in lex.classes() {
        text.push_str(&class.iter().cloned().collect::<Vec<_>>().join(" = "));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_e2_records(records: &[E2Record], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_lines(records, path.as_ref())
}

/// Reads E2 records and checks every record invariant.
pub fn load_e2_records(path: impl AsRef<Path>) -> Result<Vec<E2Record>, DatasetError> {
    let path = path.as_ref();
    read_lines(path)?
        .into_iter()
        .map(|(line_no, line)| {
            let rec: E2Record = parse_line(path, line_no, &line)?;
            rec.validate().map_err(|source| DatasetError::Invalid {
                path: path.to_path_buf(),
                line: line_no,
                source,
            })?;
            Ok(rec)
        })
        .collect()
}

pub fn write_groups(groups: &[TableGroup], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_lines(groups, path.as_ref())
}

pub fn load_groups(path: impl AsRef<Path>) -> Result<Vec<TableGroup>, DatasetError> {
    let path = path.as_ref();
    read_lines(path)?
        .into_iter()
        .map(|(line_no, line)| {
            let g: TableGroup = parse_line(path, line_no, &line)?;
            TableGroup::new(g.id, g.summary, g.members).map_err(|source| DatasetError::Invalid {
                path: path.to_path_buf(),
                line: line_no,
                source,
            })
        })
        .collect()
}

/// Writes the report as pretty JSON.
pub fn write_report(report: &MetricReport, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut text = serde_json::to_string_pretty(report).expect("report serialization cannot fail");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_report(path: impl AsRef<Path>) -> Result<MetricReport, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Gold labels keyed by `(table, column)`.
pub fn gold_index(labels: &[GoldLabel]) -> HashMap<(&str, &str), &GoldLabel> {
    labels
        .iter()
        .map(|g| ((g.table_name.as_str(), g.column_raw.as_str()), g))
        .collect()
}

/// Renders a fraction as a percentage with one decimal, e.g. `0.815` -> `81.5%`.
pub fn format_percent(fraction: f64) -> String {
    format!("{:.1}%", fraction * 100.0)
}
