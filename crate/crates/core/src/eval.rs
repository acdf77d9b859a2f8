//! Accuracy measures for predicted expansions: exact match, word-level F1,
//! embedding-based soft F1, and synonym-aware variants of all three.
//!
//! Synonym-aware matching works on a [`SynonymIndex`] built once from a
//! [`SynonymLexicon`]. A gold phrase is scanned left to right; at each
//! position the longest lexicon phrase starting there becomes a slot that can
//! be filled by any member of its class. The set of all fillings is the set
//! of gold variations.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{GoldLabel, SynonymLexicon};
use crate::model::E2Record;
use crate::par::{self, Execution};

/// Default bound on the number of enumerated gold variations.
pub const DEFAULT_VARIATION_CAP: usize = 1024;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("embedding failed for `{word}`: {message}")]
    Embedding { word: String, message: String },
    #[error("no evaluable columns")]
    NoEvaluableColumns,
    #[error("unknown embedder `{0}` (expected `offline-trigram` or `remote:<endpoint>`)")]
    UnknownEmbedder(String),
}

/// Lowercase, drop everything but letters, digits and whitespace, then
/// collapse whitespace.
pub fn normalize(phrase: &str) -> String {
    let filtered: String = phrase
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    filtered.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn words(normalized: &str) -> Vec<&str> {
    normalized.split(' ').filter(|w| !w.is_empty()).collect()
}

fn distinct(normalized: &str) -> Vec<&str> {
    let mut seen = HashSet::new();
    words(normalized).into_iter().filter(|w| seen.insert(*w)).collect()
}

pub fn exact_match(prediction: &str, gold: &str) -> bool {
    normalize(prediction) == normalize(gold)
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn word_f1_normalized(x: &str, g: &str) -> f64 {
    let xs: HashSet<&str> = words(x).into_iter().collect();
    let gs: HashSet<&str> = words(g).into_iter().collect();
    if xs.is_empty() || gs.is_empty() {
        return 0.0;
    }
    let common = xs.intersection(&gs).count() as f64;
    f1(common / xs.len() as f64, common / gs.len() as f64)
}

/// Word-level F1 over distinct words: `2PR / (P + R)` where P is the share
/// of prediction words found in the gold and R the share of gold words found
/// in the prediction.
pub fn word_f1(prediction: &str, gold: &str) -> f64 {
    word_f1_normalized(&normalize(prediction), &normalize(gold))
}

/// Maps a single word to a fixed-dimension unit vector.
pub trait Embedder: Send + Sync {
    fn embed(&self, word: &str) -> Result<Vec<f32>, EvalError>;
}

/// Offline embedder: character 2- and 3-grams of the padded word hashed
/// into a fixed number of buckets, L2-normalized. Words sharing character
/// n-grams get positive similarity.
#[derive(Debug, Clone)]
pub struct TrigramEmbedder {
    dim: usize,
}

impl Default for TrigramEmbedder {
    fn default() -> Self {
        Self { dim: 512 }
    }
}

impl TrigramEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Embedder for TrigramEmbedder {
    fn embed(&self, word: &str) -> Result<Vec<f32>, EvalError> {
        let padded: Vec<char> = std::iter::once('#')
            .chain(word.chars())
            .chain(std::iter::once('#'))
            .collect();
        let mut v = vec![0f32; self.dim];
        for n in 2..=3 {
            for gram in padded.windows(n) {
                let s: String = gram.iter().collect();
                v[(fnv1a(s.as_bytes()) % self.dim as u64) as usize] += 1.0;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Embedding service speaking the common `/embeddings` JSON shape
/// (`{"model", "input"}` in, `{"data": [{"embedding": [...]}]}` out).
/// Vectors are cached per word for the lifetime of the embedder.
pub struct RemoteEmbedder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    cache: Mutex<HashMap<String, Vec<f32>>>,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, word: &str) -> Result<Vec<f32>, EvalError> {
        if let Some(v) = self.cache.lock().expect("embedding cache poisoned").get(word) {
            return Ok(v.clone());
        }
        let fail = |message: String| EvalError::Embedding {
            word: word.to_string(),
            message,
        };
        let mut req = ureq::post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::json!({ "model": self.model, "input": [word] });
        let mut resp = req.send_json(&body).map_err(|e| fail(e.to_string()))?;
        let parsed: EmbeddingResponse = resp.body_mut().read_json().map_err(|e| fail(e.to_string()))?;
        let mut v = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| fail("empty embedding response".into()))?
            .embedding;
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        self.cache
            .lock()
            .expect("embedding cache poisoned")
            .insert(word.to_string(), v.clone());
        Ok(v)
    }
}

/// Parses an embedder selector: `offline-trigram` or `remote:<endpoint>`.
/// The remote model name and key come from `EMBEDDING_MODEL` and
/// `EMBEDDING_API_KEY`.
pub fn embedder_from_spec(spec: &str) -> Result<Box<dyn Embedder>, EvalError> {
    match spec {
        "offline-trigram" => Ok(Box::new(TrigramEmbedder::default())),
        s if s.starts_with("remote:") => {
            let endpoint = &s["remote:".len()..];
            let model = std::env::var("EMBEDDING_MODEL").unwrap_or_else(|_| "text-embedding-3-small".into());
            let key = std::env::var("EMBEDDING_API_KEY").ok();
            Ok(Box::new(RemoteEmbedder::new(endpoint, model, key)))
        }
        other => Err(EvalError::UnknownEmbedder(other.to_string())),
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    dot.clamp(0.0, 1.0)
}

fn embedding_f1_normalized(x: &str, g: &str, embedder: &dyn Embedder) -> Result<f64, EvalError> {
    let xs = distinct(x);
    let gs = distinct(g);
    if xs.is_empty() || gs.is_empty() {
        return Ok(0.0);
    }
    let ex = xs.iter().map(|w| embedder.embed(w)).collect::<Result<Vec<_>, _>>()?;
    let eg = gs.iter().map(|w| embedder.embed(w)).collect::<Result<Vec<_>, _>>()?;
    let sim = |i: usize, j: usize| if xs[i] == gs[j] { 1.0 } else { cosine(&ex[i], &eg[j]) };
    let best_x: f64 = (0..xs.len())
        .map(|i| (0..gs.len()).map(|j| sim(i, j)).fold(0.0, f64::max))
        .sum();
    let best_g: f64 = (0..gs.len())
        .map(|j| (0..xs.len()).map(|i| sim(i, j)).fold(0.0, f64::max))
        .sum();
    Ok(f1(best_x / xs.len() as f64, best_g / gs.len() as f64))
}

/// Soft F1: each word of one phrase is credited with its best cosine
/// similarity against the words of the other.
pub fn embedding_f1(prediction: &str, gold: &str, embedder: &dyn Embedder) -> Result<f64, EvalError> {
    embedding_f1_normalized(&normalize(prediction), &normalize(gold), embedder)
}

/// Lookup structure over a lexicon's phrases, normalized the same way as the
/// phrases being compared.
#[derive(Debug, Clone, Default)]
pub struct SynonymIndex {
    /// phrase (as word list) -> class index
    phrase_class: HashMap<Vec<String>, usize>,
    classes: Vec<Vec<String>>,
    /// lexicographically smallest member of each class
    representative: Vec<String>,
    max_phrase_words: usize,
}

impl SynonymIndex {
    pub fn new(lexicon: &SynonymLexicon) -> Self {
        let mut idx = Self::default();
        for class in lexicon.classes() {
            let members: BTreeSet<String> = class.iter().map(|p| normalize(p)).filter(|p| !p.is_empty()).collect();
            if members.len() < 2 {
                continue;
            }
            let id = idx.classes.len();
            for m in &members {
                let key: Vec<String> = m.split(' ').map(str::to_string).collect();
                idx.max_phrase_words = idx.max_phrase_words.max(key.len());
                idx.phrase_class.insert(key, id);
            }
            idx.representative
                .push(members.iter().next().cloned().unwrap_or_default());
            idx.classes.push(members.into_iter().collect());
        }
        idx
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Splits a normalized phrase into segments: `(text, Some(class))` for a
    /// lexicon phrase (longest match, left to right, non-overlapping) or
    /// `(word, None)` otherwise.
    fn segments(&self, normalized: &str) -> Vec<(String, Option<usize>)> {
        let ws = words(normalized);
        let mut out = Vec::new();
        let mut i = 0;
        while i < ws.len() {
            let longest = (1..=self.max_phrase_words.min(ws.len() - i)).rev().find_map(|len| {
                let key: Vec<String> = ws[i..i + len].iter().map(|w| w.to_string()).collect();
                self.phrase_class.get(&key).map(|&c| (len, c))
            });
            match longest {
                Some((len, class)) => {
                    out.push((ws[i..i + len].join(" "), Some(class)));
                    i += len;
                }
                None => {
                    out.push((ws[i].to_string(), None));
                    i += 1;
                }
            }
        }
        out
    }

    /// Replaces every lexicon phrase with its class representative.
    pub fn canonicalize(&self, phrase: &str) -> String {
        self.segments(&normalize(phrase))
            .into_iter()
            .map(|(text, class)| match class {
                Some(c) => self.representative[c].clone(),
                None => text,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Result of enumerating gold variations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GoldVariations {
    /// Every variation, including the gold phrase itself.
    Enumerated(BTreeSet<String>),
    /// More than `cap` variations; callers fall back to canonical-form
    /// comparison.
    TooMany,
}

/// All phrases obtained by substituting class-equivalent phrases into the
/// (normalized) gold phrase.
pub fn gold_variations(gold: &str, index: &SynonymIndex, cap: usize) -> GoldVariations {
    let segs = index.segments(&normalize(gold));
    let mut total: usize = 1;
    for (_, class) in &segs {
        if let Some(c) = class {
            total = total.saturating_mul(index.classes[*c].len());
            if total > cap {
                return GoldVariations::TooMany;
            }
        }
    }
    let mut partial: Vec<Vec<&str>> = vec![Vec::new()];
    for (text, class) in &segs {
        let options: Vec<&str> = match class {
            Some(c) => index.classes[*c].iter().map(String::as_str).collect(),
            None => vec![text.as_str()],
        };
        partial = partial
            .into_iter()
            .flat_map(|prefix| {
                options.iter().map(move |o| {
                    let mut p = prefix.clone();
                    p.push(o);
                    p
                })
            })
            .collect();
    }
    GoldVariations::Enumerated(partial.into_iter().map(|p| p.join(" ")).collect())
}

/// Exact match after mapping every lexicon phrase to its class
/// representative in both phrases.
pub fn synonym_aware_em(prediction: &str, gold: &str, index: &SynonymIndex) -> bool {
    index.canonicalize(prediction) == index.canonicalize(gold)
}

/// Best base score of `prediction` against any variation of `gold`. Falls
/// back to comparing canonical forms (floored at the plain score) when
/// there are too many variations to enumerate.
fn best_over_variations<F>(
    prediction: &str,
    gold: &str,
    index: &SynonymIndex,
    cap: usize,
    score: F,
) -> Result<f64, EvalError>
where
    F: Fn(&str, &str) -> Result<f64, EvalError>,
{
    let x = normalize(prediction);
    let plain = score(&x, &normalize(gold))?;
    match gold_variations(gold, index, cap) {
        GoldVariations::Enumerated(vars) => vars.iter().try_fold(plain, |best, v| Ok(best.max(score(&x, v)?))),
        GoldVariations::TooMany => {
            let canon = score(&index.canonicalize(prediction), &index.canonicalize(gold))?;
            Ok(plain.max(canon))
        }
    }
}

pub fn synonym_aware_word_f1(prediction: &str, gold: &str, index: &SynonymIndex) -> f64 {
    best_over_variations(prediction, gold, index, DEFAULT_VARIATION_CAP, |x, g| {
        Ok(word_f1_normalized(x, g))
    })
    .expect("word F1 is infallible")
}

pub fn synonym_aware_embedding_f1(
    prediction: &str,
    gold: &str,
    index: &SynonymIndex,
    embedder: &dyn Embedder,
) -> Result<f64, EvalError> {
    best_over_variations(prediction, gold, index, DEFAULT_VARIATION_CAP, |x, g| {
        embedding_f1_normalized(x, g, embedder)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScore {
    pub table: String,
    pub column: String,
    pub prediction: String,
    pub gold: String,
    pub em: bool,
    pub word_f1: f64,
    pub embed_f1: f64,
    pub syn_em: bool,
    pub syn_word_f1: f64,
    pub syn_embed_f1: f64,
}

/// Means over scored columns; every value is a fraction in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregates {
    pub em: f64,
    pub word_f1: f64,
    pub embed_f1: f64,
    pub syn_em: f64,
    pub syn_word_f1: f64,
    pub syn_embed_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub columns_scored: usize,
    pub columns_excluded: usize,
    /// Gold labels with no matching prediction.
    pub unmatched: usize,
    pub aggregates: Aggregates,
    pub per_column: Vec<ColumnScore>,
}

impl MetricReport {
    /// Plain-text summary table, one row with and one without synonyms.
    pub fn render_table(&self) -> String {
        use crate::dataset::format_percent as pct;
        let a = &self.aggregates;
        let mut s = format!(
            "dataset: {} ({} columns scored, {} excluded, {} unmatched)\n",
            self.dataset, self.columns_scored, self.columns_excluded, self.unmatched
        );
        s.push_str(&format!("{:<16}{:>10}{:>10}{:>12}\n", "", "EM", "Word-F1", "Embed-F1"));
        s.push_str(&format!(
            "{:<16}{:>10}{:>10}{:>12}\n",
            "w/o synonyms",
            pct(a.em),
            pct(a.word_f1),
            pct(a.embed_f1)
        ));
        s.push_str(&format!(
            "{:<16}{:>10}{:>10}{:>12}\n",
            "with synonyms",
            pct(a.syn_em),
            pct(a.syn_word_f1),
            pct(a.syn_embed_f1)
        ));
        s
    }
}

/// Scores one prediction against one gold phrase with all six metrics.
pub fn score_column(
    table: &str,
    column: &str,
    prediction: &str,
    gold: &str,
    index: &SynonymIndex,
    embedder: &dyn Embedder,
) -> Result<ColumnScore, EvalError> {
    Ok(ColumnScore {
        table: table.to_string(),
        column: column.to_string(),
        prediction: prediction.to_string(),
        gold: gold.to_string(),
        em: exact_match(prediction, gold),
        word_f1: word_f1(prediction, gold),
        embed_f1: embedding_f1(prediction, gold, embedder)?,
        syn_em: synonym_aware_em(prediction, gold, index),
        syn_word_f1: synonym_aware_word_f1(prediction, gold, index),
        syn_embed_f1: synonym_aware_embedding_f1(prediction, gold, index, embedder)?,
    })
}

/// Scores predictions against gold labels. Excluded labels are counted but
/// not scored; labels without a prediction are counted as unmatched.
pub fn evaluate(
    dataset: &str,
    records: &[E2Record],
    gold: &[GoldLabel],
    lexicon: &SynonymLexicon,
    embedder: &dyn Embedder,
    exec: Execution,
) -> Result<MetricReport, EvalError> {
    let predictions: HashMap<(&str, &str), &str> = records
        .iter()
        .map(|r| ((r.table_name.as_str(), r.column.as_str()), r.expansion.as_str()))
        .collect();
    let index = SynonymIndex::new(lexicon);
    let excluded = gold.iter().filter(|g| g.excluded).count();
    let mut unmatched = 0;
    let mut pairs = Vec::new();
    for g in gold.iter().filter(|g| !g.excluded) {
        match predictions.get(&(g.table_name.as_str(), g.column_raw.as_str())) {
            Some(p) => pairs.push((g, *p)),
            None => unmatched += 1,
        }
    }
    if unmatched > 0 {
        log::warn!("{unmatched} gold labels have no matching prediction and were skipped");
    }
    if pairs.is_empty() {
        return Err(EvalError::NoEvaluableColumns);
    }
    let per_column = par::try_map(&pairs, exec, |(g, p)| {
        score_column(&g.table_name, &g.column_raw, p, &g.gold_expansion, &index, embedder)
    })?;
    let n = per_column.len() as f64;
    let mean = |f: &dyn Fn(&ColumnScore) -> f64| per_column.iter().map(f).sum::<f64>() / n;
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let aggregates = Aggregates {
        em: mean(&|c| flag(c.em)),
        word_f1: mean(&|c| c.word_f1),
        embed_f1: mean(&|c| c.embed_f1),
        syn_em: mean(&|c| flag(c.syn_em)),
        syn_word_f1: mean(&|c| c.syn_word_f1),
        syn_embed_f1: mean(&|c| c.syn_embed_f1),
    };
    Ok(MetricReport {
        dataset: dataset.to_string(),
        columns_scored: per_column.len(),
        columns_excluded: excluded,
        unmatched,
        aggregates,
        per_column,
    })
}
