//! Fixtures and independent oracles shared by the property and acceptance
//! suites.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use colexp_core::dataset::{self, GoldLabel, SynonymLexicon};
use colexp_core::gateway::{CompletionRequest, FnProvider, Gateway};
use colexp_core::model::{ColumnName, E2Record, ExpansionRule, TableSchema, TokenSequence};
use colexp_core::prompts::{GENERATOR_SYSTEM, REVISER_SYSTEM, SUMMARIZER_SYSTEM};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

/// Subsequence test by trying every strictly increasing choice of positions.
pub fn brute_force_subsequence(token: &str, expansion: &str) -> bool {
    fn pick(t: &[char], e: &[char], from: usize) -> bool {
        match t.split_first() {
            None => true,
            Some((c, rest)) => (from..e.len()).any(|i| e[i] == *c && pick(rest, e, i + 1)),
        }
    }
    let t: Vec<char> = token.to_lowercase().chars().collect();
    let e: Vec<char> = expansion.to_lowercase().chars().collect();
    pick(&t, &e, 0)
}

/// Interleaves by hand, independently of `TokenSequence::rebuild`.
pub fn interleave(tokens: &[String], delimiters: &[String]) -> String {
    let mut s = tokens[0].clone();
    for i in 1..tokens.len() {
        s = format!("{s}{}{}", delimiters[i - 1], tokens[i]);
    }
    s
}

const VOCAB: [&str; 16] = [
    "geo",
    "geography",
    "geographical",
    "id",
    "identifier",
    "loc",
    "location",
    "place",
    "date",
    "day",
    "amount",
    "total",
    "sum",
    "code",
    "number",
    "num",
];

/// A random lexicon of disjoint single-word classes plus a gold phrase and a
/// prediction. About half the predictions are built from the gold phrase.
#[derive(Debug, Clone)]
pub struct SynCase {
    pub classes: Vec<Vec<String>>,
    pub gold: Vec<String>,
    pub prediction: Vec<String>,
}

impl SynCase {
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut vocab: Vec<&str> = VOCAB.to_vec();
        vocab.shuffle(rng);
        let n_classes = rng.random_range(0..=5);
        let mut classes = Vec::new();
        let mut at = 0;
        for _ in 0..n_classes {
            let size = rng.random_range(2..=3);
            if at + size > vocab.len() {
                break;
            }
            classes.push(vocab[at..at + size].iter().map(|s| s.to_string()).collect::<Vec<_>>());
            at += size;
        }
        let gold: Vec<String> = (0..rng.random_range(1..=6))
            .map(|_| VOCAB.choose(rng).unwrap().to_string())
            .collect();
        let prediction = if rng.random_bool(0.5) {
            let mut p: Vec<String> = gold
                .iter()
                .map(|w| {
                    let opts = class_of(&classes, w);
                    opts.choose(rng).unwrap().clone()
                })
                .collect();
            if rng.random_bool(0.3) {
                let i = rng.random_range(0..p.len());
                p[i] = VOCAB.choose(rng).unwrap().to_string();
            }
            p
        } else {
            (0..rng.random_range(1..=6))
                .map(|_| VOCAB.choose(rng).unwrap().to_string())
                .collect()
        };
        Self {
            classes,
            gold,
            prediction,
        }
    }

    pub fn lexicon(&self) -> SynonymLexicon {
        SynonymLexicon::from_classes(self.classes.iter().map(|c| c.iter().cloned()))
    }

    pub fn gold_text(&self) -> String {
        self.gold.join(" ")
    }

    pub fn prediction_text(&self) -> String {
        self.prediction.join(" ")
    }
}

fn class_of(classes: &[Vec<String>], word: &str) -> Vec<String> {
    classes
        .iter()
        .find(|c| c.iter().any(|m| m == word))
        .cloned()
        .unwrap_or_else(|| vec![word.to_string()])
}

/// Every gold variation, by full cross-product over the raw classes.
pub fn enumerate_variations(case: &SynCase) -> BTreeSet<String> {
    let mut acc: Vec<Vec<String>> = vec![Vec::new()];
    for w in &case.gold {
        let opts = class_of(&case.classes, w);
        acc = acc
            .into_iter()
            .flat_map(|p| {
                opts.iter().map(move |o| {
                    let mut q = p.clone();
                    q.push(o.clone());
                    q
                })
            })
            .collect();
    }
    acc.into_iter().map(|v| v.join(" ")).collect()
}

/// Twelve tables in three domains, five columns each.
pub const LAKE: [(&str, &str, [&str; 5]); 12] = [
    ("ORDERS", "sales", ["ord_id", "cust_id", "ord_dt", "ship_dt", "tot_amt"]),
    (
        "ORDER_LINES",
        "sales",
        ["ord_id", "prod_id", "line_qty", "unit_prc", "disc_pct"],
    ),
    (
        "CUSTOMERS",
        "sales",
        ["cust_id", "cust_nm", "addr_ln", "cty_nm", "reg_dt"],
    ),
    ("INVOICES", "sales", ["inv_id", "ord_id", "inv_dt", "due_dt", "inv_amt"]),
    ("EMPLOYEES", "hr", ["emp_id", "emp_nm", "hire_dt", "dept_id", "mgr_id"]),
    (
        "DEPARTMENTS",
        "hr",
        ["dept_id", "dept_nm", "loc_cd", "bud_amt", "crt_dt"],
    ),
    ("PAYROLL", "hr", ["emp_id", "pay_dt", "gross_amt", "tax_amt", "net_amt"]),
    ("TIMESHEETS", "hr", ["emp_id", "wk_dt", "hrs_qty", "ot_hrs", "appr_flg"]),
    (
        "PRODUCTS",
        "inventory",
        ["prod_id", "prod_nm", "cat_cd", "unit_prc", "wt_kg"],
    ),
    (
        "WAREHOUSES",
        "inventory",
        ["wh_id", "wh_nm", "cap_qty", "cty_nm", "opn_dt"],
    ),
    (
        "STOCK_LEVELS",
        "inventory",
        ["prod_id", "wh_id", "qty_on_hnd", "rord_lvl", "chk_dt"],
    ),
    (
        "SENSOR_LOG",
        "inventory",
        ["sens_id", "wh_id", "raw_dt", "tmp_val", "rd_dt"],
    ),
];

const WORDS: [(&str, &str); 55] = [
    ("id", "Identifier"),
    ("ord", "Order"),
    ("cust", "Customer"),
    ("dt", "Date"),
    ("ship", "Ship"),
    ("tot", "Total"),
    ("amt", "Amount"),
    ("prod", "Product"),
    ("line", "Line"),
    ("qty", "Quantity"),
    ("unit", "Unit"),
    ("prc", "Price"),
    ("disc", "Discount"),
    ("pct", "Percent"),
    ("nm", "Name"),
    ("addr", "Address"),
    ("ln", "Line"),
    ("cty", "City"),
    ("reg", "Registration"),
    ("inv", "Invoice"),
    ("due", "Due"),
    ("emp", "Employee"),
    ("hire", "Hire"),
    ("dept", "Department"),
    ("mgr", "Manager"),
    ("loc", "Location"),
    ("cd", "Code"),
    ("bud", "Budget"),
    ("crt", "Created"),
    ("pay", "Pay"),
    ("gross", "Gross"),
    ("tax", "Tax"),
    ("net", "Net"),
    ("wk", "Week"),
    ("hrs", "Hours"),
    ("ot", "Overtime"),
    ("appr", "Approved"),
    ("flg", "Flag"),
    ("cat", "Category"),
    ("wt", "Weight"),
    ("kg", "Kilograms"),
    ("wh", "Warehouse"),
    ("cap", "Capacity"),
    ("opn", "Opened"),
    ("on", "On"),
    ("hnd", "Hand"),
    ("rord", "Reorder"),
    ("lvl", "Level"),
    ("chk", "Check"),
    ("sens", "Sensor"),
    ("raw", "Raw"),
    ("tmp", "Temperature"),
    ("val", "Value"),
    ("rd", "Reading"),
    ("geo", "Geography"),
];

pub fn lake_schemas() -> Vec<TableSchema> {
    LAKE.iter()
        .map(|(name, _, cols)| TableSchema::from_strs(name, cols).unwrap())
        .collect()
}

fn domain_summary(domain: &str) -> &'static str {
    match domain {
        "sales" => "Sales and orders",
        "hr" => "Human resources",
        _ => "Inventory and logistics",
    }
}

/// Expansion the scripted model gives for a token in a column. One column
/// reads `dt` as "Data", which the reviser is expected to correct.
pub fn lake_expansion(column: &str, token: &str) -> String {
    if column == "raw_dt" && token == "dt" {
        return "Data".to_string();
    }
    WORDS
        .iter()
        .find(|(t, _)| *t == token)
        .map(|(_, e)| e.to_string())
        .unwrap_or_else(|| token.to_string())
}

fn listed_columns(user: &str) -> Vec<String> {
    user.rsplit("Columns:\n")
        .next()
        .unwrap_or("")
        .lines()
        .map(str::trim)
        .take_while(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

fn summarizer_reply(user: &str) -> String {
    let names: Vec<&str> = user
        .lines()
        .filter(|l| l.ends_with(')'))
        .filter_map(|l| l.split_once('(').map(|(n, _)| n))
        .filter(|n| LAKE.iter().any(|(t, _, _)| t == n))
        .collect();
    let mut domains: Vec<&str> = Vec::new();
    for n in &names {
        let d = LAKE.iter().find(|(t, _, _)| t == n).unwrap().1;
        if !domains.contains(&d) {
            domains.push(d);
        }
    }
    let mut out = String::new();
    for d in domains {
        out.push_str(&format!("GROUP: {}\n", domain_summary(d)));
        for n in names
            .iter()
            .filter(|n| LAKE.iter().any(|(t, dd, _)| t == *n && *dd == d))
        {
            out.push_str(&format!(
                "- {n}: Records about {}.\n",
                n.to_lowercase().replace('_', " ")
            ));
        }
        out.push('\n');
    }
    out
}

fn generator_reply(user: &str) -> String {
    let cot = user.contains("Tokens:");
    let mut out = String::new();
    for c in listed_columns(user) {
        let tokens: Vec<&str> = c.split('_').collect();
        let exps: Vec<String> = tokens.iter().map(|t| lake_expansion(&c, t)).collect();
        out.push_str(&format!("Column: {c}\n"));
        if cot {
            out.push_str(&format!("Tokens: {}\n", tokens.join(" | ")));
            for (t, e) in tokens.iter().zip(&exps) {
                out.push_str(&format!("{t} => {e}\n"));
            }
        }
        out.push_str(&format!("Expansion: {}\n\n", exps.join(" ")));
    }
    out
}

fn reviser_reply(user: &str) -> String {
    let token = user
        .split_once("The token \"")
        .and_then(|(_, r)| r.split_once('"'))
        .map(|(t, _)| t)
        .unwrap_or("");
    if token == "dt" {
        "Most columns use dates; the single \"data\" reading is an outlier.\nANSWER: UNIQUE => Date".to_string()
    } else {
        "ANSWER: NOT UNIQUE".to_string()
    }
}

/// Deterministic stand-in for the model on the toy lake. Replies depend only
/// on the tables and columns named in the prompt, never on their order.
pub fn lake_reply(request: &CompletionRequest) -> String {
    match request.system_text.as_str() {
        SUMMARIZER_SYSTEM => summarizer_reply(&request.user_text),
        GENERATOR_SYSTEM => generator_reply(&request.user_text),
        REVISER_SYSTEM => reviser_reply(&request.user_text),
        other => panic!("unexpected system prompt {other}"),
    }
}

/// Lake responder that also keeps every request it answered.
pub fn capturing_lake_gateway() -> (Gateway, Arc<Mutex<Vec<CompletionRequest>>>) {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let s = seen.clone();
    let gw = Gateway::new(Arc::new(FnProvider::new(move |r: &CompletionRequest| {
        s.lock().unwrap().push(r.clone());
        Ok(lake_reply(r))
    })));
    (gw, seen)
}

pub fn record(table: &str, column: &str, parts: &[(&str, &str)]) -> E2Record {
    let tokens: Vec<String> = parts.iter().map(|p| p.0.to_string()).collect();
    let seq = TokenSequence::align(column, &tokens).unwrap();
    let rules = parts.iter().map(|(t, e)| ExpansionRule::new(*t, *e)).collect();
    E2Record::new(table, ColumnName::new(column).unwrap(), seq, rules).unwrap()
}

/// Four scored columns: one exact match, one match only through the
/// geography/geographical class, one partial overlap, one miss.
pub fn eval_fixture() -> (Vec<E2Record>, Vec<GoldLabel>, SynonymLexicon) {
    let records = vec![
        record("EMPS", "e_sal", &[("e", "Employee"), ("sal", "Salary")]),
        record("GEO", "geo_loc", &[("geo", "Geography"), ("loc", "Location")]),
        record(
            "EMPS",
            "e_sal_amt",
            &[("e", "Employee"), ("sal", "Salary"), ("amt", "Amt")],
        ),
        record("PRODUCTS", "p_cd", &[("p", "Price"), ("cd", "Code")]),
    ];
    let gold = |t: &str, c: &str, g: &str| GoldLabel {
        table_name: t.into(),
        column_raw: c.into(),
        gold_expansion: g.into(),
        excluded: false,
    };
    let labels = vec![
        gold("EMPS", "e_sal", "employee salary"),
        gold("GEO", "geo_loc", "geographical location"),
        gold("EMPS", "e_sal_amt", "employee salary amount"),
        gold("PRODUCTS", "p_cd", "product category"),
    ];
    let lex = SynonymLexicon::from_classes([["geography", "geographical"]]);
    (records, labels, lex)
}

pub fn write_eval_fixture(dir: &Path) {
    let (records, labels, lex) = eval_fixture();
    dataset::write_e2_records(&records, dir.join("records.jsonl")).unwrap();
    dataset::write_gold(&labels, dir.join("gold.jsonl")).unwrap();
    dataset::write_synonyms(&lex, dir.join("synonyms.txt")).unwrap();
}

/// Request count per system prompt.
pub fn count_by_system(requests: &[CompletionRequest]) -> HashMap<&'static str, usize> {
    let mut m = HashMap::new();
    for r in requests {
        let k = match r.system_text.as_str() {
            SUMMARIZER_SYSTEM => "summarize",
            GENERATOR_SYSTEM => "expand",
            REVISER_SYSTEM => "revise",
            _ => "other",
        };
        *m.entry(k).or_insert(0) += 1;
    }
    m
}
