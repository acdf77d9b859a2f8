//! Prompt templates. Each template is plain text with `{{name}}`
//! placeholders; any of them can be replaced by a file at run time.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const SUMMARIZER_SYSTEM: &str = "You are a data catalog assistant. You organize database tables into \
topical groups and describe tables briefly and precisely.";

pub const SUMMARIZER_USER: &str = "Below are {{count}} database tables, one per line, written as \
TableName(column1, column2, ...).

{{tables}}

Cluster these tables into groups of related tables. For each group, give a short English phrase that best \
summarizes the group. For each table, give one sentence that best summarizes the table.

Every table must appear in exactly one group. Reply using exactly this layout and nothing else:

GROUP: <group summary>
- <table name>: <table summary>
- <table name>: <table summary>

GROUP: <group summary>
- <table name>: <table summary>
";

pub const SUMMARIZER_REMINDER: &str = "

Your previous reply could not be used: {{problem}}
Reply again using exactly the GROUP / \"- <table name>: <table summary>\" layout above, listing every table \
exactly once.";

pub const GENERATOR_SYSTEM: &str = "You expand abbreviated database column names into full English phrases.";

pub const GENERATOR_USER: &str = "{{context}}{{rules}}{{examples}}{{task}}";

/// The generator's rule block. The first three are the core instructions;
/// the rest pin down output discipline.
pub const GENERATOR_RULES: [&str; 9] = [
    "Expand all abbreviations in a column name.",
    "Do not expand numbers.",
    "Do not add extra words or explanations.",
    "Expand every token; leave a token unchanged only if it is already a full word.",
    "Keep the tokens in their original order.",
    "Output only the structured format shown in the examples.",
    "Use the context to disambiguate abbreviations.",
    "Prefer the standard expansion used in the domain of the tables.",
    "Give each token exactly one expansion within a column name.",
];

pub const COT_EXEMPLARS: &str = "Column: cust_nm
Tokens: cust | nm
cust => Customer
nm => Name
Expansion: Customer Name

Column: OrdShipDt
Tokens: Ord | Ship | Dt
Ord => Order
Ship => Ship
Dt => Date
Expansion: Order Ship Date

Column: addr_line2
Tokens: addr | line | 2
addr => Address
line => Line
2 => 2
Expansion: Address Line 2
";

pub const DIRECT_EXEMPLARS: &str = "Column: cust_nm
Expansion: Customer Name

Column: OrdShipDt
Expansion: Order Ship Date

Column: addr_line2
Expansion: Address Line 2
";

pub const COT_TASK: &str = "Expand the following column names{{of_table}}. For each column, first split the \
name into tokens (pieces of the name separated by delimiters such as '_' or by case changes), then expand each \
token, then join the token expansions in order. Reply with one block per column, in the same format as the \
examples:
Column: <column name>
Tokens: <token> | <token> | ...
<token> => <expansion>
Expansion: <full expansion>

Columns:
{{columns}}";

pub const DIRECT_TASK: &str = "Expand the following column names{{of_table}}. Reply with one block per column, \
in the same format as the examples:
Column: <column name>
Expansion: <full expansion>

Columns:
{{columns}}";

pub const BASELINE_USER: &str = "Expand the abbreviated column names below into full English phrases.

Examples:
Column: c_name
Expansion: customer name

Column: pCd
Expansion: product code

Column: dt_modified
Expansion: date modified

Reply with one block per column:
Column: <column name>
Expansion: <full expansion>

Columns:
{{columns}}";

pub const GENERATOR_CORRECTION: &str = "

Your previous answer for the columns above was rejected:
{{problems}}
Each token must be a piece of the column name, the tokens must spell the column name in order (with only \
'_', '-', '.', or space between them), each expansion must contain the letters of its token in order, and \
numbers must stay unchanged. Answer again for these columns only.";

pub const REVISER_SYSTEM: &str = "You review how abbreviation tokens are expanded across a collection of \
database tables.";

pub const REVISER_USER: &str = "{{groups}}The token \"{{token}}\" appears in column names with these expansions:
{{observations}}

Should the token \"{{token}}\" always be expanded the same way across this collection of tables? Think it \
through step by step, then finish with a single final line in exactly one of these forms:
ANSWER: UNIQUE => <expansion>
ANSWER: NOT UNIQUE";

pub const REVISER_REMINDER: &str = "

Your previous reply did not end with a valid answer line. End your reply with exactly one of:
ANSWER: UNIQUE => <expansion>
ANSWER: NOT UNIQUE";

/// Substitutes `{{name}}` placeholders.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    out
}

/// Paths to template overrides; unset entries keep the built-in text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplatePaths {
    pub summarizer: Option<PathBuf>,
    pub generator: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
    pub exemplars: Option<PathBuf>,
    pub reviser: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub summarizer: String,
    pub generator: String,
    pub baseline: String,
    pub cot_exemplars: String,
    pub direct_exemplars: String,
    pub reviser: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            summarizer: SUMMARIZER_USER.to_string(),
            generator: GENERATOR_USER.to_string(),
            baseline: BASELINE_USER.to_string(),
            cot_exemplars: COT_EXEMPLARS.to_string(),
            direct_exemplars: DIRECT_EXEMPLARS.to_string(),
            reviser: REVISER_USER.to_string(),
        }
    }
}

fn read_or(path: &Option<PathBuf>, default: &str) -> io::Result<String> {
    match path {
        Some(p) => read(p),
        None => Ok(default.to_string()),
    }
}

fn read(p: &Path) -> io::Result<String> {
    fs::read_to_string(p).map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", p.display())))
}

impl Templates {
    /// Built-in templates with any configured overrides applied. An exemplar
    /// override replaces the chain-of-thought exemplars.
    pub fn load(paths: &TemplatePaths) -> io::Result<Self> {
        let d = Self::default();
        Ok(Self {
            summarizer: read_or(&paths.summarizer, &d.summarizer)?,
            generator: read_or(&paths.generator, &d.generator)?,
            baseline: read_or(&paths.baseline, &d.baseline)?,
            cot_exemplars: read_or(&paths.exemplars, &d.cot_exemplars)?,
            direct_exemplars: d.direct_exemplars,
            reviser: read_or(&paths.reviser, &d.reviser)?,
        })
    }
}
