// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dataset ingestion and per-example attributes.

mod attributes;
pub mod rouge;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use attributes::{
    builtin_plugin, compute_attribute, AttributeColumn, AttributePlugin, Direction, Length, RougeAvg,
    BUILTIN_ATTRIBUTES,
};

use crate::error::{Error, Result};
use crate::model::{TokenId, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub input_text: String,
    pub reference_text: Option<String>,
    #[serde(default)]
    pub input_ids: Vec<TokenId>,
    #[serde(default)]
    pub output_ids: Vec<TokenId>,
    /// Decoded generation, filled in by the generation pass.
    #[serde(default)]
    pub output_text: Option<String>,
    /// `None` marks an attribute that could not be computed.
    #[serde(default)]
    pub attributes: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub examples: Vec<Example>,
    #[serde(default)]
    pub directions: BTreeMap<String, Direction>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.examples.iter().position(|e| e.id == id)
    }

    /// Attribute names present on at least one example.
    pub fn attribute_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .examples
            .iter()
            .flat_map(|e| e.attributes.keys().cloned())
            .collect();
        names.sort();
        names.dedup();
        names
    }

    /// Encodes every input, truncating to `max_len` tokens.
    pub fn tokenize(&mut self, tokenizer: &Tokenizer, max_len: usize) {
        for ex in &mut self.examples {
            let mut ids = tokenizer.encode(&ex.input_text);
            ids.truncate(max_len);
            ex.input_ids = ids;
        }
    }

    /// Keeps the first `n` examples.
    pub fn truncate(&mut self, n: usize) {
        self.examples.truncate(n);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "jsonl" | "json" | "ndjson" => Some(Format::Jsonl),
            "csv" => Some(Format::Csv),
            _ => None,
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Jsonl => "jsonl",
            Format::Csv => "csv",
        })
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(Format::Jsonl),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

/// Which source columns hold the input, the optional reference and the
/// optional id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMap {
    pub input: String,
    pub reference: Option<String>,
    pub id: Option<String>,
}

impl Default for FieldMap {
    fn default() -> Self {
        FieldMap {
            input: "input".into(),
            reference: None,
            id: None,
        }
    }
}

impl FromStr for FieldMap {
    type Err = Error;

    /// Parses `input=document,reference=summary,id=key`.
    fn from_str(s: &str) -> Result<Self> {
        let mut map = FieldMap::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("field map entry `{part}` is not key=value")))?;
            let v = v.trim().to_string();
            match k.trim() {
                "input" => map.input = v,
                "reference" => map.reference = Some(v),
                "id" => map.id = Some(v),
                other => return Err(Error::Config(format!("unknown field map key `{other}`"))),
            }
        }
        Ok(map)
    }
}

struct Row {
    input: String,
    reference: Option<String>,
    id: Option<String>,
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn jsonl_rows(text: &str, fields: &FieldMap) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = rows.len();
        let obj: Value = serde_json::from_str(line).map_err(|e| Error::Ingest {
            row,
            reason: format!("line {}: {e}", line_no + 1),
        })?;
        let field = |name: &str| -> Result<Option<&Value>> {
            match obj.get(name) {
                Some(v) => Ok(Some(v)),
                None => Err(Error::Ingest {
                    row,
                    reason: format!("missing field `{name}`"),
                }),
            }
        };
        let input = field(&fields.input)?
            .and_then(scalar_text)
            .ok_or_else(|| Error::Ingest {
                row,
                reason: format!("field `{}` is not text", fields.input),
            })?;
        let reference = match &fields.reference {
            Some(name) => field(name)?.and_then(scalar_text),
            None => None,
        };
        let id = match &fields.id {
            Some(name) => Some(field(name)?.and_then(scalar_text).ok_or_else(|| Error::Ingest {
                row,
                reason: format!("id field `{name}` is empty"),
            })?),
            None => None,
        };
        rows.push(Row { input, reference, id });
    }
    Ok(rows)
}

fn csv_rows(text: &str, fields: &FieldMap) -> Result<Vec<Row>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Ingest {
            row: 0,
            reason: format!("missing column `{name}`"),
        })
    };
    let input_col = column(&fields.input)?;
    let ref_col = fields.reference.as_deref().map(column).transpose()?;
    let id_col = fields.id.as_deref().map(column).transpose()?;
    let mut rows = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Ingest {
            row,
            reason: e.to_string(),
        })?;
        let cell = |c: usize, name: &str| -> Result<String> {
            record.get(c).map(str::to_string).ok_or_else(|| Error::Ingest {
                row,
                reason: format!("missing field `{name}`"),
            })
        };
        let input = cell(input_col, &fields.input)?;
        let reference = match ref_col {
            Some(c) => Some(cell(c, fields.reference.as_deref().unwrap_or_default())?).filter(|s| !s.is_empty()),
            None => None,
        };
        let id = match id_col {
            Some(c) => {
                let v = cell(c, fields.id.as_deref().unwrap_or_default())?;
                if v.is_empty() {
                    return Err(Error::Ingest {
                        row,
                        reason: "empty id".into(),
                    });
                }
                Some(v)
            }
            None => None,
        };
        rows.push(Row { input, reference, id });
    }
    Ok(rows)
}

/// Reads a dataset into an ordered corpus. Ids come from the mapped id
/// column or are zero-padded row indices.
pub fn ingest_dataset(path: &Path, format: Format, fields: &FieldMap) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
    let rows = match format {
        Format::Jsonl => jsonl_rows(&text, fields)?,
        Format::Csv => csv_rows(&text, fields)?,
    };
    let width = rows.len().saturating_sub(1).to_string().len();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut dups = Vec::new();
    let examples: Vec<Example> = rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let id = r.id.unwrap_or_else(|| format!("{i:0width$}"));
            let n = seen.entry(id.clone()).or_insert(0);
            *n += 1;
            if *n == 2 {
                dups.push(id.clone());
            }
            Example {
                id,
                input_text: r.input,
                reference_text: r.reference,
                input_ids: Vec::new(),
                output_ids: Vec::new(),
                output_text: None,
                attributes: BTreeMap::new(),
            }
        })
        .collect();
    if !dups.is_empty() {
        return Err(Error::DuplicateIds(dups));
    }
    Ok(Corpus {
        examples,
        directions: BTreeMap::new(),
    })
}

/// Stable identifier of a dataset file: its name plus a content digest.
pub fn dataset_id(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::path(path, e))?;
    let digest = Sha256::digest(&bytes);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    Ok(format!("{name}@{hex}"))
}
