//! Labeled datasets, the held-out prefix pool, and member balancing.
//!
//! Datasets are JSONL: one object per line with a text field and a label
//! field. Labels are either the strings `"member"` / `"nonmember"` or the
//! integers `1` / `0` (1 = member, the WikiMIA convention). Field names can
//! be remapped with [`FieldAliases`], e.g. WikiMIA's `"input"` key.
//!
//! Every seeded draw in this module uses ChaCha8 seeded with
//! `seed_from_u64(seed)` and samples indices without replacement, so a
//! given `(dataset, size, seed)` selects the same records on every platform.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Member,
    Nonmember,
}

impl Label {
    pub fn is_member(self) -> bool {
        self == Label::Member
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Member => "member",
            Label::Nonmember => "nonmember",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub text: String,
    pub label: Label,
}

impl Record {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Label) -> Self {
        Record {
            id: id.into(),
            text: text.into(),
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    records: Vec<Record>,
    source: String,
}

impl Dataset {
    /// Builds a dataset, rejecting empty texts and duplicate ids.
    pub fn new(records: Vec<Record>, source: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.text.is_empty() {
                return Err(Error::InvalidDataset(format!("record {} has empty text", r.id)));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate id {}", r.id)));
            }
        }
        Ok(Dataset {
            records,
            source: source.into(),
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    pub fn group(&self, label: Label) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.label == label)
    }

    /// Errors unless both classes are present.
    pub fn require_both_classes(&self) -> Result<()> {
        let (m, n) = (self.count(Label::Member), self.count(Label::Nonmember));
        if m == 0 || n == 0 {
            return Err(Error::InvalidDataset(format!(
                "evaluation needs members and nonmembers, found {m} members / {n} nonmembers"
            )));
        }
        Ok(())
    }

    pub fn into_records(self) -> Vec<Record> {
        self.records
    }
}

/// Input field names for JSONL datasets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldAliases {
    pub text: String,
    pub label: String,
    pub id: String,
}

impl Default for FieldAliases {
    fn default() -> Self {
        FieldAliases {
            text: "text".into(),
            label: "label".into(),
            id: "id".into(),
        }
    }
}

impl FieldAliases {
    /// WikiMIA stores the passage under `"input"`.
    pub fn wikimia() -> Self {
        FieldAliases {
            text: "input".into(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Jsonl,
}

pub fn load_dataset(path: &Path, format: DatasetFormat, aliases: &FieldAliases) -> Result<Dataset> {
    let DatasetFormat::Jsonl = format;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let basename = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    parse_jsonl(BufReader::new(file), &basename, aliases)
}

/// Parses JSONL from any reader. `source_name` seeds generated ids
/// (`<source_name>:<line>`) and the dataset provenance.
pub fn parse_jsonl<R: BufRead>(reader: R, source_name: &str, aliases: &FieldAliases) -> Result<Dataset> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(&line, line_no, source_name, aliases)?);
    }
    if records.is_empty() {
        return Err(Error::InvalidDataset(format!("{source_name}: empty file")));
    }
    Dataset::new(records, source_name)
}

fn parse_line(line: &str, line_no: usize, source_name: &str, aliases: &FieldAliases) -> Result<Record> {
    let parse_err = |message: String| Error::Parse {
        source_name: source_name.to_string(),
        line: line_no,
        message,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| parse_err("expected a JSON object".into()))?;

    let text = match obj.get(&aliases.text) {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(parse_err(format!("field {:?} is not a string", aliases.text))),
        None => return Err(parse_err(format!("missing field {:?}", aliases.text))),
    };
    if text.is_empty() {
        return Err(Error::InvalidRecord("empty text".into(), line_no));
    }

    let label = match obj.get(&aliases.label) {
        Some(v) => parse_label(v).ok_or_else(|| Error::InvalidRecord(format!("unknown label {v}"), line_no))?,
        None => return Err(parse_err(format!("missing field {:?}", aliases.label))),
    };

    let id = match obj.get(&aliases.id) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(Value::Null) | None => format!("{source_name}:{line_no}"),
        Some(v) => return Err(parse_err(format!("id {v} is neither a string nor a number"))),
    };

    Ok(Record { id, text, label })
}

fn parse_label(v: &Value) -> Option<Label> {
    match v {
        Value::String(s) if s == "member" => Some(Label::Member),
        Value::String(s) if s == "nonmember" => Some(Label::Nonmember),
        Value::Number(n) => match n.as_u64() {
            Some(1) => Some(Label::Member),
            Some(0) => Some(Label::Nonmember),
            _ => None,
        },
        _ => None,
    }
}

/// Consecutive chunks of at most `max_bytes` bytes, each ending on a char
/// boundary. A char wider than `max_bytes` becomes its own chunk.
pub fn chunk_text(text: &str, max_bytes: usize) -> Vec<&str> {
    assert!(max_bytes > 0, "chunk size must be positive");
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let mut cut = max_bytes.min(rest.len());
        while !rest.is_char_boundary(cut) {
            cut -= 1;
        }
        if cut == 0 {
            cut = rest.chars().next().map_or(rest.len(), char::len_utf8);
        }
        let (head, tail) = rest.split_at(cut);
        out.push(head);
        rest = tail;
    }
    out
}

/// Labeled records from the first `max_chunks` chunks of `text`, with ids
/// `<id_prefix>:<chunk index>`.
pub fn chunk_records(text: &str, max_bytes: usize, max_chunks: Option<usize>, label: Label, id_prefix: &str) -> Vec<Record> {
    chunk_text(text, max_bytes)
        .into_iter()
        .take(max_chunks.unwrap_or(usize::MAX))
        .enumerate()
        .map(|(i, c)| Record::new(format!("{id_prefix}:{i}"), c, label))
        .collect()
}

/// Writes records as JSONL with an explicit `"id"` field.
pub fn write_jsonl<W: Write>(records: &[Record], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<jsonl writer>", e))?;
    }
    Ok(())
}

pub fn save_jsonl(records: &[Record], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_jsonl(records, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Nonmember shots held out from evaluation for prefix construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixPool {
    shots: Vec<Record>,
    seed: u64,
}

impl PrefixPool {
    pub fn new(shots: Vec<Record>, seed: u64) -> Result<Self> {
        if let Some(r) = shots.iter().find(|r| r.label != Label::Nonmember) {
            return Err(Error::InvalidArgument(format!(
                "prefix pool shot {} is not a nonmember",
                r.id
            )));
        }
        Ok(PrefixPool { shots, seed })
    }

    pub fn shots(&self) -> &[Record] {
        &self.shots
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.shots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shots.is_empty()
    }
}

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws `k` of `n` indices without replacement, in draw order.
pub(crate) fn draw_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded_rng(seed);
    rand::seq::index::sample(&mut rng, n, k).into_vec()
}

/// Holds out `pool_size` nonmembers (seeded draw) as prefix candidates.
pub fn split_prefix_pool(d: &Dataset, pool_size: usize, seed: u64) -> Result<(PrefixPool, Dataset)> {
    let nonmember_idx: Vec<usize> = d
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.label == Label::Nonmember)
        .map(|(i, _)| i)
        .collect();
    if nonmember_idx.len() < pool_size {
        return Err(Error::Insufficient {
            what: "nonmembers for the prefix pool",
            needed: pool_size,
            available: nonmember_idx.len(),
        });
    }
    let chosen: Vec<usize> = draw_indices(nonmember_idx.len(), pool_size, seed)
        .into_iter()
        .map(|i| nonmember_idx[i])
        .collect();
    let shots = chosen.iter().map(|&i| d.records[i].clone()).collect();
    let removed: HashSet<usize> = chosen.into_iter().collect();
    let rest: Vec<Record> = d
        .records
        .iter()
        .enumerate()
        .filter(|(i, _)| !removed.contains(i))
        .map(|(_, r)| r.clone())
        .collect();
    let source = if pool_size == 0 {
        d.source.clone()
    } else {
        format!("{} | prefix pool {pool_size} held out (seed {seed})", d.source)
    };
    Ok((PrefixPool::new(shots, seed)?, Dataset { records: rest, source }))
}

/// Removes `remove_members` members (seeded draw) so the classes balance.
pub fn balance_eval(d: &Dataset, remove_members: usize, seed: u64) -> Result<Dataset> {
    Ok(balance_eval_with_removed(d, remove_members, seed)?.0)
}

/// Like [`balance_eval`], also returning the removed members in draw order.
pub fn balance_eval_with_removed(d: &Dataset, remove_members: usize, seed: u64) -> Result<(Dataset, Vec<Record>)> {
    let member_idx: Vec<usize> = d
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.label == Label::Member)
        .map(|(i, _)| i)
        .collect();
    if member_idx.len() < remove_members {
        return Err(Error::Insufficient {
            what: "members to remove",
            needed: remove_members,
            available: member_idx.len(),
        });
    }
    if remove_members == 0 {
        return Ok((d.clone(), Vec::new()));
    }
    let chosen: Vec<usize> = draw_indices(member_idx.len(), remove_members, seed)
        .into_iter()
        .map(|i| member_idx[i])
        .collect();
    let removed_records = chosen.iter().map(|&i| d.records[i].clone()).collect();
    let removed: HashSet<usize> = chosen.into_iter().collect();
    let records: Vec<Record> = d
        .records
        .iter()
        .enumerate()
        .filter(|(i, _)| !removed.contains(i))
        .map(|(_, r)| r.clone())
        .collect();
    let members = records.iter().filter(|r| r.label == Label::Member).count();
    let source = format!(
        "{} | balanced: removed {remove_members} members (seed {seed}), {members} members / {} nonmembers",
        d.source,
        records.len() - members
    );
    Ok((Dataset { records, source }, removed_records))
}
