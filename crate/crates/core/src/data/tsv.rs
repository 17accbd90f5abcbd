//! Tab-separated behavior logs.
//!
//! One record per line:
//!
//! ```text
//! user_id <TAB> item_id <TAB> label <TAB> long_seq <TAB> short_seq <TAB> side
//! ```
//!
//! where the last three fields are comma-joined item ids (possibly empty),
//! oldest first. Id 0 is reserved for padding and rejected in input.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{BehaviorSequence, Example};
use crate::error::{Error, Result};

/// Capacities and vocabularies a loaded file is validated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub long_len: usize,
    pub short_len: usize,
    pub vocab_size: usize,
    pub side_vocab: usize,
    pub n_side: usize,
}

fn parse_ids(field: &str, limit: usize, what: &str) -> std::result::Result<Vec<u32>, String> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|tok| {
            let id: u32 = tok
                .trim()
                .parse()
                .map_err(|_| format!("{what}: `{tok}` is not an id"))?;
            if id == 0 {
                return Err(format!("{what}: id 0 is reserved for padding"));
            }
            if id as usize >= limit {
                return Err(format!("{what}: id {id} overflows vocabulary of {limit}"));
            }
            Ok(id)
        })
        .collect()
}

/// Parses one record. Sequences are truncated to the most recent items.
pub fn parse_line(line: &str, schema: &Schema) -> std::result::Result<Example, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 6 {
        return Err(format!(
            "expected 6 tab-separated fields, found {}",
            fields.len()
        ));
    }
    let user_id: u64 = fields[0]
        .parse()
        .map_err(|_| format!("user_id: `{}` is not an integer", fields[0]))?;
    let target = match parse_ids(fields[1], schema.vocab_size, "item_id")?.as_slice() {
        [id] => *id,
        _ => return Err("item_id: expected exactly one id".into()),
    };
    let label = match fields[2] {
        "0" => 0,
        "1" => 1,
        other => return Err(format!("label: `{other}` is not 0 or 1")),
    };
    let long = parse_ids(fields[3], schema.vocab_size, "long_seq")?;
    let short = parse_ids(fields[4], schema.vocab_size, "short_seq")?;
    let side = parse_ids(fields[5], schema.side_vocab, "side")?;
    if side.len() != schema.n_side {
        return Err(format!(
            "side: expected {} ids, found {}",
            schema.n_side,
            side.len()
        ));
    }
    Ok(Example {
        user_id,
        target,
        label,
        seq: Arc::new(BehaviorSequence::from_raw(
            &long,
            &short,
            schema.long_len,
            schema.short_len,
        )),
        side,
    })
}

/// Loads a whole file. Examples of the same user with identical histories
/// share one sequence allocation.
pub fn load(path: impl AsRef<Path>, schema: &Schema) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut shared: HashSet<Arc<BehaviorSequence>> = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut ex = parse_line(line, schema).map_err(|msg| Error::Parse {
            path: PathBuf::from(path),
            line: i + 1,
            msg,
        })?;
        match shared.get(&ex.seq) {
            Some(seq) => ex.seq = Arc::clone(seq),
            None => {
                shared.insert(Arc::clone(&ex.seq));
            }
        }
        out.push(ex);
    }
    Ok(out)
}

fn join(ids: &[u32]) -> String {
    let mut s = String::new();
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{id}");
    }
    s
}

pub fn format_line(ex: &Example) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        ex.user_id,
        ex.target,
        ex.label,
        join(ex.seq.long_history()),
        join(ex.seq.short_history()),
        join(&ex.side)
    )
}

/// Writes examples in the format accepted by [`load`].
pub fn write(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for ex in examples {
        out.push_str(&format_line(ex));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
