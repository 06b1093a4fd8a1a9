//! Native corpus format.
//!
//! Blank-line separated blocks. The first line of a block is
//! `# intent: <name>`, optionally followed by `# id: <id>`; every further
//! line is `token<TAB>slot`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slot label for tokens outside every span. It is also the label that
/// unmatched support/query slot labels are remapped to, and span metrics
/// ignore it.
pub const OUTSIDE: &str = "O";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub slots: Vec<String>,
    pub intent: String,
}

impl UtteranceRecord {
    pub fn new(
        id: impl Into<String>,
        tokens: Vec<String>,
        slots: Vec<String>,
        intent: impl Into<String>,
    ) -> Result<Self> {
        if tokens.len() != slots.len() {
            return Err(Error::contract(
                "data_io",
                format!("{} tokens but {} slot labels", tokens.len(), slots.len()),
            ));
        }
        if tokens.is_empty() {
            return Err(Error::EmptyUtterance);
        }
        Ok(UtteranceRecord {
            id: id.into(),
            tokens,
            slots,
            intent: intent.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn parse_dataset_file(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset_str(&text, &path.display().to_string())
}

pub fn parse_dataset_str(text: &str, origin: &str) -> Result<Vec<UtteranceRecord>> {
    let fail = |line: usize, message: String| Error::Format {
        module: "data_io",
        path: origin.to_string(),
        line,
        message,
    };

    struct Block {
        start: usize,
        intent: Option<String>,
        id: Option<String>,
        tokens: Vec<String>,
        slots: Vec<String>,
    }

    let mut records = Vec::new();
    let mut block: Option<Block> = None;
    let finish = |b: Block, records: &mut Vec<UtteranceRecord>| -> Result<()> {
        let intent = b
            .intent
            .ok_or_else(|| fail(b.start, "block has no '# intent:' line".into()))?;
        if b.tokens.is_empty() {
            return Err(fail(b.start, "empty block".into()));
        }
        let id = b.id.unwrap_or_else(|| records.len().to_string());
        records.push(UtteranceRecord {
            id,
            tokens: b.tokens,
            slots: b.slots,
            intent,
        });
        Ok(())
    };

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            if let Some(b) = block.take() {
                finish(b, &mut records)?;
            }
            continue;
        }
        let b = block.get_or_insert_with(|| Block {
            start: lineno,
            intent: None,
            id: None,
            tokens: Vec::new(),
            slots: Vec::new(),
        });
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim_start();
            if let Some(name) = rest.strip_prefix("intent:") {
                if b.intent.is_some() || !b.tokens.is_empty() {
                    return Err(fail(lineno, "intent line must open the block".into()));
                }
                let name = name.trim();
                if name.is_empty() {
                    return Err(fail(lineno, "empty intent name".into()));
                }
                b.intent = Some(name.to_string());
                continue;
            }
            if let Some(id) = rest.strip_prefix("id:") {
                if b.intent.is_none() || !b.tokens.is_empty() {
                    return Err(fail(lineno, "id line must follow the intent line".into()));
                }
                b.id = Some(id.trim().to_string());
                continue;
            }
            return Err(fail(lineno, format!("unknown directive '{line}'")));
        }
        if b.intent.is_none() {
            return Err(fail(b.start, "block has no '# intent:' line".into()));
        }
        let cols: Vec<&str> = line.split('\t').collect();
        match cols.as_slice() {
            [token, slot] if !token.is_empty() && !slot.is_empty() => {
                b.tokens.push((*token).to_string());
                b.slots.push((*slot).to_string());
            }
            _ => {
                return Err(fail(
                    lineno,
                    format!("expected 'token<TAB>slot', found {} column(s)", cols.len()),
                ))
            }
        }
    }
    if let Some(b) = block.take() {
        finish(b, &mut records)?;
    }
    Ok(records)
}

pub fn serialize_records(records: &[UtteranceRecord]) -> String {
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "# intent: {}", r.intent);
        let _ = writeln!(out, "# id: {}", r.id);
        for (t, s) in r.tokens.iter().zip(&r.slots) {
            let _ = writeln!(out, "{t}\t{s}");
        }
    }
    out
}

pub fn write_dataset_file(records: &[UtteranceRecord], path: &Path) -> Result<()> {
    fs::write(path, serialize_records(records)).map_err(|e| Error::io(path, e))
}

/// Splits an optional `B-`/`I-` tag from a slot label.
pub fn split_bio(label: &str) -> (Option<char>, &str) {
    match label.as_bytes() {
        [b @ (b'B' | b'I'), b'-', ..] => (Some(*b as char), &label[2..]),
        _ => (None, label),
    }
}

/// Prefixes a slot label with its intent (`artist` becomes
/// `AddToPlaylist:artist`). The outside label and already prefixed labels
/// are returned unchanged; a BIO tag stays in front.
pub fn prefix_slot_label(intent: &str, label: &str) -> String {
    if label == OUTSIDE {
        return label.to_string();
    }
    let (tag, body) = split_bio(label);
    if body.starts_with(intent) && body[intent.len()..].starts_with(':') {
        return label.to_string();
    }
    match tag {
        Some(t) => format!("{t}-{intent}:{body}"),
        None => format!("{intent}:{body}"),
    }
}

pub fn apply_slot_prefixing(mut records: Vec<UtteranceRecord>) -> Vec<UtteranceRecord> {
    for r in &mut records {
        for s in &mut r.slots {
            *s = prefix_slot_label(&r.intent, s);
        }
    }
    records
}
