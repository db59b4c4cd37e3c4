//! Line-oriented tab-separated tables with a `#key=value` preamble.
//!
//! ```text
//! #format=xens-manifest-v1
//! #scheme=A
//! id	path	label	hash	excluded	reason
//! src/img001.png	data/src/img001.png	normal	9f86…	false	
//! ```
//!
//! Cells escape `\\`, tab and newline as `\\\\`, `\\t`, `\\n`. Reading then
//! writing a table reproduces the original bytes.

use std::io::Write;
use std::path::Path;

use crate::error::{Result, XensError};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Table {
    pub preamble: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn escape(cell: &str) -> String {
    let mut out = String::with_capacity(cell.len());
    for ch in cell.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(cell: &str) -> String {
    let mut out = String::with_capacity(cell.len());
    let mut chars = cell.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            preamble: Vec::new(),
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.preamble.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str, context: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| XensError::parse(context, format!("missing #{key}= header line")))
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.preamble.push((key.to_string(), value.to_string()));
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn require_column(&self, name: &str, context: &str) -> Result<usize> {
        self.column(name)
            .ok_or_else(|| XensError::parse(context, format!("missing column {name}")))
    }

    pub fn to_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.preamble {
            out.push('#');
            out.push_str(&escape(k));
            out.push('=');
            out.push_str(&escape(v));
            out.push('\n');
        }
        out.push_str(&self.columns.iter().map(|c| escape(c)).collect::<Vec<_>>().join("\t"));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.iter().map(|c| escape(c)).collect::<Vec<_>>().join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, context: &str) -> Result<Self> {
        let mut table = Table::default();
        let mut header_seen = false;
        for (lineno, line) in text.lines().enumerate() {
            if !header_seen {
                if let Some(rest) = line.strip_prefix('#') {
                    let (k, v) = rest.split_once('=').ok_or_else(|| {
                        XensError::parse(context, format!("line {}: preamble needs key=value", lineno + 1))
                    })?;
                    table.preamble.push((unescape(k), unescape(v)));
                    continue;
                }
                table.columns = line.split('\t').map(unescape).collect();
                header_seen = true;
                continue;
            }
            let row: Vec<String> = line.split('\t').map(unescape).collect();
            if row.len() != table.columns.len() {
                return Err(XensError::parse(
                    context,
                    format!("line {}: {} cells, expected {}", lineno + 1, row.len(), table.columns.len()),
                ));
            }
            table.rows.push(row);
        }
        if !header_seen {
            return Err(XensError::parse(context, "missing header row"));
        }
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| XensError::io(parent, e))?;
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| XensError::io(path, e))?;
        f.write_all(self.to_string().as_bytes()).map_err(|e| XensError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| XensError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}
