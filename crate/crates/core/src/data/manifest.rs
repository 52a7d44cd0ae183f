//! Plain-text corpus index: one utterance per non-empty line,
//! `utterance_id path label [domain]`, separated by spaces or tabs.
//! Relative paths resolve against the manifest's directory.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::label::Label;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub utterance_id: String,
    pub path: PathBuf,
    pub label: Label,
    pub domain: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            self.base_dir.join(&row.path)
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            write!(out, "{} {} {}", r.utterance_id, r.path.display(), r.label).unwrap();
            if let Some(d) = &r.domain {
                write!(out, " {d}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn parse_manifest_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Manifest> {
    let mut rows = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if !(3..=4).contains(&fields.len()) {
            return Err(Error::Data(format!(
                "manifest line {line_no}: expected `id path label [domain]`, found {} fields",
                fields.len()
            )));
        }
        let label: Label = fields[2]
            .parse()
            .map_err(|e| Error::Data(format!("manifest line {line_no}: {e}")))?;
        if let Some(first) = seen.insert(fields[0].to_string(), line_no) {
            return Err(Error::Data(format!(
                "manifest line {line_no}: duplicate utterance id {:?} (first on line {first})",
                fields[0]
            )));
        }
        rows.push(ManifestRow {
            utterance_id: fields[0].to_string(),
            path: PathBuf::from(fields[1]),
            label,
            domain: fields.get(3).map(|s| s.to_string()),
        });
    }
    if rows.is_empty() {
        return Err(Error::Data("manifest has no rows".into()));
    }
    Ok(Manifest {
        rows,
        base_dir: base_dir.into(),
    })
}

pub fn parse_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest_str(&text, base).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}
