//! The sectioned `key = value` text format shared by model and training
//! configuration files.
//!
//! ```text
//! # comment
//! [model]
//! num_classes = 4
//!
//! [conv]
//! k = 3
//! s = 2
//! ```
//!
//! Sections may repeat; their order is preserved. The grammar is documented in
//! `docs/config.md`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Document {
    pub path: PathBuf,
    pub sections: Vec<Section>,
}

impl Document {
    pub fn parse(text: &str, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut sections: Vec<Section> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let Some(name) = rest.strip_suffix(']') else {
                    return Err(parse_err(&path, line, raw, "unterminated section header"));
                };
                let name = name.trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(parse_err(&path, line, raw, "invalid section name"));
                }
                sections.push(Section {
                    name: name.to_string(),
                    line,
                    entries: Vec::new(),
                });
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(parse_err(&path, line, raw, "expected `key = value`"));
            };
            let Some(section) = sections.last_mut() else {
                return Err(parse_err(&path, line, raw, "entry outside of any section"));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(parse_err(&path, line, raw, "empty key"));
            }
            if section.entries.iter().any(|e| e.key == key) {
                return Err(parse_err(&path, line, raw, &format!("duplicate key `{key}`")));
            }
            section.entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line,
            });
        }
        Ok(Document { path, sections })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn sections<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| s.name == name)
    }

    /// The single section called `name`, if present.
    pub fn unique(&self, name: &str) -> Result<Option<&Section>> {
        let mut it = self.sections.iter().filter(|s| s.name == name);
        let first = it.next();
        if let Some(dup) = it.next() {
            return Err(Error::config(format!(
                "{}:{}: section [{name}] may appear only once",
                self.path.display(),
                dup.line
            )));
        }
        Ok(first)
    }

    /// Applies a `section.key=value` override to the first matching section,
    /// creating the section if needed.
    pub fn set(&mut self, dotted: &str) -> Result<()> {
        let (lhs, value) = dotted
            .split_once('=')
            .ok_or_else(|| Error::usage(format!("override `{dotted}` is not section.key=value")))?;
        let (section, key) = lhs
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::usage(format!("override `{dotted}` is not section.key=value")))?;
        let idx = match self.sections.iter().position(|s| s.name == section) {
            Some(i) => i,
            None => {
                self.sections.push(Section {
                    name: section.to_string(),
                    line: 0,
                    entries: Vec::new(),
                });
                self.sections.len() - 1
            }
        };
        let sec = &mut self.sections[idx];
        let value = value.trim().to_string();
        match sec.entries.iter_mut().find(|e| e.key == key) {
            Some(e) => e.value = value,
            None => sec.entries.push(Entry {
                key: key.to_string(),
                value,
                line: 0,
            }),
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{}]", s.name);
            for e in &s.entries {
                let _ = writeln!(out, "{} = {}", e.key, e.value);
            }
        }
        out
    }
}

fn parse_err(path: &Path, line: usize, raw: &str, msg: &str) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        column: raw.len() - raw.trim_start().len() + 1,
        message: msg.to_string(),
    }
}

/// Typed, exhaustively checked access to one section.
pub struct Reader<'a> {
    path: &'a Path,
    section: &'a Section,
    used: Vec<bool>,
}

impl<'a> Reader<'a> {
    pub fn new(doc: &'a Document, section: &'a Section) -> Self {
        Reader {
            path: &doc.path,
            section,
            used: vec![false; section.entries.len()],
        }
    }

    fn raw(&mut self, key: &str) -> Option<&'a Entry> {
        let i = self.section.entries.iter().position(|e| e.key == key)?;
        self.used[i] = true;
        Some(&self.section.entries[i])
    }

    fn convert<T: FromStr>(&self, e: &Entry) -> Result<T> {
        e.value.parse().map_err(|_| {
            Error::config(format!(
                "{}:{}: [{}] {} = `{}` is not a valid {}",
                self.path.display(),
                e.line,
                self.section.name,
                e.key,
                e.value,
                std::any::type_name::<T>()
            ))
        })
    }

    pub fn opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            Some(e) => self.convert(e).map(Some),
            None => Ok(None),
        }
    }

    pub fn get<T: FromStr>(&mut self, key: &str) -> Result<T> {
        match self.raw(key) {
            Some(e) => self.convert(e),
            None => Err(Error::config(format!(
                "{}:{}: section [{}] is missing `{key}`",
                self.path.display(),
                self.section.line,
                self.section.name
            ))),
        }
    }

    pub fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(e) = self.raw(key) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(|part| {
                let part = part.trim();
                part.parse().map_err(|_| {
                    Error::config(format!(
                        "{}:{}: [{}] {}: `{part}` is not a valid {}",
                        self.path.display(),
                        e.line,
                        self.section.name,
                        e.key,
                        std::any::type_name::<T>()
                    ))
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Rejects keys that were never read.
    pub fn finish(self) -> Result<()> {
        if let Some(i) = self.used.iter().position(|u| !u) {
            let e = &self.section.entries[i];
            return Err(Error::config(format!(
                "{}:{}: unknown key `{}` in section [{}]",
                self.path.display(),
                e.line,
                e.key,
                self.section.name
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_repeated_sections_in_order() {
        let doc = Document::parse(
            "# top\n[model]\nnum_classes = 3\n\n[conv]\nk=3\n[conv]\nk = 5 # five\n",
            "x.cfg",
        )
        .unwrap();
        let ks: Vec<_> = doc
            .sections("conv")
            .map(|s| s.entries[0].value.clone())
            .collect();
        assert_eq!(ks, ["3", "5"]);
    }

    #[test]
    fn reports_line_of_syntax_errors() {
        let err = Document::parse("[model]\nnum_classes 3\n", "m.cfg").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other}"),
        }
        assert!(Document::parse("k = 1\n", "m.cfg").is_err());
        assert!(Document::parse("[a\n", "m.cfg").is_err());
        assert!(Document::parse("[a]\nk=1\nk=2\n", "m.cfg").is_err());
    }

    #[test]
    fn reader_rejects_unknown_keys() {
        let doc = Document::parse("[train]\nepochs = 2\nbogus = 1\n", "t.cfg").unwrap();
        let mut r = Reader::new(&doc, &doc.sections[0]);
        assert_eq!(r.get::<usize>("epochs").unwrap(), 2);
        let err = r.finish().unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn overrides_replace_or_insert() {
        let mut doc = Document::parse("[train]\nepochs = 2\n", "t.cfg").unwrap();
        doc.set("train.epochs=5").unwrap();
        doc.set("loss.use_slide = false").unwrap();
        let text = doc.render();
        assert!(text.contains("epochs = 5"));
        assert!(text.contains("[loss]\nuse_slide = false"));
        assert!(doc.set("nodot=1").is_err());
    }
}
