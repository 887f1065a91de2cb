//! Line-based `key = value` configuration with `[section]` headers.
//!
//! Blank lines and lines starting with `#` are ignored. Keys before the
//! first header belong to the unnamed section `""`. Every key must be
//! consumed by the reader; leftovers are reported as unknown keys.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("[{section}] missing required key `{key}`")]
    Missing { section: String, key: String },
    #[error("[{section}] `{key}`: cannot parse `{value}`: {reason}")]
    Value {
        section: String,
        key: String,
        value: String,
        reason: String,
    },
    #[error("unknown key{} {}", if .0.len() == 1 { "" } else { "s" }, .0.join(", "))]
    Unknown(Vec<String>),
    #[error("missing section [{0}]")]
    MissingSection(String),
    #[error("duplicate key `{key}` in [{section}]")]
    Duplicate { section: String, key: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Section {
    pub name: String,
    pub entries: Vec<(String, String)>,
}

/// Parsed configuration document, keeping sections and keys in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigDoc {
    pub sections: Vec<Section>,
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut doc = ConfigDoc::default();
        let mut current = Section::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line: i + 1,
                    reason: format!("unterminated section header `{line}`"),
                })?;
                let done = std::mem::replace(
                    &mut current,
                    Section {
                        name: name.trim().to_string(),
                        entries: Vec::new(),
                    },
                );
                if !done.entries.is_empty() || !done.name.is_empty() {
                    doc.sections.push(done);
                }
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    reason: "empty key".into(),
                });
            }
            if current.entries.iter().any(|(existing, _)| *existing == key) {
                return Err(ConfigError::Duplicate {
                    section: current.name.clone(),
                    key,
                });
            }
            current.entries.push((key, v.trim().to_string()));
        }
        if !current.entries.is_empty() || !current.name.is_empty() {
            doc.sections.push(current);
        }
        Ok(doc)
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.section(name).is_some()
    }

    pub fn push_section(&mut self, name: &str) -> &mut Section {
        self.sections.push(Section {
            name: name.to_string(),
            entries: Vec::new(),
        });
        self.sections.last_mut().unwrap()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            if !s.name.is_empty() {
                let _ = writeln!(out, "[{}]", s.name);
            }
            for (k, v) in &s.entries {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    /// Strict reader that records every key it hands out.
    pub fn reader(&self) -> ConfigReader<'_> {
        ConfigReader {
            doc: self,
            used: BTreeSet::new(),
        }
    }
}

impl Section {
    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

pub struct ConfigReader<'a> {
    doc: &'a ConfigDoc,
    used: BTreeSet<(String, String)>,
}

impl ConfigReader<'_> {
    pub fn has_section(&self, section: &str) -> bool {
        self.doc.has_section(section)
    }

    pub fn raw(&mut self, section: &str, key: &str) -> Option<String> {
        let v = self.doc.section(section)?.get(key)?.to_string();
        self.used.insert((section.to_string(), key.to_string()));
        Some(v)
    }

    pub fn opt<V: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<V>, ConfigError>
    where
        V::Err: std::fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<V>().map(Some).map_err(|e| ConfigError::Value {
                section: section.to_string(),
                key: key.to_string(),
                value: v.clone(),
                reason: e.to_string(),
            }),
        }
    }

    pub fn get_or<V: FromStr>(&mut self, section: &str, key: &str, default: V) -> Result<V, ConfigError>
    where
        V::Err: std::fmt::Display,
    {
        Ok(self.opt(section, key)?.unwrap_or(default))
    }

    pub fn require<V: FromStr>(&mut self, section: &str, key: &str) -> Result<V, ConfigError>
    where
        V::Err: std::fmt::Display,
    {
        self.opt(section, key)?.ok_or_else(|| ConfigError::Missing {
            section: section.to_string(),
            key: key.to_string(),
        })
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn list<V: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<Vec<V>>, ConfigError>
    where
        V::Err: std::fmt::Display,
    {
        let Some(raw) = self.raw(section, key) else {
            return Ok(None);
        };
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<V>().map_err(|e| ConfigError::Value {
                    section: section.to_string(),
                    key: key.to_string(),
                    value: raw.clone(),
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<V>, _>>()
            .map(Some)
    }

    /// Fails on any key that was never read, or on unread sections listed
    /// in `sections` (`None` checks the whole document).
    pub fn finish(&self, sections: Option<&[&str]>) -> Result<(), ConfigError> {
        let mut unknown = Vec::new();
        for s in &self.doc.sections {
            if let Some(only) = sections {
                if !only.contains(&s.name.as_str()) {
                    continue;
                }
            }
            for (k, _) in &s.entries {
                if !self.used.contains(&(s.name.clone(), k.clone())) {
                    unknown.push(if s.name.is_empty() { k.clone() } else { format!("{}.{}", s.name, k) });
                }
            }
        }
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Unknown(unknown))
        }
    }
}

pub fn join_list<V: ToString>(items: &[V]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let doc = ConfigDoc::parse("# run\nseed = 3\n\n[model]\narch = minires\nblocks = 1, 2\n").unwrap();
        let mut r = doc.reader();
        assert_eq!(r.require::<u64>("", "seed").unwrap(), 3);
        assert_eq!(r.require::<String>("model", "arch").unwrap(), "minires");
        assert_eq!(r.list::<usize>("model", "blocks").unwrap(), Some(vec![1, 2]));
        r.finish(None).unwrap();
    }

    #[test]
    fn unknown_keys_fail_loud() {
        let doc = ConfigDoc::parse("[train]\nepochs = 3\nlearning_rat = 0.1\n").unwrap();
        let mut r = doc.reader();
        r.require::<usize>("train", "epochs").unwrap();
        let err = r.finish(None).unwrap_err();
        assert_eq!(err, ConfigError::Unknown(vec!["train.learning_rat".into()]));
    }

    #[test]
    fn syntax_errors_name_the_line() {
        let err = ConfigDoc::parse("[a]\nnot a pair\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 2, .. }));
        assert!(ConfigDoc::parse("[a\n").is_err());
        assert!(matches!(
            ConfigDoc::parse("[a]\nx=1\nx=2\n").unwrap_err(),
            ConfigError::Duplicate { .. }
        ));
    }

    #[test]
    fn render_round_trips() {
        let mut doc = ConfigDoc::default();
        doc.push_section("model").set("arch", "poolformer").set("attention_stages", "0,1");
        doc.push_section("train").set("lr", 0.0005);
        let again = ConfigDoc::parse(&doc.render()).unwrap();
        assert_eq!(again, doc);
    }

    #[test]
    fn bad_value_reports_key() {
        let doc = ConfigDoc::parse("[t]\nepochs = many\n").unwrap();
        let err = doc.reader().require::<usize>("t", "epochs").unwrap_err();
        assert!(err.to_string().contains("epochs"));
    }
}
