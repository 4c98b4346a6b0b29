//! Flat `key = value` run configuration.
//!
//! One pair per line; `#` starts a comment anywhere on the line; blank
//! lines are skipped. Each subcommand consumes the keys it understands and
//! then calls [`ConfigMap::finish`], so a leftover (misspelled) key is an
//! error instead of a silently ignored setting.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug)]
pub struct ConfigMap {
    label: String,
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    /// A map with no entries; every lookup falls through to the default.
    pub fn empty() -> Self {
        ConfigMap { label: "<defaults>".into(), entries: BTreeMap::new() }
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text =
            std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&path.display().to_string(), &text)
    }

    pub fn parse(label: &str, text: &str) -> Result<Self, String> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{label}:{}: expected `key = value`, got {line:?}", idx + 1))?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(format!("{label}:{}: empty key", idx + 1));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(format!("{label}:{}: duplicate key {key:?}", idx + 1));
            }
        }
        Ok(ConfigMap { label: label.to_string(), entries })
    }

    /// Remove a key and hand back its raw value, if present.
    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    /// Remove and parse a key, if present.
    pub fn take<T>(&mut self, key: &str) -> Result<Option<T>, String>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| format!("{}: key {key:?}: cannot parse {v:?}: {e}", self.label)),
        }
    }

    /// Remove and parse a key, overwriting `slot` only when present.
    pub fn take_into<T>(&mut self, key: &str, slot: &mut T) -> Result<(), String>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = self.take::<T>(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Remove a comma-separated list; an empty value is an empty list.
    pub fn take_list<T>(&mut self, key: &str) -> Result<Option<Vec<T>>, String>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => parse_list(&v)
                .map(Some)
                .map_err(|e| format!("{}: key {key:?}: {e}", self.label)),
        }
    }

    /// Error out on any key nothing consumed.
    pub fn finish(self) -> Result<(), String> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let keys: Vec<&str> = self.entries.keys().map(String::as_str).collect();
            Err(format!("{}: unknown key(s): {}", self.label, keys.join(", ")))
        }
    }
}

/// Parse `a,b,c` into typed items; whitespace around items is fine and an
/// empty (or all-whitespace) string is an empty list.
pub fn parse_list<T>(text: &str) -> Result<Vec<T>, String>
where
    T: FromStr,
    T::Err: Display,
{
    let text = text.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|item| {
            let item = item.trim();
            item.parse::<T>().map_err(|e| format!("cannot parse list item {item:?}: {e}"))
        })
        .collect()
}
