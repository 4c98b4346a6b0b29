//! Run manifests.
//!
//! Every subcommand that writes artifacts drops a `<stem>.manifest` next to
//! them holding the fully resolved settings — defaults materialized, flag
//! overrides applied. The file is itself a valid `--config` input, so a run
//! can be reproduced from nothing but its manifest; the bookkeeping keys
//! listed in [`Manifest::META_KEYS`] are recognized and skipped on re-read.

use std::fmt::Display;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    /// Keys a manifest carries beyond the run settings. `outputs` is the
    /// comma-separated list of files the run wrote.
    pub const META_KEYS: [&'static str; 4] =
        ["subcommand", "tool_version", "build_profile", "outputs"];

    pub fn new(subcommand: &str) -> Self {
        let mut m = Manifest { lines: Vec::new() };
        m.push("subcommand", subcommand);
        m.push("tool_version", env!("CARGO_PKG_VERSION"));
        m.push("build_profile", if cfg!(debug_assertions) { "dev" } else { "release" });
        m
    }

    pub fn push(&mut self, key: &str, value: impl Display) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    pub fn render(&self, outputs: &[PathBuf]) -> String {
        let mut text = String::from("# run manifest; pass back via --config to reproduce\n");
        for (k, v) in &self.lines {
            let _ = writeln!(text, "{k} = {v}");
        }
        let joined =
            outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(text, "outputs = {joined}");
        text
    }

    /// Write `<stem>.manifest` (creating parent directories) and return its path.
    pub fn write(&self, stem: &Path, outputs: &[PathBuf]) -> Result<PathBuf, String> {
        let path = sibling(stem, ".manifest");
        write_file(&path, &self.render(outputs))?;
        Ok(path)
    }
}

/// Write `text` to `path`, creating parent directories as needed.
pub fn write_file(path: &Path, text: &str) -> Result<(), String> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
        }
    }
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

/// `stem` plus a literal suffix — unlike `Path::with_extension`, a dot in
/// the stem is left alone.
pub fn sibling(stem: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", stem.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ConfigMap;

    #[test]
    fn renders_ordered_pairs_and_outputs() {
        let mut m = Manifest::new("bench");
        m.push("seed", 7u64);
        let text = m.render(&[PathBuf::from("a.csv"), PathBuf::from("b.csv")]);
        assert!(text.starts_with("# run manifest"));
        assert!(text.contains("subcommand = bench\n"));
        assert!(text.contains("seed = 7\n"));
        assert!(text.ends_with("outputs = a.csv,b.csv\n"));
    }

    #[test]
    fn round_trips_through_the_config_parser() {
        let mut m = Manifest::new("train");
        m.push("lr", 1e-3);
        let text = m.render(&[PathBuf::from("x.csv")]);
        let mut cfg = ConfigMap::parse("manifest", &text).expect("manifest parses as config");
        for key in Manifest::META_KEYS {
            cfg.take_raw(key);
        }
        assert_eq!(cfg.take::<f64>("lr").unwrap(), Some(1e-3));
        cfg.finish().expect("nothing left over");
    }

    #[test]
    fn sibling_appends_without_eating_dots() {
        assert_eq!(sibling(Path::new("runs/toy.v2"), ".manifest"), PathBuf::from("runs/toy.v2.manifest"));
    }
}
