//! `key=value` run manifest with content digests.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use sha2::{Digest, Sha256};

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Shell-style rendering of an argument vector; arguments with spaces or
/// quotes are single-quoted.
pub fn render_command(argv: &[String]) -> String {
    argv.iter()
        .map(|a| {
            if !a.is_empty() && !a.contains(|c: char| c.is_whitespace() || c == '\'' || c == '"') {
                a.clone()
            } else {
                format!("'{}'", a.replace('\'', r"'\''"))
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Default)]
pub struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.lines.push((key.into(), value.to_string().replace('\n', " ")));
    }

    /// Adds every line of a `key=value` block under `prefix.`.
    pub fn extend_kv(&mut self, prefix: &str, kv: &str) {
        for line in kv.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.set(format!("{prefix}.{k}"), v);
            }
        }
    }

    pub fn digest(&mut self, key: &str, path: &Path) -> anyhow::Result<()> {
        let d = sha256_file(path)?;
        self.set(format!("{key}.path"), path.display());
        self.set(format!("{key}.sha256"), d);
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoting() {
        let argv: Vec<String> = ["train", "--out", "a b/c", "it's"].iter().map(|s| s.to_string()).collect();
        assert_eq!(render_command(&argv), r"train --out 'a b/c' 'it'\''s'");
    }

    #[test]
    fn prefixed_blocks() {
        let mut m = Manifest::default();
        m.extend_kv("config", "lr=0.001\nepochs=3\n");
        m.set("x", "multi\nline");
        assert_eq!(m.render(), "config.lr=0.001\nconfig.epochs=3\nx=multi line\n");
    }
}
