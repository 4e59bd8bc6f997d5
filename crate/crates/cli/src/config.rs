//! Flat `key = value` run files and flag/file/default resolution.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Entries of a config file that have not been consumed yet.
#[derive(Debug, Default)]
pub struct FileConfig {
    entries: BTreeMap<String, String>,
}

pub fn normalize_key(k: &str) -> String {
    k.trim().trim_start_matches("--").replace('-', "_")
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", n + 1)))?;
            entries.insert(normalize_key(k), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => {
                v.parse().map(Some).map_err(|_| CliError::Usage(format!("config key {key}: cannot parse {v:?}")))
            }
        }
    }

    /// Boolean switch: a flag that is set wins, otherwise the file decides.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool, CliError> {
        Ok(flag || self.take::<bool>(key)?.unwrap_or(false))
    }

    /// Flag value, else file value, else `default`.
    pub fn resolve<T: FromStr>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError> {
        let file = self.take(key)?;
        Ok(flag.or(file).unwrap_or(default))
    }

    pub fn resolve_opt<T: FromStr>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        let file = self.take(key)?;
        Ok(flag.or(file))
    }

    pub fn drain(&mut self) -> Vec<(String, String)> {
        std::mem::take(&mut self.entries).into_iter().collect()
    }

    /// Fails on entries nobody consumed.
    pub fn finish(self) -> Result<(), CliError> {
        match self.entries.keys().next() {
            Some(k) => Err(CliError::Usage(format!("unknown config key {k:?}"))),
            None => Ok(()),
        }
    }
}
