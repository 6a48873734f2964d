//! `key=value` run configuration: defaults, then an optional file, then flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

pub const RESOLVED_FILE: &str = "resolved_config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    command: String,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// The keys in `defaults` are the only ones the command accepts.
    pub fn new(command: &str, defaults: &[(&str, &str)]) -> Self {
        let mut values: BTreeMap<String, String> = [("seed", "0"), ("precision", "f32"), ("out", "out")]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        values.extend(defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())));
        Self {
            command: command.to_string(),
            values,
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        let slot = self
            .values
            .get_mut(key)
            .ok_or_else(|| anyhow!("unknown key `{key}` for {}", self.command))?;
        *slot = value.into();
        Ok(())
    }

    /// Applies a flag if it was given.
    pub fn flag<V: Display>(&mut self, key: &str, value: &Option<V>) -> Result<()> {
        match value {
            Some(v) => self.set(key, v.to_string()),
            None => Ok(()),
        }
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value, got `{line}`", i + 1))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        self.merge_text(&text)
            .with_context(|| format!("in {}", path.display()))
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("{key} is not a key of {}", self.command))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| anyhow!("invalid value `{raw}` for {key}: {e}"))
    }

    /// `None` for an empty value.
    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    pub fn render(&self) -> String {
        let mut s = format!("# {}\n", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    /// Creates the output directory and writes the resolved configuration into it.
    pub fn write_resolved(&self) -> Result<PathBuf> {
        let dir = self.out_dir();
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_FILE);
        std::fs::write(&path, self.render())?;
        Ok(path)
    }

    pub fn validate_precision(&self) -> Result<()> {
        match self.raw("precision") {
            "f32" | "f64" => Ok(()),
            other => bail!("precision must be f32 or f64, got `{other}`"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering() {
        let mut rc = RunConfig::new("t", &[("steps", "10"), ("lr", "0.1")]);
        rc.merge_text("# comment\nsteps = 20\n\nlr=0.5\n").unwrap();
        rc.flag("steps", &Some(30)).unwrap();
        rc.flag::<u32>("lr", &None).unwrap();
        assert_eq!(rc.get::<usize>("steps").unwrap(), 30);
        assert_eq!(rc.get::<f64>("lr").unwrap(), 0.5);
        assert_eq!(rc.get::<u64>("seed").unwrap(), 0);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut rc = RunConfig::new("t", &[("steps", "10")]);
        assert!(rc.merge_text("stpes=3").is_err());
        assert!(rc.merge_text("steps").is_err());
        assert!(rc.set("bogus", "1").is_err());
    }

    #[test]
    fn render_is_sorted() {
        let rc = RunConfig::new("t", &[("b", "2"), ("a", "1")]);
        assert_eq!(rc.render(), "# t\na=1\nb=2\nout=out\nprecision=f32\nseed=0\n");
    }

    #[test]
    fn empty_is_none() {
        let rc = RunConfig::new("t", &[("corpus", "")]);
        assert_eq!(rc.opt::<String>("corpus").unwrap(), None);
    }
}
