//! Flag values layered over an optional key=value config file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use mqner_core::kv::KvMap;
use mqner_core::{Error, Result};

/// Config keys mirror the long flag names without the leading dashes.
pub const KNOWN_KEYS: &[&str] = &[
    "input",
    "output",
    "dev",
    "mode",
    "head",
    "op",
    "shuffle-entities",
    "no-answer-rate",
    "max-seq-len",
    "batch-size",
    "lr",
    "epochs",
    "seed",
    "query-map",
    "layers",
    "attention-heads",
    "hidden-dim",
    "ffn-dim",
    "dropout",
    "preset",
    "samples",
    "to",
    "grouping",
    "format",
    "gazetteer",
    "labelled",
    "gazetteer-out",
    "heuristics",
    "model",
    "predictions",
    "repetitions",
];

pub struct Settings {
    file: KvMap,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => KvMap::load(p)?,
            None => KvMap::new(),
        };
        file.check_keys(KNOWN_KEYS)?;
        Ok(Self { file })
    }

    /// The flag if given, else the config entry.
    pub fn opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.file.get(key),
        }
    }

    pub fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    pub fn required<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.opt(flag, key)?
            .ok_or_else(|| Error::Config(format!("missing --{key} (flag or config entry)")))
    }

    pub fn path(&self, flag: Option<PathBuf>, key: &str) -> Result<PathBuf> {
        self.required(flag, key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(text: &str) -> Settings {
        let file = KvMap::parse(text, Path::new("cfg")).unwrap();
        file.check_keys(KNOWN_KEYS).unwrap();
        Settings { file }
    }

    #[test]
    fn flags_win_over_file() {
        let s = settings("epochs=7\nlr=0.5\n");
        assert_eq!(s.or(Some(3usize), "epochs", 1).unwrap(), 3);
        assert_eq!(s.or(None::<usize>, "epochs", 1).unwrap(), 7);
        assert_eq!(s.or(None::<f64>, "lr", 1e-3).unwrap(), 0.5);
        assert_eq!(s.or(None::<u64>, "seed", 9).unwrap(), 9);
    }

    #[test]
    fn missing_and_malformed() {
        let s = settings("epochs=many\n");
        assert!(matches!(s.or(None::<usize>, "epochs", 1), Err(Error::Config(_)) | Err(Error::Parse { .. })));
        let err = s.required(None::<PathBuf>, "input").unwrap_err();
        assert!(err.to_string().contains("--input"));
    }

    #[test]
    fn unknown_key_rejected() {
        let file = KvMap::parse("epoch=3\n", Path::new("cfg")).unwrap();
        assert!(file.check_keys(KNOWN_KEYS).is_err());
    }
}
