//! Run directories, config files and the error kinds that pick exit codes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Bad invocation or configuration (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Reads a TOML config, or the defaults when no path is given.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

pub fn to_toml<T: Serialize>(cfg: &T) -> String {
    toml::to_string(cfg).expect("config serializes to TOML")
}

/// Flattens a TOML table into dotted keys.
fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Keys whose values differ between two configs, as `key: old -> new`
/// lines. Keys in `ignore` are skipped.
pub fn config_diff<T: Serialize>(old: &T, new: &T, ignore: &[&str]) -> Vec<String> {
    let table = |c: &T| {
        let mut m = BTreeMap::new();
        flatten("", &toml::Value::try_from(c).expect("config serializes to TOML"), &mut m);
        m
    };
    let (a, b) = (table(old), table(new));
    let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    let missing = "(unset)".to_string();
    keys.into_iter()
        .filter(|k| !ignore.contains(&k.as_str()))
        .filter_map(|k| {
            let (x, y) = (a.get(k).unwrap_or(&missing), b.get(k).unwrap_or(&missing));
            (x != y).then(|| format!("{k}: {x} -> {y}"))
        })
        .collect()
}

/// A write-once output directory.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Uses `out` when given (it must not exist or be empty), otherwise a
    /// fresh `<root>/<command>-<utc timestamp>-s<seed>` directory.
    pub fn create(out: Option<&Path>, root: &Path, command: &str, seed: u64) -> Result<Self> {
        let path = match out {
            Some(p) => {
                if p.exists() && std::fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(true) {
                    return Err(usage(format!("output directory {} already exists and is not empty", p.display())));
                }
                p.to_path_buf()
            }
            None => {
                let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
                let base = root.join(format!("{command}-{stamp}-s{seed}"));
                let mut p = base.clone();
                let mut n = 1;
                while p.exists() {
                    p = PathBuf::from(format!("{}-{n}", base.display()));
                    n += 1;
                }
                p
            }
        };
        std::fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.file(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        self.write(name, serde_json::to_string_pretty(value)? + "\n")
    }

    /// Persists the resolved configuration next to the outputs.
    pub fn snapshot<T: Serialize>(&self, cfg: &T) -> Result<PathBuf> {
        self.write("config.resolved.toml", to_toml(cfg))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Fails with a usage error when an input file is missing.
pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(usage(format!("{what} path is required")));
    }
    if !path.is_file() {
        return Err(usage(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Default)]
    struct Inner {
        epochs: usize,
        lr: f64,
    }

    #[derive(Serialize, Default)]
    struct Outer {
        seed: u64,
        train: Inner,
    }

    #[test]
    fn diff_lists_changed_keys_only() {
        let a = Outer { seed: 1, train: Inner { epochs: 2, lr: 0.1 } };
        let b = Outer { seed: 1, train: Inner { epochs: 5, lr: 0.2 } };
        assert_eq!(config_diff(&a, &b, &["train.epochs"]), vec!["train.lr: 0.1 -> 0.2".to_string()]);
        assert!(config_diff(&a, &a, &[]).is_empty());
    }

    #[test]
    fn sha_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn explicit_output_must_be_fresh() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("a");
        let run = RunDir::create(Some(&out), tmp.path(), "x", 0).unwrap();
        run.write("f", "1").unwrap();
        assert!(RunDir::create(Some(&out), tmp.path(), "x", 0).is_err());
    }

    #[test]
    fn timestamped_dirs_never_collide() {
        let tmp = tempfile::tempdir().unwrap();
        let a = RunDir::create(None, tmp.path(), "eval", 3).unwrap();
        let b = RunDir::create(None, tmp.path(), "eval", 3).unwrap();
        assert_ne!(a.path, b.path);
        assert!(a.path.file_name().unwrap().to_str().unwrap().starts_with("eval-"));
    }
}
