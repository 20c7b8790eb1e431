//! Flat "key = value" configuration files shared by the train and pipeline
//! commands. Unknown keys are errors; `profile` applies named defaults that
//! explicit keys then override.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Every key any stage understands. Kept sorted for the canonical dump.
pub const KNOWN_KEYS: &[&str] = &[
    "activation",
    "adam_eps",
    "alpha",
    "batch_size",
    "beta",
    "beta1",
    "beta2",
    "diffusion_iters",
    "diffusion_mode",
    "diffusion_norm",
    "diffusion_tol",
    "eval_task",
    "exact_guard",
    "features",
    "gamma",
    "graph",
    "hidden_dim",
    "improvement_threshold",
    "infer_chunk",
    "kmeans_restarts",
    "labels",
    "lr",
    "max_epochs",
    "normalize_features",
    "out_dir",
    "p_ed",
    "p_nfd",
    "patience",
    "probe_l2",
    "probe_max_iters",
    "profile",
    "register_k",
    "sample_size",
    "scheme",
    "seed",
    "sparsify_eps",
    "sparsify_top",
    "splits",
    "teleport",
    "weight_decay",
    "workers",
];

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    map: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse_str(text: &str, origin: &str) -> Result<ConfigFile> {
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: idx + 1,
                    msg: "expected 'key = value'".into(),
                });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "{origin} line {}: unknown key '{key}'",
                    idx + 1
                )));
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!(
                    "{origin} line {}: duplicate key '{key}'",
                    idx + 1
                )));
            }
        }
        Ok(ConfigFile { map })
    }

    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse_str(&text, &path.display().to_string())
    }

    /// Applies a named profile underneath the explicit keys.
    pub fn with_profile_defaults(mut self, defaults: &[(&str, &str)]) -> ConfigFile {
        for (k, v) in defaults {
            self.map
                .entry(k.to_string())
                .or_insert_with(|| v.to_string());
        }
        self
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        debug_assert!(KNOWN_KEYS.contains(&key), "unknown config key {key}");
        self.map.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("key '{key}': bad number '{v}': {e}"))),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("key '{key}': bad integer '{v}': {e}"))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("key '{key}': bad integer '{v}': {e}"))),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("on") => Ok(true),
            Some("false") | Some("0") | Some("off") => Ok(false),
            Some(v) => Err(Error::Config(format!("key '{key}': bad boolean '{v}'"))),
        }
    }

    /// Sorted `key = value` dump; the basis of the config hash.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }
}
