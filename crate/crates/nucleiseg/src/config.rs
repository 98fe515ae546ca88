//! Plain-text `key = value` configuration files. Lines starting with `#`
//! and blank lines are ignored. Unknown keys are an error so typos fail
//! loudly instead of silently training with defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::{NetworkConfig, STAGES};
use crate::trainer::TrainConfig;

/// Parsed key → value pairs, with consumption tracking for the unknown-key
/// check.
pub struct KvFile {
    entries: BTreeMap<String, String>,
    consumed: std::cell::RefCell<Vec<String>>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<KvFile> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
        }
        Ok(KvFile {
            entries,
            consumed: std::cell::RefCell::new(Vec::new()),
        })
    }

    pub fn load(path: &Path) -> Result<KvFile> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KvFile::parse(&text)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.consumed.borrow_mut().push(key.to_string());
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`"))),
        }
    }

    /// Comma-separated fixed-length list.
    pub fn get_list<T: FromStr, const N: usize>(&self, key: &str) -> Result<Option<[T; N]>> {
        self.consumed.borrow_mut().push(key.to_string());
        let Some(v) = self.entries.get(key) else { return Ok(None) };
        let parts: Vec<&str> = v.split(',').map(str::trim).collect();
        if parts.len() != N {
            return Err(Error::Config(format!(
                "key `{key}`: expected {N} comma-separated values, got {}",
                parts.len()
            )));
        }
        let mut out = Vec::with_capacity(N);
        for p in parts {
            out.push(
                p.parse()
                    .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{p}`")))?,
            );
        }
        Ok(Some(out.try_into().map_err(|_| Error::Config("list length".into()))?))
    }

    /// Errors if any key in the file was never requested.
    pub fn reject_unknown(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        for key in self.entries.keys() {
            if !consumed.iter().any(|c| c == key) {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        Ok(())
    }
}

fn get_bool_list<const N: usize>(kv: &KvFile, key: &str) -> Result<Option<[bool; N]>> {
    match kv.get_list::<u8, N>(key)? {
        None => Ok(None),
        Some(flags) => {
            let mut out = [false; N];
            for (o, f) in out.iter_mut().zip(flags) {
                *o = match f {
                    0 => false,
                    1 => true,
                    _ => return Err(Error::Config(format!("key `{key}`: flags must be 0 or 1"))),
                };
            }
            Ok(Some(out))
        }
    }
}

/// Reads network settings from a file, starting from `base` defaults.
pub fn network_config_from_file(path: &Path, base: NetworkConfig) -> Result<NetworkConfig> {
    let kv = KvFile::load(path)?;
    let cfg = apply_network_keys(&kv, base)?;
    Ok(cfg)
}

pub fn apply_network_keys(kv: &KvFile, mut cfg: NetworkConfig) -> Result<NetworkConfig> {
    if let Some(v) = kv.get("net.in_channels")? {
        cfg.in_channels = v;
    }
    if let Some(v) = kv.get_list::<usize, STAGES>("net.enc_out")? {
        cfg.enc_out = v;
    }
    if let Some(v) = kv.get_list::<usize, STAGES>("net.enc_mid")? {
        cfg.enc_mid = v;
    }
    if let Some(v) = kv.get_list::<usize, STAGES>("net.heights")? {
        cfg.heights = v;
    }
    if let Some(v) = get_bool_list::<STAGES>(kv, "net.dilated")? {
        cfg.dilated = v;
    }
    if let Some(v) = kv.get("net.attention_reduction")? {
        cfg.attention_reduction = v;
    }
    if let Some(v) = kv.get("net.spatial_kernel")? {
        cfg.spatial_kernel = v;
    }
    if let Some(v) = kv.get("net.seed")? {
        cfg.seed = v;
    }
    Ok(cfg)
}

pub fn apply_train_keys(kv: &KvFile, mut cfg: TrainConfig) -> Result<TrainConfig> {
    if let Some(v) = kv.get("train.lr")? {
        cfg.lr = v;
    }
    if let Some(v) = kv.get("train.momentum")? {
        cfg.momentum = v;
    }
    if let Some(v) = kv.get("train.batch_size")? {
        cfg.batch_size = v;
    }
    if let Some(v) = kv.get("train.epochs")? {
        cfg.epochs = v;
    }
    if let Some(v) = kv.get("train.plateau_factor")? {
        cfg.plateau_factor = v;
    }
    if let Some(v) = kv.get("train.plateau_patience")? {
        cfg.plateau_patience = v;
    }
    if let Some(v) = kv.get("train.seed")? {
        cfg.seed = v;
    }
    if let Some(v) = kv.get("train.mean_bce")? {
        cfg.mean_bce = matches!(v, 1u8);
    }
    if let Some(v) = kv.get("train.weight_mask")? {
        cfg.weights.mask = v;
    }
    if let Some(v) = kv.get("train.weight_edge")? {
        cfg.weights.edge = v;
    }
    if let Some(v) = kv.get_list::<f64, 6>("train.weight_sides")? {
        cfg.weights.side = v;
    }
    if let Some(v) = kv.get("train.checkpoint_every")? {
        cfg.checkpoint_every = v;
    }
    Ok(cfg)
}
