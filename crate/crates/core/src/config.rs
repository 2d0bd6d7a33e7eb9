//! Flat `key = value` configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later layers win:
//! defaults, then a file, then `--set key=value` overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use scorefusion_tensor::PadMode;

use crate::error::{Error, Result};
use crate::net2d::Net2DConfig;
use crate::net3d::{Net3DConfig, Variant};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if map.entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Apply a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("override `{pair}` has an empty key")));
        }
        self.set(k, v.trim());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Set only if absent.
    pub fn set_default(&mut self, key: &str, value: impl Display) {
        self.entries.entry(key.to_string()).or_insert_with(|| value.to_string());
    }

    /// Layer `other` on top of `self`.
    pub fn merge(&mut self, other: &ConfigMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("`{key} = {v}`: {e}")))
            })
            .transpose()
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        self.raw(key).map(|v| parse_list(key, v)).transpose()
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        self.raw(key).map(|v| parse_bool(key, v)).transpose()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn keys_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.keys().filter(move |k| k.starts_with(prefix)).map(String::as_str)
    }

    /// Sorted `key = value` lines; parses back to an equal map.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Keys whose values differ between the two maps, restricted to `prefix`.
    pub fn diff(&self, other: &ConfigMap, prefix: &str) -> Vec<String> {
        let mut keys: Vec<&str> = self.keys_with_prefix(prefix).chain(other.keys_with_prefix(prefix)).collect();
        keys.sort_unstable();
        keys.dedup();
        keys.into_iter()
            .filter(|k| self.raw(k) != other.raw(k))
            .map(|k| format!("{k}: {:?} vs {:?}", self.raw(k), other.raw(k)))
            .collect()
    }
}

pub fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("`{key} = {v}`: {e}")))
        })
        .collect()
}

pub fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key} = {v}`: expected on/off"))),
    }
}

pub fn join_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn pad_mode_str(p: PadMode) -> &'static str {
    match p {
        PadMode::Zero => "zero",
        PadMode::Circular => "circular",
    }
}

pub fn parse_pad_mode(key: &str, v: &str) -> Result<PadMode> {
    match v {
        "zero" => Ok(PadMode::Zero),
        "circular" => Ok(PadMode::Circular),
        _ => Err(Error::Config(format!("`{key} = {v}`: expected zero or circular"))),
    }
}

fn variant_str(v: Variant) -> &'static str {
    match v {
        Variant::Full => "full",
        Variant::Small => "small",
    }
}

pub fn echo_net2d(cfg: &Net2DConfig, map: &mut ConfigMap) {
    map.set("net2d.cond_channels", cfg.cond_channels);
    map.set("net2d.base_channels", cfg.base_channels);
    map.set("net2d.channel_multipliers", join_list(&cfg.channel_multipliers));
    map.set("net2d.resblocks_per_level", cfg.resblocks_per_level);
    map.set("net2d.convs_per_block", cfg.convs_per_block);
    map.set("net2d.time_embed_dim", cfg.time_embed_dim);
    map.set("net2d.zero_head", cfg.zero_head);
    map.set("net2d.pad_mode", pad_mode_str(cfg.pad_mode));
}

/// Missing keys fall back to the reference architecture.
pub fn net2d_from(map: &ConfigMap, cond_channels: usize) -> Result<Net2DConfig> {
    let cond = map.get_or("net2d.cond_channels", cond_channels)?;
    let base = map.get_or("net2d.base_channels", 64usize)?;
    let d = Net2DConfig::with_base(cond, base);
    Ok(Net2DConfig {
        channel_multipliers: map.get_list("net2d.channel_multipliers")?.unwrap_or(d.channel_multipliers),
        resblocks_per_level: map.get_or("net2d.resblocks_per_level", d.resblocks_per_level)?,
        convs_per_block: map.get_or("net2d.convs_per_block", d.convs_per_block)?,
        time_embed_dim: map.get_or("net2d.time_embed_dim", d.time_embed_dim)?,
        zero_head: map.get_bool("net2d.zero_head")?.unwrap_or(false),
        pad_mode: map
            .raw("net2d.pad_mode")
            .map(|v| parse_pad_mode("net2d.pad_mode", v))
            .transpose()?
            .unwrap_or(PadMode::Zero),
        ..d
    })
}

pub fn echo_net3d(cfg: &Net3DConfig, map: &mut ConfigMap) {
    map.set("net3d.variant", variant_str(cfg.variant));
    map.set("net3d.cond_channels", cfg.cond_channels);
    map.set("net3d.branches", cfg.branches);
    map.set("net3d.levels", join_list(&cfg.levels));
    map.set("net3d.resblocks_per_level", cfg.resblocks_per_level);
    map.set("net3d.convs_per_block", cfg.convs_per_block);
    map.set("net3d.time_embed_dim", cfg.time_embed_dim);
    map.set("net3d.feature_injection", cfg.injects());
    map.set("net3d.injection_channels", join_list(&cfg.injection_channels));
    map.set("net3d.lambda", cfg.lambda);
    map.set("net3d.zero_head", cfg.zero_head);
    map.set("net3d.pad_mode", pad_mode_str(cfg.pad_mode));
}

/// `branch_levels` are the per-branch pyramid widths, used when injection is
/// on and `net3d.injection_channels` is absent.
pub fn net3d_from(map: &ConfigMap, cond_channels: usize, branches: usize, branch_levels: &[usize]) -> Result<Net3DConfig> {
    let variant: Variant = map.get_or("net3d.variant", Variant::Full)?;
    let cond = map.get_or("net3d.cond_channels", cond_channels)?;
    let k = map.get_or("net3d.branches", branches)?;
    let mut cfg = match variant {
        Variant::Full => Net3DConfig {
            branches: k,
            ..Net3DConfig::full(cond, branch_levels)
        },
        Variant::Small => Net3DConfig::small(cond, k),
    };
    if let Some(levels) = map.get_list("net3d.levels")? {
        cfg.time_embed_dim = 4 * levels.first().copied().unwrap_or(1);
        cfg.levels = levels;
    }
    cfg.resblocks_per_level = map.get_or("net3d.resblocks_per_level", cfg.resblocks_per_level)?;
    cfg.convs_per_block = map.get_or("net3d.convs_per_block", cfg.convs_per_block)?;
    cfg.time_embed_dim = map.get_or("net3d.time_embed_dim", cfg.time_embed_dim)?;
    cfg.lambda = map.get_or("net3d.lambda", cfg.lambda)?;
    cfg.zero_head = map.get_bool("net3d.zero_head")?.unwrap_or(cfg.zero_head);
    if let Some(v) = map.raw("net3d.pad_mode") {
        cfg.pad_mode = parse_pad_mode("net3d.pad_mode", v)?;
    }
    let inject = map.get_bool("net3d.feature_injection")?.unwrap_or(variant == Variant::Full);
    cfg.injection_channels = if inject {
        match map.get_list("net3d.injection_channels")? {
            Some(c) if !c.is_empty() => c,
            _ => branch_levels.iter().map(|c| k * c).collect(),
        }
    } else {
        Vec::new()
    };
    if cfg.injection_channels.len() > cfg.levels.len() {
        cfg.injection_channels.truncate(cfg.levels.len());
    }
    cfg.validate()?;
    Ok(cfg)
}
