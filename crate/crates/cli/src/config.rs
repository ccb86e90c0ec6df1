//! Layered run configuration: defaults, then a TOML file, then `DEVGEST_*`
//! environment variables, then `--set` flags.
//!
//! Keys are dotted paths into the training config (`stage1.steps`,
//! `model.ablation.disable_deviation`, ...) plus a `paths.*` section. TOML
//! dotted keys and nested tables are equivalent. Environment variables map
//! `DEVGEST_STAGE1__STEPS` to `stage1.steps`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use devgest::pipeline::TrainConfig;
use serde_json::{Map, Value};

use crate::Failure;

pub const ENV_PREFIX: &str = "DEVGEST_";

/// Path keys accepted next to the training config.
pub const PATH_KEYS: [&str; 4] = ["paths.data", "paths.out", "paths.stage1_ckpt", "paths.stage2_ckpt"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub paths: BTreeMap<String, PathBuf>,
}

impl RunConfig {
    pub fn path(&self, key: &str) -> Option<&Path> {
        self.paths.get(key).map(PathBuf::as_path)
    }
}

/// Where an override came from, for error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    File,
    Env,
    Flag,
}

impl Source {
    fn name(self) -> &'static str {
        match self {
            Source::File => "config file",
            Source::Env => "environment",
            Source::Flag => "--set",
        }
    }
}

fn leaf_paths(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaf_paths(child, &p, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

/// Every accepted key with its default rendering, in sorted order.
pub fn documented_keys() -> Vec<(String, String)> {
    let base = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    let mut keys = Vec::new();
    leaf_paths(&base, "", &mut keys);
    let mut out: Vec<(String, String)> = keys
        .into_iter()
        .map(|k| {
            let v = lookup(&base, &k).map(|v| v.to_string()).unwrap_or_default();
            (k, v)
        })
        .collect();
    out.extend(PATH_KEYS.iter().map(|k| (k.to_string(), "(unset)".to_string())));
    out.sort();
    out
}

fn lookup<'a>(v: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(v, |cur, part| cur.as_object()?.get(part))
}

fn set_leaf(v: &mut Value, key: &str, value: Value) {
    let mut cur = v;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .as_object_mut()
            .and_then(|m| m.get_mut(*part))
            .expect("key validated against the default config");
    }
    if let Some(m) = cur.as_object_mut() {
        m.insert(parts[parts.len() - 1].to_string(), value);
    }
}

fn flatten_toml(t: &toml::Table, prefix: &str, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in t {
        let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(inner) => flatten_toml(inner, &p, out),
            other => out.push((p, other.clone())),
        }
    }
}

/// Parses a scalar written on the command line or in the environment:
/// TOML syntax when it parses (`200`, `true`, `"x"`, `[1, 2]`), otherwise a
/// bare string.
pub fn parse_scalar(text: &str) -> toml::Value {
    match format!("v = {text}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(text.to_string())),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

fn env_key(name: &str) -> Option<String> {
    let rest = name.strip_prefix(ENV_PREFIX)?;
    Some(rest.to_ascii_lowercase().replace("__", "."))
}

/// Builds the run config. Later layers win: file, then environment, then
/// `--set key=value` flags.
pub fn resolve(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    sets: &[String],
) -> Result<RunConfig, Failure> {
    let mut overrides: Vec<(Source, String, toml::Value)> = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Failure::missing(format!("config file {} not found", path.display()))
            } else {
                Failure::runtime(format!("reading {}: {e}", path.display()))
            }
        })?;
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Failure::config(format!("{}: {}", path.display(), e.message())))?;
        let mut flat = Vec::new();
        flatten_toml(&table, "", &mut flat);
        overrides.extend(flat.into_iter().map(|(k, v)| (Source::File, k, v)));
    }
    let mut env: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env.sort();
    for (name, value) in env {
        let key = env_key(&name).expect("prefix checked");
        overrides.push((Source::Env, key, parse_scalar(&value)));
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::config(format!("--set expects key=value, got `{s}`")))?;
        overrides.push((Source::Flag, k.trim().to_string(), parse_scalar(v.trim())));
    }

    let mut value = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    let mut keys = Vec::new();
    leaf_paths(&value, "", &mut keys);
    let mut paths = BTreeMap::new();
    for (src, key, v) in overrides {
        if PATH_KEYS.contains(&key.as_str()) {
            let s = v
                .as_str()
                .ok_or_else(|| Failure::config(format!("{key} from {} must be a string", src.name())))?;
            paths.insert(key, PathBuf::from(s));
            continue;
        }
        if !keys.iter().any(|k| *k == key) {
            return Err(Failure::config(format!("unknown config key `{key}` (from {})", src.name())));
        }
        let json = serde_json::to_value(&v).map_err(|e| Failure::config(format!("{key}: {e}")))?;
        set_leaf(&mut value, &key, json);
    }
    let train: TrainConfig =
        serde_json::from_value(value).map_err(|e| Failure::config(format!("invalid config value: {e}")))?;
    train.validate().map_err(|e| Failure::config(e.to_string()))?;
    Ok(RunConfig { train, paths })
}

/// Pretty JSON of the resolved training config.
pub fn render(cfg: &TrainConfig) -> String {
    let v = serde_json::to_value(cfg).unwrap_or(Value::Object(Map::new()));
    serde_json::to_string_pretty(&v).unwrap_or_default() + "\n"
}
