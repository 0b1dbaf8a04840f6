//! Layered configuration: defaults < TOML file < `IDSYNTH_*` environment
//! < `--set key=value` flags. Every layer is merged into the serialized
//! defaults, and the result is deserialized once, so unknown keys are
//! rejected no matter which layer introduced them.

use std::path::Path;

use idsynth::pipeline::PipelineConfig;
use toml::{Table, Value};

/// Environment prefix for config overrides; nested keys are joined with
/// `__`, e.g. `IDSYNTH_RL__STEPS=40` sets `rl.steps`.
pub const ENV_PREFIX: &str = "IDSYNTH_";

/// Variables with the prefix that are not config keys.
pub const ENV_RESERVED: [&str; 1] = ["IDSYNTH_LOG"];

/// Tag fields of internally tagged enums. When an override changes the tag
/// the whole table is replaced instead of merged.
const TAGS: [&str; 2] = ["kind", "rule"];

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

pub fn to_table(config: &PipelineConfig) -> Result<Table> {
    Table::try_from(config).map_err(|e| err(format!("cannot serialize config: {e}")))
}

pub fn to_toml(config: &PipelineConfig) -> Result<String> {
    toml::to_string(config).map_err(|e| err(format!("cannot serialize config: {e}")))
}

pub fn from_table(table: Table, origin: &str) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| err(format!("{origin}: {}", e.message().trim())))?;
    cfg.validate().map_err(|e| err(format!("{origin}: {e}")))?;
    Ok(cfg)
}

fn tag_changed(base: &Table, over: &Table) -> bool {
    TAGS.iter()
        .any(|t| matches!((base.get(*t), over.get(*t)), (Some(a), Some(b)) if a != b))
}

/// Deep merge of `over` into `base`.
pub fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) if !tag_changed(b, &o) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c` + value → `{a = {b = {c = value}}}`.
fn nested(path: &str, value: Value) -> Result<Table> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(err(format!("malformed key `{path}`")));
    }
    let mut v = value;
    for p in parts.iter().rev() {
        let mut t = Table::new();
        t.insert(p.to_string(), v);
        v = Value::Table(t);
    }
    match v {
        Value::Table(t) => Ok(t),
        _ => unreachable!(),
    }
}

/// Parses an override value as a TOML literal, falling back to a bare
/// string (so `--set rewards.standardize_scope=per_identity` works).
pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| err(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), parse_value(v)))
}

/// Check that `path` names an existing key of the default config, so a
/// typo fails with the offending key rather than a generic parse error.
fn check_known(defaults: &Table, path: &str, origin: &str) -> Result<()> {
    let mut cur = defaults;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        match cur.get(*p) {
            Some(Value::Table(t)) if i + 1 < parts.len() => cur = t,
            Some(_) if i + 1 == parts.len() => return Ok(()),
            // Optional fields are absent from the serialized defaults.
            None if i + 1 == parts.len() && OPTIONAL_KEYS.contains(&path) => return Ok(()),
            _ => return Err(err(format!("{origin}: unknown config key `{path}`"))),
        }
    }
    Ok(())
}

const OPTIONAL_KEYS: [&str; 1] = ["data.world_seed"];

pub struct Layers<'a> {
    pub file: Option<&'a Path>,
    pub env: Vec<(String, String)>,
    pub sets: &'a [String],
}

pub fn env_overrides() -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = std::env::vars()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && !ENV_RESERVED.contains(&k.as_str()))
        .collect();
    v.sort();
    v
}

pub fn resolve(layers: &Layers) -> Result<PipelineConfig> {
    let defaults = to_table(&PipelineConfig::default())?;
    let mut table = defaults.clone();
    if let Some(path) = layers.file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err(format!("cannot read config file {}: {e}", path.display())))?;
        let file: Table = toml::from_str(&text)
            .map_err(|e| err(format!("config file {}: {}", path.display(), e.message().trim())))?;
        merge(&mut table, file);
        // Validate the file layer on its own so its errors name the file.
        from_table(table.clone(), &format!("config file {}", path.display()))?;
    }
    for (k, v) in &layers.env {
        let key = k[ENV_PREFIX.len()..].to_lowercase().replace("__", ".");
        let origin = format!("environment variable {k}");
        check_known(&defaults, &key, &origin)?;
        merge(&mut table, nested(&key, parse_value(v))?);
    }
    for s in layers.sets {
        let (key, v) = parse_assignment(s)?;
        check_known(&defaults, &key, &format!("--set {s}"))?;
        merge(&mut table, nested(&key, v)?);
    }
    from_table(table, "resolved config")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layers<'a>(sets: &'a [String]) -> Layers<'a> {
        Layers {
            file: None,
            env: Vec::new(),
            sets,
        }
    }

    #[test]
    fn defaults_roundtrip() {
        let cfg = PipelineConfig::default();
        let text = to_toml(&cfg).unwrap();
        let back = from_table(toml::from_str(&text).unwrap(), "t").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn set_overrides_and_types() {
        let sets = vec!["rl.steps=7".to_string(), "data.world_seed=3".to_string()];
        let cfg = resolve(&layers(&sets)).unwrap();
        assert_eq!(cfg.rl.steps, 7);
        assert_eq!(cfg.data.world_seed, Some(3));
    }

    #[test]
    fn unknown_key_rejected() {
        let sets = vec!["rl.stepz=7".to_string()];
        let e = resolve(&layers(&sets)).unwrap_err();
        assert!(e.0.contains("rl.stepz"), "{e}");
    }

    #[test]
    fn flags_beat_env() {
        let sets = vec!["rl.steps=9".to_string()];
        let l = Layers {
            file: None,
            env: vec![("IDSYNTH_RL__STEPS".into(), "5".into())],
            sets: &sets,
        };
        assert_eq!(resolve(&l).unwrap().rl.steps, 9);
        let l = Layers {
            sets: &[],
            ..l
        };
        assert_eq!(resolve(&l).unwrap().rl.steps, 5);
    }

    #[test]
    fn tag_change_replaces_table() {
        let mut base: Table = toml::from_str("[o]\nkind = \"adam\"\nbeta1 = 0.9\n").unwrap();
        let over: Table = toml::from_str("[o]\nkind = \"sgd\"\nmomentum = 0.5\n").unwrap();
        merge(&mut base, over);
        let o = base["o"].as_table().unwrap();
        assert!(o.get("beta1").is_none());
        assert_eq!(o["momentum"].as_float(), Some(0.5));
    }
}
