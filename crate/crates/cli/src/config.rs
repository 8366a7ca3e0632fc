//! JSON config files layered under command-line flags, and seed resolution.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

pub const DEFAULT_SEED: u64 = 42;
pub const SEED_ENV: &str = "LWM_SEED";

/// Flag, then config file, then `LWM_SEED`, then [`DEFAULT_SEED`].
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> CliResult<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

/// Reads a config file as a JSON object; no file means no overrides.
pub fn read_config(path: Option<&Path>) -> CliResult<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(CliError::Usage(format!(
            "config {} is not a JSON object",
            path.display()
        ))),
        Err(e) => Err(CliError::Usage(format!("config {}: {e}", path.display()))),
    }
}

/// Rejects top-level keys outside `allowed`.
pub fn check_sections(cfg: &Map<String, Value>, allowed: &[&str]) -> CliResult<()> {
    match cfg.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(CliError::Usage(format!(
            "unknown config key {k:?} (expected one of {allowed:?})"
        ))),
        None => Ok(()),
    }
}

/// Overlays `overrides` on the serialized `base`. Nested objects merge key by
/// key; a single-key object (an enum variant) may be swapped for another.
pub fn merge<T: Serialize + DeserializeOwned>(base: &T, overrides: Option<&Value>, ctx: &str) -> CliResult<T> {
    let mut v = serde_json::to_value(base).map_err(|e| CliError::Usage(format!("{ctx}: {e}")))?;
    if let Some(o) = overrides {
        overlay(&mut v, o, ctx)?;
    }
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("{ctx}: {e}")))
}

fn overlay(base: &mut Value, o: &Value, ctx: &str) -> CliResult<()> {
    match (base, o) {
        (Value::Object(b), Value::Object(o)) => {
            let variant_swap = b.len() == 1 && o.len() == 1 && o.keys().all(|k| !b.contains_key(k));
            if variant_swap {
                *b = o.clone();
                return Ok(());
            }
            for (k, ov) in o {
                let path = format!("{ctx}.{k}");
                match b.get_mut(k) {
                    Some(bv) => overlay(bv, ov, &path)?,
                    None => return Err(CliError::Usage(format!("unknown config key {path}"))),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o.clone();
            Ok(())
        }
    }
}

/// `cfg[path...]` as an unsigned integer, if present.
pub fn u64_at(cfg: &Map<String, Value>, path: &[&str]) -> Option<u64> {
    let (first, rest) = path.split_first()?;
    let mut v = cfg.get(*first)?;
    for k in rest {
        v = v.get(*k)?;
    }
    v.as_u64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use lwm_core::downstream::HeadConfig;
    use lwm_core::model::ModelConfig;
    use serde_json::json;

    #[test]
    fn partial_override_keeps_other_fields() {
        let m: ModelConfig = merge(
            &ModelConfig::full(),
            Some(&json!({"d_model": 32, "layers": 4})),
            "model",
        )
        .unwrap();
        assert_eq!((m.d_model, m.layers, m.heads), (32, 4, 12));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r = merge(&ModelConfig::full(), Some(&json!({"d_modle": 32})), "model");
        assert!(matches!(r, Err(CliError::Usage(_))));
        let top: Map<String, Value> = serde_json::from_value(json!({"model": {}, "trian": {}})).unwrap();
        assert!(check_sections(&top, &["model", "train"]).is_err());
    }

    #[test]
    fn enum_variant_can_be_swapped() {
        let h: HeadConfig = merge(
            &HeadConfig::mlp(),
            Some(&json!({"arch": {"cnn": {"budget": 1000}}, "epochs": 3})),
            "head",
        )
        .unwrap();
        assert_eq!(h.epochs, 3);
        assert_eq!(
            h,
            HeadConfig {
                epochs: 3,
                ..HeadConfig::cnn(1000)
            }
        );
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(1), Some(2)).unwrap(), 1);
        assert_eq!(resolve_seed(None, Some(2)).unwrap(), 2);
        let cfg: Map<String, Value> = serde_json::from_value(json!({"train": {"master_seed": 9}})).unwrap();
        assert_eq!(u64_at(&cfg, &["train", "master_seed"]), Some(9));
        assert_eq!(u64_at(&cfg, &["model", "x"]), None);
    }
}
