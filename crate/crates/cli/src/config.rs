//! JSON config loading with key checking, plus provenance sidecars.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::Failure;

/// Keys in `given` that the default serialization of the target type does
/// not have, as dotted paths.
fn unknown_keys(reference: &Value, given: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(r), Value::Object(g)) = (reference, given) else {
        return;
    };
    // another variant of a tagged enum; serde checks it
    if r.contains_key("kind") && g.get("kind").is_some_and(|k| Some(k) != r.get("kind")) {
        return;
    }
    for (k, v) in g {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match r.get(k) {
            None => out.push(path),
            Some(rv) => unknown_keys(rv, v, &path, out),
        }
    }
}

/// Parse `text` as `T`, reporting unknown keys and type errors by key path.
pub fn parse_config<T>(text: &str, origin: &str) -> Result<T, Failure>
where
    T: DeserializeOwned + Serialize + Default,
{
    let given: Value = serde_json::from_str(text)
        .map_err(|e| Failure::Validation(format!("{origin}: malformed JSON: {e}")))?;
    let reference = serde_json::to_value(T::default()).expect("defaults serialize");
    let mut unknown = Vec::new();
    unknown_keys(&reference, &given, "", &mut unknown);
    if let Some(k) = unknown.first() {
        return Err(Failure::Validation(format!("{origin}: unknown key `{k}`")));
    }
    parse_value(given, origin)
}

/// Deserialize with type errors reported by key path; no unknown-key check.
pub fn parse_value<T: DeserializeOwned>(given: Value, origin: &str) -> Result<T, Failure> {
    serde_path_to_error::deserialize(given).map_err(|e| {
        Failure::Validation(format!(
            "{origin}: bad value at `{}`: {}",
            e.path(),
            e.inner()
        ))
    })
}

pub fn load_config<T>(path: Option<&Path>) -> Result<T, Failure>
where
    T: DeserializeOwned + Serialize + Default,
{
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Failure::Validation(format!("cannot read config {}: {e}", p.display()))
            })?;
            parse_config(&text, &p.display().to_string())
        }
    }
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    out.with_file_name(name)
}

/// Write `<out>.meta.json` next to an output. Content depends only on the
/// inputs, so reruns produce identical files.
pub fn write_sidecar(
    out: &Path,
    command: &str,
    config_hash: &str,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": config_hash,
        "seed": seed,
    });
    write_text(
        &sidecar_path(out),
        &serde_json::to_string_pretty(&meta).expect("json"),
    )
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, text)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use aidplan::safety::SuiteConfig;

    #[test]
    fn unknown_and_mistyped_keys_are_named() {
        let e = parse_config::<SuiteConfig>(r#"{"count": 3, "sede": 1}"#, "x.json").unwrap_err();
        assert!(e.to_string().contains("`sede`"), "{e}");
        let e = parse_config::<SuiteConfig>(r#"{"carbs": {"lo": 1, "hi": 2, "mid": 3}}"#, "x.json")
            .unwrap_err();
        assert!(e.to_string().contains("`carbs.mid`"), "{e}");
        let e = parse_config::<SuiteConfig>(r#"{"horizon": "long"}"#, "x.json").unwrap_err();
        assert!(e.to_string().contains("`horizon`"), "{e}");
        let ok = parse_config::<SuiteConfig>(r#"{"count": 3}"#, "x.json").unwrap();
        assert_eq!(ok.count, 3);
        assert_eq!(ok.seed, SuiteConfig::default().seed);
    }

    #[test]
    fn sidecar_naming() {
        assert_eq!(
            sidecar_path(Path::new("out/suite.csv")),
            PathBuf::from("out/suite.csv.meta.json")
        );
    }
}
