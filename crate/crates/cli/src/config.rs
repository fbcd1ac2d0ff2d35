//! `--config FILE` support: TOML keys become flags inserted right after the
//! subcommand, so anything given on the command line later overrides them.

use std::path::Path;

/// Subcommands whose first positional token is part of the command path.
const NESTED: [&str; 1] = ["index"];
const COMMANDS: [&str; 11] = [
    "embed",
    "index",
    "train",
    "cli-pretrain",
    "predict",
    "evaluate",
    "baseline",
    "rerank-eval",
    "lambda-sweep",
    "gradcheck",
    "synth",
];

fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        }
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(v.to_string());
        }
    }
    None
}

fn scalar(key: &str, v: &toml::Value) -> Result<Option<String>, String> {
    Ok(Some(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(_) => return Ok(None),
        _ => return Err(format!("config key {key:?}: unsupported value {v}")),
    }))
}

/// Flags for one table of config keys, in key order.
pub fn flags_from_toml(text: &str) -> Result<Vec<String>, String> {
    let table: toml::Table = text.parse().map_err(|e| format!("config: {e}"))?;
    let mut out = Vec::new();
    for (key, value) in &table {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            toml::Value::Boolean(true) => out.push(flag),
            toml::Value::Boolean(false) => {}
            toml::Value::Array(items) => {
                for item in items {
                    let s = scalar(key, item)?.ok_or_else(|| format!("config key {key:?}: booleans in arrays"))?;
                    out.extend([flag.clone(), s]);
                }
            }
            other => out.extend([flag, scalar(key, other)?.expect("non-boolean scalar")]),
        }
    }
    Ok(out)
}

/// Returns `argv` with config-file flags spliced in after the subcommand.
pub fn expand(argv: Vec<String>) -> Result<Vec<String>, String> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(Path::new(&path)).map_err(|e| format!("config {path}: {e}"))?;
    let flags = flags_from_toml(&text)?;
    let Some(pos) = argv.iter().position(|a| COMMANDS.contains(&a.as_str())) else {
        return Ok(argv);
    };
    let at = if NESTED.contains(&argv[pos].as_str()) { pos + 2 } else { pos + 1 }.min(argv.len());
    let mut out = argv[..at].to_vec();
    out.extend(flags);
    out.extend_from_slice(&argv[at..]);
    Ok(out)
}
