//! Flat `key=value` run manifests.

use serde_json::Value;

use crate::Cli;

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        Value::Array(items) => {
            let joined = items
                .iter()
                .map(|i| match i {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(",");
            out.push((prefix.to_string(), joined));
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Null => out.push((prefix.to_string(), String::new())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Every parameter of the invocation, one sorted `key=value` line each,
/// after a leading `subcommand=` line.
pub fn render_manifest(cli: &Cli) -> String {
    let mut pairs = Vec::new();
    let args = serde_json::to_value(&cli.command).expect("arguments serialise");
    flatten("", &args, &mut pairs);
    pairs.push(("out_dir".into(), cli.out_dir.display().to_string()));
    pairs.sort();
    let mut text = format!("subcommand={}\n", cli.command.name());
    for (k, v) in pairs {
        let v = v.replace('\\', "\\\\").replace('\n', "\\n");
        text.push_str(&format!("{k}={v}\n"));
    }
    text
}
