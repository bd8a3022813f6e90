//! Dotted-path config overrides: `--set train.lr0=0.05` patches the JSON
//! before it is deserialized, so flags always win over the file.

use serde_json::Value;

pub fn apply(base_json: &str, sets: &[String]) -> Result<String, String> {
    let mut root: Value =
        serde_json::from_str(base_json).map_err(|e| format!("config is not valid JSON: {e}"))?;
    for s in sets {
        let (path, raw) = s
            .split_once('=')
            .ok_or_else(|| format!("override {s:?} is not KEY=VALUE"))?;
        // bare words like "bilinear" are strings; anything that parses as
        // JSON (numbers, arrays, quoted strings) is taken verbatim
        let value: Value =
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let parts: Vec<&str> = path.split('.').collect();
        let (last, dirs) = parts.split_last().unwrap();
        let mut node = &mut root;
        for part in dirs {
            node = node
                .as_object_mut()
                .ok_or_else(|| format!("override {path:?}: {part:?} is not an object"))?
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
        }
        node.as_object_mut()
            .ok_or_else(|| format!("override {path:?}: {last:?} is not an object"))?
            .insert(last.to_string(), value);
    }
    Ok(root.to_string())
}
