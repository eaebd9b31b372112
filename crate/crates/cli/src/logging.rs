//! Line-delimited JSON progress events on stderr; stdout stays reserved
//! for command results and machine-readable errors.

use std::io::Write;

pub fn event(stage: &str, what: &str, fields: &[(&str, String)]) {
    let mut obj = serde_json::Map::new();
    obj.insert("stage".into(), stage.into());
    obj.insert("event".into(), what.into());
    for (k, v) in fields {
        obj.insert((*k).to_string(), serde_json::Value::String(v.clone()));
    }
    let line = serde_json::Value::Object(obj);
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}
