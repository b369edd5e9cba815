//! Line-delimited JSON events on stderr.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use serde_json::{json, Value};

fn start() -> &'static Instant {
    static START: OnceLock<Instant> = OnceLock::new();
    START.get_or_init(Instant::now)
}

pub fn init() {
    start();
}

/// Writes `{"event": .., "elapsed_ms": .., ..fields}`.
pub fn event(name: &str, fields: Value) {
    let mut obj = json!({ "event": name, "elapsed_ms": start().elapsed().as_millis() as u64 });
    if let (Some(o), Value::Object(f)) = (obj.as_object_mut(), fields) {
        o.extend(f);
    }
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{obj}");
}
