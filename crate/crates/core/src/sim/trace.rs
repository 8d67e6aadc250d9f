use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub t_ms: u64,
    pub node: String,
    pub kind: String,
    pub detail: Value,
}

impl TraceRecord {
    /// One canonical JSON line (no trailing newline).
    pub fn to_json_line(&self) -> String {
        crate::canonical::to_string(self).expect("trace record serializes")
    }

    /// Every key of `want` is present in the detail with an equal value.
    pub fn detail_matches(&self, want: &Map<String, Value>) -> bool {
        let Value::Object(have) = &self.detail else { return want.is_empty() };
        want.iter().all(|(k, v)| have.get(k) == Some(v))
    }
}

pub fn to_jsonl(trace: &[TraceRecord]) -> String {
    let mut s = String::new();
    for r in trace {
        s.push_str(&r.to_json_line());
        s.push('\n');
    }
    s
}
