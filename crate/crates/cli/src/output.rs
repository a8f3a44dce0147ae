//! Hand-rolled JSON/CSV value formatting. Floating-point values print in
//! scientific notation with 17 significant digits, which round-trips f64
//! exactly and keeps output byte-reproducible.

/// 17-significant-digit formatting (round-trip exact).
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        // JSON has no infinities; make failures loud instead
        format!("\"{v}\"")
    }
}

/// Minimal JSON object builder; callers guarantee key uniqueness.
pub struct JsonObject {
    body: String,
}

impl JsonObject {
    pub fn new() -> JsonObject {
        JsonObject { body: String::from("{") }
    }

    fn sep(&mut self) {
        if self.body.len() > 1 {
            self.body.push(',');
        }
    }

    pub fn push_str(&mut self, key: &str, value: &str) {
        self.sep();
        self.body.push_str(&format!("\"{key}\":\"{}\"", escape(value)));
    }

    pub fn push_usize(&mut self, key: &str, value: usize) {
        self.sep();
        self.body.push_str(&format!("\"{key}\":{value}"));
    }

    pub fn push_bool(&mut self, key: &str, value: bool) {
        self.sep();
        self.body.push_str(&format!("\"{key}\":{value}"));
    }

    pub fn push_f64(&mut self, key: &str, value: f64) {
        self.sep();
        self.body.push_str(&format!("\"{key}\":{}", fmt_f64(value)));
    }

    /// Insert a pre-rendered JSON value.
    pub fn push_raw(&mut self, key: &str, value: &str) {
        self.sep();
        self.body.push_str(&format!("\"{key}\":{value}"));
    }

    pub fn finish(mut self) -> String {
        self.body.push('}');
        self.body
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}
