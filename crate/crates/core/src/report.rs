//! Line-oriented JSON reports. Every float is printed with 12 significant
//! digits so identical runs produce byte-identical, diff-friendly output.

/// A float rendered as `d.ddddddddddde±x`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        return "null".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "\"inf\"".into() } else { "\"-inf\"".into() };
    }
    format!("{v:.11e}")
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

/// Minimal ordered JSON object writer; fields appear in insertion order.
#[derive(Debug, Default)]
pub struct Report {
    fields: Vec<(String, String)>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        let mut r = Self::default();
        r.push_str("command", command);
        r
    }

    pub fn push_str(&mut self, key: &str, value: &str) -> &mut Self {
        self.fields.push((key.into(), format!("\"{}\"", escape(value))));
        self
    }

    pub fn push_f64(&mut self, key: &str, value: f64) -> &mut Self {
        self.fields.push((key.into(), fmt_f64(value)));
        self
    }

    pub fn push_int(&mut self, key: &str, value: i64) -> &mut Self {
        self.fields.push((key.into(), value.to_string()));
        self
    }

    pub fn push_bool(&mut self, key: &str, value: bool) -> &mut Self {
        self.fields.push((key.into(), value.to_string()));
        self
    }

    pub fn push_f64_list(&mut self, key: &str, values: &[f64]) -> &mut Self {
        let body: Vec<String> = values.iter().map(|v| fmt_f64(*v)).collect();
        self.fields.push((key.into(), format!("[{}]", body.join(","))));
        self
    }

    pub fn push_str_list(&mut self, key: &str, values: &[String]) -> &mut Self {
        let body: Vec<String> = values
            .iter()
            .map(|v| format!("\"{}\"", escape(v)))
            .collect();
        self.fields.push((key.into(), format!("[{}]", body.join(","))));
        self
    }

    /// One JSON object on one line.
    pub fn to_line(&self) -> String {
        let body: Vec<String> = self
            .fields
            .iter()
            .map(|(k, v)| format!("\"{}\":{}", escape(k), v))
            .collect();
        format!("{{{}}}", body.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(fmt_f64(1.0), "1.00000000000e0");
        assert_eq!(fmt_f64(-0.25), "-2.50000000000e-1");
        assert_eq!(fmt_f64(12345.6789), "1.23456789000e4");
    }

    #[test]
    fn report_line_is_stable() {
        let mut r = Report::new("bound");
        r.push_str("side", "lower").push_f64("value", 0.5).push_int("order", 2);
        assert_eq!(
            r.to_line(),
            "{\"command\":\"bound\",\"side\":\"lower\",\"value\":5.00000000000e-1,\"order\":2}"
        );
    }

    #[test]
    fn strings_are_escaped() {
        let mut r = Report::new("x");
        r.push_str("msg", "a\"b\\c");
        assert!(r.to_line().contains("a\\\"b\\\\c"));
    }
}
