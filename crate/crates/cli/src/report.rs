//! Line-oriented reports: one record per line, `kind key=value ...`.
//!
//! Values containing whitespace, `"` or `=` are double-quoted with `\"` and
//! `\\` escapes. Fields whose key starts with `time_` carry wall-clock
//! measurements and are the only fields allowed to differ between reruns.

use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub kind: String,
    pub fields: Vec<(String, String)>,
}

impl Record {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            fields: Vec::new(),
        }
    }

    pub fn field(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// The record without its `time_*` fields.
    pub fn without_timings(&self) -> Self {
        Self {
            kind: self.kind.clone(),
            fields: self.fields.iter().filter(|(k, _)| !k.starts_with("time_")).cloned().collect(),
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.fields.iter().cloned().collect()
    }
}

fn needs_quotes(v: &str) -> bool {
    v.is_empty() || v.chars().any(|c| c.is_whitespace() || c == '"' || c == '=' || c == '\\')
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.kind)?;
        for (k, v) in &self.fields {
            if needs_quotes(v) {
                let esc = v.replace('\\', "\\\\").replace('"', "\\\"");
                write!(f, " {k}=\"{esc}\"")?;
            } else {
                write!(f, " {k}={v}")?;
            }
        }
        Ok(())
    }
}

/// Parses one line written by [`Record`]'s `Display`.
pub fn parse_record(line: &str) -> Option<Record> {
    let mut chars = line.trim().chars().peekable();
    let mut kind = String::new();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            break;
        }
        kind.push(c);
        chars.next();
    }
    if kind.is_empty() {
        return None;
    }
    let mut rec = Record::new(&kind);
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            return Some(rec);
        }
        let mut key = String::new();
        for c in chars.by_ref() {
            if c == '=' {
                break;
            }
            key.push(c);
        }
        let mut value = String::new();
        if chars.peek() == Some(&'"') {
            chars.next();
            let mut closed = false;
            while let Some(c) = chars.next() {
                match c {
                    '\\' => value.push(chars.next()?),
                    '"' => {
                        closed = true;
                        break;
                    }
                    c => value.push(c),
                }
            }
            if !closed {
                return None;
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                value.push(c);
                chars.next();
            }
        }
        if key.is_empty() {
            return None;
        }
        rec.fields.push((key, value));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_quoting() {
        let r = Record::new("check")
            .field("id", 3)
            .field("name", "streaming equals naive")
            .field("detail", "a=\"b\" \\ c")
            .field("empty", "");
        let line = r.to_string();
        assert_eq!(parse_record(&line).unwrap(), r);
    }

    #[test]
    fn timings_are_stripped() {
        let r = Record::new("bench").field("n", 4).field("time_median_ns", 17);
        assert_eq!(r.without_timings().to_string(), "bench n=4");
    }

    #[test]
    fn unterminated_quote_is_rejected() {
        assert!(parse_record("x a=\"open").is_none());
    }
}
