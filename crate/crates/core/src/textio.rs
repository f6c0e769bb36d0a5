//! Small helpers shared by the line-oriented text formats (checkpoints,
//! scenario files, MDP tables, replay logs).

use crate::error::{parse_err, Result};

/// Cursor over the lines of a text document that remembers 1-based line
/// numbers for error reporting. Blank lines and `#` comments are skipped.
pub struct LineCursor<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> LineCursor<'a> {
    pub fn new(text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Self { lines, pos: 0 }
    }

    pub fn next_line(&mut self) -> Result<(usize, &'a str)> {
        let last = self.lines.last().map(|(n, _)| *n).unwrap_or(0);
        let item = self
            .lines
            .get(self.pos)
            .copied()
            .ok_or_else(|| parse_err(last + 1, "unexpected end of input"))?;
        self.pos += 1;
        Ok(item)
    }

    pub fn peek(&self) -> Option<(usize, &'a str)> {
        self.lines.get(self.pos).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.lines.len()
    }

    /// Reads a line of the form `<key>: v0 v1 ...` and returns the values.
    pub fn expect_prefixed(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (n, line) = self.next_line()?;
        let rest = line
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(':'))
            .ok_or_else(|| parse_err(n, format!("expected `{key}:`")))?;
        Ok((n, rest.trim()))
    }
}

pub fn parse_f64s(line_no: usize, s: &str) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| parse_err(line_no, format!("bad number `{tok}`")))
        })
        .collect()
}

pub fn parse_usizes(line_no: usize, s: &str) -> Result<Vec<usize>> {
    s.split_whitespace()
        .map(|tok| {
            tok.parse::<usize>()
                .map_err(|_| parse_err(line_no, format!("bad integer `{tok}`")))
        })
        .collect()
}

/// Formats a float with 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Parses `key = value` lines (with `#` comments) into ordered pairs.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(idx) => &raw[..idx],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(i + 1, "expected `key = value`"))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
