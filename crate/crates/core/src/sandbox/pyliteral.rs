//! A parser for the subset of Python literal syntax used in tool metadata:
//! dicts, lists, tuples, strings (with prefixes, triple quotes and implicit
//! concatenation), numbers, `True`, `False` and `None`.

use serde_json::{Map, Number, Value};

struct Cursor {
    chars: Vec<char>,
    pos: usize,
}

type Result<T> = std::result::Result<T, String>;

/// Parses one literal at the start of `text`; trailing text is ignored.
pub fn parse_prefix(text: &str) -> Result<Value> {
    let mut c = Cursor { chars: text.chars().collect(), pos: 0 };
    c.skip_ws(false);
    c.value()
}

impl Cursor {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn peek_at(&self, offset: usize) -> Option<char> {
        self.chars.get(self.pos + offset).copied()
    }

    fn err<T>(&self, msg: &str) -> Result<T> {
        Err(format!("{msg} at offset {}", self.pos))
    }

    /// Skips spaces and comments; newlines and line continuations only when
    /// `multiline` (inside brackets).
    fn skip_ws(&mut self, multiline: bool) {
        while let Some(ch) = self.peek() {
            match ch {
                ' ' | '\t' | '\r' => self.pos += 1,
                '\n' if multiline => self.pos += 1,
                '\\' if self.peek_at(1) == Some('\n') => self.pos += 2,
                '#' if multiline => {
                    while self.peek().is_some_and(|c| c != '\n') {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn value(&mut self) -> Result<Value> {
        match self.peek() {
            Some('{') => self.dict(),
            Some('[') => self.sequence('[', ']'),
            Some('(') => self.sequence('(', ')'),
            Some(c) if c == '"' || c == '\'' || self.string_prefix_len().is_some() => self.strings(),
            Some(c) if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => self.number(),
            Some(c) if c.is_alphabetic() || c == '_' => {
                let start = self.pos;
                while self.peek().is_some_and(|c| c.is_alphanumeric() || c == '_') {
                    self.pos += 1;
                }
                let word: String = self.chars[start..self.pos].iter().collect();
                match word.as_str() {
                    "True" => Ok(Value::Bool(true)),
                    "False" => Ok(Value::Bool(false)),
                    "None" => Ok(Value::Null),
                    _ => Err(format!("non-literal name `{word}` at offset {start}")),
                }
            }
            Some(_) => self.err("unexpected character"),
            None => self.err("unexpected end of input"),
        }
    }

    fn dict(&mut self) -> Result<Value> {
        self.pos += 1;
        let mut map = Map::new();
        loop {
            self.skip_ws(true);
            if self.peek() == Some('}') {
                self.pos += 1;
                return Ok(Value::Object(map));
            }
            let key = match self.value()? {
                Value::String(s) => s,
                _ => return self.err("dict keys must be strings"),
            };
            self.skip_ws(true);
            if self.peek() != Some(':') {
                return self.err("expected `:`");
            }
            self.pos += 1;
            self.skip_ws(true);
            let value = self.value()?;
            map.insert(key, value);
            self.skip_ws(true);
            match self.peek() {
                Some(',') => self.pos += 1,
                Some('}') => {}
                _ => return self.err("expected `,` or `}`"),
            }
        }
    }

    fn sequence(&mut self, open: char, close: char) -> Result<Value> {
        self.pos += 1;
        let mut items = Vec::new();
        let mut saw_comma = false;
        loop {
            self.skip_ws(true);
            if self.peek() == Some(close) {
                self.pos += 1;
                // `(x)` is a parenthesized value, `(x,)` a tuple.
                if open == '(' && items.len() == 1 && !saw_comma {
                    return Ok(items.pop().expect("one item"));
                }
                return Ok(Value::Array(items));
            }
            items.push(self.value()?);
            self.skip_ws(true);
            match self.peek() {
                Some(',') => {
                    saw_comma = true;
                    self.pos += 1
                }
                Some(c) if c == close => {}
                _ => return self.err(&format!("expected `,` or `{close}`")),
            }
        }
    }

    /// Length of a string prefix such as `r`, `u`, `b` or `rb` if one starts here.
    fn string_prefix_len(&self) -> Option<usize> {
        let mut n = 0;
        while n < 2 && self.peek_at(n).is_some_and(|c| "rRuUbB".contains(c)) {
            n += 1;
        }
        (n > 0 && matches!(self.peek_at(n), Some('"') | Some('\''))).then_some(n)
    }

    fn strings(&mut self) -> Result<Value> {
        let mut out = String::new();
        loop {
            out.push_str(&self.string()?);
            let save = self.pos;
            self.skip_ws(true);
            let more = matches!(self.peek(), Some('"') | Some('\'')) || self.string_prefix_len().is_some();
            if !more {
                self.pos = save;
                return Ok(Value::String(out));
            }
        }
    }

    fn string(&mut self) -> Result<String> {
        let prefix = self.string_prefix_len().unwrap_or(0);
        let raw = self.chars[self.pos..self.pos + prefix].iter().any(|c| *c == 'r' || *c == 'R');
        self.pos += prefix;
        let quote = self.peek().ok_or("unexpected end of input")?;
        let triple = self.peek_at(1) == Some(quote) && self.peek_at(2) == Some(quote);
        self.pos += if triple { 3 } else { 1 };
        let mut out = String::new();
        loop {
            let ch = match self.peek() {
                Some(c) => c,
                None => return self.err("unterminated string"),
            };
            if ch == quote {
                if !triple {
                    self.pos += 1;
                    return Ok(out);
                }
                if self.peek_at(1) == Some(quote) && self.peek_at(2) == Some(quote) {
                    self.pos += 3;
                    return Ok(out);
                }
            }
            if ch == '\n' && !triple {
                return self.err("newline in string");
            }
            if ch == '\\' {
                let next = self.peek_at(1).ok_or("unterminated escape")?;
                self.pos += 2;
                if raw {
                    out.push('\\');
                    out.push(next);
                    continue;
                }
                match next {
                    'n' => out.push('\n'),
                    't' => out.push('\t'),
                    'r' => out.push('\r'),
                    '0' => out.push('\0'),
                    '\n' => {}
                    'u' | 'x' => {
                        let len = if next == 'u' { 4 } else { 2 };
                        let hex: String = self.chars.get(self.pos..self.pos + len).ok_or("short escape")?.iter().collect();
                        let code = u32::from_str_radix(&hex, 16).map_err(|_| format!("bad escape \\{next}{hex}"))?;
                        out.push(char::from_u32(code).ok_or("invalid code point")?);
                        self.pos += len;
                    }
                    other => out.push(other),
                }
                continue;
            }
            out.push(ch);
            self.pos += 1;
        }
    }

    fn number(&mut self) -> Result<Value> {
        let start = self.pos;
        if matches!(self.peek(), Some('-') | Some('+')) {
            self.pos += 1;
        }
        while self.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_') {
            let c = self.peek().expect("checked");
            if (c == 'e' || c == 'E') && matches!(self.peek_at(1), Some('-') | Some('+')) {
                self.pos += 1;
            }
            self.pos += 1;
        }
        let text: String = self.chars[start..self.pos].iter().filter(|c| **c != '_').collect();
        if let Ok(i) = text.parse::<i64>() {
            return Ok(Value::Number(i.into()));
        }
        text.parse::<f64>()
            .ok()
            .and_then(Number::from_f64)
            .map(Value::Number)
            .ok_or_else(|| format!("bad number `{text}` at offset {start}"))
    }
}
