//! Pulls JSON objects out of free-form model output: code fences,
//! surrounding prose, `//` comments and trailing commas are tolerated.

use serde_json::{Map, Value};

/// Byte spans of top-level `{ ... }` regions with balanced braces, skipping
/// braces inside string literals. An unterminated region runs to the end.
pub fn object_spans(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'{' {
            i += 1;
            continue;
        }
        let start = i;
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        let mut end = None;
        while i < bytes.len() {
            let b = bytes[i];
            if in_str {
                if escaped {
                    escaped = false;
                } else if b == b'\\' {
                    escaped = true;
                } else if b == b'"' {
                    in_str = false;
                }
            } else {
                match b {
                    b'"' => in_str = true,
                    b'{' => depth += 1,
                    b'}' => {
                        depth -= 1;
                        if depth == 0 {
                            end = Some(i + 1);
                            break;
                        }
                    }
                    _ => {}
                }
            }
            i += 1;
        }
        match end {
            Some(e) => {
                spans.push(&text[start..e]);
                i = e;
            }
            None => {
                spans.push(&text[start..]);
                break;
            }
        }
    }
    spans
}

/// Removes `//` line comments outside strings and commas directly before a
/// closing bracket.
fn relax(src: &str) -> String {
    let mut out = String::with_capacity(src.len());
    let mut chars = src.chars().peekable();
    let mut in_str = false;
    let mut escaped = false;
    while let Some(c) = chars.next() {
        if in_str {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            continue;
        }
        match c {
            '"' => {
                in_str = true;
                out.push(c);
            }
            '/' if chars.peek() == Some(&'/') => {
                for n in chars.by_ref() {
                    if n == '\n' {
                        out.push('\n');
                        break;
                    }
                }
            }
            _ => out.push(c),
        }
    }
    // trailing commas
    let mut cleaned = String::with_capacity(out.len());
    let chars: Vec<char> = out.chars().collect();
    let mut in_str = false;
    let mut escaped = false;
    for (idx, &c) in chars.iter().enumerate() {
        if in_str {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            cleaned.push(c);
            continue;
        }
        if c == '"' {
            in_str = true;
        }
        if c == ',' {
            let next = chars[idx + 1..].iter().find(|n| !n.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        cleaned.push(c);
    }
    cleaned
}

/// Parses one object span strictly, then leniently.
pub fn parse_object(span: &str) -> Option<Map<String, Value>> {
    let parsed = serde_json::from_str::<Value>(span).ok().or_else(|| serde_json::from_str::<Value>(&relax(span)).ok());
    match parsed {
        Some(Value::Object(map)) => Some(map),
        _ => None,
    }
}

/// The first top-level JSON object in `text` that parses.
pub fn first_object(text: &str) -> Option<Map<String, Value>> {
    object_spans(text).into_iter().find_map(parse_object)
}

/// The largest top-level JSON object in `text` that parses. Judges
/// occasionally echo a small example object before the real answer.
pub fn outermost_object(text: &str) -> Option<Map<String, Value>> {
    object_spans(text)
        .into_iter()
        .filter_map(|s| parse_object(s).map(|m| (s.len(), m)))
        .max_by_key(|(len, _)| *len)
        .map(|(_, m)| m)
}
