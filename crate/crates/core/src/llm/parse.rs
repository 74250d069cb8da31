//! Extraction of structured objects from free-form provider replies.

use super::LlmError;
use serde_json::{Map, Value};

/// Extract and parse the first balanced-brace JSON object in `text`.
///
/// Tolerant of leading/trailing prose and of code fences around the object;
/// string literals and escapes inside the object are honored when matching
/// braces. Errors carry the byte offset where extraction or parsing failed.
pub fn parse_structured_block(text: &str) -> Result<Map<String, Value>, LlmError> {
    let bytes = text.as_bytes();
    let start = text.find('{').ok_or(LlmError::Parse {
        offset: text.len(),
        msg: "no object found in reply".into(),
    })?;

    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    let slice = &text[start..=i];
                    let value: Value =
                        serde_json::from_str(slice).map_err(|e| LlmError::Parse {
                            offset: start,
                            msg: e.to_string(),
                        })?;
                    return match value {
                        Value::Object(map) => Ok(map),
                        _ => Err(LlmError::Parse {
                            offset: start,
                            msg: "balanced block is not an object".into(),
                        }),
                    };
                }
            }
            _ => {}
        }
    }
    Err(LlmError::Parse {
        offset: start,
        msg: "unterminated object".into(),
    })
}
