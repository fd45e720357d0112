//! Line-oriented `key = value` files used for table specs, training
//! config and run reports. Blank lines and `#` comments are ignored;
//! everything after the first `=` belongs to the value.

#[derive(Debug, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct KvError {
    pub line: usize,
    pub msg: String,
}

/// Parses into (key, value) pairs in file order. Duplicate keys are the
/// caller's business: table specs rely on order, flat configs reject them.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, KvError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(KvError {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            });
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(KvError {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        pairs.push((key.to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}
