//! Declarative `key = value` configuration files.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored. Keys
//! may repeat, the last occurrence wins.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub type KeyValues = BTreeMap<String, String>;

pub fn parse_kv(text: &str, path: &Path) -> Result<KeyValues> {
    let mut out = KeyValues::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected `key = value`, found {line:?}"),
            });
        };
        let key = k.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("invalid key {key:?}"),
            });
        }
        out.insert(key.to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn load_kv(path: impl AsRef<Path>) -> Result<KeyValues> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    parse_kv(&text, path)
}

pub fn render_kv<'a, I>(entries: I) -> String
where
    I: IntoIterator<Item = (&'a String, &'a String)>,
{
    entries
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

/// Parses `kv[key]` if present.
pub fn get<T: std::str::FromStr>(kv: &KeyValues, key: &str) -> Result<Option<T>> {
    match kv.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let kv = parse_kv("# top\na = 1\n\nb=two # trailing\na = 3\n", Path::new("x")).unwrap();
        assert_eq!(kv["a"], "3");
        assert_eq!(kv["b"], "two");
        assert_eq!(get::<u32>(&kv, "a").unwrap(), Some(3));
        assert_eq!(get::<u32>(&kv, "zz").unwrap(), None);
        assert!(get::<u32>(&kv, "b").is_err());
    }

    #[test]
    fn reports_line_numbers() {
        match parse_kv("a = 1\nnonsense\n", Path::new("c.cfg")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn render_round_trip() {
        let kv = parse_kv("x = 1\ny = a b\n", Path::new("x")).unwrap();
        assert_eq!(parse_kv(&render_kv(&kv), Path::new("x")).unwrap(), kv);
    }
}
