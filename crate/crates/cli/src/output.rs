//! Artifact rendering. Every file starts with (CSV) or carries (JSON) the tool
//! version and the config hash so that `--verify` can match it to a config.

use serde_json::{json, Value};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Csv { header: Vec<String>, rows: Vec<Vec<String>> },
    Json(Value),
}

/// 17 significant digits, scientific notation.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x:.16e}")
    }
}

pub fn render(artifact: &Artifact, command: &str, hash: &str) -> Vec<u8> {
    match artifact {
        Artifact::Csv { header, rows } => {
            let mut out = format!("# ovfree {VERSION} command={command} config_sha256={hash}\r\n").into_bytes();
            let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
            w.write_record(header).expect("in-memory write");
            for row in rows {
                w.write_record(row).expect("in-memory write");
            }
            out.extend(w.into_inner().expect("in-memory flush"));
            out
        }
        Artifact::Json(result) => {
            let doc = json!({
                "tool": "ovfree",
                "version": VERSION,
                "command": command,
                "config_sha256": hash,
                "result": result,
            });
            let mut out = serde_json::to_vec_pretty(&doc).expect("JSON values always serialize");
            out.push(b'\n');
            out
        }
    }
}

/// The config hash recorded in a rendered artifact.
pub fn embedded_hash(bytes: &[u8]) -> Option<String> {
    let text = std::str::from_utf8(bytes).ok()?;
    if text.starts_with('#') {
        let line = text.lines().next()?;
        return line.split_whitespace().find_map(|t| t.strip_prefix("config_sha256=")).map(str::to_owned);
    }
    let v: Value = serde_json::from_str(text).ok()?;
    v.get("config_sha256")?.as_str().map(str::to_owned)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits() {
        assert_eq!(num(0.1), "1.0000000000000001e-1");
        assert_eq!(num(-2.0), "-2.0000000000000000e0");
    }

    #[test]
    fn hash_round_trips() {
        let csv = render(&Artifact::Csv { header: vec!["a".into()], rows: vec![vec!["1".into()]] }, "fbcs", "abc");
        assert_eq!(embedded_hash(&csv).as_deref(), Some("abc"));
        assert!(String::from_utf8(csv).unwrap().ends_with("a\r\n1\r\n"));
        let js = render(&Artifact::Json(json!({"x": 1})), "killer", "def");
        assert_eq!(embedded_hash(&js).as_deref(), Some("def"));
    }
}
