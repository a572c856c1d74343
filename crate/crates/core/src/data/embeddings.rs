//! Word-vector tables in the plain-text word2vec format.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::featurize::EmbeddingTable;

pub fn load_embeddings(path: &Path, dim: usize) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(BufReader::new(file), dim)
}

/// One `token v1 … v_dim` line per word, optionally preceded by a
/// `vocab_count dim` header. Later duplicates replace earlier ones.
pub fn parse_embeddings<R: BufRead>(reader: R, dim: usize) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::new(dim);
    let mut duplicates = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::parse(line_no, format!("unreadable line ({e})")))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if line_no == 1 && values.len() == 1 {
            if let (Ok(_), Ok(d)) = (token.parse::<usize>(), values[0].parse::<usize>()) {
                if d != dim {
                    return Err(Error::parse(
                        line_no,
                        format!("header declares dimension {d}, expected {dim}"),
                    ));
                }
                continue;
            }
        }
        if values.len() != dim {
            return Err(Error::parse(
                line_no,
                format!("expected {dim} values for '{token}', got {}", values.len()),
            ));
        }
        let vector = values
            .iter()
            .map(|v| v.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(line_no, format!("bad number for '{token}' ({e})")))?;
        if table
            .insert(token, vector)
            .map_err(|e| Error::parse(line_no, e.to_string()))?
        {
            warn!("embedding for '{token}' redefined at line {line_no}; keeping the later one");
            duplicates += 1;
        }
    }
    if duplicates > 0 {
        warn!("{duplicates} duplicate embedding tokens replaced");
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(token: &str, n: usize, v: f32) -> String {
        let mut s = token.to_string();
        for _ in 0..n {
            s.push_str(&format!(" {v}"));
        }
        s
    }

    #[test]
    fn header_and_two_tokens() {
        let text = format!("2 300\n{}\n{}\n", row("happy", 300, 0.25), row("sad", 300, -1.5));
        let t = parse_embeddings(text.as_bytes(), 300).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("happy").unwrap(), &[0.25f32; 300][..]);
        assert_eq!(t.get("sad").unwrap()[299], -1.5);
    }

    #[test]
    fn ragged_line_reports_line_number() {
        let text = format!("{}\n{}\n", row("a", 300, 1.0), row("b", 299, 1.0));
        let err = parse_embeddings(text.as_bytes(), 300).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn header_dimension_must_match() {
        let text = format!("1 50\n{}\n", row("a", 50, 1.0));
        assert!(parse_embeddings(text.as_bytes(), 300).is_err());
        assert_eq!(parse_embeddings(text.as_bytes(), 50).unwrap().len(), 1);
    }

    #[test]
    fn last_duplicate_wins() {
        let text = format!("{}\n{}\n", row("a", 3, 1.0), row("a", 3, 2.0));
        let t = parse_embeddings(text.as_bytes(), 3).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.get("a").unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn bad_number_is_an_error() {
        assert!(parse_embeddings("a 1 x 3\n".as_bytes(), 3).is_err());
        assert!(parse_embeddings("a 1 nan 3\n".as_bytes(), 3).is_err());
    }
}
