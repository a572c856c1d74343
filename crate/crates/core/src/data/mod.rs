//! Dataset ingestion: manifests, WAV audio, embedding tables and folds.

mod embeddings;
mod folds;
mod wav;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub use embeddings::{load_embeddings, parse_embeddings};
pub use folds::{stratified_kfold, stratify_labels, FoldPlan};
pub use wav::{decode_wav, decode_wav_bytes, encode_wav_f32, encode_wav_pcm16, resample_linear, write_wav_pcm16};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmotionLabel {
    Neutral = 0,
    Happiness = 1,
    Sadness = 2,
    Anger = 3,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 4] = [
        EmotionLabel::Neutral,
        EmotionLabel::Happiness,
        EmotionLabel::Sadness,
        EmotionLabel::Anger,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Happiness => "happiness",
            EmotionLabel::Sadness => "sadness",
            EmotionLabel::Anger => "anger",
        }
    }

    /// Map a raw annotation to one of the four target classes. "excited" is
    /// merged into happiness; anything else outside the four gives `None`.
    pub fn from_raw(raw: &str) -> Option<Self> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "neu" | "neutral" => Some(EmotionLabel::Neutral),
            "hap" | "happy" | "happiness" | "exc" | "excited" | "excitement" => {
                Some(EmotionLabel::Happiness)
            }
            "sad" | "sadness" => Some(EmotionLabel::Sadness),
            "ang" | "angry" | "anger" => Some(EmotionLabel::Anger),
            _ => None,
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_raw(s).ok_or_else(|| Error::invalid(format!("unknown emotion label '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub wav_path: PathBuf,
    pub transcript: String,
    /// The manifest label as written.
    pub raw_label: String,
    /// `raw_label` mapped to a target class, if it is one.
    pub label: Option<EmotionLabel>,
    pub scripted: bool,
    pub annotator_labels: Vec<String>,
    pub session: String,
}

/// Read a line-delimited JSON manifest. Relative `wav_path`s are resolved
/// against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    parse_manifest(&text, base)
}

pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<UtteranceRecord>> {
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line)
            .map_err(|e| Error::parse(line_no, format!("invalid JSON ({e})")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::parse(line_no, "expected a JSON object"))?;
        let string = |field: &str| -> Result<String> {
            match obj.get(field) {
                Some(Value::String(s)) => Ok(s.clone()),
                Some(_) => Err(Error::parse(line_no, format!("{field} must be a string"))),
                None => Err(Error::parse(line_no, format!("{field} missing"))),
            }
        };
        let id = string("id")?;
        let wav = string("wav_path")?;
        if wav.is_empty() {
            return Err(Error::parse(line_no, "wav_path is empty"));
        }
        let transcript = string("transcript")?;
        let raw_label = string("label")?;
        let scripted = match obj.get("scripted") {
            None => false,
            Some(Value::Bool(b)) => *b,
            Some(_) => return Err(Error::parse(line_no, "scripted must be a boolean")),
        };
        let session = match obj.get("session") {
            None => String::new(),
            Some(_) => string("session")?,
        };
        let annotator_labels = match obj.get("annotator_labels") {
            None => vec![raw_label.clone()],
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| {
                    v.as_str().map(str::to_string).ok_or_else(|| {
                        Error::parse(line_no, "annotator_labels must be a list of strings")
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            Some(_) => {
                return Err(Error::parse(
                    line_no,
                    "annotator_labels must be a list of strings",
                ))
            }
        };
        if let Some(first) = seen.insert(id.clone(), line_no) {
            return Err(Error::parse(
                line_no,
                format!("duplicate id '{id}' (first seen at line {first})"),
            ));
        }
        let wav_path = PathBuf::from(&wav);
        let wav_path = if wav_path.is_relative() {
            base_dir.join(wav_path)
        } else {
            wav_path
        };
        records.push(UtteranceRecord {
            id,
            wav_path,
            transcript,
            label: EmotionLabel::from_raw(&raw_label),
            raw_label,
            scripted,
            annotator_labels,
            session,
        });
    }
    Ok(records)
}

/// The target class at least two annotators agree on, if there is a unique
/// most-voted one.
fn majority_label(annotations: &[String]) -> Option<EmotionLabel> {
    let mut votes = [0usize; EmotionLabel::COUNT];
    for raw in annotations {
        if let Some(l) = EmotionLabel::from_raw(raw) {
            votes[l.index()] += 1;
        }
    }
    let best = *votes.iter().max()?;
    if best < 2 || votes.iter().filter(|&&v| v == best).count() > 1 {
        return None;
    }
    EmotionLabel::from_index(votes.iter().position(|&v| v == best)?)
}

/// Keep improvised utterances with annotator agreement on one of the four
/// classes, relabelled with the agreed class.
pub fn filter_records(records: &[UtteranceRecord]) -> Vec<UtteranceRecord> {
    records
        .iter()
        .filter(|r| !r.scripted)
        .filter_map(|r| {
            majority_label(&r.annotator_labels).map(|label| UtteranceRecord {
                label: Some(label),
                ..r.clone()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, label: &str, extra: &str) -> String {
        format!(r#"{{"id":"{id}","wav_path":"{id}.wav","transcript":"hi there","label":"{label}"{extra}}}"#)
    }

    fn record(labels: &[&str], scripted: bool) -> UtteranceRecord {
        UtteranceRecord {
            id: "x".into(),
            wav_path: "x.wav".into(),
            transcript: String::new(),
            raw_label: labels[0].into(),
            label: EmotionLabel::from_raw(labels[0]),
            scripted,
            annotator_labels: labels.iter().map(|s| s.to_string()).collect(),
            session: String::new(),
        }
    }

    #[test]
    fn three_line_manifest() {
        let text = [
            line("a", "ang", ""),
            line("b", "neu", r#","scripted":true,"session":"Ses01""#),
            String::new(),
            line("c", "fru", r#","annotator_labels":["fru","sad","sad"]"#),
        ]
        .join("\n");
        let recs = parse_manifest(&text, Path::new("/data")).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].label, Some(EmotionLabel::Anger));
        assert_eq!(recs[0].annotator_labels, vec!["ang"]);
        assert_eq!(recs[0].wav_path, PathBuf::from("/data/a.wav"));
        assert!(recs[1].scripted);
        assert_eq!(recs[1].session, "Ses01");
        assert_eq!(recs[2].label, None);
    }

    #[test]
    fn missing_label_names_field_and_line() {
        let text = format!(
            "{}\n{}\n",
            line("a", "ang", ""),
            r#"{"id":"b","wav_path":"b.wav","transcript":"t"}"#
        );
        let err = parse_manifest(&text, Path::new("")).unwrap_err();
        assert_eq!(err.to_string(), "label missing at line 2");
    }

    #[test]
    fn duplicate_id_is_named() {
        let text = format!("{}\n{}", line("dup", "ang", ""), line("dup", "sad", ""));
        let err = parse_manifest(&text, Path::new("")).unwrap_err().to_string();
        assert!(err.contains("'dup'") && err.contains("line 2"), "{err}");
    }

    #[test]
    fn bad_json_and_types() {
        assert!(parse_manifest("{not json", Path::new("")).is_err());
        let text = line("a", "ang", r#","scripted":"no""#);
        assert!(parse_manifest(&text, Path::new("")).is_err());
        let text = r#"{"id":"a","wav_path":"","transcript":"","label":"ang"}"#;
        assert!(parse_manifest(text, Path::new("")).is_err());
    }

    #[test]
    fn agreement_rule() {
        let kept = filter_records(&[record(&["ang", "ang", "neu"], false)]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].label, Some(EmotionLabel::Anger));
        assert!(filter_records(&[record(&["ang", "ang", "ang"], true)]).is_empty());
        assert!(filter_records(&[record(&["hap", "sad", "neu"], false)]).is_empty());
        let merged = filter_records(&[record(&["exc", "hap", "fru"], false)]);
        assert_eq!(merged[0].label, Some(EmotionLabel::Happiness));
        assert!(filter_records(&[record(&["fru", "fru", "ang"], false)]).is_empty());
        assert!(filter_records(&[record(&["sad", "sad", "ang", "ang"], false)]).is_empty());
    }

    #[test]
    fn filtering_is_idempotent() {
        let recs = vec![
            record(&["ang", "ang", "neu"], false),
            record(&["exc", "exc"], false),
            record(&["sad"], false),
            record(&["neu", "neu"], true),
        ];
        let once = filter_records(&recs);
        assert_eq!(filter_records(&once), once);
    }

    #[test]
    fn label_parsing() {
        assert_eq!("Excited".parse::<EmotionLabel>().unwrap(), EmotionLabel::Happiness);
        assert!("fru".parse::<EmotionLabel>().is_err());
        for l in EmotionLabel::ALL {
            assert_eq!(EmotionLabel::from_index(l.index()), Some(l));
            assert_eq!(l.name().parse::<EmotionLabel>().unwrap(), l);
        }
    }
}
