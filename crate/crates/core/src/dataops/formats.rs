//! JSON-lines dataset files. Every line carries `"v": 1`; spans are inclusive
//! token-index pairs over the whitespace-tokenized text.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::{EntityAnnotation, Sample, Span};
use crate::tokenizer::tokenize;

pub const FORMAT_VERSION: u32 = 1;

/// One (text, entity) question with its answer spans (empty = no answer).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqmrcRecord {
    pub text: String,
    pub entity: String,
    pub spans: Vec<Span>,
}

/// One text with the spans of every entity asked about.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MqmrcRecord {
    pub text: String,
    pub entities: BTreeMap<String, Vec<Span>>,
}

impl SqmrcRecord {
    pub fn validate(&self) -> Result<()> {
        check_spans(&self.text, std::iter::once((&self.entity, &self.spans)))
    }
}

impl MqmrcRecord {
    pub fn validate(&self) -> Result<()> {
        if self.entities.is_empty() {
            return Err(Error::Data("record has no entities".into()));
        }
        check_spans(&self.text, self.entities.iter())
    }

    /// Tokenized sample with entities in name order.
    pub fn to_sample(&self) -> Result<Sample> {
        Sample::new(
            tokenize(&self.text),
            self.entities
                .iter()
                .map(|(k, v)| EntityAnnotation::new(k.clone(), v.clone()))
                .collect(),
        )
    }

    pub fn from_sample(sample: &Sample) -> Self {
        Self {
            text: sample.context_tokens.join(" "),
            entities: sample
                .entities
                .iter()
                .map(|e| (e.name.clone(), e.spans.clone()))
                .collect(),
        }
    }
}

fn check_spans<'a>(
    text: &str,
    entries: impl Iterator<Item = (&'a String, &'a Vec<Span>)>,
) -> Result<()> {
    let tokens = tokenize(text);
    let sample = Sample {
        context_tokens: tokens,
        entities: entries
            .map(|(k, v)| EntityAnnotation::new(k.clone(), v.clone()))
            .collect(),
    };
    sample.validate()
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    v: u32,
    #[serde(flatten)]
    record: T,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, validate: impl Fn(&T) -> Result<()>) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.into(),
            line: i + 1,
            message,
        };
        let rec: Versioned<T> = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.v != FORMAT_VERSION {
            return Err(parse_err(format!("unsupported format version {}", rec.v)));
        }
        validate(&rec.record).map_err(|e| parse_err(e.to_string()))?;
        out.push(rec.record);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize + Clone>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&Versioned {
            v: FORMAT_VERSION,
            record: r.clone(),
        })
        .expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sqmrc(path: &Path) -> Result<Vec<SqmrcRecord>> {
    read_jsonl(path, SqmrcRecord::validate)
}

pub fn read_mqmrc(path: &Path) -> Result<Vec<MqmrcRecord>> {
    read_jsonl(path, MqmrcRecord::validate)
}

pub fn write_sqmrc(path: &Path, records: &[SqmrcRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn write_mqmrc(path: &Path, records: &[MqmrcRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// Reads a multi-question file straight into samples.
pub fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    read_mqmrc(path)?.iter().map(MqmrcRecord::to_sample).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let rec = MqmrcRecord {
            text: "red shirt".into(),
            entities: BTreeMap::from([("color".into(), vec![(0, 0)]), ("size".into(), vec![])]),
        };
        write_mqmrc(&path, std::slice::from_ref(&rec)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "{\"v\":1,\"text\":\"red shirt\",\"entities\":{\"color\":[[0,0]],\"size\":[]}}\n"
        );
        assert_eq!(read_mqmrc(&path).unwrap(), vec![rec]);

        let path = dir.path().join("s.jsonl");
        let rec = SqmrcRecord {
            text: "red shirt".into(),
            entity: "color".into(),
            spans: vec![(0, 0)],
        };
        write_sqmrc(&path, std::slice::from_ref(&rec)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "{\"v\":1,\"text\":\"red shirt\",\"entity\":\"color\",\"spans\":[[0,0]]}\n");
        assert_eq!(read_sqmrc(&path).unwrap(), vec![rec]);
    }

    #[test]
    fn rejects_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        for (body, line) in [
            ("{\"v\":2,\"text\":\"a\",\"entity\":\"x\",\"spans\":[]}\n", 1),
            ("\n{\"v\":1,\"text\":\"a\",\"entity\":\"x\",\"spans\":[[0,1]]}\n", 2),
            ("{\"text\":\"a\",\"entity\":\"x\",\"spans\":[]}\n", 1),
            ("not json\n", 1),
        ] {
            std::fs::write(&path, body).unwrap();
            match read_sqmrc(&path) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{body}"),
                other => panic!("{body}: {other:?}"),
            }
        }
        std::fs::write(&path, "{\"v\":1,\"text\":\"a\",\"entities\":{}}\n").unwrap();
        assert!(read_mqmrc(&path).is_err());
    }
}
