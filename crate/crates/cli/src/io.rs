//! Corpus file formats: CSV with header `id,text,label,source` and JSONL
//! with the same keys. Labels are normalized through the alias table on
//! load; malformed rows are reported with their line number and field.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use phishscope_core::corpus::{Corpus, CorpusStyle, EmailRecord, Label, SynthManifest};
use serde::Deserialize;

use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Csv,
    Jsonl,
}

impl CorpusFormat {
    pub fn from_path(path: &Path) -> Result<CorpusFormat> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(CorpusFormat::Csv),
            Some("jsonl") | Some("json") => Ok(CorpusFormat::Jsonl),
            other => Err(CliError::new(
                "corpus",
                "CORPUS_UNKNOWN_FORMAT",
                format!("cannot infer corpus format from extension {other:?}; use --format"),
            )),
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    label: String,
    #[serde(default)]
    source: String,
    #[serde(default)]
    split: Option<phishscope_core::corpus::Split>,
}

fn finish_record(raw: RawRecord, line: usize, default_source: &str) -> Result<EmailRecord> {
    if raw.text.is_empty() {
        return Err(CliError::new(
            "corpus",
            "CORPUS_EMPTY_TEXT",
            format!("line {line}: field 'text' is empty"),
        ));
    }
    let label = Label::parse_alias(&raw.label)
        .map_err(|e| CliError::new(e.module, e.code, format!("line {line}: {}", e.message)))?;
    Ok(EmailRecord {
        id: raw.id,
        text: raw.text,
        label,
        source: if raw.source.is_empty() {
            default_source.to_string()
        } else {
            raw.source
        },
        split: raw.split,
    })
}

/// Loads a corpus file. Record order equals file order; labels are
/// normalized; the corpus invariants (unique ids, non-empty text) are
/// enforced after the parse.
pub fn load_corpus(path: &Path, format: CorpusFormat, name: &str) -> Result<Corpus> {
    let records = match format {
        CorpusFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(true)
                .from_path(path)
                .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
            let mut out = Vec::new();
            for (i, row) in reader.deserialize::<RawRecord>().enumerate() {
                // line 1 is the header
                let line = i + 2;
                let raw = row.map_err(|e| {
                    CliError::new(
                        "corpus",
                        "CORPUS_MALFORMED_ROW",
                        format!("line {line}: {e}"),
                    )
                })?;
                out.push(finish_record(raw, line, name)?);
            }
            out
        }
        CorpusFormat::Jsonl => {
            let file = fs::File::open(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
            let mut out = Vec::new();
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let lineno = i + 1;
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let raw: RawRecord = serde_json::from_str(&line).map_err(|e| {
                    CliError::new(
                        "corpus",
                        "CORPUS_MALFORMED_ROW",
                        format!("line {lineno}: {e}"),
                    )
                })?;
                out.push(finish_record(raw, lineno, name)?);
            }
            out
        }
    };
    Ok(Corpus::new(name, CorpusStyle::External, records)?)
}

/// Writes a corpus as JSONL, one record per line, keys id/text/label/source
/// (+ split when assigned). Stable field order via serde struct order.
pub fn save_corpus_jsonl(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for r in &corpus.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// JSONL export: one serialized item per line.
pub fn save_jsonl<T: serde::Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_synth_manifest(path: &Path) -> Result<SynthManifest> {
    load_json(path)
}

/// Loads one or more corpus files and concatenates them (MIXED when more
/// than one), preserving per-record sources and split tags.
pub fn load_corpora_concat(paths: &[std::path::PathBuf], name: &str) -> Result<Corpus> {
    if paths.is_empty() {
        return Err(CliError::new("cli", "CLI_BAD_ARGS", "at least one --corpus file is required"));
    }
    let mut parts = Vec::new();
    for p in paths {
        let format = CorpusFormat::from_path(p)?;
        let stem = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("corpus")
            .to_string();
        parts.push(load_corpus(p, format, &stem)?);
    }
    if parts.len() == 1 {
        return Ok(parts.pop().unwrap());
    }
    let refs: Vec<&Corpus> = parts.iter().collect();
    Ok(Corpus::concat(name, &refs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use phishscope_core::corpus::Split;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn csv_roundtrip_with_label_normalization() {
        let dir = tmp();
        let path = dir.path().join("c.csv");
        fs::write(
            &path,
            "id,text,label,source\nm1,\"Dear Sir, send money\",spam,enron\nm2,\"lunch at noon?\",ham,enron\nm3,\"ok\",1,\n",
        )
        .unwrap();
        let c = load_corpus(&path, CorpusFormat::Csv, "test").unwrap();
        assert_eq!(c.records.len(), 3);
        assert_eq!(c.records[0].id, "m1");
        assert_eq!(c.records[0].label, Label::Spam);
        assert_eq!(c.records[1].label, Label::Legit);
        assert_eq!(c.records[2].label, Label::Spam);
        assert_eq!(c.records[2].source, "test", "empty source falls back to corpus name");
    }

    #[test]
    fn jsonl_loads_ham_alias_and_keeps_order() {
        let dir = tmp();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"text\":\"x y\",\"label\":\"ham\",\"source\":\"sa\"}\n{\"id\":\"b\",\"text\":\"z\",\"label\":\"SPAM\",\"source\":\"sa\"}\n",
        )
        .unwrap();
        let c = load_corpus(&path, CorpusFormat::Jsonl, "sa").unwrap();
        assert_eq!(c.records[0].label, Label::Legit);
        assert_eq!(c.records[1].label, Label::Spam);
        assert_eq!(c.records[0].id, "a");
    }

    #[test]
    fn malformed_rows_name_the_line() {
        let dir = tmp();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"id\":\"a\",\"text\":\"x\",\"label\":\"ham\"}\nnot json\n").unwrap();
        let err = load_corpus(&path, CorpusFormat::Jsonl, "t").unwrap_err();
        assert_eq!(err.code, "CORPUS_MALFORMED_ROW");
        assert!(err.message.contains("line 2"), "{}", err.message);
    }

    #[test]
    fn unknown_label_lists_accepted_spellings() {
        let dir = tmp();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "id,text,label,source\nm1,hello,junk,x\n").unwrap();
        let err = load_corpus(&path, CorpusFormat::Csv, "t").unwrap_err();
        assert_eq!(err.code, "CORPUS_UNKNOWN_LABEL");
        assert!(err.message.contains("line 2"));
        assert!(err.message.contains("ham"));
    }

    #[test]
    fn empty_text_is_rejected_at_its_line() {
        let dir = tmp();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "id,text,label,source\nm1,,spam,x\n").unwrap();
        let err = load_corpus(&path, CorpusFormat::Csv, "t").unwrap_err();
        assert_eq!(err.code, "CORPUS_EMPTY_TEXT");
        assert!(err.message.contains("line 2"));
    }

    #[test]
    fn jsonl_save_load_preserves_split_tags() {
        let dir = tmp();
        let path = dir.path().join("c.jsonl");
        let corpus = Corpus::new(
            "t",
            CorpusStyle::External,
            vec![EmailRecord {
                id: "a".into(),
                text: "hello".into(),
                label: Label::Spam,
                source: "t".into(),
                split: Some(Split::Test),
            }],
        )
        .unwrap();
        save_corpus_jsonl(&corpus, &path).unwrap();
        let loaded = load_corpus(&path, CorpusFormat::Jsonl, "t").unwrap();
        assert_eq!(loaded.records[0].split, Some(Split::Test));
    }
}
