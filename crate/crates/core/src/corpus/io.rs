use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, Document, Split};
use crate::error::{CuratorError, Result};

/// One line of a corpus file. Field order is alphabetical so the writer
/// emits sorted keys.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    domain: String,
    id: String,
    split: Split,
    text: String,
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let file = fs::File::open(path)?;
    read_corpus(file)
}

/// Parses JSON-Lines records. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn read_corpus(reader: impl Read) -> Result<Corpus> {
    let mut documents = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| CuratorError::Record {
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(CuratorError::DuplicateId {
                line: line_no,
                id: record.id,
            });
        }
        documents.push(Document::new(
            record.id,
            record.text,
            record.domain,
            record.split,
        ));
    }
    Ok(Corpus::new(documents))
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    write_corpus(corpus, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn write_corpus(corpus: &Corpus, mut out: impl Write) -> Result<()> {
    for doc in &corpus.documents {
        let record = Record {
            domain: doc.domain.clone(),
            id: doc.id.clone(),
            split: doc.split,
            text: doc.text.clone(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
