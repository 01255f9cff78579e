use std::path::Path;

use super::CorpusError;

/// Reads a UTF-8 text file as blank-line separated documents with internal
/// whitespace collapsed to single spaces. Empty documents are skipped.
pub fn load_text_corpus(path: impl AsRef<Path>) -> Result<Vec<String>, CorpusError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| CorpusError::Encoding { path: path.to_path_buf(), offset: e.valid_up_to() })?;
    Ok(split_documents(text))
}

pub(crate) fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut words: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !words.is_empty() {
                docs.push(words.join(" "));
                words.clear();
            }
        } else {
            words.extend(line.split_whitespace());
        }
    }
    if !words.is_empty() {
        docs.push(words.join(" "));
    }
    docs
}
