use std::io::Write;
use std::path::Path;

use super::CorpusError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FastaLoad {
    pub sequences: Vec<String>,
    /// Records that had a header but no sequence lines.
    pub skipped_records: usize,
}

/// Loads a FASTA file into uppercase ACGT fragments.
///
/// Sequence lines of a record are concatenated; any character outside ACGT
/// (after case folding) ends the current fragment. Fragments shorter than
/// `min_fragment` are dropped.
pub fn load_fasta(path: impl AsRef<Path>, min_fragment: usize) -> Result<FastaLoad, CorpusError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    Ok(parse_fasta(&bytes, min_fragment))
}

pub(crate) fn parse_fasta(bytes: &[u8], min_fragment: usize) -> FastaLoad {
    let min_fragment = min_fragment.max(1);
    let mut out = FastaLoad { sequences: Vec::new(), skipped_records: 0 };
    let mut record: Vec<u8> = Vec::new();
    let mut in_record = false;

    let flush = |record: &mut Vec<u8>, out: &mut FastaLoad| {
        if record.is_empty() {
            out.skipped_records += 1;
            return;
        }
        for frag in record.split(|b| !matches!(b, b'A' | b'C' | b'G' | b'T')) {
            if frag.len() >= min_fragment {
                // only ACGT bytes remain, so this is valid ASCII
                out.sequences.push(String::from_utf8(frag.to_vec()).expect("ascii"));
            }
        }
        record.clear();
    };

    for line in bytes.split(|&b| b == b'\n') {
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        if line.first() == Some(&b'>') {
            if in_record {
                flush(&mut record, &mut out);
            }
            in_record = true;
            continue;
        }
        let trimmed: Vec<u8> = line.iter().filter(|b| !b.is_ascii_whitespace()).map(|b| b.to_ascii_uppercase()).collect();
        if trimmed.is_empty() {
            continue;
        }
        in_record = true;
        record.extend_from_slice(&trimmed);
    }
    if in_record {
        flush(&mut record, &mut out);
    }
    out
}

/// Writes sequences as FASTA records named `seq<i>`, 60 bases per line.
pub fn write_fasta(path: impl AsRef<Path>, sequences: &[String]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    for (i, seq) in sequences.iter().enumerate() {
        writeln!(w, ">seq{i}").map_err(io_err)?;
        for chunk in seq.as_bytes().chunks(60) {
            w.write_all(chunk).map_err(io_err)?;
            w.write_all(b"\n").map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}
