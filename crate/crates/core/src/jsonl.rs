//! JSON Lines reading and writing.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> JsonlError + '_ {
    move |source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Blank lines are skipped.
pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let file = File::open(path).map_err(io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| JsonlError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn to_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("serializable record");
    s.push('\n');
    s
}

pub fn write<T: Serialize>(path: &Path, values: &[T]) -> Result<(), JsonlError> {
    let mut w = BufWriter::new(File::create(path).map_err(io(path))?);
    for v in values {
        w.write_all(to_line(v).as_bytes()).map_err(io(path))?;
    }
    w.flush().map_err(io(path))
}

/// Appends and flushes to disk before returning.
pub fn append<T: Serialize>(path: &Path, values: &[T]) -> Result<(), JsonlError> {
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io(path))?;
    let buf: String = values.iter().map(to_line).collect();
    file.write_all(buf.as_bytes()).map_err(io(path))?;
    file.sync_data().map_err(io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        write(&path, &[1u32, 2]).unwrap();
        append(&path, &[3u32]).unwrap();
        assert_eq!(read::<u32>(&path).unwrap(), vec![1, 2, 3]);
        std::fs::write(&path, "1\n\nnope\n").unwrap();
        assert!(matches!(read::<u32>(&path), Err(JsonlError::Parse { line: 3, .. })));
    }
}
