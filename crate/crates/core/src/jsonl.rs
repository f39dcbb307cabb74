//! Line-delimited JSON helpers shared by the trace, score and explanation
//! files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u64 = 1;

#[derive(serde::Deserialize)]
struct VersionProbe {
    format_version: Option<u64>,
}

/// Reads one record per non-blank line, returning each with its 1-based line
/// number. Every line must carry `"format_version": 1`.
pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: path.to_owned(),
            line: line_no,
            message: e.to_string(),
        };
        let probe: VersionProbe = serde_json::from_str(&line).map_err(parse_err)?;
        match probe.format_version {
            Some(FORMAT_VERSION) => {}
            Some(found) => {
                return Err(Error::Version {
                    found,
                    expected: FORMAT_VERSION,
                })
            }
            None => {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line: line_no,
                    message: "missing field `format_version`".into(),
                })
            }
        }
        out.push((line_no, serde_json::from_str(&line).map_err(parse_err)?));
    }
    Ok(out)
}

#[derive(Serialize)]
struct Versioned<'a, T> {
    format_version: u64,
    #[serde(flatten)]
    inner: &'a T,
}

pub fn write<'a, T, I>(path: &Path, records: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_to(BufWriter::new(file), records).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Same line format as [`write`], into any writer.
pub fn write_to<'a, T, I, W>(mut w: W, records: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
    W: Write,
{
    let io = |e| Error::io("<output>", e);
    for record in records {
        serde_json::to_writer(
            &mut w,
            &Versioned {
                format_version: FORMAT_VERSION,
                inner: record,
            },
        )?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Pretty-printed single-object JSON file with a top-level version tag.
pub fn write_object<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(&Versioned {
        format_version: FORMAT_VERSION,
        inner: value,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_object<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let probe: VersionProbe = serde_json::from_str(&text)?;
    match probe.format_version {
        Some(FORMAT_VERSION) => Ok(serde_json::from_str(&text)?),
        Some(found) => Err(Error::Version {
            found,
            expected: FORMAT_VERSION,
        }),
        None => Err(Error::Parse {
            path: path.to_owned(),
            line: 1,
            message: "missing field `format_version`".into(),
        }),
    }
}

/// Serde adapter storing `Vec<bool>` as a JSON array of `0`/`1`.
pub mod bits {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[bool], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|&b| u8::from(b)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        raw.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(D::Error::custom(format!(
                    "binary mask entry must be 0 or 1, got {other}"
                ))),
            })
            .collect()
    }
}
