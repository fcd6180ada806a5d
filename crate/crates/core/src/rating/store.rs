//! Append-only newline-delimited log. Each line is `<sha256 hex> <json>`,
//! the digest taken over the JSON bytes; lines are fsynced before an
//! append returns.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::pipeline::types::write_atomic;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Partition {
    pub index: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRecord {
    pub session_id: String,
    pub evaluator_id: String,
    pub seed: u64,
    pub item_order: Vec<String>,
    pub partition: Option<Partition>,
    pub created_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingRecord {
    pub session_id: String,
    pub evaluator_id: String,
    pub item_id: String,
    pub blind_id: String,
    pub rating: u8,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Entry {
    Session(SessionRecord),
    Rating(RatingRecord),
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_line(e: &Entry) -> Result<Vec<u8>> {
    let body = serde_json::to_string(e)?;
    Ok(format!("{} {body}\n", digest(body.as_bytes())).into_bytes())
}

fn decode_line(line: &str) -> std::result::Result<Entry, String> {
    let (sum, body) = line.split_once(' ').ok_or("no checksum field")?;
    if digest(body.as_bytes()) != sum {
        return Err("checksum mismatch".into());
    }
    serde_json::from_str(body).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Recovery {
    pub entries: usize,
    /// Bytes of a torn final line that were cut off.
    pub truncated_bytes: u64,
}

pub struct Store {
    path: PathBuf,
    file: File,
}

impl Store {
    /// Opens or creates the log and returns every intact entry. A final line
    /// that is incomplete or fails its checksum is a torn write and is
    /// truncated; a bad line anywhere else is corruption and an error.
    pub fn open(path: &Path) -> Result<(Self, Vec<Entry>, Recovery)> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(path).at(path)?;
        let mut entries = Vec::new();
        let mut good_end = 0u64;
        let mut torn: Option<(u64, String)> = None;
        {
            let mut reader = BufReader::new(&file);
            let mut offset = 0u64;
            let mut buf = Vec::new();
            loop {
                buf.clear();
                let n = reader.read_until(b'\n', &mut buf).at(path)?;
                if n == 0 {
                    break;
                }
                let start = offset;
                offset += n as u64;
                if let Some((at, why)) = torn.take() {
                    return Err(Error::Stage {
                        stage: "rating store".into(),
                        message: format!("{}: corrupt line at byte {at}: {why}", path.display()),
                    });
                }
                let complete = buf.last() == Some(&b'\n');
                let text = String::from_utf8_lossy(&buf);
                match decode_line(text.trim_end_matches('\n')) {
                    Ok(e) if complete => {
                        entries.push(e);
                        good_end = offset;
                    }
                    Ok(_) => torn = Some((start, "missing newline".into())),
                    Err(why) => torn = Some((start, why)),
                }
            }
        }
        let len = file.metadata().at(path)?.len();
        let truncated_bytes = len - good_end;
        if truncated_bytes > 0 {
            file.set_len(good_end).at(path)?;
            file.sync_all().at(path)?;
        }
        file.seek(SeekFrom::End(0)).at(path)?;
        let rec = Recovery {
            entries: entries.len(),
            truncated_bytes,
        };
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            entries,
            rec,
        ))
    }

    /// Durable once this returns.
    pub fn append(&mut self, e: &Entry) -> Result<()> {
        let line = encode_line(e)?;
        self.file.write_all(&line).at(&self.path)?;
        self.file.sync_data().at(&self.path)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Rewrites the log as exactly `entries`, atomically, and reopens it.
    pub fn compact(&mut self, entries: &[Entry]) -> Result<()> {
        let mut bytes = Vec::new();
        for e in entries {
            bytes.extend(encode_line(e)?);
        }
        write_atomic(&self.path, &bytes)?;
        self.file = OpenOptions::new().read(true).append(true).open(&self.path).at(&self.path)?;
        Ok(())
    }
}

/// Reads a log without repairing it.
pub fn read_entries(path: &Path) -> Result<Vec<Entry>> {
    let text = std::fs::read_to_string(path).at(path)?;
    let mut out = Vec::new();
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    for (i, l) in lines.iter().enumerate() {
        match decode_line(l.trim_end_matches('\n')) {
            Ok(e) if l.ends_with('\n') => out.push(e),
            // A torn tail is ignored, as on open.
            _ if i + 1 == lines.len() => break,
            Ok(_) => unreachable!("only the last piece can lack a newline"),
            Err(why) => {
                return Err(Error::Stage {
                    stage: "rating store".into(),
                    message: format!("{}: corrupt line {}: {why}", path.display(), i + 1),
                })
            }
        }
    }
    Ok(out)
}
