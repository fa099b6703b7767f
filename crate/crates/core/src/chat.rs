//! Chat messages and the append-only monitoring journal.
//!
//! Journal files are named `journal-YYYY-MM-DD.log` (UTC day of the server
//! receive time). Each line is
//! `seq \t ISO-8601 received-at \t from \t to \t base64(body)`.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::UtcMillis;

pub const MAX_CHAT_BODY: usize = 8 * 1024;

#[derive(Debug, Error)]
pub enum ChatError {
    #[error("chat body exceeds {MAX_CHAT_BODY} bytes")]
    BodyTooLarge,
    #[error("malformed journal line {line} in {file}")]
    CorruptJournal { file: String, line: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub message_id: u64,
    pub from: String,
    pub to: String,
    pub sent_at: UtcMillis,
    pub body: String,
}

pub fn check_body(body: &str) -> Result<(), ChatError> {
    if body.len() > MAX_CHAT_BODY {
        return Err(ChatError::BodyTooLarge);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub received_at: UtcMillis,
    pub from: String,
    pub to: String,
    pub body: String,
}

impl JournalEntry {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\n",
            self.seq,
            self.received_at.to_iso8601(),
            self.from,
            self.to,
            B64.encode(self.body.as_bytes())
        )
    }

    pub fn parse_line(line: &str) -> Option<Self> {
        let mut parts = line.trim_end_matches('\n').split('\t');
        let seq = parts.next()?.parse().ok()?;
        let received_at = UtcMillis::parse_iso8601(parts.next()?)?;
        let from = parts.next()?.to_string();
        let to = parts.next()?.to_string();
        let body = String::from_utf8(B64.decode(parts.next()?).ok()?).ok()?;
        if parts.next().is_some() {
            return None;
        }
        Some(Self {
            seq,
            received_at,
            from,
            to,
            body,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalFilter {
    pub user: Option<String>,
    pub since: Option<UtcMillis>,
    pub until: Option<UtcMillis>,
    pub substring: Option<String>,
}

impl JournalFilter {
    pub fn matches(&self, e: &JournalEntry) -> bool {
        self.user.as_ref().is_none_or(|u| e.from == *u || e.to == *u)
            && self.since.is_none_or(|t| e.received_at >= t)
            && self.until.is_none_or(|t| e.received_at <= t)
            && self.substring.as_ref().is_none_or(|s| e.body.contains(s.as_str()))
    }
}

/// Single-writer journal. `append` returns only after the line is on disk.
#[derive(Debug)]
pub struct Journal {
    dir: PathBuf,
    next_seq: u64,
    current: Option<(String, File)>,
}

fn file_name(day: &str) -> String {
    format!("journal-{day}.log")
}

impl Journal {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ChatError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut last = 0;
        for path in Self::files(&dir)? {
            Self::repair_tail(&path)?;
            for e in Self::read_file(&path)? {
                last = last.max(e.seq);
            }
        }
        Ok(Self {
            dir,
            next_seq: last + 1,
            current: None,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    fn files(dir: &Path) -> io::Result<Vec<PathBuf>> {
        let mut out: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("journal-") && n.ends_with(".log"))
            })
            .collect();
        // ISO dates sort lexicographically
        out.sort();
        Ok(out)
    }

    /// Cuts a partial last line left by a crash mid-write.
    fn repair_tail(path: &Path) -> io::Result<()> {
        let bytes = fs::read(path)?;
        if bytes.is_empty() || bytes.ends_with(b"\n") {
            return Ok(());
        }
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        tracing::warn!(path = %path.display(), dropped = bytes.len() - keep, "truncating partial journal line");
        OpenOptions::new().write(true).open(path)?.set_len(keep as u64)
    }

    fn read_file(path: &Path) -> Result<Vec<JournalEntry>, ChatError> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let entry = JournalEntry::parse_line(&line).ok_or_else(|| ChatError::CorruptJournal {
                file: path.display().to_string(),
                line: i + 1,
            })?;
            out.push(entry);
        }
        Ok(out)
    }

    pub fn append(&mut self, received_at: UtcMillis, from: &str, to: &str, body: &str) -> Result<JournalEntry, ChatError> {
        let entry = JournalEntry {
            seq: self.next_seq,
            received_at,
            from: from.to_string(),
            to: to.to_string(),
            body: body.to_string(),
        };
        let day = received_at.utc_date();
        if self.current.as_ref().is_none_or(|(d, _)| *d != day) {
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(self.dir.join(file_name(&day)))?;
            self.current = Some((day, f));
        }
        let (_, f) = self.current.as_mut().expect("opened above");
        f.write_all(entry.to_line().as_bytes())?;
        f.sync_data()?;
        self.next_seq += 1;
        Ok(entry)
    }

    pub fn query(&self, filter: &JournalFilter) -> Result<Vec<JournalEntry>, ChatError> {
        query_dir(&self.dir, filter)
    }
}

/// Reads every journal file in `dir` in sequence order.
pub fn query_dir(dir: &Path, filter: &JournalFilter) -> Result<Vec<JournalEntry>, ChatError> {
    let mut out = Vec::new();
    for path in Journal::files(dir)? {
        out.extend(Journal::read_file(&path)?.into_iter().filter(|e| filter.matches(e)));
    }
    out.sort_by_key(|e| e.seq);
    Ok(out)
}
