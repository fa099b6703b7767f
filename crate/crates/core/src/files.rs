//! File manifests, the extension blocklist, chunk framing and reassembly.

use std::collections::BTreeSet;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Sha256Stream, DIGEST_LEN};

pub const CHUNK_SIZE: usize = 64 * 1024;
pub const RELAY_WINDOW_CHUNKS: usize = 16;
pub const RELAY_WINDOW_BYTES: usize = RELAY_WINDOW_CHUNKS * CHUNK_SIZE;
pub const DEFAULT_MAX_FILE_BYTES: u64 = 100 * 1024 * 1024;
pub const CHUNK_HEADER_LEN: usize = 13;
pub const FLAG_FINAL: u8 = 0x01;

#[derive(Debug, Error)]
pub enum FileError {
    #[error("blocked file extension")]
    BlockedExtension,
    #[error("file of {size} bytes exceeds limit of {max}")]
    FileTooLarge { size: u64, max: u64 },
    #[error("invalid file name")]
    InvalidName,
    #[error("digest mismatch")]
    DigestMismatch,
    #[error("peer disconnected")]
    PeerDisconnected,
    #[error("unknown transfer")]
    UnknownTransfer,
    #[error("malformed chunk: {0}")]
    Malformed(&'static str),
    #[error("chunk {got} arrived, expected {expected}")]
    OutOfOrder { expected: u32, got: u32 },
    #[error("size mismatch: manifest {expected}, received {got}")]
    SizeMismatch { expected: u64, got: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Reduces any client-supplied name to its last path component.
pub fn sanitize_filename(raw: &str) -> Result<String, FileError> {
    let last = raw.rsplit(['/', '\\']).next().unwrap_or("");
    let cleaned: String = last.chars().filter(|c| !c.is_control()).collect();
    let trimmed = cleaned.trim();
    if trimmed.is_empty() || trimmed == "." || trimmed == ".." || trimmed.len() > 255 {
        return Err(FileError::InvalidName);
    }
    Ok(trimmed.to_string())
}

/// Case-insensitive extension blocklist.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blocklist(BTreeSet<String>);

impl Default for Blocklist {
    fn default() -> Self {
        Self::new(["exe"])
    }
}

impl Blocklist {
    pub fn new<S: AsRef<str>>(exts: impl IntoIterator<Item = S>) -> Self {
        Self(
            exts.into_iter()
                .map(|e| e.as_ref().trim_start_matches('.').to_ascii_lowercase())
                .filter(|e| !e.is_empty())
                .collect(),
        )
    }

    pub fn extensions(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn is_blocked(&self, filename: &str) -> bool {
        // Windows ignores trailing dots and spaces, so "x.exe. " is still x.exe
        let name = filename.trim_end_matches(['.', ' ']);
        match name.rsplit_once('.') {
            Some((_, ext)) => self.0.contains(&ext.to_lowercase()),
            None => false,
        }
    }

    pub fn check(&self, filename: &str) -> Result<(), FileError> {
        if self.is_blocked(filename) {
            Err(FileError::BlockedExtension)
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileManifest {
    pub transfer_id: u64,
    pub filename: String,
    pub size: u64,
    #[serde(with = "hex_digest")]
    pub digest: [u8; DIGEST_LEN],
    pub chunk_size: u32,
}

impl FileManifest {
    pub fn chunk_count(&self) -> u32 {
        chunk_count(self.size, self.chunk_size as usize)
    }

    /// Checks name, extension and size, replacing the name with its
    /// sanitized form.
    pub fn validate(&mut self, blocklist: &Blocklist, max_size: u64) -> Result<(), FileError> {
        self.filename = sanitize_filename(&self.filename)?;
        blocklist.check(&self.filename)?;
        if self.size > max_size {
            return Err(FileError::FileTooLarge {
                size: self.size,
                max: max_size,
            });
        }
        if self.chunk_size == 0 || self.chunk_size as usize > CHUNK_SIZE {
            return Err(FileError::Malformed("chunk size"));
        }
        Ok(())
    }
}

pub fn chunk_count(size: u64, chunk_size: usize) -> u32 {
    size.div_ceil(chunk_size as u64) as u32
}

/// Hashes a reader to completion, returning (size, digest).
pub fn digest_reader(mut r: impl Read) -> io::Result<(u64, [u8; DIGEST_LEN])> {
    let mut h = Sha256Stream::default();
    let mut buf = vec![0u8; CHUNK_SIZE];
    let mut total = 0u64;
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            return Ok((total, h.finish()));
        }
        total += n as u64;
        h.update(&buf[..n]);
    }
}

/// One `FILE_CHUNK` body: transfer id, index, flags, payload. The final
/// chunk carries the whole-file digest as its payload and the data chunk
/// count as its index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileChunk {
    pub transfer_id: u64,
    pub index: u32,
    pub flags: u8,
    pub payload: Vec<u8>,
}

impl FileChunk {
    pub fn data(transfer_id: u64, index: u32, payload: Vec<u8>) -> Self {
        Self {
            transfer_id,
            index,
            flags: 0,
            payload,
        }
    }

    pub fn last(transfer_id: u64, chunks: u32, digest: [u8; DIGEST_LEN]) -> Self {
        Self {
            transfer_id,
            index: chunks,
            flags: FLAG_FINAL,
            payload: digest.to_vec(),
        }
    }

    pub fn is_final(&self) -> bool {
        self.flags & FLAG_FINAL != 0
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CHUNK_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.transfer_id.to_be_bytes());
        out.extend_from_slice(&self.index.to_be_bytes());
        out.push(self.flags);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FileError> {
        if bytes.len() < CHUNK_HEADER_LEN {
            return Err(FileError::Malformed("short chunk header"));
        }
        let chunk = Self {
            transfer_id: u64::from_be_bytes(bytes[0..8].try_into().expect("8 bytes")),
            index: u32::from_be_bytes(bytes[8..12].try_into().expect("4 bytes")),
            flags: bytes[12],
            payload: bytes[CHUNK_HEADER_LEN..].to_vec(),
        };
        if chunk.flags & !FLAG_FINAL != 0 {
            return Err(FileError::Malformed("unknown chunk flags"));
        }
        if chunk.is_final() && chunk.payload.len() != DIGEST_LEN {
            return Err(FileError::Malformed("final chunk must carry a digest"));
        }
        if chunk.payload.len() > CHUNK_SIZE {
            return Err(FileError::Malformed("chunk payload too large"));
        }
        Ok(chunk)
    }

    /// Transfer id without decoding the rest; used by relays.
    pub fn peek_transfer_id(bytes: &[u8]) -> Option<u64> {
        bytes.get(0..8).map(|b| u64::from_be_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Splits a reader into data chunks followed by the final digest chunk.
pub struct Chunker<R> {
    reader: R,
    transfer_id: u64,
    index: u32,
    hasher: Option<Sha256Stream>,
    chunk_size: usize,
}

impl<R: Read> Chunker<R> {
    pub fn new(reader: R, transfer_id: u64) -> Self {
        Self {
            reader,
            transfer_id,
            index: 0,
            hasher: Some(Sha256Stream::default()),
            chunk_size: CHUNK_SIZE,
        }
    }

    pub fn next_chunk(&mut self) -> io::Result<Option<FileChunk>> {
        let Some(hasher) = self.hasher.as_mut() else {
            return Ok(None);
        };
        let mut buf = vec![0u8; self.chunk_size];
        let mut filled = 0;
        while filled < buf.len() {
            let n = self.reader.read(&mut buf[filled..])?;
            if n == 0 {
                break;
            }
            filled += n;
        }
        if filled == 0 {
            let digest = self.hasher.take().expect("present").finish();
            return Ok(Some(FileChunk::last(self.transfer_id, self.index, digest)));
        }
        buf.truncate(filled);
        hasher.update(&buf);
        let chunk = FileChunk::data(self.transfer_id, self.index, buf);
        self.index += 1;
        Ok(Some(chunk))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReassemblyStatus {
    InProgress { received: u64 },
    Complete { size: u64 },
}

/// Receiver side: writes chunks in order and checks size and digest at the end.
pub struct Reassembler<W> {
    manifest: FileManifest,
    sink: W,
    hasher: Option<Sha256Stream>,
    next_index: u32,
    received: u64,
}

impl<W: Write> Reassembler<W> {
    pub fn new(manifest: FileManifest, sink: W) -> Self {
        Self {
            manifest,
            sink,
            hasher: Some(Sha256Stream::default()),
            next_index: 0,
            received: 0,
        }
    }

    pub fn manifest(&self) -> &FileManifest {
        &self.manifest
    }

    pub fn received(&self) -> u64 {
        self.received
    }

    pub fn push(&mut self, chunk: &FileChunk) -> Result<ReassemblyStatus, FileError> {
        if chunk.transfer_id != self.manifest.transfer_id {
            return Err(FileError::UnknownTransfer);
        }
        if chunk.index != self.next_index {
            return Err(FileError::OutOfOrder {
                expected: self.next_index,
                got: chunk.index,
            });
        }
        let hasher = self.hasher.as_mut().ok_or(FileError::Malformed("chunk after completion"))?;
        if chunk.is_final() {
            if self.received != self.manifest.size {
                return Err(FileError::SizeMismatch {
                    expected: self.manifest.size,
                    got: self.received,
                });
            }
            let digest = self.hasher.take().expect("present").finish();
            self.sink.flush()?;
            if digest[..] != chunk.payload[..] || digest != self.manifest.digest {
                return Err(FileError::DigestMismatch);
            }
            return Ok(ReassemblyStatus::Complete { size: self.received });
        }
        if self.received + chunk.payload.len() as u64 > self.manifest.size {
            return Err(FileError::SizeMismatch {
                expected: self.manifest.size,
                got: self.received + chunk.payload.len() as u64,
            });
        }
        hasher.update(&chunk.payload);
        self.sink.write_all(&chunk.payload)?;
        self.received += chunk.payload.len() as u64;
        self.next_index += 1;
        Ok(ReassemblyStatus::InProgress { received: self.received })
    }

    pub fn into_sink(self) -> W {
        self.sink
    }
}

mod hex_digest {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let v = hex::decode(String::deserialize(d)?).map_err(D::Error::custom)?;
        v.try_into().map_err(|_| D::Error::custom("digest must be 32 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::sha256_digest;
    use proptest::prelude::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn transfer(data: &[u8], corrupt: Option<usize>) -> Result<Vec<u8>, FileError> {
        let manifest = FileManifest {
            transfer_id: 42,
            filename: "x.bin".into(),
            size: data.len() as u64,
            digest: sha256_digest(data),
            chunk_size: CHUNK_SIZE as u32,
        };
        let mut chunker = Chunker::new(data, 42);
        let mut re = Reassembler::new(manifest, Vec::new());
        let mut n = 0;
        while let Some(mut c) = chunker.next_chunk()? {
            if corrupt == Some(n) && !c.is_final() {
                c.payload[0] ^= 0x80;
            }
            n += 1;
            if let ReassemblyStatus::Complete { .. } = re.push(&c)? {
                return Ok(re.into_sink());
            }
        }
        unreachable!("chunker ends with the final chunk")
    }

    #[test]
    fn boundary_sizes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for size in [0usize, 1, CHUNK_SIZE - 1, CHUNK_SIZE, CHUNK_SIZE + 1, 2_500_000] {
            let mut data = vec![0u8; size];
            rng.fill_bytes(&mut data);
            assert_eq!(transfer(&data, None).unwrap(), data, "size {size}");
            assert_eq!(chunk_count(size as u64, CHUNK_SIZE), size.div_ceil(CHUNK_SIZE) as u32);
        }
    }

    #[test]
    fn corrupted_chunk_is_digest_mismatch() {
        let data = vec![7u8; 3 * CHUNK_SIZE];
        assert!(matches!(transfer(&data, Some(1)), Err(FileError::DigestMismatch)));
    }

    #[test]
    fn empty_file_digest() {
        let (size, d) = digest_reader(&b""[..]).unwrap();
        assert_eq!(size, 0);
        assert_eq!(
            hex::encode(d),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn blocklist_is_case_insensitive() {
        let b = Blocklist::default();
        for name in ["malware.EXE", "a.exe", "A.ExE", "x.tar.exe", "trick.exe.", "trick.exe  "] {
            assert!(b.is_blocked(name), "{name}");
        }
        for name in ["report.pdf", "exe", "notes.exe.txt", "file.exes", ".bashrc"] {
            assert!(!b.is_blocked(name), "{name}");
        }
        assert!(Blocklist::new([".BAT"]).is_blocked("run.bat"));
    }

    #[test]
    fn path_traversal_corpus() {
        let cases = [
            ("../../etc/passwd", Some("passwd")),
            ("..\\..\\windows\\system32\\cmd.txt", Some("cmd.txt")),
            ("/abs/path/file.txt", Some("file.txt")),
            ("C:\\Users\\x\\doc.pdf", Some("doc.pdf")),
            ("plain.txt", Some("plain.txt")),
            ("a/b/../c.txt", Some("c.txt")),
            ("dir/", None),
            ("..", None),
            ("../..", None),
            ("", None),
            ("evil\u{0}.txt", Some("evil.txt")),
        ];
        for (raw, want) in cases {
            match (sanitize_filename(raw), want) {
                (Ok(got), Some(w)) => assert_eq!(got, w, "{raw:?}"),
                (Err(FileError::InvalidName), None) => {}
                (got, _) => panic!("{raw:?} -> {got:?}"),
            }
        }
    }

    #[test]
    fn manifest_validation() {
        let mut m = FileManifest {
            transfer_id: 1,
            filename: "../x/malware.EXE".into(),
            size: 10,
            digest: [0; 32],
            chunk_size: CHUNK_SIZE as u32,
        };
        assert!(matches!(m.validate(&Blocklist::default(), 100), Err(FileError::BlockedExtension)));
        m.filename = "ok.txt".into();
        assert!(matches!(m.validate(&Blocklist::default(), 5), Err(FileError::FileTooLarge { .. })));
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<FileManifest>(&json).unwrap(), m);
    }

    #[test]
    fn chunk_golden_layout() {
        let c = FileChunk::data(0x0102030405060708, 9, vec![0xaa, 0xbb]);
        assert_eq!(
            c.encode(),
            vec![1, 2, 3, 4, 5, 6, 7, 8, 0, 0, 0, 9, 0, 0xaa, 0xbb]
        );
        assert!(FileChunk::decode(&[0; 12]).is_err());
        let mut bad_final = FileChunk::last(1, 0, [0; 32]).encode();
        bad_final.pop();
        assert!(FileChunk::decode(&bad_final).is_err());
    }

    #[test]
    fn out_of_order_and_oversize_rejected() {
        let data = vec![1u8; CHUNK_SIZE + 5];
        let manifest = FileManifest {
            transfer_id: 5,
            filename: "f".into(),
            size: 10,
            digest: sha256_digest(&data),
            chunk_size: CHUNK_SIZE as u32,
        };
        let mut re = Reassembler::new(manifest, Vec::new());
        assert!(matches!(
            re.push(&FileChunk::data(5, 1, vec![0])),
            Err(FileError::OutOfOrder { expected: 0, got: 1 })
        ));
        assert!(matches!(
            re.push(&FileChunk::data(5, 0, vec![0; 11])),
            Err(FileError::SizeMismatch { .. })
        ));
        assert!(matches!(re.push(&FileChunk::data(6, 0, vec![])), Err(FileError::UnknownTransfer)));
    }

    proptest! {
        #[test]
        fn chunk_round_trip(id in any::<u64>(), idx in any::<u32>(), payload in proptest::collection::vec(any::<u8>(), 0..300)) {
            let c = FileChunk::data(id, idx, payload);
            prop_assert_eq!(FileChunk::decode(&c.encode()).unwrap(), c);
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = FileChunk::decode(&bytes);
        }
    }
}
