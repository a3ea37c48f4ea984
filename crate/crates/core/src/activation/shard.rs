// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary activation shards.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! header   "SVTC" u32 version u32 L u32 T u32 d u32 H u32 W u8 dtype
//! record   u32 body_len
//!          u32 id_len, id bytes (UTF-8)
//!          u8  label (ASCII option letter, 0 when absent)
//!          u32 n_logits, n_logits × f32
//!          L × T × d × f32, layer-major then token then feature
//! ```
//!
//! A sibling `<shard>.idx.jsonl` lists `{"id": .., "offset": ..}` per record,
//! where `offset` points at the record's `body_len` field.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ActivationRecord, TokenRoleMask};

pub const MAGIC: &[u8; 4] = b"SVTC";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 4 + 6 * 4 + 1;
/// Only dtype currently defined.
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub version: u32,
    pub n_layers: u32,
    pub n_tokens: u32,
    pub width: u32,
    pub grid_h: u32,
    pub grid_w: u32,
    pub dtype: u8,
}

impl ShardHeader {
    pub fn new(n_layers: usize, n_tokens: usize, width: usize, grid: (usize, usize)) -> Self {
        Self {
            version: VERSION,
            n_layers: n_layers as u32,
            n_tokens: n_tokens as u32,
            width: width as u32,
            grid_h: grid.0 as u32,
            grid_w: grid.1 as u32,
            dtype: DTYPE_F32,
        }
    }

    pub fn mask(&self) -> Result<TokenRoleMask> {
        TokenRoleMask::new(self.n_tokens as usize, (self.grid_h as usize, self.grid_w as usize))
    }

    /// Number of f32 values in one record's state block.
    pub fn state_len(&self) -> usize {
        self.n_layers as usize * self.n_tokens as usize * self.width as usize
    }

    fn to_bytes(self) -> [u8; HEADER_LEN as usize] {
        let mut b = [0u8; HEADER_LEN as usize];
        b[..4].copy_from_slice(MAGIC);
        for (i, v) in [self.version, self.n_layers, self.n_tokens, self.width, self.grid_h, self.grid_w]
            .into_iter()
            .enumerate()
        {
            b[4 + 4 * i..8 + 4 * i].copy_from_slice(&v.to_le_bytes());
        }
        b[HEADER_LEN as usize - 1] = self.dtype;
        b
    }

    fn from_bytes(b: &[u8]) -> Result<Self> {
        if &b[..4] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: format!("bad magic {:?}", &b[..4]),
            });
        }
        let u = |i: usize| u32::from_le_bytes(b[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let h = Self {
            version: u(0),
            n_layers: u(1),
            n_tokens: u(2),
            width: u(3),
            grid_h: u(4),
            grid_w: u(5),
            dtype: b[HEADER_LEN as usize - 1],
        };
        if h.version != VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported version {}", h.version),
            });
        }
        if h.dtype != DTYPE_F32 {
            return Err(Error::Format {
                offset: HEADER_LEN - 1,
                reason: format!("unsupported dtype tag {}", h.dtype),
            });
        }
        h.mask().map_err(|e| Error::Format {
            offset: 12,
            reason: e.to_string(),
        })?;
        Ok(h)
    }
}

/// Serialized size in bytes of one record, including its length prefix.
pub fn record_len(header: &ShardHeader, id_len: usize, n_logits: usize) -> u64 {
    4 + 4 + id_len as u64 + 1 + 4 + 4 * n_logits as u64 + 4 * header.state_len() as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub offset: u64,
}

pub fn index_path(shard: &Path) -> PathBuf {
    let mut s = shard.as_os_str().to_owned();
    s.push(".idx.jsonl");
    PathBuf::from(s)
}

/// Single-writer shard encoder. Call [`ShardWriter::finish`] to flush and
/// write the index.
pub struct ShardWriter {
    path: PathBuf,
    header: ShardHeader,
    out: BufWriter<File>,
    offset: u64,
    index: Vec<IndexEntry>,
}

impl ShardWriter {
    pub fn create(path: &Path, header: ShardHeader) -> Result<Self> {
        header.mask()?;
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(f);
        out.write_all(&header.to_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            header,
            out,
            offset: HEADER_LEN,
            index: Vec::new(),
        })
    }

    pub fn header(&self) -> &ShardHeader {
        &self.header
    }

    pub fn write(&mut self, rec: &ActivationRecord) -> Result<()> {
        let h = &self.header;
        if (rec.n_layers(), rec.n_tokens(), rec.width())
            != (h.n_layers as usize, h.n_tokens as usize, h.width as usize)
        {
            return Err(Error::Shape(format!(
                "record `{}` is {}×{}×{}, shard header is {}×{}×{}",
                rec.id,
                rec.n_layers(),
                rec.n_tokens(),
                rec.width(),
                h.n_layers,
                h.n_tokens,
                h.width
            )));
        }
        if rec.mask.grid != (h.grid_h as usize, h.grid_w as usize) {
            return Err(Error::Shape(format!("record `{}` image grid differs from header", rec.id)));
        }
        if let Some(i) = rec.states.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("record `{}` state entry {i}", rec.id)));
        }
        let total = record_len(h, rec.id.len(), rec.logits.len());
        let mut buf = Vec::with_capacity(total as usize);
        buf.extend_from_slice(&((total - 4) as u32).to_le_bytes());
        buf.extend_from_slice(&(rec.id.len() as u32).to_le_bytes());
        buf.extend_from_slice(rec.id.as_bytes());
        buf.push(rec.label.unwrap_or(0));
        buf.extend_from_slice(&(rec.logits.len() as u32).to_le_bytes());
        for v in rec.logits.iter().chain(&rec.states) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.out.write_all(&buf).map_err(|e| Error::io(&self.path, e))?;
        self.index.push(IndexEntry {
            id: rec.id.clone(),
            offset: self.offset,
        });
        self.offset += total;
        Ok(())
    }

    /// Flushes the shard and writes its index; returns the index entries.
    pub fn finish(mut self) -> Result<Vec<IndexEntry>> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        let ipath = index_path(&self.path);
        let f = File::create(&ipath).map_err(|e| Error::io(&ipath, e))?;
        let mut w = BufWriter::new(f);
        for e in &self.index {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(|e| Error::io(&ipath, e))?;
        }
        w.flush().map_err(|e| Error::io(&ipath, e))?;
        Ok(self.index)
    }
}

/// Writes `records` to `path` (plus index) in one call.
pub fn write_shard(path: &Path, header: ShardHeader, records: &[ActivationRecord]) -> Result<Vec<IndexEntry>> {
    let mut w = ShardWriter::create(path, header)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

/// Streaming shard decoder; yields records one at a time.
pub struct ShardReader<R> {
    inner: R,
    header: ShardHeader,
    mask: TokenRoleMask,
    offset: u64,
    done: bool,
}

impl ShardReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufReader::with_capacity(1 << 20, f))
    }
}

impl<R: Read> ShardReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut b = [0u8; HEADER_LEN as usize];
        let got = read_full(&mut inner, &mut b).map_err(|e| Error::Format {
            offset: 0,
            reason: e.to_string(),
        })?;
        if got < b.len() {
            return Err(Error::Format {
                offset: got as u64,
                reason: "truncated header".into(),
            });
        }
        let header = ShardHeader::from_bytes(&b)?;
        Ok(Self {
            inner,
            mask: header.mask()?,
            header,
            offset: HEADER_LEN,
            done: false,
        })
    }

    pub fn header(&self) -> &ShardHeader {
        &self.header
    }

    /// Byte offset of the next record.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn take(&mut self, n: usize, start: u64) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        let got = read_full(&mut self.inner, &mut buf).map_err(|e| Error::Format {
            offset: self.offset,
            reason: e.to_string(),
        })?;
        self.offset += got as u64;
        if got < n {
            return Err(Error::Format {
                offset: self.offset,
                reason: format!("truncated record starting at byte {start}"),
            });
        }
        Ok(buf)
    }

    fn next_record(&mut self) -> Result<Option<ActivationRecord>> {
        let start = self.offset;
        let mut len = [0u8; 4];
        let got = read_full(&mut self.inner, &mut len).map_err(|e| Error::Format {
            offset: start,
            reason: e.to_string(),
        })?;
        if got == 0 {
            return Ok(None);
        }
        self.offset += got as u64;
        if got < 4 {
            return Err(Error::Format {
                offset: self.offset,
                reason: "truncated record length".into(),
            });
        }
        let body_len = u32::from_le_bytes(len) as usize;
        let body = self.take(body_len, start)?;
        let fail = |at: usize, reason: &str| Error::Format {
            offset: start + 4 + at as u64,
            reason: reason.to_string(),
        };
        let u32_at = |at: usize| -> Result<u32> {
            body.get(at..at + 4)
                .map(|s| u32::from_le_bytes(s.try_into().expect("4 bytes")))
                .ok_or_else(|| fail(at, "record body too short"))
        };
        let id_len = u32_at(0)? as usize;
        let id_bytes = body.get(4..4 + id_len).ok_or_else(|| fail(4, "id overruns record"))?;
        let id = String::from_utf8(id_bytes.to_vec()).map_err(|_| fail(4, "id is not UTF-8"))?;
        let mut at = 4 + id_len;
        let label = *body.get(at).ok_or_else(|| fail(at, "missing label byte"))?;
        at += 1;
        let n_logits = u32_at(at)? as usize;
        at += 4;
        let expect = record_len(&self.header, id_len, n_logits) as usize - 4;
        if expect != body_len {
            return Err(fail(0, &format!("record length {body_len} disagrees with header dims (expected {expect})")));
        }
        let floats: Vec<f32> = body[at..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let (logits, states) = floats.split_at(n_logits);
        Ok(Some(ActivationRecord {
            id,
            label: (label != 0).then_some(label),
            logits: logits.to_vec(),
            mask: self.mask.clone(),
            n_layers: self.header.n_layers as usize,
            states: states.to_vec(),
        }))
    }
}

impl<R: Read + Seek> ShardReader<R> {
    /// Random access through an index offset.
    pub fn read_at(&mut self, offset: u64) -> Result<ActivationRecord> {
        self.inner.seek(SeekFrom::Start(offset)).map_err(|e| Error::Format {
            offset,
            reason: e.to_string(),
        })?;
        self.offset = offset;
        self.done = false;
        self.next_record()?.ok_or(Error::Format {
            offset,
            reason: "no record at offset".into(),
        })
    }
}

impl<R: Read> Iterator for ShardReader<R> {
    type Item = Result<ActivationRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let out = self.next_record().transpose();
        if !matches!(out, Some(Ok(_))) {
            self.done = true;
        }
        out
    }
}

/// Reads every record of a shard.
pub fn read_shard(path: &Path) -> Result<(ShardHeader, Vec<ActivationRecord>)> {
    let reader = ShardReader::open(path)?;
    let header = *reader.header();
    let recs = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, recs))
}

pub fn read_index(shard: &Path) -> Result<Vec<IndexEntry>> {
    let p = index_path(shard);
    let f = File::open(&p).map_err(|e| Error::io(&p, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(&p, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Like `read_exact`, but reports how many bytes arrived before EOF.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, header: &ShardHeader, fill: f32) -> ActivationRecord {
        ActivationRecord {
            id: id.into(),
            label: Some(b'B'),
            logits: vec![0.5, -1.0],
            mask: header.mask().unwrap(),
            n_layers: header.n_layers as usize,
            states: (0..header.state_len()).map(|i| fill + i as f32 * 0.25).collect(),
        }
    }

    #[test]
    fn round_trip_three() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let h = ShardHeader::new(2, 5, 3, (2, 2));
        let recs: Vec<_> = (0..3).map(|i| rec(&format!("r{i}"), &h, i as f32)).collect();
        let idx = write_shard(&p, h, &recs).unwrap();
        let (h2, back) = read_shard(&p).unwrap();
        assert_eq!(h2, h);
        assert_eq!(back, recs);
        assert_eq!(read_index(&p).unwrap(), idx);
        let mut r = ShardReader::open(&p).unwrap();
        assert_eq!(r.read_at(idx[2].offset).unwrap(), recs[2]);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = ShardHeader::new(1, 1, 1, (1, 1)).to_bytes().to_vec();
        bytes[0] = b'X';
        assert!(matches!(ShardReader::new(&bytes[..]), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let h = ShardHeader::new(1, 2, 2, (1, 1));
        write_shard(&p, h, &[rec("x", &h, 1.0)]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        let err = ShardReader::new(cut).unwrap().next().unwrap().unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, cut.len() as u64),
            e => panic!("unexpected {e}"),
        }
    }
}
