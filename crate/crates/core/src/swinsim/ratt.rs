//! RATT attention-dump format.
//!
//! ```text
//! "RATT" | version: u32le | header_len: u32le | header JSON (header_len bytes)
//! chunk*  where chunk = payload_len: u32le | payload
//! 0u32le  end marker
//!
//! payload = stage, block, window, head, n_queries, n_keys, flags, feature_dim  (8 x u32le)
//!           weights      n_queries * n_keys  f32le, row-major (query rows)
//!           query_class  n_queries           u8
//!           key_class    n_keys              u8
//!           [shift_mask  n_queries * n_keys  u8]   if flags & 1
//!           [features    n_keys * feature_dim f32le] if flags & 2
//! ```
//!
//! Class codes are listed in the header (`real` 0, `volume_pad` 1,
//! `window_pad` 2). Records are streamed one chunk at a time in both
//! directions, so memory is bounded by the largest window.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AttentionRecord, AttentionSink, AttentionView, EncoderConfig, TokenClass};
use crate::error::{Error, Result};
use crate::geometry::token_budget;
use crate::volumes::{voxel_count, Shape3};

pub const MAGIC: &[u8; 4] = b"RATT";
pub const VERSION: u32 = 1;
const FLAG_MASK: u32 = 1;
const FLAG_FEATURES: u32 = 2;
const FIXED_FIELDS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDims {
    pub stage: u32,
    pub heads: u32,
    /// Tokens per window (the record matrix is at most this square).
    pub window_tokens: u32,
    #[serde(default)]
    pub feature_dim: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RattHeader {
    pub stages: Vec<StageDims>,
    pub class_encoding: BTreeMap<String, u8>,
    pub dtype: String,
    /// Free-form provenance (scan id, config, ...).
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

pub fn default_class_encoding() -> BTreeMap<String, u8> {
    BTreeMap::from([
        ("real".to_string(), TokenClass::Real as u8),
        ("volume_pad".to_string(), TokenClass::VolumePad as u8),
        ("window_pad".to_string(), TokenClass::WindowPad as u8),
    ])
}

impl RattHeader {
    pub fn new(stages: Vec<StageDims>) -> Self {
        Self {
            stages,
            class_encoding: default_class_encoding(),
            dtype: "f32le".into(),
            meta: BTreeMap::new(),
        }
    }

    /// Header describing the records an encoder emits for a given crop.
    pub fn for_encoder(cfg: &EncoderConfig, crop: Shape3) -> Result<Self> {
        let grid = token_budget(crop, cfg.patch, cfg.window, cfg.n_stages())?;
        Ok(Self::new(
            grid.stages
                .iter()
                .map(|s| StageDims {
                    stage: s.stage as u32,
                    heads: cfg.heads[s.stage] as u32,
                    window_tokens: voxel_count(s.effective_window) as u32,
                    feature_dim: 0,
                })
                .collect(),
        ))
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |reason: String| Error::Header {
            path: path.to_path_buf(),
            reason,
        };
        if self.dtype != "f32le" {
            return Err(bad(format!("unsupported dtype {:?}", self.dtype)));
        }
        for (name, code) in default_class_encoding() {
            match self.class_encoding.get(&name) {
                Some(c) if *c == code => {}
                other => {
                    return Err(bad(format!(
                        "class {name:?} must be encoded as {code}, header has {other:?}"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Streaming writer; also usable directly as an encoder sink.
pub struct RattWriter<W: Write> {
    out: W,
    written: u64,
    buf: Vec<u8>,
}

impl RattWriter<BufWriter<File>> {
    pub fn create(path: &Path, header: &RattHeader) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufWriter::new(f), header)
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io(PathBuf::from("<ratt stream>"), e)
}

impl<W: Write> RattWriter<W> {
    pub fn new(mut out: W, header: &RattHeader) -> Result<Self> {
        let h = serde_json::to_vec(header)?;
        out.write_all(MAGIC).map_err(io_err)?;
        out.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
        out.write_all(&(h.len() as u32).to_le_bytes()).map_err(io_err)?;
        out.write_all(&h).map_err(io_err)?;
        Ok(Self {
            out,
            written: 0,
            buf: Vec::new(),
        })
    }

    pub fn write(&mut self, r: &AttentionView<'_>) -> Result<()> {
        let nq = r.query_classes.len();
        let nk = r.key_classes.len();
        if r.weights.len() != nq * nk {
            return Err(Error::InvalidRecord(format!(
                "weights length {} != {nq} x {nk}",
                r.weights.len()
            )));
        }
        let fd = r.feature_dim as usize;
        let mut flags = 0;
        if let Some(m) = r.shift_mask {
            if m.len() != nq * nk {
                return Err(Error::InvalidRecord("shift mask has wrong size".into()));
            }
            flags |= FLAG_MASK;
        }
        if let Some(f) = r.features {
            if f.len() != nk * fd {
                return Err(Error::InvalidRecord("features have wrong size".into()));
            }
            flags |= FLAG_FEATURES;
        }
        let b = &mut self.buf;
        b.clear();
        for v in [r.stage, r.block, r.window_index, r.head, nq as u32, nk as u32, flags, r.feature_dim] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for w in r.weights {
            b.extend_from_slice(&w.to_le_bytes());
        }
        b.extend(r.query_classes.iter().map(|c| *c as u8));
        b.extend(r.key_classes.iter().map(|c| *c as u8));
        if let Some(m) = r.shift_mask {
            b.extend(m.iter().map(|&x| x as u8));
        }
        if let Some(f) = r.features {
            for v in f {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let len = u32::try_from(b.len())
            .ok()
            .filter(|&l| l > 0)
            .ok_or_else(|| Error::InvalidRecord("record too large".into()))?;
        self.out.write_all(&len.to_le_bytes()).map_err(io_err)?;
        self.out.write_all(b).map_err(io_err)?;
        self.written += 1;
        Ok(())
    }

    pub fn records_written(&self) -> u64 {
        self.written
    }

    /// Writes the end marker and flushes.
    pub fn finish(mut self) -> Result<W> {
        self.out.write_all(&0u32.to_le_bytes()).map_err(io_err)?;
        self.out.flush().map_err(io_err)?;
        Ok(self.out)
    }
}

impl<W: Write> AttentionSink for RattWriter<W> {
    fn record(&mut self, view: &AttentionView<'_>) -> Result<()> {
        self.write(view)
    }
}

/// Streaming reader yielding one record per chunk.
pub struct RattReader<R: Read> {
    input: R,
    pub header: RattHeader,
    read: u64,
    done: bool,
    source: PathBuf,
}

impl RattReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufReader::new(f), path)
    }
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<bool> {
    // Ok(false) on clean EOF before the first byte.
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                if filled == 0 {
                    return Ok(false);
                }
                return Err(std::io::Error::new(ErrorKind::UnexpectedEof, "short read"));
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

impl<R: Read> RattReader<R> {
    pub fn new(mut input: R, source: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Header {
            path: source.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut fixed = [0u8; 12];
        match read_exact_or(&mut input, &mut fixed) {
            Ok(true) => {}
            _ => return Err(bad("file too short for RATT preamble")),
        }
        if &fixed[0..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(fixed[8..12].try_into().unwrap()) as usize;
        let mut hbuf = vec![0u8; hlen];
        match read_exact_or(&mut input, &mut hbuf) {
            Ok(true) => {}
            _ if hlen == 0 => {}
            _ => return Err(bad("truncated header")),
        }
        let header: RattHeader = serde_json::from_slice(&hbuf).map_err(|e| bad(&e.to_string()))?;
        header.validate(source)?;
        Ok(Self {
            input,
            header,
            read: 0,
            done: false,
            source: source.to_path_buf(),
        })
    }

    fn truncated(&self) -> Error {
        let last = if self.read == 0 {
            "no complete chunk".to_string()
        } else {
            format!("last complete chunk #{}", self.read - 1)
        };
        Error::Truncated(format!("{}: {last}", self.source.display()))
    }

    fn next_record(&mut self) -> Result<Option<AttentionRecord>> {
        if self.done {
            return Ok(None);
        }
        let mut lenb = [0u8; 4];
        match read_exact_or(&mut self.input, &mut lenb) {
            Ok(true) => {}
            Ok(false) | Err(_) => return Err(self.truncated()),
        }
        let len = u32::from_le_bytes(lenb) as usize;
        if len == 0 {
            self.done = true;
            return Ok(None);
        }
        let mut p = vec![0u8; len];
        match read_exact_or(&mut self.input, &mut p) {
            Ok(true) => {}
            _ => return Err(self.truncated()),
        }
        let rec = decode_payload(&p).map_err(|reason| {
            Error::InvalidRecord(format!("{}: chunk #{}: {reason}", self.source.display(), self.read))
        })?;
        self.read += 1;
        Ok(Some(rec))
    }
}

fn decode_payload(p: &[u8]) -> std::result::Result<AttentionRecord, String> {
    if p.len() < FIXED_FIELDS * 4 {
        return Err("payload shorter than fixed fields".into());
    }
    let u = |i: usize| u32::from_le_bytes(p[i * 4..i * 4 + 4].try_into().unwrap());
    let (stage, block, window_index, head) = (u(0), u(1), u(2), u(3));
    let (nq, nk, flags, fd) = (u(4) as usize, u(5) as usize, u(6), u(7));
    let mut expect = FIXED_FIELDS * 4 + nq * nk * 4 + nq + nk;
    if flags & FLAG_MASK != 0 {
        expect += nq * nk;
    }
    if flags & FLAG_FEATURES != 0 {
        expect += nk * fd as usize * 4;
    }
    if expect != p.len() {
        return Err(format!("payload length {} does not match dims ({expect})", p.len()));
    }
    let mut off = FIXED_FIELDS * 4;
    let f32s = |off: &mut usize, n: usize| -> Vec<f32> {
        let v = p[*off..*off + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        *off += 4 * n;
        v
    };
    let weights = f32s(&mut off, nq * nk);
    let classes = |off: &mut usize, n: usize| -> std::result::Result<Vec<TokenClass>, String> {
        let v = p[*off..*off + n]
            .iter()
            .map(|&c| TokenClass::from_code(c).ok_or_else(|| format!("unknown class code {c}")))
            .collect();
        *off += n;
        v
    };
    let query_classes = classes(&mut off, nq)?;
    let key_classes = classes(&mut off, nk)?;
    let shift_mask = if flags & FLAG_MASK != 0 {
        let m = p[off..off + nq * nk].iter().map(|&b| b != 0).collect();
        off += nq * nk;
        Some(m)
    } else {
        None
    };
    let features = (flags & FLAG_FEATURES != 0).then(|| f32s(&mut off, nk * fd as usize));
    Ok(AttentionRecord {
        stage,
        block,
        window_index,
        head,
        weights,
        query_classes,
        key_classes,
        shift_mask,
        features,
        feature_dim: if flags & FLAG_FEATURES != 0 { fd } else { 0 },
    })
}

impl<R: Read> Iterator for RattReader<R> {
    type Item = Result<AttentionRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.next_record() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => None,
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

pub fn export_attention(records: &[AttentionRecord], header: &RattHeader, path: &Path) -> Result<()> {
    let mut w = RattWriter::create(path, header)?;
    for r in records {
        w.write(&r.view())?;
    }
    w.finish()?;
    Ok(())
}

pub fn import_attention(path: &Path) -> Result<(RattHeader, Vec<AttentionRecord>)> {
    let mut r = RattReader::open(path)?;
    let mut recs = Vec::new();
    for rec in r.by_ref() {
        recs.push(rec?);
    }
    Ok((r.header, recs))
}
