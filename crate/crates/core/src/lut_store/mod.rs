//! On-disk lookup tables and the offload backend that serves them.
//!
//! File layout, little-endian:
//!
//! ```text
//! 0   magic       "MOLELUT1"
//! 8   version     u32
//! 12  n_layers    u32
//! 16  vocab       u32
//! 20  n_experts   u32
//! 24  d           u32
//! 28  dtype       u8     0 = fp32, 1 = fp16, 2 = nf4, 3 = nf3
//! 29  block_size  u32    0 for fp32/fp16
//! 33  zero padding up to byte 64
//! 64  payload     [layer][token][expert][d]
//! ```
//!
//! Quantized payloads store each `(token, expert)` row of width `d` as
//! `d / block_size` consecutive blocks (see [`nf`]).

pub mod nf;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread::JoinHandle;

use half::f16;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::kernels::Tensor;
use crate::model::{PendingRows, RowSource};
use crate::reparam::LutTable;

pub use nf::{
    block_bytes, codebook, compression_ratio, dequantize_row, max_codebook_gap, nearest_code, quantize_row,
    NF3_CODEBOOK, NF4_CODEBOOK,
};

pub const LUT_MAGIC: &[u8; 8] = b"MOLELUT1";
pub const LUT_VERSION: u32 = 1;
pub const HEADER_BYTES: u64 = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LutError {
    #[error("not a LUT file (bad magic)")]
    NotALutFile,
    #[error("LUT version mismatch: file has {found}, reader supports {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    PayloadLengthMismatch { expected: u64, actual: u64 },
    #[error("LUT dimensions overflow the addressable size")]
    DimensionOverflow,
    #[error("invalid block size {block_size}: {reason}")]
    InvalidBlockSize { block_size: u32, reason: String },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("unsupported quantization width {0} bits")]
    UnsupportedBits(u32),
    #[error("non-finite value in LUT data")]
    NonFinite,
    #[error("fetch ticket was already consumed")]
    TicketConsumed,
    #[error("tables are inconsistent: {0}")]
    InconsistentTables(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LutDtype {
    Fp32,
    Fp16,
    Nf4,
    Nf3,
}

impl LutDtype {
    pub fn code(self) -> u8 {
        match self {
            LutDtype::Fp32 => 0,
            LutDtype::Fp16 => 1,
            LutDtype::Nf4 => 2,
            LutDtype::Nf3 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, LutError> {
        Ok(match code {
            0 => LutDtype::Fp32,
            1 => LutDtype::Fp16,
            2 => LutDtype::Nf4,
            3 => LutDtype::Nf3,
            other => return Err(LutError::UnknownDtype(other)),
        })
    }

    /// Codebook width for quantized dtypes.
    pub fn bits(self) -> Option<u32> {
        match self {
            LutDtype::Nf4 => Some(4),
            LutDtype::Nf3 => Some(3),
            _ => None,
        }
    }

    pub fn is_quantized(self) -> bool {
        self.bits().is_some()
    }

    pub fn name(self) -> &'static str {
        match self {
            LutDtype::Fp32 => "fp32",
            LutDtype::Fp16 => "fp16",
            LutDtype::Nf4 => "nf4",
            LutDtype::Nf3 => "nf3",
        }
    }

    /// Bytes for one row of width `d`.
    pub fn row_bytes(self, d: usize, block_size: usize) -> usize {
        match self {
            LutDtype::Fp32 => 4 * d,
            LutDtype::Fp16 => 2 * d,
            LutDtype::Nf4 | LutDtype::Nf3 => d / block_size * block_bytes(self.bits().unwrap(), block_size),
        }
    }
}

impl std::str::FromStr for LutDtype {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fp32" => Ok(LutDtype::Fp32),
            "fp16" => Ok(LutDtype::Fp16),
            "nf4" => Ok(LutDtype::Nf4),
            "nf3" => Ok(LutDtype::Nf3),
            other => Err(format!("unknown dtype {other:?} (expected fp32, fp16, nf4 or nf3)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LutFileHeader {
    pub version: u32,
    pub n_layers: u32,
    pub vocab: u32,
    pub n_experts: u32,
    pub d: u32,
    pub dtype: LutDtype,
    pub block_size: u32,
}

impl LutFileHeader {
    pub fn new(
        n_layers: usize,
        vocab: usize,
        n_experts: usize,
        d: usize,
        dtype: LutDtype,
        block_size: usize,
    ) -> Result<Self, LutError> {
        let narrow = |v: usize| u32::try_from(v).map_err(|_| LutError::DimensionOverflow);
        let h = Self {
            version: LUT_VERSION,
            n_layers: narrow(n_layers)?,
            vocab: narrow(vocab)?,
            n_experts: narrow(n_experts)?,
            d: narrow(d)?,
            dtype,
            block_size: narrow(block_size)?,
        };
        h.validate()?;
        Ok(h)
    }

    fn validate(&self) -> Result<(), LutError> {
        if self.dtype.is_quantized() {
            if self.block_size == 0 || !self.d.is_multiple_of(self.block_size) {
                return Err(LutError::InvalidBlockSize {
                    block_size: self.block_size,
                    reason: format!("quantized rows need a positive block size dividing d = {}", self.d),
                });
            }
        } else if self.block_size != 0 {
            return Err(LutError::InvalidBlockSize {
                block_size: self.block_size,
                reason: format!("{} tables are stored unblocked (block size 0)", self.dtype.name()),
            });
        }
        self.payload_bytes().map(|_| ())
    }

    /// Bytes per `(token, expert)` row.
    pub fn row_bytes(&self) -> usize {
        self.dtype.row_bytes(self.d as usize, self.block_size as usize)
    }

    /// Bytes per token record (all experts of one id in one layer).
    pub fn token_bytes(&self) -> u64 {
        self.row_bytes() as u64 * self.n_experts as u64
    }

    pub fn payload_bytes(&self) -> Result<u64, LutError> {
        (self.n_layers as u64)
            .checked_mul(self.vocab as u64)
            .and_then(|v| v.checked_mul(self.token_bytes()))
            .and_then(|v| v.checked_add(HEADER_BYTES))
            .map(|total| total - HEADER_BYTES)
            .ok_or(LutError::DimensionOverflow)
    }

    pub fn file_bytes(&self) -> Result<u64, LutError> {
        Ok(HEADER_BYTES + self.payload_bytes()?)
    }

    pub fn to_bytes(&self) -> [u8; 64] {
        let mut b = [0u8; 64];
        b[..8].copy_from_slice(LUT_MAGIC);
        b[8..12].copy_from_slice(&self.version.to_le_bytes());
        b[12..16].copy_from_slice(&self.n_layers.to_le_bytes());
        b[16..20].copy_from_slice(&self.vocab.to_le_bytes());
        b[20..24].copy_from_slice(&self.n_experts.to_le_bytes());
        b[24..28].copy_from_slice(&self.d.to_le_bytes());
        b[28] = self.dtype.code();
        b[29..33].copy_from_slice(&self.block_size.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, LutError> {
        if b.len() < 8 || &b[..8] != LUT_MAGIC {
            return Err(LutError::NotALutFile);
        }
        if b.len() < HEADER_BYTES as usize {
            return Err(LutError::PayloadLengthMismatch {
                expected: HEADER_BYTES,
                actual: b.len() as u64,
            });
        }
        let u = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let version = u(8);
        if version != LUT_VERSION {
            return Err(LutError::VersionMismatch {
                found: version,
                expected: LUT_VERSION,
            });
        }
        let h = Self {
            version,
            n_layers: u(12),
            vocab: u(16),
            n_experts: u(20),
            d: u(24),
            dtype: LutDtype::from_code(b[28])?,
            block_size: u(29),
        };
        h.validate()?;
        Ok(h)
    }
}

fn encode_row(values: &[f32], dtype: LutDtype, block_size: usize, out: &mut Vec<u8>) -> Result<(), LutError> {
    match dtype {
        LutDtype::Fp32 => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        LutDtype::Fp16 => {
            for v in values {
                out.extend_from_slice(&f16::from_f32(*v).to_bits().to_le_bytes());
            }
        }
        LutDtype::Nf4 | LutDtype::Nf3 => {
            nf::quantize_row_into(values, dtype.bits().unwrap(), block_size, out)?;
        }
    }
    Ok(())
}

fn decode_row(bytes: &[u8], header: &LutFileHeader, out: &mut [f32]) -> Result<(), LutError> {
    match header.dtype {
        LutDtype::Fp32 => {
            for (o, c) in out.iter_mut().zip(bytes.chunks_exact(4)) {
                *o = f32::from_le_bytes(c.try_into().unwrap());
            }
        }
        LutDtype::Fp16 => {
            for (o, c) in out.iter_mut().zip(bytes.chunks_exact(2)) {
                *o = f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32();
            }
        }
        LutDtype::Nf4 | LutDtype::Nf3 => {
            nf::dequantize_row_into(bytes, header.dtype.bits().unwrap(), header.block_size as usize, out)?;
        }
    }
    Ok(())
}

/// Logit tolerance for verifying a table stored as `dtype`. Exact storage
/// keeps the single-precision bound; fp16 allows its unit roundoff; NF
/// storage allows half the widest codebook gap, the per-element bound
/// relative to the block absmax.
pub fn verify_tolerance(dtype: LutDtype) -> f64 {
    match dtype {
        LutDtype::Fp32 => 1e-5,
        LutDtype::Fp16 => f64::from(f16::EPSILON.to_f32()),
        LutDtype::Nf4 | LutDtype::Nf3 => f64::from(max_codebook_gap(dtype.bits().unwrap()).unwrap()) / 2.0,
    }
}

/// Writes one table per layer. `block_size` must be 0 for fp32/fp16.
pub fn write_lut(
    tables: &[LutTable<f32>],
    path: impl AsRef<Path>,
    dtype: LutDtype,
    block_size: usize,
) -> Result<LutFileHeader> {
    let first = tables
        .first()
        .ok_or_else(|| LutError::InconsistentTables("no tables to write".into()))?;
    let &[vocab, n, d] = first.values.shape() else {
        return Err(LutError::InconsistentTables(format!("table shape {:?}", first.values.shape())).into());
    };
    for (l, t) in tables.iter().enumerate() {
        if t.layer != l || t.values.shape() != [vocab, n, d] {
            return Err(LutError::InconsistentTables(format!(
                "table {l} is layer {} with shape {:?}, expected layer {l} with {:?}",
                t.layer,
                t.values.shape(),
                [vocab, n, d]
            ))
            .into());
        }
    }
    let header = LutFileHeader::new(tables.len(), vocab, n, d, dtype, block_size)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&header.to_bytes())?;
    let mut buf = Vec::with_capacity(header.token_bytes() as usize);
    for t in tables {
        for token in t.values.data().chunks_exact(n * d) {
            buf.clear();
            for row in token.chunks_exact(d) {
                encode_row(row, dtype, block_size, &mut buf)?;
            }
            w.write_all(&buf)?;
        }
    }
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(header)
}

struct Inner {
    file: File,
    header: LutFileHeader,
    bytes_read: AtomicU64,
}

impl Inner {
    #[cfg(unix)]
    fn read_at(&self, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
        use std::os::unix::fs::FileExt;
        self.file.read_exact_at(buf, offset)
    }

    #[cfg(windows)]
    fn read_at(&self, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
        use std::os::windows::fs::FileExt;
        let mut done = 0;
        while done < buf.len() {
            let n = self.file.seek_read(&mut buf[done..], offset + done as u64)?;
            if n == 0 {
                return Err(std::io::ErrorKind::UnexpectedEof.into());
            }
            done += n;
        }
        Ok(())
    }

    fn check(&self, layer: usize, ids: &[u32]) -> Result<()> {
        let h = &self.header;
        if layer >= h.n_layers as usize {
            return Err(Error::LayerOutOfRange {
                layer,
                n_layers: h.n_layers as usize,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= h.vocab) {
            return Err(Error::IdOutOfRange {
                id,
                vocab: h.vocab as usize,
            });
        }
        Ok(())
    }

    fn gather(&self, layer: usize, ids: &[u32]) -> Result<Vec<f32>> {
        self.check(layer, ids)?;
        let h = &self.header;
        let (n, d) = (h.n_experts as usize, h.d as usize);
        let tb = h.token_bytes();
        let rb = h.row_bytes();
        let mut raw = vec![0u8; tb as usize];
        let mut out = vec![0.0f32; ids.len() * n * d];
        for (i, &id) in ids.iter().enumerate() {
            let offset = HEADER_BYTES + (layer as u64 * h.vocab as u64 + id as u64) * tb;
            self.read_at(&mut raw, offset)?;
            self.bytes_read.fetch_add(tb, Ordering::Relaxed);
            let dst = &mut out[i * n * d..(i + 1) * n * d];
            for (row, o) in raw.chunks_exact(rb).zip(dst.chunks_exact_mut(d)) {
                decode_row(row, h, o)?;
            }
        }
        Ok(out)
    }
}

type Job = Box<dyn FnOnce() + Send>;

/// Background readers serving prefetch tickets.
struct FetchPool {
    tx: Option<Sender<Job>>,
    workers: Vec<JoinHandle<()>>,
}

impl FetchPool {
    fn new(threads: usize) -> Self {
        let (tx, rx) = mpsc::channel::<Job>();
        let rx = Arc::new(Mutex::new(rx));
        let workers = (0..threads.max(1))
            .map(|_| {
                let rx = Arc::clone(&rx);
                std::thread::spawn(move || loop {
                    let job = match rx.lock() {
                        Ok(guard) => guard.recv(),
                        Err(_) => return,
                    };
                    match job {
                        Ok(job) => job(),
                        Err(_) => return,
                    }
                })
            })
            .collect();
        Self { tx: Some(tx), workers }
    }

    fn submit(&self, job: Job) -> bool {
        self.tx.as_ref().is_some_and(|tx| tx.send(job).is_ok())
    }
}

impl Drop for FetchPool {
    fn drop(&mut self) {
        self.tx.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// Read-only handle on a LUT file. Cloning shares the file and the meter.
#[derive(Clone)]
pub struct LutHandle {
    inner: Arc<Inner>,
    pool: Arc<OnceLock<FetchPool>>,
    path: PathBuf,
}

impl std::fmt::Debug for LutHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LutHandle")
            .field("path", &self.path)
            .field("header", &self.inner.header)
            .finish()
    }
}

/// Validates the header and payload length without reading the payload.
pub fn open_lut(path: impl AsRef<Path>) -> Result<LutHandle> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let len = file.metadata()?.len();
    let mut head = vec![0u8; HEADER_BYTES.min(len) as usize];
    let inner = Inner {
        file,
        header: LutFileHeader {
            version: 0,
            n_layers: 0,
            vocab: 0,
            n_experts: 0,
            d: 0,
            dtype: LutDtype::Fp32,
            block_size: 0,
        },
        bytes_read: AtomicU64::new(0),
    };
    inner.read_at(&mut head, 0)?;
    let header = LutFileHeader::from_bytes(&head)?;
    let expected = header.file_bytes()?;
    if expected != len {
        return Err(LutError::PayloadLengthMismatch {
            expected: expected - HEADER_BYTES,
            actual: len.saturating_sub(HEADER_BYTES),
        }
        .into());
    }
    Ok(LutHandle {
        inner: Arc::new(Inner { header, ..inner }),
        pool: Arc::new(OnceLock::new()),
        path: path.to_path_buf(),
    })
}

impl LutHandle {
    pub fn header(&self) -> &LutFileHeader {
        &self.inner.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// `|ids| × N × d` rows for `layer`, dequantized. Repeated ids are read
    /// again each time.
    pub fn gather(&self, layer: usize, ids: &[u32]) -> Result<Tensor<f32>> {
        let h = self.header();
        let data = self.inner.gather(layer, ids)?;
        Tensor::new(vec![ids.len(), h.n_experts as usize, h.d as usize], data)
    }

    /// Like [`LutHandle::gather`] but reads each distinct id once.
    pub fn gather_dedup(&self, layer: usize, ids: &[u32]) -> Result<Tensor<f32>> {
        let mut distinct: Vec<u32> = ids.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        let rows = self.inner.gather(layer, &distinct)?;
        let width = self.header().n_experts as usize * self.header().d as usize;
        let mut out = Vec::with_capacity(ids.len() * width);
        for id in ids {
            let at = distinct.binary_search(id).expect("id was collected");
            out.extend_from_slice(&rows[at * width..(at + 1) * width]);
        }
        Tensor::new(
            vec![ids.len(), self.header().n_experts as usize, self.header().d as usize],
            out,
        )
    }

    /// Starts reading rows in the background. Range errors surface here.
    pub fn prefetch(&self, layer: usize, ids: &[u32]) -> Result<FetchTicket> {
        self.inner.check(layer, ids)?;
        let (tx, rx) = mpsc::channel();
        let inner = Arc::clone(&self.inner);
        let owned = ids.to_vec();
        let job: Job = Box::new(move || {
            let _ = tx.send(inner.gather(layer, &owned));
        });
        let pool = self
            .pool
            .get_or_init(|| FetchPool::new(crate::runtime_threads().min(8)));
        let rx = if pool.submit(job) {
            rx
        } else {
            let (tx, rx) = mpsc::channel();
            let _ = tx.send(self.inner.gather(layer, ids));
            rx
        };
        let h = self.header();
        Ok(FetchTicket {
            layer,
            ids: ids.to_vec(),
            shape: vec![ids.len(), h.n_experts as usize, h.d as usize],
            rx: Some(rx),
        })
    }

    /// Total payload bytes read through this handle and its clones.
    /// Every layer, dequantized. The reads count toward the meter.
    pub fn read_tables(&self) -> Result<Vec<LutTable<f32>>> {
        let h = *self.header();
        let ids: Vec<u32> = (0..h.vocab).collect();
        (0..h.n_layers as usize)
            .map(|layer| {
                Ok(LutTable {
                    layer,
                    values: self.gather(layer, &ids)?,
                })
            })
            .collect()
    }

    pub fn bytes_read(&self) -> u64 {
        self.inner.bytes_read.load(Ordering::Relaxed)
    }

    pub fn reset_meter(&self) {
        self.inner.bytes_read.store(0, Ordering::Relaxed);
    }
}

/// Pending result of [`LutHandle::prefetch`]. Single owner, single use.
#[derive(Debug)]
pub struct FetchTicket {
    pub layer: usize,
    pub ids: Vec<u32>,
    shape: Vec<usize>,
    rx: Option<Receiver<Result<Vec<f32>>>>,
}

impl FetchTicket {
    /// Blocks until the rows are available. A second call fails.
    pub fn wait(&mut self) -> Result<Tensor<f32>> {
        let rx = self.rx.take().ok_or(LutError::TicketConsumed)?;
        let data = rx
            .recv()
            .map_err(|_| Error::Io(std::io::Error::other("fetch worker terminated")))??;
        Tensor::new(self.shape.clone(), data)
    }

    pub fn is_consumed(&self) -> bool {
        self.rx.is_none()
    }
}

impl RowSource<f32> for LutHandle {
    fn fetch_rows(&self, layer: usize, ids: &[u32]) -> Result<Vec<f32>> {
        self.inner.gather(layer, ids)
    }

    fn begin_fetch<'a>(&'a self, layer: usize, ids: &[u32]) -> Result<PendingRows<'a, f32>>
    where
        f32: 'a,
    {
        let mut ticket = self.prefetch(layer, ids)?;
        Ok(Box::new(move || Ok(ticket.wait()?.into_data())))
    }
}
