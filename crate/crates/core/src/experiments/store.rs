//! Binary checkpoint and mask files, plus the per-run directory layout.
//!
//! All integers are little-endian `u32`, all reals little-endian `f64`.
//! Checkpoint: `GTCK`, version, `p` (input width), `d_emb`, `d_hid`, then tensors as
//! (name length, name bytes, rows, cols, row-major data) until end of file.
//! Mask: `GTMK`, version, `p`, `d_emb`, `d_hid`, then tensors as
//! (name length, name bytes, rows, cols, one byte per entry).

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{Layer, MaskSet, ModelDims, ModelParams, Tensors};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GTCK";
pub const MASK_MAGIC: &[u8; 4] = b"GTMK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> StoreError {
    StoreError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn to_u32(v: usize) -> u32 {
    u32::try_from(v).expect("dimension exceeds u32")
}

fn header(magic: &[u8; 4], dims: &ModelDims) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    for v in [FORMAT_VERSION, to_u32(dims.d_in), to_u32(dims.d_emb), to_u32(dims.d_hid)] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn encode(magic: &[u8; 4], dims: &ModelDims, tensors: &Tensors, mut push: impl FnMut(&mut Vec<u8>, f64)) -> Vec<u8> {
    let mut out = header(magic, dims);
    for (l, m) in tensors.iter() {
        let name = l.name().as_bytes();
        out.extend_from_slice(&to_u32(name.len()).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&to_u32(m.rows()).to_le_bytes());
        out.extend_from_slice(&to_u32(m.cols()).to_le_bytes());
        for &v in m.data() {
            push(&mut out, v);
        }
    }
    out
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    encode(CHECKPOINT_MAGIC, &params.dims, &params.weights, |out, v| {
        out.extend_from_slice(&v.to_le_bytes())
    })
}

pub fn encode_mask(dims: &ModelDims, mask: &MaskSet) -> Vec<u8> {
    encode(MASK_MAGIC, dims, &mask.0, |out, v| out.push(u8::from(v != 0.0)))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(fmt_err(self.path, "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn decode(
    bytes: &[u8],
    path: &Path,
    magic: &[u8; 4],
    width: usize,
    read: impl Fn(&[u8]) -> Result<f64>,
) -> Result<(ModelDims, Tensors)> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(4)? != magic {
        return Err(fmt_err(path, "bad magic"));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(fmt_err(path, format!("unsupported version {version}")));
    }
    let (p, d_emb, d_hid) = (c.u32()?, c.u32()?, c.u32()?);
    // `p` is the input width; the output width is read off `W_unemb`.
    let mut dims = ModelDims::modular(p, d_emb, d_hid);
    let mut slots: [Option<Matrix>; 4] = Default::default();
    while !c.at_end() {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| fmt_err(path, "tensor name is not UTF-8"))?;
        let layer = Layer::from_name(name).ok_or_else(|| fmt_err(path, format!("unknown tensor {name}")))?;
        let (rows, cols) = (c.u32()?, c.u32()?);
        if layer == Layer::Unemb && rows == d_emb {
            dims.d_out = cols;
        }
        if (rows, cols) != dims.shape(layer) {
            return Err(fmt_err(path, format!("{name} has shape {rows}x{cols}")));
        }
        let raw = c.take(rows * cols * width)?;
        let data = raw.chunks_exact(width).map(&read).collect::<Result<Vec<f64>>>()?;
        if slots[layer.index()].replace(Matrix::from_vec(rows, cols, data).expect("sized")).is_some() {
            return Err(fmt_err(path, format!("duplicate tensor {name}")));
        }
    }
    let mut mats = Vec::with_capacity(4);
    for (l, slot) in Layer::ALL.into_iter().zip(slots) {
        mats.push(slot.ok_or_else(|| fmt_err(path, format!("missing tensor {}", l.name())))?);
    }
    let mats: [Matrix; 4] = mats.try_into().expect("four tensors");
    Ok((dims, Tensors(mats)))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let (dims, t) = decode(bytes, path, CHECKPOINT_MAGIC, 8, |b| {
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    })?;
    ModelParams::from_tensors(dims, t).map_err(|e| fmt_err(path, e.to_string()))
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<MaskSet> {
    let (_, t) = decode(bytes, path, MASK_MAGIC, 1, |b| match b[0] {
        0 => Ok(0.0),
        1 => Ok(1.0),
        v => Err(fmt_err(path, format!("mask byte {v} is not 0 or 1"))),
    })?;
    Ok(MaskSet(t))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(io_err(path))?;
    Ok(buf)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    write_bytes(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&read_bytes(path)?, path)
}

pub fn save_mask(path: &Path, dims: &ModelDims, mask: &MaskSet) -> Result<()> {
    write_bytes(path, &encode_mask(dims, mask))
}

pub fn load_mask(path: &Path) -> Result<MaskSet> {
    decode_mask(&read_bytes(path)?, path)
}

pub fn save_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn load_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Paths inside one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn trace(&self) -> PathBuf {
        self.root.join("trace.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn snapshot(&self, epoch: usize) -> PathBuf {
        self.root.join("snapshots").join(format!("epoch_{epoch:06}.json"))
    }

    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch:06}.bin"))
    }

    pub fn init_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("init.bin")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("final.bin")
    }

    pub fn mask(&self, name: &str) -> PathBuf {
        self.root.join("masks").join(format!("{name}.bin"))
    }

    /// Epochs of every `checkpoints/epoch_*.bin` present, ascending.
    pub fn checkpoint_epochs(&self) -> Vec<usize> {
        let mut out: Vec<usize> = fs::read_dir(self.root.join("checkpoints"))
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_prefix("epoch_")?.strip_suffix(".bin")?.parse().ok()
            })
            .collect();
        out.sort_unstable();
        out
    }
}
