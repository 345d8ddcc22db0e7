//! `FTPGEMB1` binary store format.
//!
//! All integers little-endian:
//!
//! ```text
//! magic "FTPGEMB1"      8 bytes
//! version               u32 (= 1)
//! d, m                  u32, u32
//! encoder_seed          u64
//! num_datasets          u32
//! per dataset:          u32 name_len, name (UTF-8), u32 num_classes
//!   per class:          u32 name_len, name, u8 split (0 base, 1 new),
//!                       u32 num_train, u32 num_eval
//! payload (f32):        every class token in class order, then per class
//!                       its train images followed by its eval images
//! ```
//!
//! Floats are `f32` on disk and widened to `f64` on load.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::store::{ClassRecord, Dataset, EmbeddingStore, Split};
use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 8] = b"FTPGEMB1";
pub const STORE_VERSION: u32 = 1;
const MAX_NAME_LEN: u32 = 1 << 16;

/// Wraps a reader and reports the byte offset of a short read.
pub(crate) struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.offset
    }

    pub(crate) fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    pub(crate) fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        let mut read = 0;
        while read < buf.len() {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => {
                    return Err(Error::Truncated {
                        offset: self.offset + read as u64,
                        source: io::Error::new(
                            io::ErrorKind::UnexpectedEof,
                            format!("needed {} more bytes", buf.len() - read),
                        ),
                    })
                }
                Ok(n) => read += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => {
                    return Err(Error::Truncated {
                        offset: self.offset + read as u64,
                        source: e,
                    })
                }
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.offset;
        let len = self.u32()?;
        if len > MAX_NAME_LEN {
            return Err(Error::Format(format!("name length {len} at byte {at} exceeds {MAX_NAME_LEN}")));
        }
        let mut buf = vec![0u8; len as usize];
        self.fill(&mut buf)?;
        String::from_utf8(buf).map_err(|_| Error::Format(format!("name at byte {at} is not UTF-8")))
    }

    fn vector(&mut self, dim: usize) -> Result<Vec<f64>> {
        (0..dim).map(|_| self.f32().map(f64::from)).collect()
    }

    /// Errors unless the stream is exhausted.
    pub(crate) fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        loop {
            match self.inner.read(&mut probe) {
                Ok(0) => return Ok(()),
                Ok(_) => {
                    return Err(Error::Format(format!("trailing bytes after offset {}", self.offset)))
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

fn put_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn put_vec<W: Write>(w: &mut W, v: &[f64]) -> io::Result<()> {
    for &x in v {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    Ok(())
}

fn count(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

pub fn write_store<W: Write>(store: &EmbeddingStore, mut w: W) -> Result<()> {
    store.validate()?;
    w.write_all(STORE_MAGIC)?;
    w.write_all(&STORE_VERSION.to_le_bytes())?;
    w.write_all(&count(store.dim, "d")?.to_le_bytes())?;
    w.write_all(&count(store.prompt_len, "m")?.to_le_bytes())?;
    w.write_all(&store.encoder_seed.to_le_bytes())?;
    w.write_all(&count(store.datasets.len(), "dataset count")?.to_le_bytes())?;
    for d in &store.datasets {
        put_str(&mut w, &d.name)?;
        w.write_all(&count(d.classes.len(), "class count")?.to_le_bytes())?;
        for c in &d.classes {
            put_str(&mut w, &c.name)?;
            w.write_all(&[c.split.flag()])?;
            w.write_all(&count(c.train.len(), "train count")?.to_le_bytes())?;
            w.write_all(&count(c.eval.len(), "eval count")?.to_le_bytes())?;
        }
    }
    for (_, _, c) in store.classes() {
        put_vec(&mut w, &c.token)?;
    }
    for (_, _, c) in store.classes() {
        for img in c.train.iter().chain(&c.eval) {
            put_vec(&mut w, img)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_store<R: Read>(r: R) -> Result<EmbeddingStore> {
    let mut r = OffsetReader::new(r);
    let magic = r.bytes::<8>()?;
    if &magic != STORE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            std::str::from_utf8(STORE_MAGIC).unwrap()
        )));
    }
    let version = r.u32()?;
    if version != STORE_VERSION {
        return Err(Error::Format(format!("unsupported store version {version}")));
    }
    let dim = r.u32()? as usize;
    let prompt_len = r.u32()? as usize;
    let encoder_seed = r.u64()?;
    let num_datasets = r.u32()?;
    let mut datasets = Vec::new();
    let mut counts = Vec::new();
    for _ in 0..num_datasets {
        let name = r.string()?;
        let n = r.u32()?;
        let mut classes = Vec::new();
        for _ in 0..n {
            let cname = r.string()?;
            let at = r.offset();
            let split = Split::from_flag(r.u8()?)
                .ok_or_else(|| Error::Format(format!("invalid split flag at byte {at}")))?;
            let train = r.u32()? as usize;
            let eval = r.u32()? as usize;
            counts.push((train, eval));
            classes.push(ClassRecord {
                name: cname,
                split,
                token: Vec::new(),
                train: Vec::new(),
                eval: Vec::new(),
            });
        }
        datasets.push(Dataset { name, classes });
    }
    for c in datasets.iter_mut().flat_map(|d| d.classes.iter_mut()) {
        c.token = r.vector(dim)?;
    }
    let mut counts = counts.into_iter();
    for c in datasets.iter_mut().flat_map(|d| d.classes.iter_mut()) {
        let (train, eval) = counts.next().expect("one count per class");
        c.train = (0..train).map(|_| r.vector(dim)).collect::<Result<_>>()?;
        c.eval = (0..eval).map(|_| r.vector(dim)).collect::<Result<_>>()?;
    }
    r.expect_end()?;
    let store = EmbeddingStore {
        dim,
        prompt_len,
        encoder_seed,
        datasets,
    };
    store.validate()?;
    Ok(store)
}

pub fn save_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    write_store(store, BufWriter::new(File::create(path)?))
}

pub fn load_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    read_store(BufReader::new(File::open(path)?))
}
