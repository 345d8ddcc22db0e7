//! Flat parameter vectors and their `FTPGSNP1` file format.
//!
//! Layout: magic `"FTPGSNP1"`, `u32` version (= 1), `u32` method id,
//! `u32` parameter count, then the parameters as little-endian `f64`.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::OffsetReader;
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"FTPGSNP1";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fedtpg")]
    FedTpg,
    #[serde(rename = "fedcoop")]
    FedCoop,
    #[serde(rename = "coop_local")]
    CoopLocal,
    #[serde(rename = "fedkgcoop")]
    FedKgCoop,
    #[serde(rename = "zeroshot")]
    ZeroShot,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::FedTpg,
        Method::FedCoop,
        Method::CoopLocal,
        Method::FedKgCoop,
        Method::ZeroShot,
    ];

    pub fn id(self) -> u32 {
        match self {
            Method::FedTpg => 0,
            Method::FedCoop => 1,
            Method::CoopLocal => 2,
            Method::FedKgCoop => 3,
            Method::ZeroShot => 4,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::FedTpg => "fedtpg",
            Method::FedCoop => "fedcoop",
            Method::CoopLocal => "coop_local",
            Method::FedKgCoop => "fedkgcoop",
            Method::ZeroShot => "zeroshot",
        }
    }

    /// Whether the method learns prompts through the generator network.
    pub fn uses_generator(self) -> bool {
        self == Method::FedTpg
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// An ordered parameter vector tagged with the method that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    pub method: Method,
    pub values: Vec<f64>,
}

impl ModelSnapshot {
    pub fn new(method: Method, values: Vec<f64>) -> Self {
        Self { method, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.method == other.method
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let count = u32::try_from(self.values.len())
            .map_err(|_| Error::Format(format!("{} parameters do not fit in u32", self.values.len())))?;
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&self.method.id().to_le_bytes())?;
        w.write_all(&count.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = OffsetReader::new(r);
        if &r.bytes::<8>()? != SNAPSHOT_MAGIC {
            return Err(Error::Format("bad snapshot magic".into()));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!("unsupported snapshot version {version}")));
        }
        let id = r.u32()?;
        let method = Method::from_id(id).ok_or_else(|| Error::Format(format!("unknown method id {id}")))?;
        let count = r.u32()? as usize;
        let values = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        r.expect_end()?;
        Ok(Self { method, values })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
