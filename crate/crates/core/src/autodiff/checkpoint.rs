//! Binary parameter container.
//!
//! All integers and floats are little-endian. Strings are a `u32` byte
//! length followed by UTF-8 bytes. Floats are written as their raw IEEE-754
//! bit patterns, so a round trip is bit-exact.
//!
//! ```text
//! magic      8 bytes   "EGCKPT\0\0"
//! version    u32       currently 1
//! n_meta     u32
//!   key      string
//!   value    string
//! n_stores   u32
//!   name     string
//!   seed     u64       initialization seed of the store
//!   n_params u32
//!     name   string
//!     ndim   u32
//!     dims   ndim x u64
//!     data   prod(dims) x f64, row-major
//! ```
//!
//! Gradient accumulators are not stored; they load as zeros.

use std::io::{Read, Write};

use super::params::{Param, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EGCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

/// Metadata plus named parameter stores.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Container {
    pub metadata: Vec<(String, String)>,
    pub stores: Vec<(String, ParamStore)>,
}

impl Container {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn store(&self, name: &str) -> Option<&ParamStore> {
        self.stores.iter().find(|(k, _)| k == name).map(|(_, s)| s)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        write_u32(w, self.metadata.len())?;
        for (k, v) in &self.metadata {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        write_u32(w, self.stores.len())?;
        for (name, store) in &self.stores {
            write_str(w, name)?;
            w.write_all(&store.seed().to_le_bytes())?;
            write_u32(w, store.len())?;
            for (pname, p) in store.iter() {
                write_str(w, pname)?;
                write_u32(w, p.value.shape().len())?;
                for &d in p.value.shape() {
                    w.write_all(&(d as u64).to_le_bytes())?;
                }
                for &x in p.value.data() {
                    w.write_all(&x.to_bits().to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let c = Self::read_from(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len())));
        }
        Ok(c)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic; not a checkpoint".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version}"
            )));
        }
        let mut c = Container::default();
        for _ in 0..read_u32(r)? {
            let k = read_str(r)?;
            let v = read_str(r)?;
            c.metadata.push((k, v));
        }
        for _ in 0..read_u32(r)? {
            let name = read_str(r)?;
            let seed = read_u64(r)?;
            let mut store = ParamStore::new(seed);
            for _ in 0..read_u32(r)? {
                let pname = read_str(r)?;
                let ndim = read_u32(r)? as usize;
                let shape = (0..ndim)
                    .map(|_| read_u64(r).map(|d| d as usize))
                    .collect::<Result<Vec<_>>>()?;
                let n: usize = shape.iter().product();
                if n > 1 << 28 {
                    return Err(Error::Format(format!("parameter `{pname}` too large")));
                }
                let data = (0..n)
                    .map(|_| read_u64(r).map(f64::from_bits))
                    .collect::<Result<Vec<_>>>()?;
                let value = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
                let grad = Tensor::zeros(value.shape());
                store.raw_insert(pname, Param { value, grad });
            }
            c.stores.push((name, store));
        }
        Ok(c)
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated checkpoint".into())
    } else {
        Error::Io(e)
    }
}

fn write_u32(w: &mut impl Write, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format("length exceeds u32".into()))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(Error::Format("string too long".into()));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|_| Error::Format("invalid utf-8".into()))
}
