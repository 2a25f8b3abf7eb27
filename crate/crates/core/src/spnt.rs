//! `SPNT` tensor container files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPNT" | version: u32 | count: u32 |
//!   count × ( name_len: u16 | name: utf-8 | rank: u8 | extents: rank × u32 | data: f64 × Πextents )
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Result, SpenError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPNT";
pub const VERSION: u32 = 1;

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let items: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (name, t) in items {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len())
            .map_err(|_| SpenError::Config(format!("tensor name too long: {} bytes", nb.len())))?;
        let rank = u8::try_from(t.rank()).map_err(|_| {
            SpenError::Config(format!("tensor `{name}` rank {} too large", t.rank()))
        })?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e)
                .map_err(|_| SpenError::Config(format!("tensor `{name}` extent {e} too large")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(SpenError::Format {
                offset: self.pos as u64,
                msg: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(SpenError::Format {
            offset: 0,
            msg: "bad magic, expected SPNT".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(SpenError::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = r.pos as u64;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap());
        let name = std::str::from_utf8(r.take(len as usize, "name")?)
            .map_err(|_| SpenError::Format {
                offset: at + 2,
                msg: "tensor name is not utf-8".into(),
            })?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let at = r.pos as u64;
        let bytes = r.take(n * 8, "tensor data")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| SpenError::Format {
            offset: at,
            msg: format!("tensor `{name}`: {e}"),
        })?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(SpenError::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    Ok(out)
}

pub fn write_file<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}

/// Look up a tensor by name in a decoded file.
pub fn find<'a>(tensors: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| SpenError::Format {
            offset: 0,
            msg: format!("missing tensor `{name}`"),
        })
}
