//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//! `b"FPETSCKP"`, `u32` version, `u32` tensor count, then per tensor a `u32`
//! name length, the UTF-8 name, a `u8` rank, `rank` `u64` extents and the
//! values as `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FPETSCKP";
pub const VERSION: u32 = 1;

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    /// Inserts or replaces `name`, keeping first-insertion order.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stores UTF-8 text as a byte-valued tensor.
    pub fn insert_text(&mut self, name: impl Into<String>, text: &str) {
        let bytes: Vec<f64> = text.bytes().map(f64::from).collect();
        let t = if bytes.is_empty() {
            Tensor::zeros(&[0])
        } else {
            Tensor::vector(bytes)
        };
        self.insert(name, t);
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let t = self.require(name)?;
        let bytes: Vec<u8> = t
            .data()
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::Checkpoint(format!("{name} is not a byte tensor")))
                }
            })
            .collect::<Result<_>>()?;
        String::from_utf8(bytes).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: origin.to_path_buf(),
            reason,
        };
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic).map_err(|_| corrupt("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let version = read_u32(&mut r).map_err(|_| corrupt("truncated header".into()))?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported container version {version}")));
        }
        let count = read_u32(&mut r).map_err(|_| corrupt("truncated header".into()))?;
        let mut entries = Vec::with_capacity(count as usize);
        for i in 0..count {
            let trunc = |_| corrupt(format!("truncated tensor {i}"));
            let name_len = read_u32(&mut r).map_err(trunc)? as usize;
            if name_len > r.len() {
                return Err(corrupt(format!("truncated tensor {i}")));
            }
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name).map_err(trunc)?;
            let name =
                String::from_utf8(name).map_err(|e| corrupt(format!("tensor {i} name: {e}")))?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank).map_err(trunc)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b).map_err(trunc)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.len()))
                .ok_or_else(|| corrupt(format!("tensor {name} extents exceed file")))?;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b).map_err(trunc)?;
                data.push(f64::from_le_bytes(b));
            }
            let t = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
            entries.push((name, t));
        }
        if !r.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", r.len())));
        }
        Ok(Container { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes, path)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> std::io::Result<()> {
    r.read_exact(buf)
}

fn read_u32(r: &mut &[u8]) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut c = Container::new();
        c.insert("x", Tensor::vector(vec![1.5]));
        let b = c.to_bytes();
        assert_eq!(&b[..8], b"FPETSCKP");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 1);
        assert_eq!(b[20], b'x');
        assert_eq!(b[21], 1);
        assert_eq!(u64::from_le_bytes(b[22..30].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(b[30..38].try_into().unwrap()), 1.5);
        assert_eq!(b.len(), 38);
    }

    #[test]
    fn unknown_version_rejected() {
        let mut b = Container::new().to_bytes();
        b[8] = 2;
        let err = Container::from_bytes(&b, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn truncation_rejected() {
        let mut c = Container::new();
        c.insert("w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = c.to_bytes();
        for cut in [4, 15, 25, b.len() - 1] {
            assert!(Container::from_bytes(&b[..cut], Path::new("x")).is_err());
        }
    }

    #[test]
    fn text_entries() {
        let mut c = Container::new();
        c.insert_text("manifest.config", "hidden=64\nkernel=sincos\n");
        c.insert_text("empty", "");
        let back = Container::from_bytes(&c.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back.text("manifest.config").unwrap(), "hidden=64\nkernel=sincos\n");
        assert_eq!(back.text("empty").unwrap(), "");
    }

    proptest! {
        #[test]
        fn round_trip(
            tensors in proptest::collection::vec(
                (1usize..4, 1usize..5, proptest::collection::vec(-1e6f64..1e6, 20)),
                0..5,
            )
        ) {
            let mut c = Container::new();
            for (i, (r, k, vals)) in tensors.iter().enumerate() {
                let data = vals[..r * k].to_vec();
                c.insert(format!("t{i}.weight"), Tensor::matrix(*r, *k, data));
            }
            let back = Container::from_bytes(&c.to_bytes(), Path::new("x")).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
