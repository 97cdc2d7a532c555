//! `GDNV` checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic    b"GDNV"
//! version  u32
//! repeated until EOF:
//!   name_len u32, name (UTF-8)
//!   rank     u32, dims (u64 × rank)
//!   dtype    u8   (0 = f32)
//!   values   (product of dims) × 4 bytes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GDNV";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// One named array.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u64>,
    pub values: Vec<f32>,
}

impl Record {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, values: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let expected: u64 = dims.iter().product();
        if expected != values.len() as u64 {
            return Err(Error::Format(format!(
                "record {name}: dims {dims:?} hold {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self { name, dims, values })
    }

    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Self {
            name: name.into(),
            dims: t.shape().iter().map(|&d| d as u64).collect(),
            values: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    /// Rank-4 records map directly; lower ranks are right-aligned into
    /// (1, .., d0, d1).
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dims.len() > 4 {
            return Err(Error::Format(format!(
                "record {} has rank {} > 4",
                self.name,
                self.dims.len()
            )));
        }
        let mut shape = [1usize; 4];
        let off = 4 - self.dims.len();
        for (i, &d) in self.dims.iter().enumerate() {
            shape[off + i] = d as usize;
        }
        Tensor::new(
            shape,
            self.values.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
    }
}

/// Ordered collection of records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Record> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing record {name}")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for r in &self.records {
            let name = r.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(r.dims.len() as u32).to_le_bytes())?;
            for d in &r.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            w.write_all(&[DTYPE_F32])?;
            for v in &r.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut out = Checkpoint::new();
        loop {
            let mut len = [0u8; 4];
            match r.read_exact(&mut len) {
                Ok(()) => {}
                Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                dims.push(u64::from_le_bytes(b));
            }
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            if tag[0] != DTYPE_F32 {
                return Err(Error::Format(format!(
                    "record {name}: unsupported dtype {}",
                    tag[0]
                )));
            }
            let count: u64 = dims.iter().product();
            let mut raw = vec![0u8; count as usize * 4];
            r.read_exact(&mut raw)?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            out.push(Record { name, dims, values });
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes() {
        let mut ck = Checkpoint::new();
        ck.push(Record::new("a", vec![2], vec![1.0, -2.5]).unwrap());
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"GDNV");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes()); // name length
        assert_eq!(buf[12], b'a');
        assert_eq!(&buf[13..17], &1u32.to_le_bytes()); // rank
        assert_eq!(&buf[17..25], &2u64.to_le_bytes());
        assert_eq!(buf[25], 0);
        assert_eq!(&buf[26..30], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 34);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::read_from(&mut &b"NOPE\x01\0\0\0"[..]).is_err());
        assert!(Checkpoint::read_from(&mut &b"GDNV\x07\0\0\0"[..]).is_err());
        assert!(Record::new("x", vec![3], vec![0.0]).is_err());
    }

    #[test]
    fn tensor_records_align_right() {
        let r = Record::new("v", vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(r.to_tensor::<f32>().unwrap().shape(), [1, 1, 2, 3]);
    }

    proptest! {
        #[test]
        fn roundtrip(entries in prop::collection::vec(
            ("[a-z./_0-9]{1,12}", prop::collection::vec(1u64..4, 0..4)), 0..5), seed in any::<u32>()) {
            let mut ck = Checkpoint::new();
            let mut s = seed as f32;
            for (name, dims) in entries {
                let n: u64 = dims.iter().product();
                let values = (0..n).map(|i| { s = s * 1.3 + i as f32; s.sin() * 1e3 }).collect();
                ck.push(Record::new(name, dims, values).unwrap());
            }
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }
}
