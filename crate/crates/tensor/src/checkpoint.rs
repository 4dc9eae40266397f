//! Flat container of named arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      5 bytes  "JOVA1"
//! endianness u16      0xFEFF (bytes FF FE)
//! count      u32
//! count × record:
//!   name_len u32, name (UTF-8)
//!   dtype    u8       0 = f64, 1 = f32, 2 = u8
//!   rank     u32, extents u64 × rank
//!   payload  product(extents) little-endian elements
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 5] = b"JOVA1";
const ENDIAN_MARK: u16 = 0xFEFF;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a JOVA1 container")]
    BadMagic,
    #[error("unsupported endianness marker {0:#06x}")]
    BadEndianness(u16),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("array name is not UTF-8")]
    BadName,
    #[error("array {name:?}: payload has {len} elements but shape is {shape:?}")]
    LengthMismatch {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("duplicate array name {0:?}")]
    Duplicate(String),
    #[error("missing array {0:?}")]
    Missing(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::F32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn code(&self) -> u8 {
        match self {
            ArrayData::F64(_) => 0,
            ArrayData::F32(_) => 1,
            ArrayData::U8(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    /// Stores the tensor at its own precision.
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        let data = match t.dtype() {
            DType::F64 => ArrayData::F64(t.data().to_vec()),
            DType::F32 => ArrayData::F32(t.data().iter().map(|&x| x as f32).collect()),
        };
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn bytes(name: impl Into<String>, shape: Vec<usize>, data: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: ArrayData::U8(data),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let (data, dtype) = match &self.data {
            ArrayData::F64(v) => (v.clone(), DType::F64),
            ArrayData::F32(v) => (v.iter().map(|&x| x as f64).collect(), DType::F32),
            ArrayData::U8(v) => (v.iter().map(|&x| x as f64).collect(), DType::F64),
        };
        Tensor::new(self.shape.clone(), data)
            .expect("container arrays are validated on read")
            .with_dtype(dtype)
    }
}

/// Ordered collection of uniquely named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, array: NamedArray) -> Result<(), CheckpointError> {
        if self.arrays.iter().any(|a| a.name == array.name) {
            return Err(CheckpointError::Duplicate(array.name));
        }
        if array.shape.iter().product::<usize>() != array.data.len() {
            return Err(CheckpointError::LengthMismatch {
                len: array.data.len(),
                name: array.name,
                shape: array.shape,
            });
        }
        self.arrays.push(array);
        Ok(())
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<(), CheckpointError> {
        self.push(NamedArray::from_tensor(name, t))
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: &str) -> Result<(), CheckpointError> {
        let bytes = text.as_bytes().to_vec();
        self.push(NamedArray::bytes(name, vec![bytes.len()], bytes))
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedArray, CheckpointError> {
        self.get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn text(&self, name: &str) -> Result<String, CheckpointError> {
        match &self.require(name)?.data {
            ArrayData::U8(b) => String::from_utf8(b.clone()).map_err(|_| CheckpointError::BadName),
            other => Err(CheckpointError::UnknownDtype(other.code())),
        }
    }

    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&ENDIAN_MARK.to_le_bytes())?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for a in &self.arrays {
            w.write_all(&(a.name.len() as u32).to_le_bytes())?;
            w.write_all(a.name.as_bytes())?;
            w.write_all(&[a.data.code()])?;
            w.write_all(&(a.shape.len() as u32).to_le_bytes())?;
            for &e in &a.shape {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            match &a.data {
                ArrayData::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                ArrayData::F32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                ArrayData::U8(v) => w.write_all(v)?,
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mark = u16::from_le_bytes(read_array(r)?);
        if mark != ENDIAN_MARK {
            return Err(CheckpointError::BadEndianness(mark));
        }
        let count = u32::from_le_bytes(read_array(r)?);
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(read_array(r)?) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| CheckpointError::BadName)?;
            let [code] = read_array::<_, 1>(r)?;
            let rank = u32::from_le_bytes(read_array(r)?) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(read_array(r)?) as usize);
            }
            let n: usize = shape.iter().product();
            let data = match code {
                0 => ArrayData::F64(
                    (0..n)
                        .map(|_| read_array(r).map(f64::from_le_bytes))
                        .collect::<io::Result<_>>()?,
                ),
                1 => ArrayData::F32(
                    (0..n)
                        .map(|_| read_array(r).map(f32::from_le_bytes))
                        .collect::<io::Result<_>>()?,
                ),
                2 => {
                    let mut v = vec![0u8; n];
                    r.read_exact(&mut v)?;
                    ArrayData::U8(v)
                }
                c => return Err(CheckpointError::UnknownDtype(c)),
            };
            ckpt.push(NamedArray { name, shape, data })?;
        }
        Ok(ckpt)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, CheckpointError> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let mut c = Checkpoint::new();
        c.push(NamedArray::bytes("m", vec![2], vec![0, 1])).unwrap();
        let b = c.to_bytes();
        assert_eq!(&b[..5], b"JOVA1");
        assert_eq!(&b[5..7], &[0xFF, 0xFE]);
        assert_eq!(&b[7..11], &1u32.to_le_bytes());
        assert_eq!(&b[11..15], &1u32.to_le_bytes());
        assert_eq!(b[15], b'm');
        assert_eq!(b[16], 2);
        assert_eq!(&b[17..21], &1u32.to_le_bytes());
        assert_eq!(&b[21..29], &2u64.to_le_bytes());
        assert_eq!(&b[29..], &[0, 1]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            Checkpoint::from_bytes(b"JOVA2\xFF\xFE\0\0\0\0"),
            Err(CheckpointError::BadMagic)
        ));
        let mut c = Checkpoint::new();
        c.push_tensor("w", &Tensor::ones([3])).unwrap();
        let b = c.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&b[..b.len() - 1]),
            Err(CheckpointError::Io(_))
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = Checkpoint::new();
        c.push_tensor("w", &Tensor::ones([1])).unwrap();
        assert!(matches!(
            c.push_tensor("w", &Tensor::ones([1])),
            Err(CheckpointError::Duplicate(_))
        ));
    }
}
