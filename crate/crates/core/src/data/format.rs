//! Binary tensor and checkpoint files.
//!
//! Tensor file (all integers little-endian):
//!
//! ```text
//! "FNT1" | dtype u8 (0 = f32, 1 = f64) | ndim u8 | ndim × u64 dims | row-major payload
//! ```
//!
//! Checkpoint file:
//!
//! ```text
//! "FNC1" | count u32 | count × (name_len u16 | UTF-8 name | tensor file)
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"FNT1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FNC1";

/// A tensor whose element type is only known at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn from_typed<T: Scalar>(t: &Tensor<T>) -> DynTensor {
        match T::DTYPE {
            DType::F32 => DynTensor::F32(t.cast()),
            DType::F64 => DynTensor::F64(t.cast()),
        }
    }

    /// Converts to `T`; exact when the stored type is `T`.
    pub fn to_typed<T: Scalar>(&self) -> Tensor<T> {
        match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.cast(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            DynTensor::F32(_) => DType::F32,
            DynTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
        }
    }

    pub fn bit_eq(&self, other: &DynTensor) -> bool {
        match (self, other) {
            (DynTensor::F32(a), DynTensor::F32(b)) => a.bit_eq(b),
            (DynTensor::F64(a), DynTensor::F64(b)) => a.bit_eq(b),
            _ => false,
        }
    }
}

fn encode_typed<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::InvalidArgument("too many dimensions".into()));
    }
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(T::DTYPE.tag());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(t.len() * T::DTYPE.size());
    for &v in t.data() {
        v.put_le(out);
    }
    Ok(())
}

pub fn encode_tensor(t: &DynTensor, out: &mut Vec<u8>) -> Result<()> {
    match t {
        DynTensor::F32(t) => encode_typed(t, out),
        DynTensor::F64(t) => encode_typed(t, out),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn decode_typed<T: Scalar>(r: &mut Reader<'_>, shape: Vec<usize>) -> Result<Tensor<T>> {
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::Truncated("tensor payload"))?;
    let size = T::DTYPE.size();
    let bytes = r.take(n.checked_mul(size).ok_or(Error::Truncated("tensor payload"))?, "tensor payload")?;
    let data = bytes.chunks_exact(size).map(T::get_le).collect();
    Tensor::from_vec(&shape, data)
}

fn decode_tensor_at(r: &mut Reader<'_>) -> Result<DynTensor> {
    if r.buf.len() - r.pos < 4 {
        return Err(Error::NotTensorFile);
    }
    if r.take(4, "magic")? != TENSOR_MAGIC {
        return Err(Error::NotTensorFile);
    }
    let header = r.take(2, "tensor header")?;
    let dtype = DType::from_tag(header[0]).ok_or(Error::NotTensorFile)?;
    let ndim = header[1] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u64::from_le_bytes(r.take(8, "tensor dims")?.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| Error::Truncated("tensor dims"))?);
    }
    Ok(match dtype {
        DType::F32 => DynTensor::F32(decode_typed(r, shape)?),
        DType::F64 => DynTensor::F64(decode_typed(r, shape)?),
    })
}

/// Decodes one tensor; trailing bytes are rejected.
pub fn decode_tensor(bytes: &[u8]) -> Result<DynTensor> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let t = decode_tensor_at(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::InvalidArgument("trailing bytes after tensor payload".into()));
    }
    Ok(t)
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode_typed(t, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a tensor file and converts it to `T`.
pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    Ok(decode_tensor(&fs::read(path)?)?.to_typed())
}

/// Ordered archive of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, DynTensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`, keeping first-insertion order.
    pub fn insert_dyn(&mut self, name: &str, t: DynTensor) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name.to_string(), t)),
        }
    }

    pub fn insert<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.insert_dyn(name, DynTensor::from_typed(t));
    }

    pub fn get_dyn(&self, name: &str) -> Option<&DynTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.get_dyn(name)
            .map(DynTensor::to_typed)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get_dyn(name).is_some()
    }

    pub fn remove(&mut self, name: &str) -> Option<DynTensor> {
        let pos = self.entries.iter().position(|(n, _)| n == name)?;
        Some(self.entries.remove(pos).1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> &[(String, DynTensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copies every entry of `other` into `self`, replacing on name clash.
    pub fn merge(&mut self, other: &Checkpoint) {
        for (n, t) in &other.entries {
            self.insert_dyn(n, t.clone());
        }
    }

    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::InvalidArgument("too many checkpoint entries".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor(t, &mut out)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if bytes.len() < 4 || r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::NotCheckpoint);
        }
        let count = u32::from_le_bytes(r.take(4, "entry count")?.try_into().expect("4 bytes"));
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::CorruptCheckpoint(format!("duplicate tensor name `{name}`")));
            }
            let t = decode_tensor_at(&mut r)?;
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        Checkpoint::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
        let mut v = Vec::new();
        encode_tensor(&DynTensor::from_typed(t), &mut v).unwrap();
        v
    }

    #[test]
    fn scalar_tensor_round_trips() {
        let t = Tensor::scalar(-2.5f64);
        let bytes = enc(&t);
        assert_eq!(bytes.len(), 4 + 2 + 8);
        assert!(decode_tensor(&bytes).unwrap().bit_eq(&DynTensor::F64(t)));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::from_vec(&[2], vec![1.0f32, 2.0]).unwrap();
        let mut bytes = enc(&t);
        assert!(matches!(decode_tensor(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_tensor(&bytes), Err(Error::NotTensorFile)));
        assert!(matches!(decode_tensor(b"FN"), Err(Error::NotTensorFile)));
    }

    #[test]
    fn checkpoint_rejects_duplicates() {
        let mut ck = Checkpoint::new();
        ck.insert("a", &Tensor::scalar(1.0f64));
        ck.insert("b", &Tensor::scalar(2.0f64));
        let mut bytes = ck.encode().unwrap();
        // rename "b" to "a"
        let pos = bytes.iter().rposition(|&c| c == b'b').unwrap();
        bytes[pos] = b'a';
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(Checkpoint::decode(b"FNT1...."), Err(Error::NotCheckpoint)));
    }

    #[test]
    fn insert_replaces_in_place() {
        let mut ck = Checkpoint::new();
        ck.insert("x", &Tensor::scalar(1.0f64));
        ck.insert("y", &Tensor::scalar(2.0f64));
        ck.insert("x", &Tensor::scalar(3.0f64));
        assert_eq!(ck.names().collect::<Vec<_>>(), vec!["x", "y"]);
        assert_eq!(ck.get::<f64>("x").unwrap().data(), &[3.0]);
        assert!(matches!(ck.get::<f64>("z"), Err(Error::MissingTensor(_))));
    }
}
