use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: [u8; 4] = *b"SRMV";
pub const VOLUME_VERSION: u32 = 1;
/// Upper bound on `ndim`, to reject garbage headers before allocating.
pub const MAX_NDIM: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum DType {
    F64 = 0,
    F32 = 1,
    I32 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 | DType::I32 => 4,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            2 => Ok(DType::I32),
            c => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl VolumeData {
    pub fn dtype(&self) -> DType {
        match self {
            VolumeData::F64(_) => DType::F64,
            VolumeData::F32(_) => DType::F32,
            VolumeData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VolumeData::F64(v) => v.len(),
            VolumeData::F32(v) => v.len(),
            VolumeData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Header (magic, version, ndim, extents, dtype; all u32 little-endian)
/// followed by the row-major payload.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeFile {
    pub extents: Vec<usize>,
    pub data: VolumeData,
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("unexpected end of file".into())
    } else {
        Error::Io(e)
    }
}

impl VolumeFile {
    pub fn new(extents: Vec<usize>, data: VolumeData) -> Result<Self> {
        let v = VolumeFile { extents, data };
        v.check()?;
        Ok(v)
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        VolumeFile {
            extents: t.shape().to_vec(),
            data: VolumeData::F64(t.to_vec()),
        }
    }

    /// Labels as 32-bit ints with the given extents.
    pub fn from_labels(labels: &[usize], extents: &[usize]) -> Result<Self> {
        let data = labels
            .iter()
            .map(|&l| {
                i32::try_from(l)
                    .map_err(|_| Error::Format(format!("label {l} does not fit in i32")))
            })
            .collect::<Result<_>>()?;
        VolumeFile::new(extents.to_vec(), VolumeData::I32(data))
    }

    pub fn numel(&self) -> usize {
        self.extents.iter().product()
    }

    fn check(&self) -> Result<()> {
        if self.extents.is_empty() || self.extents.len() > MAX_NDIM as usize {
            return Err(Error::Format(format!(
                "ndim must be 1..={MAX_NDIM}, got {}",
                self.extents.len()
            )));
        }
        if self
            .extents
            .iter()
            .any(|&e| e == 0 || u32::try_from(e).is_err())
        {
            return Err(Error::Format(format!(
                "extents must be positive u32 values, got {:?}",
                self.extents
            )));
        }
        if self.data.len() != self.numel() {
            return Err(Error::Format(format!(
                "{} elements for extents {:?}",
                self.data.len(),
                self.extents
            )));
        }
        Ok(())
    }

    /// Payload as f64, widening f32/i32.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            VolumeData::F64(v) => v.clone(),
            VolumeData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            VolumeData::I32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.to_f64(), &self.extents)
    }

    /// Integer payload as class ids; rejects negative values and float data.
    pub fn to_labels(&self) -> Result<Vec<usize>> {
        match &self.data {
            VolumeData::I32(v) => v
                .iter()
                .map(|&x| {
                    usize::try_from(x).map_err(|_| Error::Format(format!("negative label {x}")))
                })
                .collect(),
            d => Err(Error::Format(format!(
                "expected i32 labels, got {:?}",
                d.dtype()
            ))),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.check()?;
        w.write_all(&VOLUME_MAGIC)?;
        w.write_all(&VOLUME_VERSION.to_le_bytes())?;
        w.write_all(&(self.extents.len() as u32).to_le_bytes())?;
        for &e in &self.extents {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        w.write_all(&(self.data.dtype() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * self.data.dtype().size());
        match &self.data {
            VolumeData::F64(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            VolumeData::F32(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            VolumeData::I32(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads exactly one volume from `r`, leaving anything after it unread.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if magic != VOLUME_MAGIC {
            return Err(Error::Format(format!("bad volume magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VOLUME_VERSION {
            return Err(Error::Format(format!(
                "unsupported volume version {version}"
            )));
        }
        let ndim = read_u32(r)?;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::Format(format!(
                "ndim must be 1..={MAX_NDIM}, got {ndim}"
            )));
        }
        let extents = (0..ndim)
            .map(|_| read_u32(r).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let dtype = DType::from_code(read_u32(r)?)?;
        let n = extents
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Format(format!("bad extents {extents:?}")))?;
        let mut bytes = Vec::new();
        let want = n as u64 * dtype.size() as u64;
        r.take(want).read_to_end(&mut bytes)?;
        if bytes.len() as u64 != want {
            return Err(Error::Format(format!(
                "payload has {} bytes, header promises {want}",
                bytes.len()
            )));
        }
        let data = match dtype {
            DType::F64 => VolumeData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F32 => VolumeData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I32 => VolumeData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(VolumeFile { extents, data })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    /// Parses a whole buffer; trailing bytes are an error.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let v = VolumeFile::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                cursor.len()
            )));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        VolumeFile::from_bytes(&bytes)
    }
}
