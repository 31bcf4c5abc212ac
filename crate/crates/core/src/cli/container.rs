//! GPMF tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GPMF"  u16 version (=1)  u32 tensor count
//! per tensor:
//!   u16 name length, UTF-8 name
//!   u8 dtype (0 = f32, 1 = f64, 2 = u8)
//!   u8 rank, rank × u64 dims
//!   raw element data, product(dims) × element size bytes
//! ```
//!
//! Nothing may follow the last tensor. Tensor order is preserved, so a
//! read followed by a write reproduces the input bytes.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geom::{FrameGrid, FrameStack, Intrinsics, PointMap, PoseSE3, ValidMask};

pub const MAGIC: &[u8; 4] = b"GPMF";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::U8 => "u8",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let name = name.into();
        let count = element_count(&dims).ok_or_else(|| Error::shape(format!("tensor `{name}` is too large")))?;
        if count != data.len() as u64 {
            return Err(Error::shape(format!(
                "tensor `{name}` declares {count} elements but holds {}",
                data.len()
            )));
        }
        if name.len() > u16::MAX as usize || dims.len() > u8::MAX as usize {
            return Err(Error::shape(format!("tensor `{name}` name or rank too long")));
        }
        Ok(Self { name, dims, data })
    }

    pub fn f64(name: &str, dims: Vec<u64>, data: Vec<f64>) -> Result<Self> {
        Self::new(name, dims, TensorData::F64(data))
    }

    pub fn u8(name: &str, dims: Vec<u64>, data: Vec<u8>) -> Result<Self> {
        Self::new(name, dims, TensorData::U8(data))
    }
}

fn element_count(dims: &[u64]) -> Option<u64> {
    dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GpmContainer {
    pub tensors: Vec<Tensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptFile {
                offset: self.bytes.len() as u64,
                reason: format!("truncated {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn corrupt(&self, at: usize, reason: String) -> Error {
        Error::CorruptFile {
            offset: at as u64,
            reason,
        }
    }
}

impl GpmContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read(bytes: &[u8]) -> Result<Self> {
        let head = &bytes[..bytes.len().min(4)];
        if head != &MAGIC[..head.len()] {
            return Err(Error::NotGpm);
        }
        let mut r = Reader { bytes, pos: 0 };
        r.take(4, "magic")?;
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let start = r.pos;
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| r.corrupt(start + 2, "tensor name is not UTF-8".into()))?
                .to_string();
            let tag_at = r.pos;
            let dtype = DType::from_tag(r.u8("dtype")?)
                .ok_or_else(|| r.corrupt(tag_at, format!("unknown dtype tag in tensor `{name}`")))?;
            let rank = r.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64("dims")?);
            }
            let data_at = r.pos;
            let bytes_needed = element_count(&dims)
                .and_then(|n| n.checked_mul(dtype.size() as u64))
                .and_then(|n| usize::try_from(n).ok())
                .ok_or_else(|| r.corrupt(data_at, format!("tensor `{name}` size overflows")))?;
            let raw = r.take(bytes_needed, "tensor data")?;
            let data = match dtype {
                DType::F32 => TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
                DType::F64 => TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()),
                DType::U8 => TensorData::U8(raw.to_vec()),
            };
            tensors.push(Tensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { tensors })
    }

    pub fn write(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.dtype().tag());
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::read(&bytes)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.write()).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    /// Inserts or replaces (in place) a tensor.
    pub fn put(&mut self, tensor: Tensor) {
        match self.tensors.iter_mut().find(|t| t.name == tensor.name) {
            Some(slot) => *slot = tensor,
            None => self.tensors.push(tensor),
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        let idx = self.tensors.iter().position(|t| t.name == name)?;
        Some(self.tensors.remove(idx))
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Float tensor as f64 (f32 is widened) after checking its rank and
    /// any fixed trailing dims (`None` entries are free).
    pub fn float(&self, name: &str, shape: &[Option<u64>]) -> Result<(Vec<u64>, Vec<f64>)> {
        let t = self.require(name)?;
        check_dims(t, shape)?;
        let data = match &t.data {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::U8(_) => return Err(type_error(t, "f64 or f32")),
        };
        Ok((t.dims.clone(), data))
    }

    pub fn bytes(&self, name: &str, shape: &[Option<u64>]) -> Result<(Vec<u64>, Vec<u8>)> {
        let t = self.require(name)?;
        check_dims(t, shape)?;
        match &t.data {
            TensorData::U8(v) => Ok((t.dims.clone(), v.clone())),
            _ => Err(type_error(t, "u8")),
        }
    }
}

fn type_error(t: &Tensor, expected: &str) -> Error {
    Error::TypeError {
        name: t.name.clone(),
        expected: expected.to_string(),
        found: t.data.dtype().name().to_string(),
    }
}

fn check_dims(t: &Tensor, shape: &[Option<u64>]) -> Result<()> {
    let ok = t.dims.len() == shape.len() && t.dims.iter().zip(shape).all(|(d, s)| s.is_none_or(|s| s == *d));
    if ok {
        Ok(())
    } else {
        let want: Vec<String> = shape.iter().map(|s| s.map_or("_".to_string(), |v| v.to_string())).collect();
        Err(Error::TypeError {
            name: t.name.clone(),
            expected: format!("shape [{}]", want.join(", ")),
            found: format!("shape {:?}", t.dims),
        })
    }
}

fn grid_of(name: &str, dims: &[u64]) -> Result<(usize, FrameGrid)> {
    let frames = dims[0] as usize;
    let grid = FrameGrid::new(dims[2] as usize, dims[1] as usize)
        .map_err(|_| Error::shape(format!("tensor `{name}` has an empty frame")))?;
    Ok((frames, grid))
}

// Typed views of the reserved tensors.
impl GpmContainer {
    pub fn put_points(&mut self, points: &PointMap) -> Result<()> {
        let g = points.grid();
        let data = points.data().iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        self.put(Tensor::f64(
            "points",
            vec![points.frames() as u64, g.height as u64, g.width as u64, 3],
            data,
        )?);
        Ok(())
    }

    pub fn points(&self) -> Result<PointMap> {
        let (dims, data) = self.float("points", &[None, None, None, Some(3)])?;
        let (frames, grid) = grid_of("points", &dims)?;
        let pts = data.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        FrameStack::from_vec(frames, grid, pts)
    }

    pub fn put_scalar_map(&mut self, name: &str, map: &FrameStack<f64>) -> Result<()> {
        let g = map.grid();
        self.put(Tensor::f64(
            name,
            vec![map.frames() as u64, g.height as u64, g.width as u64],
            map.data().to_vec(),
        )?);
        Ok(())
    }

    pub fn scalar_map(&self, name: &str) -> Result<FrameStack<f64>> {
        let (dims, data) = self.float(name, &[None, None, None])?;
        let (frames, grid) = grid_of(name, &dims)?;
        FrameStack::from_vec(frames, grid, data)
    }

    pub fn put_vector_map(&mut self, name: &str, map: &FrameStack<Vector3<f64>>) -> Result<()> {
        let g = map.grid();
        let data = map.data().iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        self.put(Tensor::f64(
            name,
            vec![map.frames() as u64, g.height as u64, g.width as u64, 3],
            data,
        )?);
        Ok(())
    }

    pub fn vector_map(&self, name: &str) -> Result<FrameStack<Vector3<f64>>> {
        let (dims, data) = self.float(name, &[None, None, None, Some(3)])?;
        let (frames, grid) = grid_of(name, &dims)?;
        FrameStack::from_vec(frames, grid, data.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect())
    }

    /// Binary mask stored as u8 (non-zero = valid).
    pub fn put_mask(&mut self, name: &str, mask: &ValidMask) -> Result<()> {
        let g = mask.grid();
        let data = mask.values().data().iter().map(|&m| u8::from(m >= ValidMask::THRESHOLD)).collect();
        self.put(Tensor::u8(
            name,
            vec![mask.frames() as u64, g.height as u64, g.width as u64],
            data,
        )?);
        Ok(())
    }

    pub fn mask(&self, name: &str) -> Result<ValidMask> {
        let (dims, data) = self.bytes(name, &[None, None, None])?;
        let (frames, grid) = grid_of(name, &dims)?;
        ValidMask::from_bools(frames, grid, &data.iter().map(|&b| b != 0).collect::<Vec<_>>())
    }

    pub fn put_vector(&mut self, name: &str, values: &[f64]) -> Result<()> {
        self.put(Tensor::f64(name, vec![values.len() as u64], values.to_vec())?);
        Ok(())
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.float(name, &[None])?.1)
    }

    pub fn put_intrinsics(&mut self, ks: &[Intrinsics]) -> Result<()> {
        self.put_vector("intrinsics", &ks.iter().map(|k| k.focal).collect::<Vec<_>>())
    }

    pub fn intrinsics(&self) -> Result<Vec<Intrinsics>> {
        self.vector("intrinsics")?.into_iter().map(Intrinsics::new).collect()
    }

    /// World-to-camera `[R | t]` per frame, shape `[T, 3, 4]`.
    pub fn put_poses(&mut self, poses: &[PoseSE3]) -> Result<()> {
        let mut data = Vec::with_capacity(poses.len() * 12);
        for p in poses {
            let r = p.rotation.matrix();
            for i in 0..3 {
                data.extend_from_slice(&[r[(i, 0)], r[(i, 1)], r[(i, 2)], p.translation[i]]);
            }
        }
        self.put(Tensor::f64("poses", vec![poses.len() as u64, 3, 4], data)?);
        Ok(())
    }

    pub fn poses(&self) -> Result<Vec<PoseSE3>> {
        let (_, data) = self.float("poses", &[None, Some(3), Some(4)])?;
        data.chunks_exact(12)
            .map(|c| {
                let r = Matrix3::new(c[0], c[1], c[2], c[4], c[5], c[6], c[8], c[9], c[10]);
                PoseSE3::from_matrix(r, Vector3::new(c[3], c[7], c[11]))
            })
            .collect()
    }
}
