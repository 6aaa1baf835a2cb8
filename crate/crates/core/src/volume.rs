//! Image volumes, binary masks and their on-disk formats.
//!
//! # SCIV format (version 1)
//!
//! ```text
//! offset  size        field
//! 0       4           magic "SCIV"
//! 4       1           version (1)
//! 5       1           ndim (u8, >= 1)
//! 6       4 * ndim    extents, u32 little-endian, slowest axis first
//! ...     4 * prod    voxels, f32 little-endian, row-major
//! ```
//!
//! Nothing else is stored; spacing and provenance live only in memory.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, FormatError, Result};
use crate::tensor::Tensor;

pub const SCIV_MAGIC: &[u8; 4] = b"SCIV";
pub const SCIV_VERSION: u8 = 1;
pub const GENERATOR_VERSION: &str = concat!("scibilic-phantom/", env!("CARGO_PKG_VERSION"));

/// Where a generated volume came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub generator: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Vec<usize>,
    spacing: Vec<f32>,
    data: Vec<f32>,
    provenance: Option<Provenance>,
}

impl Volume {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(shape_err!("volume extents must be positive, got {dims:?}"));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(shape_err!(
                "volume {dims:?} needs {expected} voxels, buffer holds {}",
                data.len()
            ));
        }
        Ok(Self {
            spacing: vec![1.0; dims.len()],
            dims,
            data,
            provenance: None,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::new(dims.to_vec(), vec![0.0; dims.iter().product()])
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn with_spacing(mut self, spacing: Vec<f32>) -> Result<Self> {
        if spacing.len() != self.dims.len() {
            return Err(shape_err!(
                "spacing {spacing:?} does not match {} axes",
                self.dims.len()
            ));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f32] {
        &self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(height, width)` of a 2D volume.
    pub fn hw(&self) -> Result<(usize, usize)> {
        match *self.dims.as_slice() {
            [h, w] => Ok((h, w)),
            _ => Err(shape_err!(
                "expected a 2D volume, got extents {:?}",
                self.dims
            )),
        }
    }

    /// A 2D volume as a `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        let (h, w) = self.hw()?;
        Tensor::new(vec![1, 1, h, w], self.data.clone())
    }

    /// Copies a rectangular window out of a 2D volume.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Volume> {
        let (h, w) = self.hw()?;
        if top + height > h || left + width > w {
            return Err(shape_err!(
                "window {height}x{width} at ({top}, {left}) exceeds {h}x{w}"
            ));
        }
        let mut data = Vec::with_capacity(height * width);
        for r in top..top + height {
            data.extend_from_slice(&self.data[r * w + left..r * w + left + width]);
        }
        Volume::new(vec![height, width], data)
    }

    pub fn same_dims(&self, other: &Volume) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err!("extents {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(())
    }
}

/// Binary voxel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if dims.is_empty() || expected != data.len() {
            return Err(shape_err!(
                "mask {dims:?} needs {expected} voxels, buffer holds {}",
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn empty(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![false; dims.iter().product()],
        }
    }

    /// Reads a 0/1 volume; any other value is rejected.
    pub fn from_volume(v: &Volume) -> Result<Self> {
        let data = v
            .data()
            .iter()
            .map(|&x| match x {
                x if x == 0.0 => Ok(false),
                x if x == 1.0 => Ok(true),
                x => Err(Error::InvalidArgument(format!(
                    "mask voxel value {x} is not 0 or 1"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(v.dims().to_vec(), data)
    }

    pub fn to_volume(&self) -> Volume {
        Volume::new(
            self.dims.clone(),
            self.data
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )
        .expect("mask extents are valid volume extents")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn hw(&self) -> Result<(usize, usize)> {
        match *self.dims.as_slice() {
            [h, w] => Ok((h, w)),
            _ => Err(shape_err!(
                "expected a 2D mask, got extents {:?}",
                self.dims
            )),
        }
    }

    pub fn same_dims(&self, other: &Mask) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err!(
                "mask extents {:?} vs {:?}",
                self.dims,
                other.dims
            ));
        }
        Ok(())
    }
}

pub fn encode_sciv(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let ndim = u8::try_from(dims.len())
        .map_err(|_| FormatError::DimOverflow(format!("{} axes exceed u8", dims.len())))?;
    if ndim == 0 || dims.iter().product::<usize>() != data.len() {
        return Err(shape_err!(
            "cannot encode {} values as {dims:?}",
            data.len()
        ));
    }
    let mut out = Vec::with_capacity(6 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(SCIV_MAGIC);
    out.push(SCIV_VERSION);
    out.push(ndim);
    for &d in dims {
        let d = u32::try_from(d)
            .map_err(|_| FormatError::DimOverflow(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_sciv(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>), FormatError> {
    let header = 6;
    if bytes.len() >= 4 && &bytes[..4] != SCIV_MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(FormatError::BadMagic { found });
    }
    if bytes.len() < header {
        return Err(FormatError::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    if bytes[4] != SCIV_VERSION {
        return Err(FormatError::UnsupportedVersion(bytes[4]));
    }
    let ndim = bytes[5] as usize;
    if ndim == 0 {
        return Err(FormatError::InvalidDims("zero axes".into()));
    }
    let dims_end = header + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(FormatError::Truncated {
            expected: dims_end,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[header..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if dims.contains(&0) {
        return Err(FormatError::InvalidDims(format!("zero extent in {dims:?}")));
    }
    let payload = dims
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .and_then(|p| p.checked_add(dims_end))
        .ok_or_else(|| {
            FormatError::DimOverflow(format!("extents {dims:?} overflow the address space"))
        })?;
    if bytes.len() < payload {
        return Err(FormatError::Truncated {
            expected: payload,
            actual: bytes.len(),
        });
    }
    if bytes.len() > payload {
        return Err(FormatError::TrailingBytes(bytes.len() - payload));
    }
    let data = bytes[dims_end..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_sciv(volume.dims(), volume.data(), path)
}

pub fn write_sciv(dims: &[usize], data: &[f32], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_sciv(dims, data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_sciv(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sciv(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (dims, data) = read_sciv(path)?;
    Volume::new(dims, data)
}

/// Linear intensity mapping used for an 8-bit export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgmScale {
    pub min: f32,
    pub max: f32,
}

/// Writes a min-max scaled binary PGM plus a `<path>.scale.txt` sidecar
/// recording the mapping.
pub fn write_pgm(volume: &Volume, path: impl AsRef<Path>) -> Result<PgmScale> {
    let path = path.as_ref();
    let (h, w) = volume.hw()?;
    let (min, max) = volume
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = max - min;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(volume.data().iter().map(|&v| {
        if range > 0.0 {
            (((v - min) / range) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;

    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".scale.txt");
    let mut f = fs::File::create(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    writeln!(
        f,
        "min {min:e}\nmax {max:e}\n# pixel = round(255 * (value - min) / (max - min))"
    )
    .map_err(|e| Error::io(&sidecar, e))?;
    Ok(PgmScale { min, max })
}
