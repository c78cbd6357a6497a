//! Spatial feature maps and the `.vtft` binary feature-file format.
//!
//! File layout (all integers little-endian):
//! bytes 0..4 magic `VTFT`, bytes 4..6 version (1), byte 6 dtype
//! (0 = f32), byte 7 reserved (0), bytes 8..20 the C, H, W extents as u32,
//! then C·H·W f32 values in `[c][h][w]` row-major order. Total size is
//! exactly `20 + 4·C·H·W` bytes. Embedding vectors reuse the format with
//! H = W = 1.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::scalar::Scalar;
use crate::numeric::tensor::Tensor;

pub const VTFT_MAGIC: &[u8; 4] = b"VTFT";
pub const VTFT_VERSION: u16 = 1;
pub const VTFT_DTYPE_F32: u8 = 0;
pub const VTFT_HEADER_LEN: usize = 20;

/// Dense `[C, H, W]` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Scalar> {
    tensor: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        Ok(FeatureMap {
            tensor: Tensor::new(vec![channels, height, width], data)?,
        })
    }

    pub fn from_tensor(tensor: Tensor<T>) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(Error::shape(format!(
                "feature map must be [C,H,W], got {:?}",
                tensor.shape()
            )));
        }
        Ok(FeatureMap { tensor })
    }

    /// Reinterprets a `[C, M]` channels-by-locations matrix as `C×H×W`.
    pub fn from_matrix(matrix: &Tensor<T>, height: usize, width: usize) -> Result<Self> {
        if matrix.rank() != 2 || matrix.shape()[1] != height * width {
            return Err(Error::shape(format!(
                "feature matrix {:?} does not cover {height}x{width}",
                matrix.shape()
            )));
        }
        FeatureMap::from_tensor(matrix.reshaped(vec![matrix.shape()[0], height, width])?)
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn locations(&self) -> usize {
        self.height() * self.width()
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn at(&self, c: usize, h: usize, w: usize) -> T {
        self.tensor.data()[(c * self.height() + h) * self.width() + w]
    }

    /// The `[C, H·W]` channels-by-locations view (same memory order).
    pub fn as_matrix(&self) -> Tensor<T> {
        self.tensor
            .reshaped(vec![self.channels(), self.locations()])
            .expect("rank-3 reshape to rank-2 cannot fail")
    }

    /// Mirror around the vertical axis (w → W−1−w at every channel).
    pub fn hflipped(&self) -> Self {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let t = Tensor::from_fn(vec![c, h, w], |flat| {
            let wi = flat % w;
            let hi = (flat / w) % h;
            let ci = flat / (w * h);
            self.at(ci, hi, w - 1 - wi)
        })
        .expect("same data, same shape");
        FeatureMap { tensor: t }
    }
}

/// Writes a feature map as a `.vtft` file; values narrow to f32.
pub fn save_feature_map<T: Scalar>(path: &Path, fm: &FeatureMap<T>) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    (|| -> std::io::Result<()> {
        w.write_all(VTFT_MAGIC)?;
        w.write_all(&VTFT_VERSION.to_le_bytes())?;
        w.write_all(&[VTFT_DTYPE_F32, 0])?;
        for dim in [fm.channels(), fm.height(), fm.width()] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for v in fm.tensor().data() {
            w.write_all(&v.to_f32().unwrap().to_le_bytes())?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

/// Reads a `.vtft` file; the f32 payload widens to the scalar type.
pub fn load_feature_map<T: Scalar>(path: &Path) -> Result<FeatureMap<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < VTFT_HEADER_LEN {
        return Err(Error::format(path, format!("header needs {VTFT_HEADER_LEN} bytes")));
    }
    if &bytes[0..4] != VTFT_MAGIC {
        return Err(Error::format(path, "bad magic, not a VTFT file".to_string()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VTFT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    if bytes[6] != VTFT_DTYPE_F32 {
        return Err(Error::format(path, format!("unsupported dtype {}", bytes[6])));
    }
    if bytes[7] != 0 {
        return Err(Error::format(path, "reserved byte must be zero".to_string()));
    }
    let dim = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(8), dim(12), dim(16));
    let need = VTFT_HEADER_LEN + 4 * c * h * w;
    if bytes.len() != need {
        return Err(Error::format(
            path,
            format!("size mismatch: {c}x{h}x{w} needs {need} bytes, file has {}", bytes.len()),
        ));
    }
    let data: Vec<T> = bytes[VTFT_HEADER_LEN..]
        .chunks_exact(4)
        .map(|ch| {
            let v = f32::from_le_bytes(ch.try_into().unwrap());
            T::from_f32(v).unwrap_or_else(T::nan)
        })
        .collect();
    FeatureMap::new(c, h, w, data).map_err(|e| match e {
        Error::NonFinite(m) => Error::format(path, format!("non-finite payload: {m}")),
        other => other,
    })
}
