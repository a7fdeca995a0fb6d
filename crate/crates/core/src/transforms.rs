//! Gamma correction, 8-bit quantization, and the MST1 tensor file format.
//!
//! Gamma correction `G_γ(x) = x^γ` is multiplicatively composable in exact
//! arithmetic: `G_β(G_γ(x)) = G_{βγ}(x)`. Storing an image with 8 bits per
//! channel between the two steps breaks this; [`conversion_error`] measures
//! by how much.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A row-major tensor with every entry in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::invalid(format!("dims must be non-empty and positive, got {dims:?}")));
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::invalid("tensor size overflows"))?;
        if len != data.len() {
            return Err(Error::invalid(format!(
                "dims {dims:?} need {len} entries, got {}",
                data.len()
            )));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(TensorFormatError::OutOfRange { index, value }.into());
        }
        Ok(ImageTensor { dims, data })
    }

    /// A flat tensor of shape `[len]`.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        ImageTensor::new(vec![data.len()], data)
    }

    /// Clamps every entry into [0, 1]. NaN becomes 0.
    pub fn from_clamped(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        ImageTensor::new(dims, data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same shape, entries mapped through `f`. `f` must stay in [0, 1].
    fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        ImageTensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn l2_distance(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// A positive gamma factor; 1 is the identity.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct GammaFactor(f64);

impl GammaFactor {
    pub const IDENTITY: GammaFactor = GammaFactor(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::domain("gamma factor", value));
        }
        Ok(GammaFactor(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Composition: G_self ∘ G_other = G_{self·other}.
    pub fn compose(self, other: GammaFactor) -> Result<GammaFactor> {
        GammaFactor::new(self.0 * other.0)
    }
}

impl TryFrom<f64> for GammaFactor {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        GammaFactor::new(v)
    }
}

impl From<GammaFactor> for f64 {
    fn from(g: GammaFactor) -> f64 {
        g.0
    }
}

/// Entrywise x^γ.
pub fn gamma_correct(x: &ImageTensor, gamma: GammaFactor) -> ImageTensor {
    let g = gamma.value();
    if g == 1.0 {
        return x.clone();
    }
    x.map(|v| v.powf(g))
}

/// Rounds each entry to the nearest multiple of 1/255, halves away from zero.
pub fn quantize8(x: &ImageTensor) -> ImageTensor {
    x.map(quantize_value)
}

fn quantize_value(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

/// Signed difference q(G_β(q(G_γ(x)))) − G_{βγ}(x), entrywise.
pub fn conversion_error_tensor(x: &ImageTensor, beta: GammaFactor, gamma: GammaFactor) -> Vec<f64> {
    let (b, g) = (beta.value(), gamma.value());
    let bg = b * g;
    x.data
        .iter()
        .map(|&v| quantize_value(quantize_value(v.powf(g)).powf(b)) - v.powf(bg))
        .collect()
}

/// ℓ2 norm of [`conversion_error_tensor`]: the error from storing the
/// γ-corrected image with 8 bits per channel, applying β, and storing again,
/// against the exact composite G_{βγ}(x).
pub fn conversion_error(x: &ImageTensor, beta: GammaFactor, gamma: GammaFactor) -> f64 {
    conversion_error_tensor(x, beta, gamma)
        .iter()
        .map(|e| e * e)
        .sum::<f64>()
        .sqrt()
}

/// A one-parameter family of input transformations.
pub trait ParametricTransform: Send + Sync {
    fn apply(&self, x: &ImageTensor, param: f64) -> Result<ImageTensor>;

    fn name(&self) -> &'static str;
}

/// Idealized gamma correction, no quantization.
#[derive(Debug, Clone, Copy, Default)]
pub struct GammaCorrection;

impl ParametricTransform for GammaCorrection {
    fn apply(&self, x: &ImageTensor, param: f64) -> Result<ImageTensor> {
        Ok(gamma_correct(x, GammaFactor::new(param)?))
    }

    fn name(&self) -> &'static str {
        "gamma"
    }
}

/// Gamma correction followed by 8-bit storage.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuantizedGammaCorrection;

impl ParametricTransform for QuantizedGammaCorrection {
    fn apply(&self, x: &ImageTensor, param: f64) -> Result<ImageTensor> {
        Ok(quantize8(&gamma_correct(x, GammaFactor::new(param)?)))
    }

    fn name(&self) -> &'static str {
        "gamma_quantized"
    }
}

/// Downscale by `r` and back to the original size with nearest-neighbour
/// sampling on the last two axes. No certification support: in exact
/// arithmetic the factors compose, but the interpolation error dominates.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScalingRoundTrip;

impl ParametricTransform for ScalingRoundTrip {
    fn apply(&self, x: &ImageTensor, param: f64) -> Result<ImageTensor> {
        if !(param.is_finite() && param > 0.0) {
            return Err(Error::domain("scale factor", param));
        }
        let nd = x.dims.len();
        if nd < 2 {
            return Err(Error::invalid("scaling needs at least two axes"));
        }
        let (h, w) = (x.dims[nd - 2], x.dims[nd - 1]);
        let sh = ((h as f64 * param).round() as usize).max(1);
        let sw = ((w as f64 * param).round() as usize).max(1);
        let plane = h * w;
        let mut out = Vec::with_capacity(x.data.len());
        for base in (0..x.data.len()).step_by(plane) {
            let src = &x.data[base..base + plane];
            for i in 0..h {
                // original row -> scaled row -> source row
                let si = (i * sh / h).min(sh - 1);
                let oi = (si * h / sh).min(h - 1);
                for j in 0..w {
                    let sj = (j * sw / w).min(sw - 1);
                    let oj = (sj * w / sw).min(w - 1);
                    out.push(src[oi * w + oj]);
                }
            }
        }
        ImageTensor::new(x.dims.clone(), out)
    }

    fn name(&self) -> &'static str {
        "scaling_round_trip"
    }
}

pub const MST1_MAGIC: &[u8; 4] = b"MST1";

#[derive(Debug, thiserror::Error)]
pub enum TensorFormatError {
    #[error("bad magic: expected \"MST1\"")]
    BadMagic,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("entry {index} = {value} outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("bad header: {0}")]
    BadHeader(String),
}

/// Encodes as MST1: magic, u32 ndim, ndim × u32 dims, then f64 entries, all
/// little-endian.
pub fn encode_mst1(x: &ImageTensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * x.dims.len() + 8 * x.data.len());
    buf.extend_from_slice(MST1_MAGIC);
    buf.extend_from_slice(&(x.dims.len() as u32).to_le_bytes());
    for &d in &x.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &x.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Decodes MST1 without the [0, 1] range check, for weight tensors.
fn decode_mst1_raw(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>), TensorFormatError> {
    if bytes.len() < 4 || &bytes[..4] != MST1_MAGIC {
        return Err(TensorFormatError::BadMagic);
    }
    let read_u32 = |at: usize| -> Result<u32, TensorFormatError> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or(TensorFormatError::Truncated {
                expected: at + 4,
                found: bytes.len(),
            })
    };
    let ndim = read_u32(4)? as usize;
    if ndim == 0 {
        return Err(TensorFormatError::BadHeader("ndim is zero".into()));
    }
    let header = 8usize
        .checked_add(ndim.checked_mul(4).ok_or_else(|| TensorFormatError::BadHeader("ndim too large".into()))?)
        .ok_or_else(|| TensorFormatError::BadHeader("ndim too large".into()))?;
    if bytes.len() < header {
        return Err(TensorFormatError::Truncated {
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndim).map(|i| read_u32(8 + 4 * i).map(|d| d as usize)).collect::<Result<_, _>>()?;
    if dims.contains(&0) {
        return Err(TensorFormatError::BadHeader(format!("zero-length axis in {dims:?}")));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorFormatError::BadHeader("tensor size overflows".into()))?;
    let expected = count
        .checked_mul(8)
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| TensorFormatError::BadHeader("tensor size overflows".into()))?;
    if bytes.len() < expected {
        return Err(TensorFormatError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(TensorFormatError::TrailingBytes {
            extra: bytes.len() - expected,
        });
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

pub fn decode_mst1(bytes: &[u8]) -> Result<ImageTensor, TensorFormatError> {
    let (dims, data) = decode_mst1_raw(bytes)?;
    if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(TensorFormatError::OutOfRange { index, value });
    }
    Ok(ImageTensor { dims, data })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    decode_mst1(&read_bytes(path)?).map_err(|source| Error::TensorFile {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an MST1 file without the [0, 1] check. Returns `(dims, data)`.
pub fn read_raw_tensor(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f64>)> {
    let path = path.as_ref();
    decode_mst1_raw(&read_bytes(path)?).map_err(|source| Error::TensorFile {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_tensor(x: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mst1(x)).map_err(|source: io::Error| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
