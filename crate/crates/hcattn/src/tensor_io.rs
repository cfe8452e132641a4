//! Binary tensor persistence and deterministic synthetic data.
//!
//! On-disk layout (all integers little-endian):
//!
//! ```text
//! magic   b"HCAT"
//! version u32 = 1
//! dtype   u8  (0 = f32, 1 = f16, 2 = u16)
//! rank    u8
//! dims    u64 x rank
//! payload row-major elements, little-endian
//! ```
//!
//! f16 payloads are IEEE 754 binary16; u16 payloads carry codebook index
//! rows. In-memory compute always happens in f32 — the 16-bit footprints
//! matter to the accounting model, not to desk-scale arithmetic.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use half::f16;

use crate::error::{Error, Result};
use crate::mat::Matrix;
use crate::rng::{mix, SplitMix64};

pub const TENSOR_MAGIC: [u8; 4] = *b"HCAT";
pub const TENSOR_VERSION: u32 = 1;

/// Element type carried by a [`TensorDump`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F16,
    U16,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::U16 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F16),
            2 => Ok(DType::U16),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    pub fn element_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::U16 => 2,
        }
    }
}

/// Element buffer, kept in the file's native width so round-trips are
/// bit-exact. f16 elements are stored as raw binary16 bits.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<u16>),
    U16(Vec<u16>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) | TensorData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A shaped tensor with a bit-exact binary encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorDump {
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorDump {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::ShapeMismatch("tensor rank must be >= 1".into()));
        }
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(
                "every dimension must be >= 1".into(),
            ));
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::ShapeMismatch("dimension product overflows".into()))?;
        if count != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {count} elements, buffer has {}",
                shape,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    /// Build an f16 tensor by rounding f32 values to binary16.
    pub fn f16_from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Self> {
        let bits = data.iter().map(|&x| f16::from_f32(x).to_bits()).collect();
        Self::new(shape, TensorData::F16(bits))
    }

    pub fn u16(shape: Vec<usize>, data: Vec<u16>) -> Result<Self> {
        Self::new(shape, TensorData::U16(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F16(_) => DType::F16,
            TensorData::U16(_) => DType::U16,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn element_count(&self) -> usize {
        self.data.len()
    }

    /// Elements widened to f32. u16 index tensors widen numerically.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F16(v) => v.iter().map(|&b| f16::from_bits(b).to_f32()).collect(),
            TensorData::U16(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    /// Rank-2 float tensor as a [`Matrix`].
    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        if self.dtype() == DType::U16 {
            return Err(Error::ShapeMismatch(
                "u16 index tensor cannot be used as a float matrix".into(),
            ));
        }
        Matrix::from_vec(self.shape[0], self.shape[1], self.to_f32_vec())
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: TensorData::F32(m.data().to_vec()),
        }
    }

    fn check_finite(&self) -> Result<()> {
        match &self.data {
            TensorData::F32(v) => {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("f32 tensor payload"));
                }
            }
            TensorData::F16(v) => {
                // exponent bits all set means inf or NaN
                if v.iter().any(|&b| (b >> 10) & 0x1F == 0x1F) {
                    return Err(Error::NonFinite("f16 tensor payload"));
                }
            }
            TensorData::U16(_) => {}
        }
        Ok(())
    }

    /// Encode into a writer. Same layout as [`write_tensor`].
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.check_finite()?;
        w.write_all(&TENSOR_MAGIC)?;
        w.write_all(&TENSOR_VERSION.to_le_bytes())?;
        w.write_all(&[self.dtype().code(), self.shape.len() as u8])?;
        for &dim in &self.shape {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::F16(v) | TensorData::U16(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Decode from a reader. Same layout as [`read_tensor`].
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact_or_truncated(r, &mut magic, "header")?;
        if magic != TENSOR_MAGIC {
            return Err(Error::BadMagic {
                expected: TENSOR_MAGIC,
                found: magic,
            });
        }
        let mut version = [0u8; 4];
        read_exact_or_truncated(r, &mut version, "header")?;
        let version = u32::from_le_bytes(version);
        if version != TENSOR_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut meta = [0u8; 2];
        read_exact_or_truncated(r, &mut meta, "header")?;
        let dtype = DType::from_code(meta[0])?;
        let rank = meta[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut dim = [0u8; 8];
            read_exact_or_truncated(r, &mut dim, "dims")?;
            shape.push(u64::from_le_bytes(dim) as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::ShapeMismatch("dimension product overflows".into()))?;
        let expected = count * dtype.element_bytes();
        let mut payload = vec![0u8; expected];
        let got = read_up_to(r, &mut payload)?;
        if got != expected {
            return Err(Error::TruncatedPayload {
                expected,
                found: got,
            });
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            ),
            DType::F16 => TensorData::F16(le_u16_vec(&payload)),
            DType::U16 => TensorData::U16(le_u16_vec(&payload)),
        };
        TensorDump::new(shape, data)
    }
}

fn le_u16_vec(bytes: &[u8]) -> Vec<u16> {
    bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect()
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    let got = read_up_to(r, buf)?;
    if got != buf.len() {
        return Err(Error::TruncatedPayload {
            expected: buf.len(),
            found: got,
        });
    }
    let _ = what;
    Ok(())
}

fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

/// Write a tensor to `path`.
pub fn write_tensor<P: AsRef<Path>>(path: P, t: &TensorDump) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    t.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Read a tensor from `path`.
pub fn read_tensor<P: AsRef<Path>>(path: P) -> Result<TensorDump> {
    let mut r = BufReader::new(File::open(path)?);
    TensorDump::read_from(&mut r)
}

/// What kind of synthetic tensor to generate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticKind {
    /// i.i.d. standard normal entries.
    Gaussian,
    /// Each of `groups` sub-vector columns is drawn from
    /// `clusters_per_group` fixed centers plus isotropic Gaussian noise.
    PlantedClusters {
        groups: usize,
        clusters_per_group: usize,
        noise_sd: f64,
    },
}

/// Deterministic recipe for an `n x d` synthetic tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn gaussian(n: usize, d: usize, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::Gaussian,
            n,
            d,
            seed,
        }
    }

    pub fn planted(
        n: usize,
        d: usize,
        groups: usize,
        clusters_per_group: usize,
        noise_sd: f64,
        seed: u64,
    ) -> Self {
        Self {
            kind: SyntheticKind::PlantedClusters {
                groups,
                clusters_per_group,
                noise_sd,
            },
            n,
            d,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::InvalidConfig("n and d must be >= 1".into()));
        }
        if let SyntheticKind::PlantedClusters {
            groups,
            clusters_per_group,
            noise_sd,
        } = self.kind
        {
            if groups == 0 || self.d % groups != 0 {
                return Err(Error::InvalidConfig(format!(
                    "groups {groups} must divide d {}",
                    self.d
                )));
            }
            if clusters_per_group == 0 {
                return Err(Error::InvalidConfig("clusters_per_group must be >= 1".into()));
            }
            if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
                return Err(Error::InvalidConfig(
                    "noise_sd must be finite and >= 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Generate a synthetic `n x d` f32 tensor. Pure function of the spec.
///
/// Draw order, for reproducibility:
/// * gaussian: one stream seeded `mix(seed, 0)` fills the whole row-major
///   buffer with normals.
/// * planted-clusters: per group `i`, a stream seeded `mix(seed, 1 + i)`
///   draws the `clusters_per_group x (d/groups)` center block, then one
///   center choice per token, then (only when `noise_sd > 0`) per-token
///   noise. Token `j < clusters_per_group` takes center `j` so every
///   center is realized; later tokens draw uniformly.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<TensorDump> {
    spec.validate()?;
    let mut out = vec![0.0f32; spec.n * spec.d];
    match spec.kind {
        SyntheticKind::Gaussian => {
            let mut rng = SplitMix64::new(mix(spec.seed, 0));
            rng.fill_normal(&mut out);
        }
        SyntheticKind::PlantedClusters {
            groups,
            clusters_per_group,
            noise_sd,
        } => {
            let sub_dim = spec.d / groups;
            for g in 0..groups {
                let mut rng = SplitMix64::new(mix(spec.seed, 1 + g as u64));
                let mut centers = vec![0.0f32; clusters_per_group * sub_dim];
                rng.fill_normal(&mut centers);
                let mut noise = vec![0.0f32; sub_dim];
                for token in 0..spec.n {
                    let choice = if token < clusters_per_group {
                        token
                    } else {
                        rng.gen_index(clusters_per_group)
                    };
                    let center = &centers[choice * sub_dim..(choice + 1) * sub_dim];
                    let dst =
                        &mut out[token * spec.d + g * sub_dim..token * spec.d + (g + 1) * sub_dim];
                    dst.copy_from_slice(center);
                    if noise_sd > 0.0 {
                        rng.fill_normal(&mut noise);
                        for (o, &z) in dst.iter_mut().zip(&noise) {
                            *o += (noise_sd * z as f64) as f32;
                        }
                    }
                }
            }
        }
    }
    TensorDump::f32(vec![spec.n, spec.d], out)
}
