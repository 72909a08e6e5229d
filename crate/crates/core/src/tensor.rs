//! Dense rank-4 tensors in row-major `(N, C, H, W)` order, plus the binary
//! `STNT` file format and JSON-manifest checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic bytes opening every tensor file.
pub const TENSOR_MAGIC: &[u8; 4] = b"STNT";
/// Current tensor file version.
pub const TENSOR_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn full(dims: [usize; 4], value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {:?} ({} elements)",
                data.len(),
                dims,
                expected
            )));
        }
        Ok(Self { dims, data })
    }

    /// A `(1, n, 1, 1)` tensor, the layout used for bias vectors.
    pub fn vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            dims: [1, n, 1, 1],
            data: values,
        }
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(dims: [usize; 4], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..dims.iter().product::<usize>())
            .map(|_| std * normal.sample(rng))
            .collect();
        Self { dims, data }
    }

    /// Normal samples truncated to two standard deviations (resampled, not clipped).
    pub fn trunc_normal<R: Rng + ?Sized>(dims: [usize; 4], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..dims.iter().product::<usize>())
            .map(|_| loop {
                let z: f64 = normal.sample(rng);
                if z.abs() <= 2.0 {
                    break std * z;
                }
            })
            .collect();
        Self { dims, data }
    }

    pub fn uniform<R: Rng + ?Sized>(dims: [usize; 4], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..dims.iter().product::<usize>())
            .map(|_| rng.gen_range(lo..hi))
            .collect();
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cc, hh, ww] = self.dims;
        ((n * cc + c) * hh + h) * ww + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Same data viewed under new dims with the same element count.
    pub fn reshape(&self, dims: [usize; 4]) -> Result<Self> {
        Self::from_vec(dims, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_dims(other)?;
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_dims(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_dims(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of sample `n` as a `(1, C, H, W)` tensor.
    pub fn sample(&self, n: usize) -> Self {
        let per = self.dims[1] * self.dims[2] * self.dims[3];
        Self {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Concatenate along the batch axis.
    pub fn stack(samples: &[Tensor]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::with_capacity(samples.iter().map(Tensor::len).sum());
        let mut n = 0;
        for s in samples {
            if s.dims[1..] != [c, h, w] {
                return Err(Error::Shape(format!(
                    "stack: {:?} incompatible with {:?}",
                    s.dims, first.dims
                )));
            }
            n += s.dims[0];
            data.extend_from_slice(&s.data);
        }
        Ok(Self {
            dims: [n, c, h, w],
            data,
        })
    }

    /// Joins along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero tensors".into()))?;
        let [n, _, h, w] = first.dims;
        if parts.iter().any(|p| p.dims[0] != n || p.dims[2] != h || p.dims[3] != w) {
            return Err(Error::Shape("concat: batch or spatial dims differ".into()));
        }
        let total: usize = parts.iter().map(|p| p.dims[1]).sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for p in parts {
                let c = p.dims[1];
                data.extend_from_slice(&p.data[b * c * plane..(b + 1) * c * plane]);
            }
        }
        Self::from_vec([n, total, h, w], data)
    }

    /// Channels `start..start + len`.
    pub fn channel_slice(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.dims;
        if start + len > c {
            return Err(Error::Shape(format!("channels {start}..{} of {c}", start + len)));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let s = (b * c + start) * plane;
            data.extend_from_slice(&self.data[s..s + len * plane]);
        }
        Self::from_vec([n, len, h, w], data)
    }

    pub fn expect_same_dims(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Serialize in the `STNT` binary format.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(TENSOR_MAGIC)?;
        out.write_all(&[TENSOR_VERSION])?;
        for d in self.dims {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format("bad tensor magic".into()));
        }
        let mut version = [0u8; 1];
        input.read_exact(&mut version)?;
        if version[0] != TENSOR_VERSION {
            return Err(Error::Format(format!(
                "unsupported tensor version {}",
                version[0]
            )));
        }
        let mut dims = [0usize; 4];
        let mut buf = [0u8; 8];
        for d in &mut dims {
            input.read_exact(&mut buf)?;
            *d = usize::try_from(u64::from_le_bytes(buf))
                .map_err(|_| Error::Format("dimension overflows usize".into()))?;
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(37 + 8 * self.len());
        self.write_to(&mut bytes)?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

/// Write through a sibling temp file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Manifest stored next to the tensor files of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub layout: String,
    pub library_version: String,
    /// Free-form description of what the checkpoint holds, e.g. a variant or head layout name.
    pub kind: String,
    pub tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub dims: [usize; 4],
}

/// Save named tensors into `dir` with a `manifest.json`.
pub fn save_checkpoint(dir: &Path, kind: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = BTreeMap::new();
    for (name, t) in tensors {
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(Error::Format(format!("invalid tensor name {name:?}")));
        }
        let file = format!("{name}.stnt");
        t.save(&dir.join(&file))?;
        entries.insert(
            name.clone(),
            TensorEntry {
                file,
                dims: t.dims(),
            },
        );
    }
    let manifest = CheckpointManifest {
        layout: "NCHW".into(),
        library_version: crate::VERSION.into(),
        kind: kind.into(),
        tensors: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&dir.join("manifest.json"), &json)
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, BTreeMap<String, Tensor>)> {
    let manifest: CheckpointManifest =
        serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.layout != "NCHW" {
        return Err(Error::Format(format!(
            "unsupported layout {}",
            manifest.layout
        )));
    }
    let mut tensors = BTreeMap::new();
    for (name, entry) in &manifest.tensors {
        let t = Tensor::load(&dir.join(&entry.file))?;
        if t.dims() != entry.dims {
            return Err(Error::Format(format!(
                "tensor {name}: manifest dims {:?} but file has {:?}",
                entry.dims,
                t.dims()
            )));
        }
        tensors.insert(name.clone(), t);
    }
    Ok((manifest, tensors))
}
