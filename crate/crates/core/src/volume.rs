//! Dense volumes and images plus their on-disk formats.
//!
//! Axis convention: a volume has extents `(a, b, c)` stored a-major, then b,
//! then c. Axis `a` is the projection axis, `b` the vertical rotation axis and
//! `c` the width axis. Images are `b x c`.
//!
//! "MVOL" layout (little-endian): `b"MVOL"`, version `u32`, `a`, `b`, `c` as
//! `u64`, dtype tag `u8` (0 = f32, 1 = u8 mask), then the raw payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    extents: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy + Default> Volume<T> {
    pub fn zeros(extents: [usize; 3]) -> Self {
        Self::filled(extents, T::default())
    }

    pub fn filled(extents: [usize; 3], value: T) -> Self {
        Self { extents, data: vec![value; extents.iter().product()] }
    }
}

impl<T> Volume<T> {
    pub fn new(extents: [usize; 3], data: Vec<T>) -> Result<Self> {
        if extents.contains(&0) {
            return shape_err(format!("volume extents must be positive, got {extents:?}"));
        }
        if data.len() != extents.iter().product::<usize>() {
            return shape_err(format!("volume {extents:?} needs {} values, got {}", extents.iter().product::<usize>(), data.len()));
        }
        Ok(Self { extents, data })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.extents[1] + j) * self.extents[2] + k
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Volume<U> {
        Volume { extents: self.extents, data: self.data.iter().map(f).collect() }
    }

    /// The `b x c` slice at projection index `i`.
    pub fn slice_a(&self, i: usize) -> Image<T>
    where
        T: Clone,
    {
        let plane = self.extents[1] * self.extents[2];
        Image { rows: self.extents[1], cols: self.extents[2], data: self.data[i * plane..(i + 1) * plane].to_vec() }
    }
}

impl<T: Copy> Volume<T> {
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: T) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
    }

    /// Stacks `a` equally sized `b x c` images along the projection axis.
    pub fn from_slices(slices: &[Image<T>]) -> Result<Self> {
        let Some(first) = slices.first() else { return shape_err("no slices") };
        if slices.iter().any(|s| s.rows != first.rows || s.cols != first.cols) {
            return shape_err("slices differ in shape");
        }
        let data = slices.iter().flat_map(|s| s.data.iter().copied()).collect();
        Self::new([slices.len(), first.rows, first.cols], data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Image<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::default(); rows * cols] }
    }
}

impl<T: Copy> Image<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return shape_err(format!("image {rows}x{cols} with {} values", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, j: usize, k: usize) -> T {
        self.data[j * self.cols + k]
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Image<U> {
        Image { rows: self.rows, cols: self.cols, data: self.data.iter().map(f).collect() }
    }
}

pub const MVOL_MAGIC: &[u8; 4] = b"MVOL";
pub const MVOL_VERSION: u32 = 1;
pub const MVOL_HEADER_LEN: usize = 33;

/// A volume read back from disk, tagged by its stored element type.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    F32(Volume<f32>),
    Mask(Volume<u8>),
}

fn header(extents: [usize; 3], tag: u8) -> Vec<u8> {
    let mut h = Vec::with_capacity(MVOL_HEADER_LEN);
    h.extend_from_slice(MVOL_MAGIC);
    h.extend_from_slice(&MVOL_VERSION.to_le_bytes());
    for e in extents {
        h.extend_from_slice(&(e as u64).to_le_bytes());
    }
    h.push(tag);
    h
}

pub fn encode_volume(v: &Volume<f32>) -> Vec<u8> {
    let mut out = header(v.extents, 0);
    out.extend(v.data.iter().flat_map(|x| x.to_le_bytes()));
    out
}

pub fn encode_mask(v: &Volume<u8>) -> Vec<u8> {
    let mut out = header(v.extents, 1);
    out.extend_from_slice(&v.data);
    out
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format { format: "MVOL", reason: reason.into() }
}

pub fn decode_volume(bytes: &[u8]) -> Result<VolumeData> {
    if bytes.len() < MVOL_HEADER_LEN || &bytes[..4] != MVOL_MAGIC {
        return Err(bad("missing MVOL header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MVOL_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let ext = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
    let extents = [ext(8), ext(16), ext(24)];
    let n: usize = extents.iter().product();
    let payload = &bytes[MVOL_HEADER_LEN..];
    match bytes[32] {
        0 => {
            if payload.len() != 4 * n {
                return Err(bad(format!("expected {} payload bytes, found {}", 4 * n, payload.len())));
            }
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            Ok(VolumeData::F32(Volume::new(extents, data).map_err(|e| bad(e.to_string()))?))
        }
        1 => {
            if payload.len() != n {
                return Err(bad(format!("expected {n} payload bytes, found {}", payload.len())));
            }
            Ok(VolumeData::Mask(Volume::new(extents, payload.to_vec()).map_err(|e| bad(e.to_string()))?))
        }
        t => Err(bad(format!("unknown dtype tag {t}"))),
    }
}

pub fn write_volume(path: &Path, v: &Volume<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_volume(v))?;
    w.flush()?;
    Ok(())
}

pub fn write_mask(path: &Path, v: &Volume<u8>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_mask(v))?;
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<VolumeData> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_volume(&bytes)
}

pub fn read_f32_volume(path: &Path) -> Result<Volume<f32>> {
    match read_volume(path)? {
        VolumeData::F32(v) => Ok(v),
        VolumeData::Mask(m) => Ok(m.map(|&x| f32::from(x))),
    }
}

pub fn read_mask(path: &Path) -> Result<Volume<u8>> {
    match read_volume(path)? {
        VolumeData::Mask(m) => Ok(m),
        VolumeData::F32(_) => Err(bad(format!("{} holds intensities, not a mask", path.display()))),
    }
}

/// Binary 16-bit PGM (P5, big-endian samples); `[min, max]` maps to
/// `[0, 65535]`, and a constant image is written as zeros.
pub fn encode_pgm(img: &Image<f32>) -> Vec<u8> {
    let (lo, hi) = img.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let mut out = format!("P5\n{} {}\n65535\n", img.cols, img.rows).into_bytes();
    for &v in &img.data {
        let s = if hi > lo { (((v - lo) / (hi - lo)) as f64 * 65535.0).round() as u16 } else { 0 };
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

pub fn write_pgm(path: &Path, img: &Image<f32>) -> Result<()> {
    std::fs::write(path, encode_pgm(img))?;
    Ok(())
}
