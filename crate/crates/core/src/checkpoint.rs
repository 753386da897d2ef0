//! "MSEG" parameter checkpoints.
//!
//! Layout (all integers little-endian):
//! `b"MSEG"`, version `u32`, then one record per parameter until EOF:
//! name length `u32`, UTF-8 name, rank `u32`, `rank` extents as `u64`,
//! values as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MSEG";
pub const VERSION: u32 = 1;

fn bad(reason: impl Into<String>) -> Error {
    Error::Format { format: "MSEG", reason: reason.into() }
}

pub fn write_records<W: Write, T: Real>(mut w: W, records: &[(String, Tensor<T>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&(v.f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated record"))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("missing header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated extents"))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(|_| bad(format!("truncated values for {name}")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push((name, Tensor::from_vec(&shape, data).map_err(|e| bad(e.to_string()))?));
    }
    Ok(out)
}

pub fn store_records<T: Real>(store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
    store.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
}

pub fn save(path: &Path, store: &ParamStore<f32>, extra: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut records = store_records(store);
    records.extend_from_slice(extra);
    write_records(BufWriter::new(File::create(path)?), &records)
}

/// Loads every parameter of `store` by name; returns records that do not
/// belong to the store (such as stored angle sets).
pub fn load_into(path: &Path, store: &mut ParamStore<f32>) -> Result<Vec<(String, Tensor<f32>)>> {
    let records = read_records(BufReader::new(File::open(path)?))?;
    let mut extra = Vec::new();
    let mut seen = 0;
    for (name, t) in records {
        match store.find(&name) {
            Some(id) => {
                if store.value(id).shape() != t.shape() {
                    return Err(bad(format!("{name}: shape {:?} != {:?}", t.shape(), store.value(id).shape())));
                }
                store.get_mut(id).value = t;
                seen += 1;
            }
            None => extra.push((name, t)),
        }
    }
    if seen != store.len() {
        return Err(bad(format!("checkpoint covers {seen} of {} parameters", store.len())));
    }
    Ok(extra)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_first_record_layout() {
        let t = Tensor::from_vec(&[2], vec![1.0f32, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_records(&mut buf, &[("ab".to_string(), t.clone())]).unwrap();
        assert_eq!(&buf[..4], b"MSEG");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..14], b"ab");
        assert_eq!(&buf[14..18], &1u32.to_le_bytes());
        assert_eq!(&buf[18..26], &2u64.to_le_bytes());
        assert_eq!(&buf[26..30], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 34);
        let back = read_records(&buf[..]).unwrap();
        assert_eq!(back, vec![("ab".to_string(), t)]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_records(&b"NOPE\x01\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_records(&mut buf, &[("w".to_string(), Tensor::from_vec(&[3], vec![0f32; 3]).unwrap())]).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_records(&buf[..]).is_err());
    }
}
