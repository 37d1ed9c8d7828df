//! Flat binary parameter container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic    b"SPKC"
//! version  u32 (= 1)
//! count    u32
//! count × { name_len u32, name [u8; name_len] (UTF-8),
//!           rank u32, dims [u32; rank], data [f32 LE; prod(dims)] }
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::{Parameterized, Scalar};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPKC";
pub const VERSION: u32 = 1;

/// One stored tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

fn put_u32(out: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(input: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_records(out: &mut impl Write, records: &[Record]) -> Result<()> {
    out.write_all(MAGIC)?;
    put_u32(out, VERSION as usize)?;
    put_u32(out, records.len())?;
    for r in records {
        put_u32(out, r.name.len())?;
        out.write_all(r.name.as_bytes())?;
        put_u32(out, r.dims.len())?;
        for &d in &r.dims {
            put_u32(out, d)?;
        }
        for v in &r.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_records(input: &mut impl Read) -> Result<Vec<Record>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = get_u32(input)? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = get_u32(input)?;
    let mut records = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = get_u32(input)?;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("non UTF-8 name".into()))?;
        let rank = get_u32(input)?;
        let dims = (0..rank).map(|_| get_u32(input)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(Record { name, dims, data });
    }
    Ok(records)
}

/// Snapshot of every tensor (parameters and buffers) in visit order.
pub fn to_records<T: Scalar, M: Parameterized<T> + ?Sized>(model: &mut M) -> Vec<Record> {
    let mut records = Vec::new();
    model.visit("", &mut |name, t| {
        records.push(Record {
            name: name.to_string(),
            dims: t.shape().to_vec(),
            data: t.data.iter().map(|v| v.as_f64() as f32).collect(),
        })
    });
    records
}

/// Overwrites `model`'s tensors. Names, order and shapes must match exactly.
pub fn from_records<T: Scalar, M: Parameterized<T> + ?Sized>(model: &mut M, records: &[Record]) -> Result<()> {
    let mut expected = Vec::new();
    model.visit("", &mut |name, t| expected.push((name.to_string(), t.shape().to_vec())));
    if expected.len() != records.len() {
        return Err(Error::Checkpoint(format!(
            "model has {} tensors, checkpoint {}",
            expected.len(),
            records.len()
        )));
    }
    for ((name, shape), r) in expected.iter().zip(records) {
        if *name != r.name || *shape != r.dims {
            return Err(Error::Checkpoint(format!(
                "expected `{name}` {shape:?}, found `{}` {:?}",
                r.name, r.dims
            )));
        }
    }
    let mut it = records.iter();
    model.visit("", &mut |_, t| {
        let r = it.next().expect("length checked");
        for (d, s) in t.data.iter_mut().zip(&r.data) {
            *d = T::of(*s as f64);
        }
    });
    Ok(())
}

pub fn save<T: Scalar, M: Parameterized<T> + ?Sized>(model: &mut M, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = BufWriter::new(std::fs::File::create(path).map_err(crate::error::at(path))?);
    write_records(&mut out, &to_records(model))?;
    out.flush()?;
    Ok(())
}

pub fn load<T: Scalar, M: Parameterized<T> + ?Sized>(model: &mut M, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut input = BufReader::new(std::fs::File::open(path).map_err(crate::error::at(path))?);
    from_records(model, &read_records(&mut input)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let recs = vec![Record {
            name: "w".into(),
            dims: vec![2],
            data: vec![1.0, -2.5],
        }];
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let mut expect = b"SPKC".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.push(b'w');
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.5f32).to_le_bytes());
        assert_eq!(buf, expect);
        assert_eq!(read_records(&mut buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn rejects_corruption() {
        assert!(read_records(&mut &b"NOPE\x01\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_records(
            &mut buf,
            &[Record {
                name: "x".into(),
                dims: vec![3],
                data: vec![0.0; 3],
            }],
        )
        .unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_records(&mut buf.as_slice()).is_err());
    }
}
