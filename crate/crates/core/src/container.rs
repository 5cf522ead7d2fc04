//! `QFL1` array container.
//!
//! Layout (all integers little-endian `u64` unless noted):
//!
//! ```text
//! "QFL1" | header_len | header (canonical JSON, UTF-8)
//! repeated until EOF:
//!   name_len | name (UTF-8) | dtype (u8: 0 = f32, 1 = f64) | rank | extents[rank] | data
//! ```

use std::io::{self, Read, Write};

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"QFL1";

/// Serializes through `serde_json::Value`, whose maps are ordered, giving
/// sorted keys and shortest round-trip float formatting.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

pub fn canonical_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)?)
}

pub fn write_container<W: Write>(
    mut w: W,
    header: &Value,
    records: &[(&str, &Tensor)],
) -> Result<()> {
    w.write_all(MAGIC)?;
    let header = serde_json::to_string(header)?;
    write_u64(&mut w, header.len() as u64)?;
    w.write_all(header.as_bytes())?;
    for (name, t) in records {
        write_u64(&mut w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[match t.dtype() {
            DType::Float32 => 0u8,
            DType::Float64 => 1u8,
        }])?;
        write_u64(&mut w, t.rank() as u64)?;
        for &e in t.shape() {
            write_u64(&mut w, e as u64)?;
        }
        let mut buf = Vec::with_capacity(t.len() * t.dtype().byte_width());
        match t.dtype() {
            DType::Float32 => t
                .data()
                .iter()
                .for_each(|&x| buf.extend_from_slice(&(x as f32).to_le_bytes())),
            DType::Float64 => t
                .data()
                .iter()
                .for_each(|&x| buf.extend_from_slice(&x.to_le_bytes())),
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub type Records = Vec<(String, Tensor)>;

pub fn read_container<R: Read>(mut r: R) -> Result<(Value, Records)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let header_len = read_u64(&mut r)? as usize;
    let header_bytes = read_vec(&mut r, header_len)?;
    let header: Value = serde_json::from_slice(&header_bytes)?;
    let mut records = Vec::new();
    loop {
        let name_len = match read_u64_or_eof(&mut r)? {
            Some(n) => n as usize,
            None => break,
        };
        let name = String::from_utf8(read_vec(&mut r, name_len)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let dtype = match tag[0] {
            0 => DType::Float32,
            1 => DType::Float64,
            t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
        };
        let rank = read_u64(&mut r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("record {name}: rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = read_vec(&mut r, n * dtype.byte_width())?;
        let data: Vec<f64> = match dtype {
            DType::Float32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            DType::Float64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        let t = Tensor::new(shape, dtype, data).map_err(|e| Error::Format(e.to_string()))?;
        records.push((name, t));
    }
    Ok((header, records))
}

fn write_u64<W: Write>(w: &mut W, x: u64) -> io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u64_or_eof<R: Read>(r: &mut R) -> Result<Option<u64>> {
    let mut b = [0u8; 8];
    let mut got = 0;
    while got < 8 {
        let n = r.read(&mut b[got..])?;
        if n == 0 {
            return if got == 0 {
                Ok(None)
            } else {
                Err(Error::Format("truncated record header".into()))
            };
        }
        got += n;
    }
    Ok(Some(u64::from_le_bytes(b)))
}

fn read_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    r.take(n as u64).read_to_end(&mut v)?;
    if v.len() != n {
        return Err(Error::Format("truncated container".into()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn header_keys_are_sorted() {
        let s = canonical_json(&json!({"b": 1, "a": {"z": 0.1, "c": [1, 2]}})).unwrap();
        assert_eq!(s, r#"{"a":{"c":[1,2],"z":0.1},"b":1}"#);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_container(&b"QFL2\0\0\0\0\0\0\0\0"[..]).is_err());
        let t = Tensor::from_f64(&[2], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_container(&mut buf, &json!({}), &[("x", &t)]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_container(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..40),
            f32_vals in proptest::collection::vec(-1e6f32..1e6, 1..40),
            name in "[a-z.0-9]{1,12}",
        ) {
            let a = Tensor::from_f64(&[vals.len()], vals.clone()).unwrap();
            let b = Tensor::new(vec![f32_vals.len(), 1], DType::Float32,
                f32_vals.iter().map(|&x| x as f64).collect()).unwrap();
            let header = json!({"epoch": 3, "loss": 0.1f64 + vals[0]});
            let mut buf = Vec::new();
            write_container(&mut buf, &header, &[(&name, &a), ("b", &b)]).unwrap();
            let (h, recs) = read_container(&buf[..]).unwrap();
            prop_assert_eq!(&h, &header);
            prop_assert_eq!(&recs[0].0, &name);
            prop_assert_eq!(recs[0].1.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            vals.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(&recs[1].1, &b);
            let mut again = Vec::new();
            write_container(&mut again, &h, &[(&recs[0].0, &recs[0].1), ("b", &recs[1].1)]).unwrap();
            prop_assert_eq!(again, buf);
        }
    }
}
