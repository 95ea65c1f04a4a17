//! On-disk tensor format.
//!
//! A tensor dump is: magic "TDMP", u32 LE ndim, ndim u32 LE dims, then the
//! f32 LE payload in row-major order. A named archive is a sequence of
//! (u16 LE name length, UTF-8 name, tensor dump) records.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use std::io::{Read, Write};

const MAGIC: &[u8; 4] = b"TDMP";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Load(format!(
            "bad tensor magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let ndim = read_u32(r)? as usize;
    if ndim > 8 {
        return Err(Error::Load(format!("implausible tensor rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf));
    }
    Tensor::from_vec(shape, data)
}

pub fn write_archive<W: Write>(w: &mut W, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    for (name, t) in entries {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Parameter(format!("tensor name too long: {name}")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_archive<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut out = Vec::new();
    loop {
        let mut len_buf = [0u8; 2];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u16::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| Error::Load(format!("invalid tensor name: {e}")))?;
        let t = read_tensor(r)?;
        out.push((name, t));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let t = Tensor::from_vec(vec![2, 3], vec![1.0, -2.0, 0.5, 3.25, 0.0, -0.125]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"TDMP");
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn archive_round_trip_preserves_order() {
        let entries = vec![
            ("b.weight".to_string(), Tensor::full(vec![2, 2], 1.5)),
            ("a.bias".to_string(), Tensor::zeros(vec![3])),
        ];
        let mut buf = Vec::new();
        write_archive(&mut buf, &entries).unwrap();
        let back = read_archive(&mut buf.as_slice()).unwrap();
        assert_eq!(entries, back);
    }

    #[test]
    fn truncated_dump_is_an_error() {
        let t = Tensor::full(vec![4], 1.0);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }
}
