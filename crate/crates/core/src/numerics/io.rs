//! Flat binary tensor format used for checkpoints.
//!
//! Layout, all little-endian: rank as u64, extents as u64 each, then
//! f64 IEEE values row-major.

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::{NumericsError, Result, Tensor};

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &e in &t.shape {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let rank = u64::from_le_bytes(b8) as usize;
    if rank > 8 {
        return Err(NumericsError::Malformed(format!("rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Ok(Tensor::new(shape, data))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let t = Tensor::from_rows(2, 3, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5e300, -7.1, 0.1]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape, t.shape);
        for (a, b) in back.data.iter().zip(&t.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_file_rejected() {
        let t = Tensor::from_vec(vec![1.0, 2.0]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.pop();
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }
}
