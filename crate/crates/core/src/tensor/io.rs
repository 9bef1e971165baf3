//! Little-endian tensor file format: `SQT1`, `u32` rank, `u64` extents,
//! then the raw `f64` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"SQT1";

// Guards against absurd allocations from corrupted headers.
const MAX_RANK: u32 = 16;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one tensor; `origin` names the source in error messages.
pub fn read_tensor<R: Read>(r: &mut R, origin: &str) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, origin)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::corrupt(
            origin,
            format!("bad magic bytes {magic:?}, expected {TENSOR_MAGIC:?}"),
        ));
    }
    let mut b4 = [0u8; 4];
    read_exact(r, &mut b4, origin)?;
    let rank = u32::from_le_bytes(b4);
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::corrupt(origin, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        read_exact(r, &mut b8, origin)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0 && n < (1 << 34))
        .ok_or_else(|| Error::corrupt(origin, format!("implausible shape {shape:?}")))?;
    let mut bytes = vec![0u8; n * 8];
    read_exact(r, &mut bytes, origin)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::corrupt(origin, e.to_string()))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], origin: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::corrupt(origin, format!("truncated tensor: {e}")))
}

impl Tensor {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        write_tensor(&mut w, self)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        read_tensor(&mut BufReader::new(f), &path.display().to_string())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.rank() + 8 * self.len());
        write_tensor(&mut out, self).expect("writing to Vec cannot fail");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"SQT1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(b[24..32].try_into().unwrap()), 1.5);
        assert_eq!(b.len(), 40);
    }

    #[test]
    fn corrupted_magic_is_reported() {
        let mut b = Tensor::scalar(1.0).to_bytes();
        b[0] = b'X';
        let err = read_tensor(&mut b.as_slice(), "mem").unwrap_err();
        assert!(matches!(err, Error::Corrupt { .. }), "{err}");
    }

    #[test]
    fn truncated_payload_is_reported() {
        let b = Tensor::zeros(&[3, 3]).to_bytes();
        let err = read_tensor(&mut &b[..b.len() - 3], "mem").unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = read_tensor(&mut t.to_bytes().as_slice(), "mem").unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let bits_a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits_a, bits_b);
        }
    }
}
