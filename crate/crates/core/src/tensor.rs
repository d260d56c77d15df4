//! Shape-prefixed tensor files (`TNS1`).
//!
//! Layout: magic `TNS1`, u8 rank, `rank` x u64 dims, then the f32 payload in
//! row-major order. All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TNS1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.len() > u8::MAX as usize {
            return Err(Error::Shape(format!("rank {} exceeds 255", shape.len())));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn from_array2(a: &Array2<f64>) -> Self {
        let (r, c) = a.dim();
        Self {
            shape: vec![r, c],
            data: a.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        let data = self.data.iter().map(|&v| f64::from(v)).collect();
        Array2::from_shape_vec((self.shape[0], self.shape[1]), data)
            .map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn to_arrayd(&self) -> ArrayD<f32> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone())
            .expect("shape validated at construction")
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_u8(self.shape.len() as u8)?;
        for &d in &self.shape {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in &self.data {
            w.write_f32::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let at = |offset: usize| format!("byte offset {offset}");
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::parse(at(0), format!("missing magic: {e}")))?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::parse(at(0), format!("bad tensor magic {magic:?}")));
        }
        let rank = r
            .read_u8()
            .map_err(|e| Error::parse(at(4), e.to_string()))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            let d = r
                .read_u64::<LittleEndian>()
                .map_err(|e| Error::parse(at(5 + 8 * i), e.to_string()))?;
            shape.push(
                usize::try_from(d).map_err(|_| Error::parse(at(5 + 8 * i), "dim too large"))?,
            );
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::parse(at(5), "element count overflows"))?;
        let payload_start = 5 + 8 * rank;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::parse(at(payload_start), e.to_string()))?;
        if bytes.len() != len * 4 {
            return Err(Error::parse(
                at(payload_start),
                format!(
                    "payload has {} bytes, shape {shape:?} needs {}",
                    bytes.len(),
                    len * 4
                ),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TNS1");
        assert_eq!(buf[4], 2);
        assert_eq!(&buf[5..13], &2u64.to_le_bytes());
        assert_eq!(&buf[13..21], &1u64.to_le_bytes());
        assert_eq!(&buf[21..25], &1.5f32.to_le_bytes());
        assert_eq!(buf.len(), 29);
        assert_eq!(Tensor::read_from(&buf[..]).unwrap(), t);
    }

    #[test]
    fn rejects_bad_payload() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        let t = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf.pop();
        assert!(matches!(
            Tensor::read_from(&buf[..]),
            Err(Error::Parse { .. })
        ));
        assert!(Tensor::read_from(&b"TNS2\0"[..]).is_err());
    }

    #[test]
    fn scalar_rank_zero() {
        let t = Tensor::new(vec![], vec![4.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(Tensor::read_from(&buf[..]).unwrap().data(), &[4.0]);
    }
}
