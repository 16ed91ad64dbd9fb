//! `VXTS` container: little-endian magic `VXTS`, `u32` version, `u32` rows
//! `T`, `u32` columns `D`, then `T×D` row-major `f32`.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VXTS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct VxtsMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl VxtsMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix given {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.rows as u32)?;
        w.write_u32::<LittleEndian>(self.cols as u32)?;
        for &v in &self.data {
            w.write_f32::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("VXTS header truncated".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a VXTS file (bad magic)".into()));
        }
        let header = |r: &mut &[u8]| {
            r.read_u32::<LittleEndian>()
                .map_err(|_| Error::Format("VXTS header truncated".into()))
        };
        let version = header(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported VXTS version {version}")));
        }
        let rows = header(&mut r)? as usize;
        let cols = header(&mut r)? as usize;
        if r.len() != rows * cols * 4 {
            return Err(Error::Format(format!(
                "VXTS payload is {} bytes, expected {}",
                r.len(),
                rows * cols * 4
            )));
        }
        let mut data = vec![0f32; rows * cols];
        r.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|_| Error::Format("VXTS payload truncated".into()))?;
        Self::new(rows, cols, data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let m = VxtsMatrix::new(1, 2, vec![1.0, -2.0]).unwrap();
        let b = m.to_bytes();
        assert_eq!(&b[..4], b"VXTS");
        assert_eq!(&b[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let mut b = VxtsMatrix::new(2, 2, vec![0.0; 4]).unwrap().to_bytes();
        assert!(VxtsMatrix::from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(VxtsMatrix::from_bytes(&b).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(rows in 0usize..6, cols in 0usize..6, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols).map(|i| (i as f32 + seed as f32).sin()).collect();
            let m = VxtsMatrix::new(rows, cols, data).unwrap();
            prop_assert_eq!(VxtsMatrix::from_bytes(&m.to_bytes()).unwrap(), m);
        }
    }
}
