//! Versioned binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"KDMC"
//! version u32            (currently 1)
//! seed    u64            RNG seed the parameters were initialized from
//! confhash u64           FNV-1a hash of the canonical run configuration
//! count   u32            number of named parameter grids
//! repeated count times:
//!   name_len u32, name bytes (utf-8)
//!   h u32, w u32, c u32
//!   h·w·c f64 values
//! ```
//!
//! Parameters are stored in the order given, and `read` preserves it, so a
//! write → read → write cycle is byte-identical.

use crate::grid::Grid;
use crate::{Error, Result};
use std::path::Path;

use super::bin::{put_f64, put_u32, put_u64, Reader};

pub const VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"KDMC";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub config_hash: u64,
    pub params: Vec<(String, Grid)>,
}

pub fn write(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    super::write_file(path.as_ref(), &to_bytes(ckpt))
}

pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = super::read_file(path.as_ref())?;
    from_bytes(&bytes).map_err(|m| Error::parse(path.as_ref(), m))
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, ckpt.seed);
    put_u64(&mut out, ckpt.config_hash);
    put_u32(&mut out, ckpt.params.len() as u32);
    for (name, grid) in &ckpt.params {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, grid.h() as u32);
        put_u32(&mut out, grid.w() as u32);
        put_u32(&mut out, grid.c() as u32);
        for &v in grid.data() {
            put_f64(&mut out, v);
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let seed = r.u64()?;
    let config_hash = r.u64()?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| "non-utf8 parameter name".to_string())?;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let c = r.u32()? as usize;
        let mut data = Vec::with_capacity(h * w * c);
        for _ in 0..h * w * c {
            data.push(r.f64()?);
        }
        let grid = Grid::from_vec(h, w, c, data).map_err(|e| e.to_string())?;
        params.push((name, grid));
    }
    r.finish()?;
    Ok(Checkpoint {
        seed,
        config_hash,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = Checkpoint {
            seed: 1234567,
            config_hash: 0xDEAD_BEEF_CAFE_F00D,
            params: vec![
                ("feat.w0".into(), Grid::from_vec(2, 3, 1, vec![0.5; 6]).unwrap()),
                ("feat.b0".into(), Grid::from_vec(1, 1, 4, vec![-1.0, 0.0, 1.0, 2.5]).unwrap()),
            ],
        };
        let bytes = to_bytes(&ckpt);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupted_magic_and_truncation_are_rejected() {
        let ckpt = Checkpoint {
            seed: 1,
            config_hash: 2,
            params: vec![("p".into(), Grid::zeros(1, 1, 1))],
        };
        let mut bytes = to_bytes(&ckpt);
        bytes[0] = b'X';
        assert!(from_bytes(&bytes).is_err());
        let bytes = to_bytes(&ckpt);
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut longer = to_bytes(&ckpt);
        longer.push(0);
        assert!(from_bytes(&longer).is_err());
    }
}
