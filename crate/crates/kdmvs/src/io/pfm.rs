//! PFM float images: `Pf` (1 channel) / `PF` (3 channels), a `W H` line and
//! a scale line whose sign encodes endianness (negative = little-endian,
//! which is what the writer always emits), then 32-bit floats with the
//! bottom image row stored first.

use crate::grid::Grid;
use crate::{Error, Result};
use std::path::Path;

pub fn write(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    super::write_file(path.as_ref(), &to_bytes(grid)?)
}

pub fn read(path: impl AsRef<Path>) -> Result<Grid> {
    let bytes = super::read_file(path.as_ref())?;
    from_bytes(&bytes).map_err(|m| Error::parse(path.as_ref(), m))
}

pub fn to_bytes(grid: &Grid) -> Result<Vec<u8>> {
    let c = grid.c();
    let magic = match c {
        1 => "Pf",
        3 => "PF",
        _ => {
            return Err(Error::InvalidArgument(format!(
                "PFM supports 1 or 3 channels, got {c}"
            )))
        }
    };
    let (h, w) = (grid.h(), grid.w());
    let mut out = format!("{magic}\n{w} {h}\n-1.0000\n").into_bytes();
    out.reserve(h * w * c * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&(grid.at(y, x, ch) as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Grid, String> {
    let mut pos = 0usize;
    let magic = take_token(bytes, &mut pos).ok_or("missing magic")?;
    let channels = match magic.as_str() {
        "Pf" => 1usize,
        "PF" => 3,
        other => return Err(format!("bad PFM magic {other:?}")),
    };
    let w: usize = take_token(bytes, &mut pos)
        .ok_or("missing width")?
        .parse()
        .map_err(|_| "bad width")?;
    let h: usize = take_token(bytes, &mut pos)
        .ok_or("missing height")?
        .parse()
        .map_err(|_| "bad height")?;
    if w == 0 || h == 0 {
        return Err("zero image dimension".into());
    }
    let scale: f64 = take_token(bytes, &mut pos)
        .ok_or("missing scale")?
        .parse()
        .map_err(|_| "bad scale")?;
    if scale == 0.0 {
        return Err("scale must be nonzero".into());
    }
    let little_endian = scale < 0.0;
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() {
        return Err("missing payload".into());
    }
    pos += 1;
    let want = h * w * channels * 4;
    let payload = bytes
        .get(pos..pos + want)
        .ok_or_else(|| format!("truncated payload: want {want} bytes, have {}", bytes.len() - pos))?;
    let mut grid = Grid::zeros(h, w, channels);
    let mut i = 0;
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..channels {
                let raw: [u8; 4] = payload[i..i + 4].try_into().unwrap();
                let v = if little_endian {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                grid.set(y, x, ch, v as f64);
                i += 4;
            }
        }
    }
    Ok(grid)
}

/// Reads one whitespace-delimited header token; `pos` ends on the
/// whitespace byte that terminated it.
fn take_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        None
    } else {
        String::from_utf8(bytes[start..*pos].to_vec()).ok()
    }
}
