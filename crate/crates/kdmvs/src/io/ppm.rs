//! Binary PPM (`P6`, maxval 255) for the rendered RGB images. Values are
//! mapped between `[0, 1]` floats and 8-bit with round-to-nearest on write.

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
    if grid.c() != 3 {
        return Err(Error::InvalidArgument(format!(
            "PPM needs 3 channels, got {}",
            grid.c()
        )));
    }
    let (h, w) = (grid.h(), grid.w());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for v in grid.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Grid, String> {
    let mut pos = 0usize;
    let magic = token(bytes, &mut pos).ok_or("missing magic")?;
    if magic != "P6" {
        return Err(format!("bad PPM magic {magic:?}"));
    }
    let w: usize = token(bytes, &mut pos).ok_or("missing width")?.parse().map_err(|_| "bad width")?;
    let h: usize = token(bytes, &mut pos).ok_or("missing height")?.parse().map_err(|_| "bad height")?;
    let maxval: u32 = token(bytes, &mut pos).ok_or("missing maxval")?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if pos >= bytes.len() {
        return Err("missing payload".into());
    }
    pos += 1; // single whitespace after maxval
    let want = h * w * 3;
    let payload = bytes
        .get(pos..pos + want)
        .ok_or_else(|| format!("truncated payload: want {want} bytes"))?;
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Grid::from_vec(h, w, 3, data).map_err(|e| e.to_string())
}

fn token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        // PNM headers allow '#' comment lines
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start != *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_quantized_values() {
        let g = Grid::from_vec(
            1,
            2,
            3,
            vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1],
        )
        .unwrap();
        let bytes = to_bytes(&g).unwrap();
        let back = from_bytes(&bytes).unwrap();
        for (a, b) in g.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 128]);
        let g = from_bytes(&bytes).unwrap();
        assert_eq!(g.at(0, 0, 0), 1.0);
        assert_eq!(g.at(0, 0, 1), 0.0);
    }

    #[test]
    fn out_of_range_values_clamp() {
        let g = Grid::from_vec(1, 1, 3, vec![-0.5, 2.0, 0.5]).unwrap();
        let bytes = to_bytes(&g).unwrap();
        let tail = &bytes[bytes.len() - 3..];
        assert_eq!(tail, &[0u8, 255, 128]);
    }
}
