//! Binary little-endian PLY point clouds: float32 x/y/z per vertex, with an
//! optional uchar red/green/blue triple.

use crate::{Error, Result};
use std::path::Path;

/// Points plus optional per-point RGB, as read back from a file.
pub type PointCloud = (Vec<[f64; 3]>, Option<Vec<[u8; 3]>>);

pub fn write(
    path: impl AsRef<Path>,
    points: &[[f64; 3]],
    colors: Option<&[[u8; 3]]>,
) -> Result<()> {
    super::write_file(path.as_ref(), &to_bytes(points, colors)?)
}

pub fn read(path: impl AsRef<Path>) -> Result<PointCloud> {
    let bytes = super::read_file(path.as_ref())?;
    from_bytes(&bytes).map_err(|m| Error::parse(path.as_ref(), m))
}

pub fn to_bytes(points: &[[f64; 3]], colors: Option<&[[u8; 3]]>) -> Result<Vec<u8>> {
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(Error::InvalidArgument(format!(
                "color count {} does not match point count {}",
                c.len(),
                points.len()
            )));
        }
    }
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", points.len()));
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    for (i, p) in points.iter().enumerate() {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        if let Some(c) = colors {
            out.extend_from_slice(&c[i]);
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> std::result::Result<PointCloud, String> {
    let header_end = find_header_end(bytes).ok_or("missing end_header")?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| "non-utf8 header")?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err("missing ply magic".into());
    }
    if lines.next() != Some("format binary_little_endian 1.0") {
        return Err("only binary_little_endian 1.0 is supported".into());
    }
    let mut count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = Some(rest.trim().parse().map_err(|_| "bad vertex count")?);
        } else if let Some(rest) = line.strip_prefix("element ") {
            return Err(format!("unsupported element {rest:?}"));
        } else if let Some(rest) = line.strip_prefix("property ") {
            props.push(rest.trim().to_string());
        } else if line == "end_header" {
            break;
        } else if line.starts_with("comment") {
            continue;
        } else {
            return Err(format!("unexpected header line {line:?}"));
        }
    }
    let count = count.ok_or("missing vertex element")?;
    let with_color = match props.as_slice() {
        [x, y, z] if x == "float x" && y == "float y" && z == "float z" => false,
        [x, y, z, r, g, b]
            if x == "float x"
                && y == "float y"
                && z == "float z"
                && r == "uchar red"
                && g == "uchar green"
                && b == "uchar blue" =>
        {
            true
        }
        other => return Err(format!("unsupported property layout {other:?}")),
    };
    let stride = if with_color { 15 } else { 12 };
    let payload = bytes
        .get(header_end..header_end + count * stride)
        .ok_or("truncated vertex payload")?;
    let mut points = Vec::with_capacity(count);
    let mut colors = with_color.then(|| Vec::with_capacity(count));
    for rec in payload.chunks_exact(stride) {
        let x = f32::from_le_bytes(rec[0..4].try_into().unwrap()) as f64;
        let y = f32::from_le_bytes(rec[4..8].try_into().unwrap()) as f64;
        let z = f32::from_le_bytes(rec[8..12].try_into().unwrap()) as f64;
        points.push([x, y, z]);
        if let Some(c) = colors.as_mut() {
            c.push([rec[12], rec[13], rec[14]]);
        }
    }
    Ok((points, colors))
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let needle = b"end_header\n";
    bytes
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + needle.len())
}
