//! Plain-text camera files:
//!
//! ```text
//! extrinsic
//! r11 r12 r13 t1
//! r21 r22 r23 t2
//! r31 r32 r33 t3
//! 0 0 0 1
//!
//! intrinsic
//! k11 k12 k13
//! k21 k22 k23
//! k31 k32 k33
//!
//! depth_min depth_interval depth_max
//! ```
//!
//! `#` starts a comment anywhere. Floats are written with the shortest
//! round-tripping representation, so read → write reproduces a written
//! file byte for byte.

use crate::geometry::CameraModel;
use crate::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use std::path::Path;

pub fn write(path: impl AsRef<Path>, cam: &CameraModel, depth_interval: f64) -> Result<()> {
    super::write_file(path.as_ref(), to_string(cam, depth_interval).as_bytes())
}

pub fn read(path: impl AsRef<Path>) -> Result<(CameraModel, f64)> {
    let bytes = super::read_file(path.as_ref())?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::parse(path.as_ref(), "camera file is not utf-8"))?;
    from_str(&text).map_err(|m| Error::parse(path.as_ref(), m))
}

pub fn to_string(cam: &CameraModel, depth_interval: f64) -> String {
    let mut s = String::from("extrinsic\n");
    for row in 0..3 {
        s.push_str(&format!(
            "{} {} {} {}\n",
            cam.r[(row, 0)],
            cam.r[(row, 1)],
            cam.r[(row, 2)],
            cam.t[row]
        ));
    }
    s.push_str("0 0 0 1\n\nintrinsic\n");
    for row in 0..3 {
        s.push_str(&format!(
            "{} {} {}\n",
            cam.k[(row, 0)],
            cam.k[(row, 1)],
            cam.k[(row, 2)]
        ));
    }
    s.push_str(&format!(
        "\n{} {} {}\n",
        cam.depth_min, depth_interval, cam.depth_max
    ));
    s
}

pub fn from_str(text: &str) -> std::result::Result<(CameraModel, f64), String> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split_whitespace())
        .peekable();

    if tokens.next() != Some("extrinsic") {
        return Err("expected 'extrinsic' section".into());
    }
    let mut ext = [0.0f64; 16];
    for v in ext.iter_mut() {
        *v = next_number(&mut tokens, "extrinsic matrix")?;
    }
    let bottom = &ext[12..16];
    if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
        return Err(format!("extrinsic bottom row must be 0 0 0 1, got {bottom:?}"));
    }

    if tokens.next() != Some("intrinsic") {
        return Err("expected 'intrinsic' section".into());
    }
    let mut intr = [0.0f64; 9];
    for v in intr.iter_mut() {
        *v = next_number(&mut tokens, "intrinsic matrix")?;
    }

    let depth_min = next_number(&mut tokens, "depth_min")?;
    let depth_interval = next_number(&mut tokens, "depth_interval")?;
    let depth_max = next_number(&mut tokens, "depth_max")?;
    if let Some(extra) = tokens.next() {
        return Err(format!("unexpected trailing token {extra:?}"));
    }

    let r = Matrix3::new(
        ext[0], ext[1], ext[2], ext[4], ext[5], ext[6], ext[8], ext[9], ext[10],
    );
    let t = Vector3::new(ext[3], ext[7], ext[11]);
    let k = Matrix3::from_row_slice(&intr);
    let cam = CameraModel {
        k,
        r,
        t,
        depth_min,
        depth_max,
    };
    cam.validate().map_err(|e| e.to_string())?;
    Ok((cam, depth_interval))
}

fn next_number<'a>(
    tokens: &mut impl Iterator<Item = &'a str>,
    what: &str,
) -> std::result::Result<f64, String> {
    let tok = tokens.next().ok_or_else(|| format!("missing value in {what}"))?;
    tok.parse()
        .map_err(|_| format!("bad number {tok:?} in {what}"))
}
