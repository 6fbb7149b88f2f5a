//! Sparse per-pixel binary sidecars, written next to the depth maps they
//! describe. Two formats share the entry scheme "row-major pixel index plus
//! payload":
//!
//! * validated depth sets (`KDVD`): for every cross-view-validated pixel,
//!   the reference-frame depth seen from each of the N views;
//! * pseudo labels (`KDPL`): per validated pixel, the Gaussian (μ, σ²).
//!
//! All integers little-endian; entries sorted by pixel index.

use crate::{Error, Result};
use std::path::Path;

use super::bin::{put_f64, put_u32, Reader};

pub const VERSION: u32 = 1;
const MAGIC_DEPTHS: &[u8; 4] = b"KDVD";
const MAGIC_LABELS: &[u8; 4] = b"KDPL";

/// Cross-view-validated depth observations for one reference view.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedDepths {
    pub h: usize,
    pub w: usize,
    pub n_views: usize,
    /// `(pixel_index, depths)` with `depths.len() == n_views`; the first
    /// entry is the reference view's own depth.
    pub entries: Vec<(u32, Vec<f64>)>,
}

pub fn write_validated(path: impl AsRef<Path>, v: &ValidatedDepths) -> Result<()> {
    super::write_file(path.as_ref(), &validated_to_bytes(v))
}

pub fn read_validated(path: impl AsRef<Path>) -> Result<ValidatedDepths> {
    let bytes = super::read_file(path.as_ref())?;
    validated_from_bytes(&bytes).map_err(|m| Error::parse(path.as_ref(), m))
}

pub fn validated_to_bytes(v: &ValidatedDepths) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC_DEPTHS);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, v.h as u32);
    put_u32(&mut out, v.w as u32);
    put_u32(&mut out, v.n_views as u32);
    put_u32(&mut out, v.entries.len() as u32);
    for (px, depths) in &v.entries {
        debug_assert_eq!(depths.len(), v.n_views);
        put_u32(&mut out, *px);
        for &d in depths {
            put_f64(&mut out, d);
        }
    }
    out
}

pub fn validated_from_bytes(bytes: &[u8]) -> std::result::Result<ValidatedDepths, String> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC_DEPTHS)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported validated-depth version {version}"));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n_views = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let px = r.u32()?;
        if px as usize >= h * w {
            return Err(format!("pixel index {px} out of range for {h}x{w}"));
        }
        let mut depths = Vec::with_capacity(n_views);
        for _ in 0..n_views {
            depths.push(r.f64()?);
        }
        entries.push((px, depths));
    }
    r.finish()?;
    Ok(ValidatedDepths {
        h,
        w,
        n_views,
        entries,
    })
}

/// Gaussian pseudo labels for one reference view.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelFile {
    pub h: usize,
    pub w: usize,
    /// `(pixel_index, mean, variance)` per validated pixel.
    pub entries: Vec<(u32, f64, f64)>,
}

pub fn write_labels(path: impl AsRef<Path>, l: &PseudoLabelFile) -> Result<()> {
    super::write_file(path.as_ref(), &labels_to_bytes(l))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<PseudoLabelFile> {
    let bytes = super::read_file(path.as_ref())?;
    labels_from_bytes(&bytes).map_err(|m| Error::parse(path.as_ref(), m))
}

pub fn labels_to_bytes(l: &PseudoLabelFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC_LABELS);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, l.h as u32);
    put_u32(&mut out, l.w as u32);
    put_u32(&mut out, l.entries.len() as u32);
    for (px, mu, var) in &l.entries {
        put_u32(&mut out, *px);
        put_f64(&mut out, *mu);
        put_f64(&mut out, *var);
    }
    out
}

pub fn labels_from_bytes(bytes: &[u8]) -> std::result::Result<PseudoLabelFile, String> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC_LABELS)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported pseudo-label version {version}"));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let px = r.u32()?;
        if px as usize >= h * w {
            return Err(format!("pixel index {px} out of range for {h}x{w}"));
        }
        let mu = r.f64()?;
        let var = r.f64()?;
        entries.push((px, mu, var));
    }
    r.finish()?;
    Ok(PseudoLabelFile { h, w, entries })
}
