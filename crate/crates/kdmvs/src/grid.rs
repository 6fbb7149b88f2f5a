//! Dense H×W×C grids of `f64`, stored row-major: index `(y, x, ch)` lives at
//! `(y * w + x) * c + ch`. This is the only tensor type in the crate — images
//! (C=3), depth and masks (C=1), feature maps (C=8), cost/probability volumes
//! (C=D hypotheses) are all `Grid`s.

use crate::{Error, Result};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

/// Elementwise binary operations understood by [`Grid::map_binary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    /// `|a - b|`
    AbsDiff,
}

impl Grid {
    pub fn new(h: usize, w: usize, c: usize, fill: f64) -> Self {
        Grid {
            h,
            w,
            c,
            data: vec![fill; h * w * c],
        }
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self::new(h, w, c, 0.0)
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::InvalidArgument(format!(
                "grid data length {} does not match shape {}",
                data.len(),
                Shape { h, w, c }
            )));
        }
        Ok(Grid { h, w, c, data })
    }

    /// Builds a single-channel grid from a closure over `(y, x)`.
    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut g = Grid::zeros(h, w, 1);
        for y in 0..h {
            for x in 0..w {
                g.data[y * w + x] = f(y, x);
            }
        }
        g
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        Shape {
            h: self.h,
            w: self.w,
            c: self.c,
        }
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        debug_assert!(y < self.h && x < self.w && ch < self.c);
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        debug_assert!(y < self.h && x < self.w && ch < self.c);
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The C values at one pixel, as a contiguous slice.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let base = (y * self.w + x) * self.c;
        &self.data[base..base + self.c]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.shape() == other.shape()
    }

    fn check_same_shape(&self, other: &Grid, context: &'static str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
                context,
            });
        }
        Ok(())
    }

    /// Elementwise binary map. Shapes must match exactly; the error names
    /// both shapes so mismatches are diagnosable from the message alone.
    pub fn map_binary(&self, other: &Grid, op: BinaryOp) -> Result<Grid> {
        self.check_same_shape(other, "map_binary")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| match op {
                BinaryOp::Add => a + b,
                BinaryOp::Sub => a - b,
                BinaryOp::Mul => a * b,
                BinaryOp::AbsDiff => (a - b).abs(),
            })
            .collect();
        Ok(Grid {
            h: self.h,
            w: self.w,
            c: self.c,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Grid {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extracts one channel as an H×W×1 grid.
    pub fn channel(&self, ch: usize) -> Grid {
        assert!(ch < self.c, "channel {} out of {}", ch, self.c);
        let mut out = Grid::zeros(self.h, self.w, 1);
        for i in 0..self.h * self.w {
            out.data[i] = self.data[i * self.c + ch];
        }
        out
    }

    /// Stacks single-channel (or multi-channel) grids along the channel axis.
    pub fn stack_channels(parts: &[&Grid]) -> Result<Grid> {
        assert!(!parts.is_empty());
        let (h, w) = (parts[0].h, parts[0].w);
        let c_total: usize = parts.iter().map(|p| p.c).sum();
        for p in parts {
            if p.h != h || p.w != w {
                return Err(Error::ShapeMismatch {
                    left: parts[0].shape(),
                    right: p.shape(),
                    context: "stack_channels",
                });
            }
        }
        let mut out = Grid::zeros(h, w, c_total);
        for i in 0..h * w {
            let mut ch = 0;
            for p in parts {
                for k in 0..p.c {
                    out.data[i * c_total + ch] = p.data[i * p.c + k];
                    ch += 1;
                }
            }
        }
        Ok(out)
    }

    /// 2× area-average downsampling. Requires even H and W.
    pub fn downsample_area2(&self) -> Grid {
        assert!(
            self.h % 2 == 0 && self.w % 2 == 0,
            "downsample_area2 requires even dimensions, got {}",
            self.shape()
        );
        let (oh, ow) = (self.h / 2, self.w / 2);
        let mut out = Grid::zeros(oh, ow, self.c);
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..self.c {
                    let s = self.at(2 * y, 2 * x, ch)
                        + self.at(2 * y, 2 * x + 1, ch)
                        + self.at(2 * y + 1, 2 * x, ch)
                        + self.at(2 * y + 1, 2 * x + 1, ch);
                    out.set(y, x, ch, 0.25 * s);
                }
            }
        }
        out
    }

    /// Area-average downsampling by a power-of-two factor.
    pub fn downsample_area(&self, factor: usize) -> Grid {
        assert!(factor.is_power_of_two(), "factor {factor} not a power of two");
        let mut g = self.clone();
        let mut f = factor;
        while f > 1 {
            g = g.downsample_area2();
            f /= 2;
        }
        g
    }

    /// Nearest-neighbor upsampling by an integer factor: output pixel
    /// `(y, x)` copies input pixel `(y / factor, x / factor)`.
    pub fn upsample_nearest(&self, factor: usize) -> Grid {
        assert!(factor >= 1);
        let (oh, ow) = (self.h * factor, self.w * factor);
        let mut out = Grid::zeros(oh, ow, self.c);
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..self.c {
                    out.set(y, x, ch, self.at(y / factor, x / factor, ch));
                }
            }
        }
        out
    }

    /// Fraction of entries above 0.5; handy for 0/1 masks.
    pub fn mask_ratio(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().filter(|&&v| v > 0.5).count() as f64 / self.data.len() as f64
    }
}
