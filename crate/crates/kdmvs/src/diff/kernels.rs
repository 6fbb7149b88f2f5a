//! Raw forward/backward compute kernels used by the tape ops. No graph
//! bookkeeping here — plain functions from grids to grids, so each kernel can
//! be tested against finite differences in isolation.
//!
//! Determinism contract: every kernel produces bit-identical output for a
//! given input regardless of the rayon worker count. Forward passes write
//! disjoint output rows; backward weight reductions use a fixed row
//! partition whose partials are summed in partition order.

use crate::grid::Grid;
use rayon::prelude::*;

/// Rows per chunk for parallel weight-gradient reductions. Fixed so the
/// partition (and therefore the f64 summation order) never depends on the
/// thread count.
const REDUCE_CHUNK_ROWS: usize = 8;

#[inline]
pub fn conv2d_out_dims(h: usize, w: usize, k: usize, stride: usize) -> (usize, usize) {
    let pad = k / 2;
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

/// 2-D convolution over an H×W×Cin grid with "same" zero padding.
///
/// Weight layout: an `(k·k·cin)×cout×1` grid; the row for input channel `ci`
/// of kernel tap `(ky, kx)` is `(ky·k + kx)·cin + ci`. Bias is `1×1×cout`.
pub fn conv2d_forward(x: &Grid, wgt: &Grid, bias: &Grid, k: usize, stride: usize) -> Grid {
    let (h, w, cin) = (x.h(), x.w(), x.c());
    let cout = wgt.w();
    assert_eq!(wgt.h(), k * k * cin, "conv2d weight rows");
    assert_eq!(bias.c(), cout, "conv2d bias channels");
    let pad = k / 2;
    let (oh, ow) = conv2d_out_dims(h, w, k, stride);
    let mut out = Grid::zeros(oh, ow, cout);

    let xd = x.data();
    let wd = wgt.data();
    let bd = bias.data();
    out.data_mut()
        .par_chunks_mut(ow * cout)
        .enumerate()
        .for_each(|(oy, row)| {
            for ox in 0..ow {
                let acc = &mut row[ox * cout..(ox + 1) * cout];
                acc.copy_from_slice(bd);
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let px = &xd[((iy as usize) * w + ix as usize) * cin..][..cin];
                        let wbase = ((ky * k + kx) * cin) * cout;
                        for (ci, &xv) in px.iter().enumerate() {
                            let wrow = &wd[wbase + ci * cout..][..cout];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gradient of `conv2d_forward` w.r.t. its input (gather formulation).
pub fn conv2d_backward_input(
    g: &Grid,
    wgt: &Grid,
    k: usize,
    stride: usize,
    h: usize,
    w: usize,
    cin: usize,
) -> Grid {
    let cout = wgt.w();
    let pad = k / 2;
    let (oh, ow) = conv2d_out_dims(h, w, k, stride);
    let mut dx = Grid::zeros(h, w, cin);
    let gd = g.data();
    let wd = wgt.data();
    dx.data_mut()
        .par_chunks_mut(w * cin)
        .enumerate()
        .for_each(|(iy, row)| {
            for ix in 0..w {
                let acc = &mut row[ix * cin..(ix + 1) * cin];
                for ky in 0..k {
                    let t = iy as isize + pad as isize - ky as isize;
                    if t < 0 || t % stride as isize != 0 {
                        continue;
                    }
                    let oy = (t / stride as isize) as usize;
                    if oy >= oh {
                        continue;
                    }
                    for kx in 0..k {
                        let u = ix as isize + pad as isize - kx as isize;
                        if u < 0 || u % stride as isize != 0 {
                            continue;
                        }
                        let ox = (u / stride as isize) as usize;
                        if ox >= ow {
                            continue;
                        }
                        let gp = &gd[(oy * ow + ox) * cout..][..cout];
                        let wbase = ((ky * k + kx) * cin) * cout;
                        for (ci, a) in acc.iter_mut().enumerate() {
                            let wrow = &wd[wbase + ci * cout..][..cout];
                            let mut s = 0.0;
                            for (&gv, &wv) in gp.iter().zip(wrow) {
                                s += gv * wv;
                            }
                            *a += s;
                        }
                    }
                }
            }
        });
    dx
}

/// Gradient of `conv2d_forward` w.r.t. the weights.
pub fn conv2d_backward_weight(x: &Grid, g: &Grid, k: usize, stride: usize) -> Grid {
    let (h, w, cin) = (x.h(), x.w(), x.c());
    let (oh, ow, cout) = (g.h(), g.w(), g.c());
    let pad = k / 2;
    let xd = x.data();
    let gd = g.data();

    let n_chunks = oh.div_ceil(REDUCE_CHUNK_ROWS);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut dw = vec![0.0; k * k * cin * cout];
            let y0 = chunk * REDUCE_CHUNK_ROWS;
            let y1 = (y0 + REDUCE_CHUNK_ROWS).min(oh);
            for oy in y0..y1 {
                for ox in 0..ow {
                    let gp = &gd[(oy * ow + ox) * cout..][..cout];
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let px = &xd[((iy as usize) * w + ix as usize) * cin..][..cin];
                            let wbase = ((ky * k + kx) * cin) * cout;
                            for (ci, &xv) in px.iter().enumerate() {
                                let dst = &mut dw[wbase + ci * cout..][..cout];
                                for (d, &gv) in dst.iter_mut().zip(gp) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
            dw
        })
        .collect();

    let mut dw = vec![0.0; k * k * cin * cout];
    for p in &partials {
        for (a, &b) in dw.iter_mut().zip(p) {
            *a += b;
        }
    }
    Grid::from_vec(k * k * cin, cout, 1, dw).expect("conv2d dw shape")
}

/// Gradient of `conv2d_forward` w.r.t. the bias: per-channel sum of `g`.
pub fn conv2d_backward_bias(g: &Grid) -> Grid {
    let cout = g.c();
    let mut db = vec![0.0; cout];
    for px in g.data().chunks_exact(cout) {
        for (d, &gv) in db.iter_mut().zip(px) {
            *d += gv;
        }
    }
    Grid::from_vec(1, 1, cout, db).expect("conv2d db shape")
}

/// 3-D convolution of an H×W×D volume with a single 3×3×3 kernel, zero
/// padded on all three axes. Kernel is a 3×3×3 grid indexed `(ky, kx, kd)`;
/// bias is a 1×1×1 grid.
pub fn conv3d_forward(x: &Grid, wgt: &Grid, bias: &Grid) -> Grid {
    let (h, w, d) = (x.h(), x.w(), x.c());
    assert_eq!(
        (wgt.h(), wgt.w(), wgt.c()),
        (3, 3, 3),
        "conv3d kernel must be 3x3x3"
    );
    let b = bias.data()[0];
    let mut out = Grid::new(h, w, d, b);
    let xd = x.data();
    let wd = wgt.data();
    out.data_mut()
        .par_chunks_mut(w * d)
        .enumerate()
        .for_each(|(y, row)| {
            for ky in 0..3usize {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for x_ in 0..w {
                    let acc = &mut row[x_ * d..(x_ + 1) * d];
                    for kx in 0..3usize {
                        let ix = x_ as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = &xd[((iy as usize) * w + ix as usize) * d..][..d];
                        for kd in 0..3usize {
                            let wv = wd[(ky * 3 + kx) * 3 + kd];
                            if wv == 0.0 {
                                continue;
                            }
                            let shift = kd as isize - 1;
                            // acc[k] += wv * src[k + shift], zero outside
                            let (a0, s0, n) = if shift < 0 {
                                (1usize, 0usize, d - 1)
                            } else if shift > 0 {
                                (0usize, 1usize, d - 1)
                            } else {
                                (0usize, 0usize, d)
                            };
                            for i in 0..n {
                                acc[a0 + i] += wv * src[s0 + i];
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gradient of `conv3d_forward` w.r.t. the input volume.
pub fn conv3d_backward_input(g: &Grid, wgt: &Grid) -> Grid {
    let (h, w, d) = (g.h(), g.w(), g.c());
    let mut dx = Grid::zeros(h, w, d);
    let gd = g.data();
    let wd = wgt.data();
    dx.data_mut()
        .par_chunks_mut(w * d)
        .enumerate()
        .for_each(|(y, row)| {
            for ky in 0..3usize {
                // output row that consumed input row y via tap ky
                let oy = y as isize - (ky as isize - 1);
                if oy < 0 || oy >= h as isize {
                    continue;
                }
                for x_ in 0..w {
                    let acc = &mut row[x_ * d..(x_ + 1) * d];
                    for kx in 0..3usize {
                        let ox = x_ as isize - (kx as isize - 1);
                        if ox < 0 || ox >= w as isize {
                            continue;
                        }
                        let gsrc = &gd[((oy as usize) * w + ox as usize) * d..][..d];
                        for kd in 0..3usize {
                            let wv = wd[(ky * 3 + kx) * 3 + kd];
                            if wv == 0.0 {
                                continue;
                            }
                            let shift = -(kd as isize - 1);
                            let (a0, s0, n) = if shift < 0 {
                                (1usize, 0usize, d - 1)
                            } else if shift > 0 {
                                (0usize, 1usize, d - 1)
                            } else {
                                (0usize, 0usize, d)
                            };
                            for i in 0..n {
                                acc[a0 + i] += wv * gsrc[s0 + i];
                            }
                        }
                    }
                }
            }
        });
    dx
}

/// Gradient of `conv3d_forward` w.r.t. the 3×3×3 kernel.
pub fn conv3d_backward_weight(x: &Grid, g: &Grid) -> Grid {
    let (h, w, d) = (x.h(), x.w(), x.c());
    let xd = x.data();
    let gd = g.data();
    let n_chunks = h.div_ceil(REDUCE_CHUNK_ROWS);
    let partials: Vec<[f64; 27]> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut dw = [0.0; 27];
            let y0 = chunk * REDUCE_CHUNK_ROWS;
            let y1 = (y0 + REDUCE_CHUNK_ROWS).min(h);
            for oy in y0..y1 {
                for ox in 0..w {
                    let gp = &gd[(oy * w + ox) * d..][..d];
                    for ky in 0..3usize {
                        let iy = oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = ox as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = &xd[((iy as usize) * w + ix as usize) * d..][..d];
                            for kd in 0..3usize {
                                let shift = kd as isize - 1;
                                let (g0, s0, n) = if shift < 0 {
                                    (1usize, 0usize, d - 1)
                                } else if shift > 0 {
                                    (0usize, 1usize, d - 1)
                                } else {
                                    (0usize, 0usize, d)
                                };
                                let mut s = 0.0;
                                for i in 0..n {
                                    s += gp[g0 + i] * src[s0 + i];
                                }
                                dw[(ky * 3 + kx) * 3 + kd] += s;
                            }
                        }
                    }
                }
            }
            dw
        })
        .collect();
    let mut dw = [0.0; 27];
    for p in &partials {
        for (a, &b) in dw.iter_mut().zip(p) {
            *a += b;
        }
    }
    Grid::from_vec(3, 3, 3, dw.to_vec()).expect("conv3d dw shape")
}

/// Absorbs projective round-trip roundoff: an identity warp can land a
/// boundary pixel at (w-1) ± 1e-13, which must not invalidate the sample.
const EDGE_TOL: f64 = 1e-9;

/// Corner decomposition for one bilinear sample. Returns `None` when the
/// sample is invalid: non-finite coordinates or support outside
/// `[0, w-1] × [0, h-1]` (with `EDGE_TOL` slack, clamped onto the frame).
/// At the exact right/bottom edge the high corner carries zero weight, so
/// edge coordinates remain valid.
#[inline]
fn corners(x: f64, y: f64, h: usize, w: usize) -> Option<(usize, usize, f64, f64)> {
    if !(x.is_finite() && y.is_finite()) {
        return None;
    }
    let (xm, ym) = ((w - 1) as f64, (h - 1) as f64);
    if x < -EDGE_TOL || y < -EDGE_TOL || x > xm + EDGE_TOL || y > ym + EDGE_TOL {
        return None;
    }
    let x = x.clamp(0.0, xm);
    let y = y.clamp(0.0, ym);
    let (x0, fx) = if w == 1 {
        (0usize, 0.0)
    } else {
        let x0 = (x.floor() as usize).min(w - 2);
        (x0, x - x0 as f64)
    };
    let (y0, fy) = if h == 1 {
        (0usize, 0.0)
    } else {
        let y0 = (y.floor() as usize).min(h - 2);
        (y0, y - y0 as f64)
    };
    Some((x0, y0, fx, fy))
}

pub struct BilinearOut {
    pub value: Grid,
    /// 1 where the sample was in bounds, 0 elsewhere. Invalid samples have
    /// value 0 in every channel.
    pub mask: Grid,
}

/// Bilinear sampling of `src` (H×W×C) at `coords` (Ho×Wo×2, channel 0 = x,
/// channel 1 = y), pixel-center convention.
pub fn bilinear_forward(src: &Grid, coords: &Grid) -> BilinearOut {
    assert_eq!(coords.c(), 2, "coords must have 2 channels (x, y)");
    let (h, w, c) = (src.h(), src.w(), src.c());
    let (oh, ow) = (coords.h(), coords.w());
    let mut value = Grid::zeros(oh, ow, c);
    let mut mask = Grid::zeros(oh, ow, 1);
    let sd = src.data();
    let cd = coords.data();
    let md = mask.data_mut();
    // mask rows are written serially after the parallel value pass would
    // complicate things; one fused serial-over-rows parallel loop instead
    let mask_rows: Vec<Vec<f64>> = value
        .data_mut()
        .par_chunks_mut(ow * c)
        .enumerate()
        .map(|(oy, row)| {
            let mut mrow = vec![0.0; ow];
            for ox in 0..ow {
                let x = cd[(oy * ow + ox) * 2];
                let y = cd[(oy * ow + ox) * 2 + 1];
                if let Some((x0, y0, fx, fy)) = corners(x, y, h, w) {
                    mrow[ox] = 1.0;
                    let x1 = (x0 + 1).min(w - 1);
                    let y1 = (y0 + 1).min(h - 1);
                    let w00 = (1.0 - fx) * (1.0 - fy);
                    let w10 = fx * (1.0 - fy);
                    let w01 = (1.0 - fx) * fy;
                    let w11 = fx * fy;
                    let p00 = &sd[(y0 * w + x0) * c..][..c];
                    let p10 = &sd[(y0 * w + x1) * c..][..c];
                    let p01 = &sd[(y1 * w + x0) * c..][..c];
                    let p11 = &sd[(y1 * w + x1) * c..][..c];
                    let dst = &mut row[ox * c..(ox + 1) * c];
                    for ch in 0..c {
                        dst[ch] =
                            w00 * p00[ch] + w10 * p10[ch] + w01 * p01[ch] + w11 * p11[ch];
                    }
                }
            }
            mrow
        })
        .collect();
    for (oy, mrow) in mask_rows.iter().enumerate() {
        md[oy * ow..(oy + 1) * ow].copy_from_slice(mrow);
    }
    BilinearOut { value, mask }
}

/// Gradient of bilinear sampling w.r.t. the source grid (scatter).
pub fn bilinear_backward_src(
    g: &Grid,
    coords: &Grid,
    src_h: usize,
    src_w: usize,
    src_c: usize,
) -> Grid {
    let (oh, ow) = (coords.h(), coords.w());
    let mut dsrc = Grid::zeros(src_h, src_w, src_c);
    let gd = g.data();
    let cd = coords.data();
    let dd = dsrc.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            let x = cd[(oy * ow + ox) * 2];
            let y = cd[(oy * ow + ox) * 2 + 1];
            if let Some((x0, y0, fx, fy)) = corners(x, y, src_h, src_w) {
                let x1 = (x0 + 1).min(src_w - 1);
                let y1 = (y0 + 1).min(src_h - 1);
                let w00 = (1.0 - fx) * (1.0 - fy);
                let w10 = fx * (1.0 - fy);
                let w01 = (1.0 - fx) * fy;
                let w11 = fx * fy;
                let gp = &gd[(oy * ow + ox) * src_c..][..src_c];
                for ch in 0..src_c {
                    let gv = gp[ch];
                    dd[(y0 * src_w + x0) * src_c + ch] += w00 * gv;
                    dd[(y0 * src_w + x1) * src_c + ch] += w10 * gv;
                    dd[(y1 * src_w + x0) * src_c + ch] += w01 * gv;
                    dd[(y1 * src_w + x1) * src_c + ch] += w11 * gv;
                }
            }
        }
    }
    dsrc
}

/// Gradient of bilinear sampling w.r.t. the coordinates: the spatial
/// derivative of the interpolant, contracted with `g` over channels.
pub fn bilinear_backward_coords(g: &Grid, src: &Grid, coords: &Grid) -> Grid {
    let (h, w, c) = (src.h(), src.w(), src.c());
    let (oh, ow) = (coords.h(), coords.w());
    let mut dc = Grid::zeros(oh, ow, 2);
    let gd = g.data();
    let sd = src.data();
    let cd = coords.data();
    dc.data_mut()
        .par_chunks_mut(ow * 2)
        .enumerate()
        .for_each(|(oy, row)| {
            for ox in 0..ow {
                let x = cd[(oy * ow + ox) * 2];
                let y = cd[(oy * ow + ox) * 2 + 1];
                if let Some((x0, y0, fx, fy)) = corners(x, y, h, w) {
                    let x1 = (x0 + 1).min(w - 1);
                    let y1 = (y0 + 1).min(h - 1);
                    let p00 = &sd[(y0 * w + x0) * c..][..c];
                    let p10 = &sd[(y0 * w + x1) * c..][..c];
                    let p01 = &sd[(y1 * w + x0) * c..][..c];
                    let p11 = &sd[(y1 * w + x1) * c..][..c];
                    let gp = &gd[(oy * ow + ox) * c..][..c];
                    let mut dx = 0.0;
                    let mut dy = 0.0;
                    for ch in 0..c {
                        let gv = gp[ch];
                        dx += gv
                            * ((1.0 - fy) * (p10[ch] - p00[ch]) + fy * (p11[ch] - p01[ch]));
                        dy += gv
                            * ((1.0 - fx) * (p01[ch] - p00[ch]) + fx * (p11[ch] - p10[ch]));
                    }
                    row[ox * 2] = dx;
                    row[ox * 2 + 1] = dy;
                }
            }
        });
    dc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Grid {
        let data = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Grid::from_vec(h, w, c, data).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        // 3x3 kernel with 1 at the center for a single channel
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_grid(&mut rng, 5, 7, 1);
        let mut w = Grid::zeros(9, 1, 1);
        w.set(4, 0, 0, 1.0); // tap (ky=1, kx=1)
        let b = Grid::zeros(1, 1, 1);
        let y = conv2d_forward(&x, &w, &b, 3, 1);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_stride2_halves_even_dims() {
        let x = Grid::zeros(8, 10, 2);
        let w = Grid::zeros(9 * 2, 4, 1);
        let b = Grid::zeros(1, 1, 4);
        let y = conv2d_forward(&x, &w, &b, 3, 2);
        assert_eq!((y.h(), y.w(), y.c()), (4, 5, 4));
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &stride in &[1usize, 2] {
            let x = rand_grid(&mut rng, 4, 6, 2);
            let wgt = rand_grid(&mut rng, 9 * 2, 3, 1);
            let bias = rand_grid(&mut rng, 1, 1, 3);
            // loss = weighted sum of outputs, so dL/dout = weights
            let (oh, ow) = conv2d_out_dims(4, 6, 3, stride);
            let lw = rand_grid(&mut rng, oh, ow, 3);
            let loss = |x: &Grid, wg: &Grid, b: &Grid| -> f64 {
                let y = conv2d_forward(x, wg, b, 3, stride);
                y.data().iter().zip(lw.data()).map(|(a, b)| a * b).sum()
            };
            let g = lw.clone();
            let dx = conv2d_backward_input(&g, &wgt, 3, stride, 4, 6, 2);
            let dw = conv2d_backward_weight(&x, &g, 3, stride);
            let db = conv2d_backward_bias(&g);
            let eps = 1e-6;
            for idx in [0usize, 7, 23, 47] {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.data_mut()[idx] += eps;
                xm.data_mut()[idx] -= eps;
                let fd = (loss(&xp, &wgt, &bias) - loss(&xm, &wgt, &bias)) / (2.0 * eps);
                assert!((fd - dx.data()[idx]).abs() < 1e-6, "dx stride {stride}");
            }
            for idx in [0usize, 10, 33, 53] {
                let mut wp = wgt.clone();
                let mut wm = wgt.clone();
                wp.data_mut()[idx] += eps;
                wm.data_mut()[idx] -= eps;
                let fd = (loss(&x, &wp, &bias) - loss(&x, &wm, &bias)) / (2.0 * eps);
                assert!((fd - dw.data()[idx]).abs() < 1e-6, "dw stride {stride}");
            }
            for idx in 0..3 {
                let mut bp = bias.clone();
                let mut bm = bias.clone();
                bp.data_mut()[idx] += eps;
                bm.data_mut()[idx] -= eps;
                let fd = (loss(&x, &wgt, &bp) - loss(&x, &wgt, &bm)) / (2.0 * eps);
                assert!((fd - db.data()[idx]).abs() < 1e-6, "db stride {stride}");
            }
        }
    }

    #[test]
    fn conv3d_identity_kernel_preserves_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_grid(&mut rng, 4, 5, 6);
        let mut w = Grid::zeros(3, 3, 3);
        w.set(1, 1, 1, 1.0);
        let b = Grid::zeros(1, 1, 1);
        let y = conv3d_forward(&x, &w, &b);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_grid(&mut rng, 3, 4, 5);
        let wgt = rand_grid(&mut rng, 3, 3, 3);
        let bias = rand_grid(&mut rng, 1, 1, 1);
        let lw = rand_grid(&mut rng, 3, 4, 5);
        let loss = |x: &Grid, wg: &Grid, b: &Grid| -> f64 {
            let y = conv3d_forward(x, wg, b);
            y.data().iter().zip(lw.data()).map(|(a, b)| a * b).sum()
        };
        let dx = conv3d_backward_input(&lw, &wgt);
        let dw = conv3d_backward_weight(&x, &lw);
        let eps = 1e-6;
        for idx in [0usize, 13, 31, 59] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[idx] += eps;
            xm.data_mut()[idx] -= eps;
            let fd = (loss(&xp, &wgt, &bias) - loss(&xm, &wgt, &bias)) / (2.0 * eps);
            assert!((fd - dx.data()[idx]).abs() < 1e-6);
        }
        for idx in 0..27 {
            let mut wp = wgt.clone();
            let mut wm = wgt.clone();
            wp.data_mut()[idx] += eps;
            wm.data_mut()[idx] -= eps;
            let fd = (loss(&x, &wp, &bias) - loss(&x, &wm, &bias)) / (2.0 * eps);
            assert!((fd - dw.data()[idx]).abs() < 1e-6);
        }
        // bias gradient is just the number of voxels times nothing fancy
        let db: f64 = lw.data().iter().sum();
        let mut bp = bias.clone();
        let mut bm = bias.clone();
        bp.data_mut()[0] += eps;
        bm.data_mut()[0] -= eps;
        let fd = (loss(&x, &wgt, &bp) - loss(&x, &wgt, &bm)) / (2.0 * eps);
        assert!((fd - db).abs() < 1e-5);
    }

    #[test]
    fn bilinear_midpoint_and_out_of_bounds() {
        let src = Grid::from_vec(1, 2, 1, vec![2.0, 4.0]).unwrap();
        let coords = Grid::from_vec(1, 2, 2, vec![0.5, 0.0, -5.0, -5.0]).unwrap();
        let out = bilinear_forward(&src, &coords);
        assert_eq!(out.value.at(0, 0, 0), 3.0);
        assert_eq!(out.mask.at(0, 0, 0), 1.0);
        assert_eq!(out.value.at(0, 1, 0), 0.0);
        assert_eq!(out.mask.at(0, 1, 0), 0.0);
    }

    #[test]
    fn bilinear_integer_coords_identity_with_full_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = rand_grid(&mut rng, 3, 4, 2);
        let mut coords = Grid::zeros(3, 4, 2);
        for y in 0..3 {
            for x in 0..4 {
                coords.set(y, x, 0, x as f64);
                coords.set(y, x, 1, y as f64);
            }
        }
        let out = bilinear_forward(&src, &coords);
        assert_eq!(out.value.data(), src.data());
        assert!(out.mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn bilinear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = rand_grid(&mut rng, 5, 6, 3);
        // strictly interior, away from cell knots
        let mut coords = Grid::zeros(2, 3, 2);
        for y in 0..2 {
            for x in 0..3 {
                coords.set(y, x, 0, rng.gen_range(0.3..4.3));
                coords.set(y, x, 1, rng.gen_range(0.3..3.3));
            }
        }
        let lw = rand_grid(&mut rng, 2, 3, 3);
        let loss = |s: &Grid, c: &Grid| -> f64 {
            let o = bilinear_forward(s, c);
            o.value.data().iter().zip(lw.data()).map(|(a, b)| a * b).sum()
        };
        let dsrc = bilinear_backward_src(&lw, &coords, 5, 6, 3);
        let dc = bilinear_backward_coords(&lw, &src, &coords);
        let eps = 1e-6;
        for idx in [0usize, 17, 41, 89] {
            let mut sp = src.clone();
            let mut sm = src.clone();
            sp.data_mut()[idx] += eps;
            sm.data_mut()[idx] -= eps;
            let fd = (loss(&sp, &coords) - loss(&sm, &coords)) / (2.0 * eps);
            assert!((fd - dsrc.data()[idx]).abs() < 1e-6);
        }
        for idx in 0..12 {
            let mut cp = coords.clone();
            let mut cm = coords.clone();
            cp.data_mut()[idx] += eps;
            cm.data_mut()[idx] -= eps;
            let fd = (loss(&src, &cp) - loss(&src, &cm)) / (2.0 * eps);
            assert!((fd - dc.data()[idx]).abs() < 1e-5);
        }
    }
}
