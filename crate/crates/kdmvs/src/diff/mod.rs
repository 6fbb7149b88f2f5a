//! Eager reverse-mode automatic differentiation over [`Grid`]s.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; [`backward`]
//! walks it once in reverse creation order (which is a topological order,
//! since ops can only consume already-recorded nodes) and accumulates
//! gradients with a fixed reduction order, so gradients are bit-reproducible.
//! A tape is single-use: build a graph, call `backward`, drop it. Calling
//! `backward` twice on the same tape is an error by contract.
//!
//! Scalars are 1×1×1 grids. Constants (inputs that never need gradients) are
//! either recorded with [`Tape::constant`] or passed to the `*_cgrid` /
//! masking ops as plain grids, which keeps them off the gradient paths
//! entirely.

mod kernels;

use crate::grid::{BinaryOp, Grid, Shape};
use crate::{Error, Result};
use std::cell::RefCell;
use std::rc::Rc;

pub use kernels::conv2d_out_dims;

type BackFn = Box<dyn Fn(&Grid, &mut [Option<Grid>])>;

struct Node {
    value: Rc<Grid>,
    requires: bool,
    back: Option<BackFn>,
}

struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    /// Registers a trainable leaf. Its gradient is populated by `backward`.
    pub fn param(&self, value: Grid) -> Var {
        self.leaf(value, true)
    }

    /// Registers a non-trainable leaf (e.g. an input image). Gradient paths
    /// through it are skipped.
    pub fn constant(&self, value: Grid) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Grid, requires: bool) -> Var {
        let shape = value.shape();
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            requires,
            back: None,
        });
        Var {
            tape: Rc::clone(&self.inner),
            id,
            shape,
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A handle to one node of a tape: a grid value plus its position in the
/// recorded graph. Cloning is cheap and refers to the same node.
#[derive(Clone)]
pub struct Var {
    tape: Rc<RefCell<TapeInner>>,
    id: usize,
    shape: Shape,
}

fn accum(slots: &mut [Option<Grid>], id: usize, delta: Grid) {
    match &mut slots[id] {
        Some(acc) => {
            debug_assert_eq!(acc.shape(), delta.shape());
            for (a, b) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

impl Var {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// The forward value. Cheap (shared) — do not mutate through clones.
    pub fn value(&self) -> Rc<Grid> {
        Rc::clone(&self.tape.borrow().nodes[self.id].value)
    }

    /// A detached copy of the forward value.
    pub fn detach(&self) -> Grid {
        (*self.value()).clone()
    }

    /// Forward value of a scalar node.
    pub fn scalar(&self) -> f64 {
        assert_eq!(
            (self.shape.h, self.shape.w, self.shape.c),
            (1, 1, 1),
            "scalar() on non-scalar var {}",
            self.shape
        );
        self.value().data()[0]
    }

    fn requires(&self) -> bool {
        self.tape.borrow().nodes[self.id].requires
    }

    fn assert_same_tape(&self, other: &Var) {
        assert!(
            Rc::ptr_eq(&self.tape, &other.tape),
            "vars belong to different tapes"
        );
    }

    fn push_op(&self, value: Grid, requires: bool, back: Option<BackFn>) -> Var {
        let shape = value.shape();
        let mut inner = self.tape.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            requires,
            back: if requires { back } else { None },
        });
        Var {
            tape: Rc::clone(&self.tape),
            id,
            shape,
        }
    }

    fn binary(&self, other: &Var, op: BinaryOp, back: BackFn) -> Var {
        self.assert_same_tape(other);
        let out = self
            .value()
            .map_binary(&other.value(), op)
            .unwrap_or_else(|e| panic!("{e}"));
        let req = self.requires() || other.requires();
        self.push_op(out, req, Some(back))
    }

    pub fn add(&self, other: &Var) -> Var {
        let (aid, bid) = (self.id, other.id);
        let (ar, br) = (self.requires(), other.requires());
        self.binary(
            other,
            BinaryOp::Add,
            Box::new(move |g, slots| {
                if ar {
                    accum(slots, aid, g.clone());
                }
                if br {
                    accum(slots, bid, g.clone());
                }
            }),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        let (aid, bid) = (self.id, other.id);
        let (ar, br) = (self.requires(), other.requires());
        self.binary(
            other,
            BinaryOp::Sub,
            Box::new(move |g, slots| {
                if ar {
                    accum(slots, aid, g.clone());
                }
                if br {
                    accum(slots, bid, g.scale(-1.0));
                }
            }),
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        let (aid, bid) = (self.id, other.id);
        let (ar, br) = (self.requires(), other.requires());
        let (av, bv) = (self.value(), other.value());
        self.binary(
            other,
            BinaryOp::Mul,
            Box::new(move |g, slots| {
                if ar {
                    accum(slots, aid, g.map_binary(&bv, BinaryOp::Mul).unwrap());
                }
                if br {
                    accum(slots, bid, g.map_binary(&av, BinaryOp::Mul).unwrap());
                }
            }),
        )
    }

    /// Elementwise division. No zero guard — callers keep denominators away
    /// from zero by construction.
    pub fn div(&self, other: &Var) -> Var {
        self.assert_same_tape(other);
        assert_eq!(self.shape, other.shape, "div shape mismatch");
        let (av, bv) = (self.value(), other.value());
        let out = Grid::from_vec(
            self.shape.h,
            self.shape.w,
            self.shape.c,
            av.data().iter().zip(bv.data()).map(|(a, b)| a / b).collect(),
        )
        .unwrap();
        let (aid, bid) = (self.id, other.id);
        let (ar, br) = (self.requires(), other.requires());
        let req = ar || br;
        let avc = Rc::clone(&av);
        let bvc = Rc::clone(&bv);
        self.push_op(
            out,
            req,
            Some(Box::new(move |g, slots| {
                if ar {
                    let d = Grid::from_vec(
                        g.h(),
                        g.w(),
                        g.c(),
                        g.data().iter().zip(bvc.data()).map(|(g, b)| g / b).collect(),
                    )
                    .unwrap();
                    accum(slots, aid, d);
                }
                if br {
                    let d = Grid::from_vec(
                        g.h(),
                        g.w(),
                        g.c(),
                        g.data()
                            .iter()
                            .zip(avc.data().iter().zip(bvc.data()))
                            .map(|(g, (a, b))| -g * a / (b * b))
                            .collect(),
                    )
                    .unwrap();
                    accum(slots, bid, d);
                }
            })),
        )
    }

    pub fn scale(&self, s: f64) -> Var {
        let out = self.value().scale(s);
        let id = self.id;
        let req = self.requires();
        self.push_op(
            out,
            req,
            Some(Box::new(move |g, slots| accum(slots, id, g.scale(s)))),
        )
    }

    /// `|x|`, with subgradient 0 at x = 0.
    pub fn abs(&self) -> Var {
        let v = self.value();
        let out = v.map(f64::abs);
        let id = self.id;
        let req = self.requires();
        let vc = Rc::clone(&v);
        self.push_op(
            out,
            req,
            Some(Box::new(move |g, slots| {
                let d = Grid::from_vec(
                    g.h(),
                    g.w(),
                    g.c(),
                    g.data()
                        .iter()
                        .zip(vc.data())
                        .map(|(g, x)| g * x.signum() * if *x == 0.0 { 0.0 } else { 1.0 })
                        .collect(),
                )
                .unwrap();
                accum(slots, id, d);
            })),
        )
    }

    /// Elementwise square, a common special case of `mul` with itself.
    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let v = self.value();
        let out = v.map(|x| if x > 0.0 { x } else { slope * x });
        let id = self.id;
        let req = self.requires();
        let vc = Rc::clone(&v);
        self.push_op(
            out,
            req,
            Some(Box::new(move |g, slots| {
                let d = Grid::from_vec(
                    g.h(),
                    g.w(),
                    g.c(),
                    g.data()
                        .iter()
                        .zip(vc.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { g * slope })
                        .collect(),
                )
                .unwrap();
                accum(slots, id, d);
            })),
        )
    }

    /// Clamp to `[lo, hi]` with pass-through gradient strictly inside the
    /// interval and zero gradient on the clamped region.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi);
        let v = self.value();
        let out = v.map(|x| x.clamp(lo, hi));
        let id = self.id;
        let req = self.requires();
        let vc = Rc::clone(&v);
        self.push_op(
            out,
            req,
            Some(Box::new(move |g, slots| {
                let d = Grid::from_vec(
                    g.h(),
                    g.w(),
                    g.c(),
                    g.data()
                        .iter()
                        .zip(vc.data())
                        .map(|(g, x)| if *x > lo && *x < hi { *g } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                accum(slots, id, d);
            })),
        )
    }

    /// `ln(max(x, floor))`; gradient is `1/x` above the floor, 0 below it.
    pub fn log_clamped(&self, floor: f64) -> Var {
        assert!(floor > 0.0);
        let v = self.value();
        let out = v.map(|x| x.max(floor).ln());
        let id = self.id;
        let req = self.requires();
        let vc = Rc::clone(&v);
        self.push_op(
            out,
            req,
            Some(Box::new(move |g, slots| {
                let d = Grid::from_vec(
                    g.h(),
                    g.w(),
                    g.c(),
                    g.data()
                        .iter()
                        .zip(vc.data())
                        .map(|(g, x)| if *x > floor { g / x } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                accum(slots, id, d);
            })),
        )
    }

    /// Adds a constant grid (no gradient on the constant side).
    pub fn add_cgrid(&self, k: &Grid) -> Var {
        let out = self.value().map_binary(k, BinaryOp::Add).unwrap_or_else(|e| panic!("{e}"));
        let id = self.id;
        let req = self.requires();
        self.push_op(
            out,
            req,
            Some(Box::new(move |g, slots| accum(slots, id, g.clone()))),
        )
    }

    /// Multiplies by a constant grid of the same shape.
    pub fn mul_cgrid(&self, k: &Grid) -> Var {
        let out = self.value().map_binary(k, BinaryOp::Mul).unwrap_or_else(|e| panic!("{e}"));
        let id = self.id;
        let req = self.requires();
        let kc = k.clone();
        self.push_op(
            out,
            req,
            Some(Box::new(move |g, slots| {
                accum(slots, id, g.map_binary(&kc, BinaryOp::Mul).unwrap());
            })),
        )
    }

    /// Multiplies an H×W×C var by an H×W×1 constant mask, broadcast over
    /// channels. Used to zero out invalid warp samples.
    pub fn mul_mask(&self, mask: &Grid) -> Var {
        let s = self.shape;
        assert_eq!(
            (mask.h(), mask.w(), mask.c()),
            (s.h, s.w, 1),
            "mask must be {}x{}x1",
            s.h,
            s.w
        );
        let v = self.value();
        let mut out = (*v).clone();
        for (i, px) in out.data_mut().chunks_exact_mut(s.c).enumerate() {
            let m = mask.data()[i];
            for x in px {
                *x *= m;
            }
        }
        let id = self.id;
        let req = self.requires();
        let mc = mask.clone();
        self.push_op(
            out,
            req,
            Some(Box::new(move |g, slots| {
                let mut d = g.clone();
                let c = d.c();
                for (i, px) in d.data_mut().chunks_exact_mut(c).enumerate() {
                    let m = mc.data()[i];
                    for x in px {
                        *x *= m;
                    }
                }
                accum(slots, id, d);
            })),
        )
    }

    /// Adds a 1×1×C bias, broadcast over all pixels.
    pub fn add_bias(&self, bias: &Var) -> Var {
        self.assert_same_tape(bias);
        let s = self.shape;
        assert_eq!(
            (bias.shape.h, bias.shape.w, bias.shape.c),
            (1, 1, s.c),
            "bias must be 1x1x{}",
            s.c
        );
        let bv = bias.value();
        let mut out = self.detach();
        for px in out.data_mut().chunks_exact_mut(s.c) {
            for (x, b) in px.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let (xid, bid) = (self.id, bias.id);
        let (xr, br) = (self.requires(), bias.requires());
        self.push_op(
            out,
            xr || br,
            Some(Box::new(move |g, slots| {
                if xr {
                    accum(slots, xid, g.clone());
                }
                if br {
                    let c = g.c();
                    let mut db = vec![0.0; c];
                    for px in g.data().chunks_exact(c) {
                        for (d, &gv) in db.iter_mut().zip(px) {
                            *d += gv;
                        }
                    }
                    accum(slots, bid, Grid::from_vec(1, 1, c, db).unwrap());
                }
            })),
        )
    }

    /// Sum of all entries, as a scalar var.
    pub fn sum(&self) -> Var {
        let s = self.shape;
        let total = self.value().sum();
        let id = self.id;
        let req = self.requires();
        self.push_op(
            Grid::from_vec(1, 1, 1, vec![total]).unwrap(),
            req,
            Some(Box::new(move |g, slots| {
                accum(slots, id, Grid::new(s.h, s.w, s.c, g.data()[0]));
            })),
        )
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Per-pixel sum over the channel axis: H×W×C → H×W×1.
    pub fn sum_channels(&self) -> Var {
        let s = self.shape;
        let v = self.value();
        let mut out = Grid::zeros(s.h, s.w, 1);
        for (i, px) in v.data().chunks_exact(s.c).enumerate() {
            out.data_mut()[i] = px.iter().sum();
        }
        let id = self.id;
        let req = self.requires();
        self.push_op(
            out,
            req,
            Some(Box::new(move |g, slots| {
                let mut d = Grid::zeros(s.h, s.w, s.c);
                for (i, px) in d.data_mut().chunks_exact_mut(s.c).enumerate() {
                    let gv = g.data()[i];
                    for x in px {
                        *x = gv;
                    }
                }
                accum(slots, id, d);
            })),
        )
    }

    /// Numerically stable per-pixel softmax over the channel axis.
    pub fn softmax_channels(&self) -> Var {
        let s = self.shape;
        let v = self.value();
        let mut out = Grid::zeros(s.h, s.w, s.c);
        for (op, ip) in out
            .data_mut()
            .chunks_exact_mut(s.c)
            .zip(v.data().chunks_exact(s.c))
        {
            let m = ip.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in op.iter_mut().zip(ip) {
                let e = (x - m).exp();
                *o = e;
                z += e;
            }
            for o in op.iter_mut() {
                *o /= z;
            }
        }
        let id = self.id;
        let req = self.requires();
        let pc = Rc::new(out.clone());
        self.push_op(
            out,
            req,
            Some(Box::new(move |g, slots| {
                let mut d = Grid::zeros(s.h, s.w, s.c);
                for ((dp, gp), pp) in d
                    .data_mut()
                    .chunks_exact_mut(s.c)
                    .zip(g.data().chunks_exact(s.c))
                    .zip(pc.data().chunks_exact(s.c))
                {
                    let dot: f64 = gp.iter().zip(pp).map(|(g, p)| g * p).sum();
                    for ((d, &gv), &pv) in dp.iter_mut().zip(gp).zip(pp) {
                        *d = pv * (gv - dot);
                    }
                }
                accum(slots, id, d);
            })),
        )
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Var {
        let s = self.shape;
        let out = self.value().upsample_nearest(factor);
        let id = self.id;
        let req = self.requires();
        self.push_op(
            out,
            req,
            Some(Box::new(move |g, slots| {
                let mut d = Grid::zeros(s.h, s.w, s.c);
                for y in 0..g.h() {
                    for x in 0..g.w() {
                        for ch in 0..s.c {
                            let v = d.at(y / factor, x / factor, ch) + g.at(y, x, ch);
                            d.set(y / factor, x / factor, ch, v);
                        }
                    }
                }
                accum(slots, id, d);
            })),
        )
    }

    /// Bilinear sampling of `self` at `coords` (Ho×Wo×2, x then y). Returns
    /// the sampled values and the validity mask; invalid samples are 0 with
    /// zero gradient in every direction, so masks compose multiplicatively.
    pub fn bilinear_sample(&self, coords: &Var) -> (Var, Grid) {
        self.assert_same_tape(coords);
        let src_shape = self.shape;
        let sv = self.value();
        let cv = coords.value();
        let out = kernels::bilinear_forward(&sv, &cv);
        let mask = out.mask;
        let (sid, cid) = (self.id, coords.id);
        let (sr, cr) = (self.requires(), coords.requires());
        let svc = Rc::clone(&sv);
        let cvc = Rc::clone(&cv);
        let var = self.push_op(
            out.value,
            sr || cr,
            Some(Box::new(move |g, slots| {
                if sr {
                    accum(
                        slots,
                        sid,
                        kernels::bilinear_backward_src(
                            g,
                            &cvc,
                            src_shape.h,
                            src_shape.w,
                            src_shape.c,
                        ),
                    );
                }
                if cr {
                    accum(slots, cid, kernels::bilinear_backward_coords(g, &svc, &cvc));
                }
            })),
        );
        (var, mask)
    }

    /// 2-D convolution with "same" zero padding. See
    /// [`kernels::conv2d_forward`] for the weight layout.
    pub fn conv2d(&self, wgt: &Var, bias: &Var, k: usize, stride: usize) -> Var {
        self.assert_same_tape(wgt);
        self.assert_same_tape(bias);
        let s = self.shape;
        let xv = self.value();
        let wv = wgt.value();
        let bv = bias.value();
        let out = kernels::conv2d_forward(&xv, &wv, &bv, k, stride);
        let (xid, wid, bid) = (self.id, wgt.id, bias.id);
        let (xr, wr, br) = (self.requires(), wgt.requires(), bias.requires());
        let xvc = Rc::clone(&xv);
        let wvc = Rc::clone(&wv);
        self.push_op(
            out,
            xr || wr || br,
            Some(Box::new(move |g, slots| {
                if xr {
                    accum(
                        slots,
                        xid,
                        kernels::conv2d_backward_input(g, &wvc, k, stride, s.h, s.w, s.c),
                    );
                }
                if wr {
                    accum(slots, wid, kernels::conv2d_backward_weight(&xvc, g, k, stride));
                }
                if br {
                    accum(slots, bid, kernels::conv2d_backward_bias(g));
                }
            })),
        )
    }

    /// 3-D convolution of an H×W×D volume with a 3×3×3 kernel (zero padded
    /// on all axes), used by the cost-volume regularizer.
    pub fn conv3d_volume(&self, wgt: &Var, bias: &Var) -> Var {
        self.assert_same_tape(wgt);
        self.assert_same_tape(bias);
        let xv = self.value();
        let wv = wgt.value();
        let bv = bias.value();
        let out = kernels::conv3d_forward(&xv, &wv, &bv);
        let (xid, wid, bid) = (self.id, wgt.id, bias.id);
        let (xr, wr, br) = (self.requires(), wgt.requires(), bias.requires());
        let xvc = Rc::clone(&xv);
        let wvc = Rc::clone(&wv);
        self.push_op(
            out,
            xr || wr || br,
            Some(Box::new(move |g, slots| {
                if xr {
                    accum(slots, xid, kernels::conv3d_backward_input(g, &wvc));
                }
                if wr {
                    accum(slots, wid, kernels::conv3d_backward_weight(&xvc, g));
                }
                if br {
                    let s: f64 = g.data().iter().sum();
                    accum(slots, bid, Grid::from_vec(1, 1, 1, vec![s]).unwrap());
                }
            })),
        )
    }
}

/// Concatenates vars along the channel axis.
pub fn concat_channels(parts: &[&Var]) -> Var {
    assert!(!parts.is_empty());
    let values: Vec<Rc<Grid>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Grid> = values.iter().map(|v| v.as_ref()).collect();
    let out = Grid::stack_channels(&refs).unwrap_or_else(|e| panic!("{e}"));
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let reqs: Vec<bool> = parts.iter().map(|p| p.requires()).collect();
    let chans: Vec<usize> = parts.iter().map(|p| p.shape.c).collect();
    let any = reqs.iter().any(|&r| r);
    for p in &parts[1..] {
        parts[0].assert_same_tape(p);
    }
    let (h, w) = (parts[0].shape.h, parts[0].shape.w);
    parts[0].push_op(
        out,
        any,
        Some(Box::new(move |g, slots| {
            let ctot = g.c();
            let mut offset = 0;
            for (i, (&id, &c)) in ids.iter().zip(&chans).enumerate() {
                if reqs[i] {
                    let mut d = Grid::zeros(h, w, c);
                    for px in 0..h * w {
                        for ch in 0..c {
                            d.data_mut()[px * c + ch] = g.data()[px * ctot + offset + ch];
                        }
                    }
                    accum(slots, id, d);
                }
                offset += c;
            }
        })),
    )
}

/// Accumulated gradients from one backward pass, addressable by `Var`.
pub struct Gradients {
    slots: Vec<Option<Grid>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`. Zero grid if the loss does not
    /// depend on it.
    pub fn wrt(&self, v: &Var) -> Grid {
        match self.slots.get(v.id).and_then(|s| s.as_ref()) {
            Some(g) => g.clone(),
            None => Grid::zeros(v.shape.h, v.shape.w, v.shape.c),
        }
    }
}

/// Runs reverse-mode accumulation from a scalar `loss` node. The tape is
/// consumed: a second call on any var of the same tape fails.
pub fn backward(loss: &Var) -> Result<Gradients> {
    if (loss.shape.h, loss.shape.w, loss.shape.c) != (1, 1, 1) {
        return Err(Error::Autodiff("backward requires a scalar loss root"));
    }
    {
        let mut inner = loss.tape.borrow_mut();
        if inner.consumed {
            return Err(Error::Autodiff(
                "backward already ran on this tape; build a fresh graph",
            ));
        }
        inner.consumed = true;
    }
    let inner = loss.tape.borrow();
    let mut slots: Vec<Option<Grid>> = Vec::new();
    slots.resize_with(loss.id + 1, || None);
    slots[loss.id] = Some(Grid::from_vec(1, 1, 1, vec![1.0]).unwrap());
    for id in (0..=loss.id).rev() {
        let Some(g) = slots[id].take() else { continue };
        if let Some(back) = &inner.nodes[id].back {
            back(&g, &mut slots);
        }
        slots[id] = Some(g);
    }
    Ok(Gradients { slots })
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

    /// Central-difference check of d(build)/d(param) at every entry.
    fn check_against_fd(build: &dyn Fn(&Tape, &Var) -> Var, at: &Grid, tol: f64) {
        let tape = Tape::new();
        let p = tape.param(at.clone());
        let loss = build(&tape, &p);
        let grads = backward(&loss).unwrap();
        let analytic = grads.wrt(&p);
        let f = |g: &Grid| -> f64 {
            let t = Tape::new();
            let p = t.param(g.clone());
            build(&t, &p).scalar()
        };
        let eps = 1e-5;
        for i in 0..at.len() {
            let mut gp = at.clone();
            let mut gm = at.clone();
            gp.data_mut()[i] += eps;
            gm.data_mut()[i] -= eps;
            let fd = (f(&gp) - f(&gm)) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = fd.abs().max(a.abs()).max(1.0);
            assert!(
                (fd - a).abs() / denom < tol,
                "fd {fd} vs analytic {a} at index {i}"
            );
        }
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::new();
        let p = tape.param(Grid::from_vec(1, 2, 1, vec![1.0, 2.0]).unwrap());
        let loss = p.square().sum();
        let g = backward(&loss).unwrap().wrt(&p);
        assert_eq!(g.data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_grads() {
        let tape = Tape::new();
        let p = tape.param(Grid::from_vec(1, 2, 1, vec![3.0, -1.0]).unwrap());
        let c = tape.constant(Grid::from_vec(1, 1, 1, vec![5.0]).unwrap());
        let loss = c.scale(2.0);
        let g = backward(&loss).unwrap().wrt(&p);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn second_backward_is_an_error() {
        let tape = Tape::new();
        let p = tape.param(Grid::from_vec(1, 1, 1, vec![2.0]).unwrap());
        let loss = p.square().sum();
        backward(&loss).unwrap();
        let err = backward(&loss).err().expect("second backward must fail");
        assert!(err.to_string().contains("already ran"));
    }

    #[test]
    fn non_scalar_root_is_an_error() {
        let tape = Tape::new();
        let p = tape.param(Grid::zeros(2, 2, 1));
        assert!(backward(&p).is_err());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let at = rand_grid(&mut rng, 3, 3, 1);
        let (a, b) = (0.37, -2.25);

        let make = |sel: u8| -> Grid {
            let t = Tape::new();
            let p = t.param(at.clone());
            let l1 = p.square().sum();
            let l2 = p.abs().sum().scale(0.5);
            let loss = match sel {
                0 => l1,
                1 => l2,
                _ => l1.scale(a).add(&l2.scale(b)),
            };
            backward(&loss).unwrap().wrt(&p)
        };
        let (g1, g2, gc) = (make(0), make(1), make(2));
        for i in 0..at.len() {
            let expect = a * g1.data()[i] + b * g2.data()[i];
            assert!((gc.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // L = sum(y * y) with y = x^2  =>  dL/dx = 4 x^3
        let tape = Tape::new();
        let p = tape.param(Grid::from_vec(1, 3, 1, vec![0.5, -1.5, 2.0]).unwrap());
        let y = p.square();
        let loss = y.mul(&y).sum();
        let g = backward(&loss).unwrap().wrt(&p);
        for (gv, x) in g.data().iter().zip([0.5f64, -1.5, 2.0]) {
            assert!((gv - 4.0 * x.powi(3)).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let at = rand_grid(&mut rng, 4, 5, 2).map(|v| v + 2.5); // positive, away from kinks
        let other = rand_grid(&mut rng, 4, 5, 2).map(|v| v + 3.0);
        let mask = Grid::from_fn(4, 5, |y, x| ((y + x) % 2) as f64);
        let cg = rand_grid(&mut rng, 4, 5, 2);
        #[allow(clippy::type_complexity)]
        let builds: Vec<Box<dyn Fn(&Tape, &Var) -> Var>> = vec![
            Box::new(|t: &Tape, p: &Var| {
                let o = t.constant(Grid::new(4, 5, 2, 1.5));
                p.add(&o).sum()
            }),
            Box::new({
                let other = other.clone();
                move |t: &Tape, p: &Var| {
                    let o = t.param(other.clone());
                    p.mul(&o).sum()
                }
            }),
            Box::new({
                let other = other.clone();
                move |t: &Tape, p: &Var| {
                    let o = t.constant(other.clone());
                    p.div(&o).sum()
                }
            }),
            Box::new(|_: &Tape, p: &Var| p.abs().sum()),
            Box::new(|_: &Tape, p: &Var| p.scale(-1.7).sum()),
            Box::new(|_: &Tape, p: &Var| p.leaky_relu(0.1).square().sum()),
            Box::new(|_: &Tape, p: &Var| p.clamp(0.0, 3.1).square().sum()),
            Box::new(|_: &Tape, p: &Var| p.log_clamped(1e-12).sum()),
            Box::new({
                let cg = cg.clone();
                move |_: &Tape, p: &Var| p.mul_cgrid(&cg).sum()
            }),
            Box::new({
                let cg = cg.clone();
                move |_: &Tape, p: &Var| p.add_cgrid(&cg).square().sum()
            }),
            Box::new({
                let mask = mask.clone();
                move |_: &Tape, p: &Var| p.mul_mask(&mask).sum()
            }),
            Box::new(|_: &Tape, p: &Var| p.sum_channels().square().sum()),
            Box::new(|_: &Tape, p: &Var| p.softmax_channels().square().sum()),
            Box::new(|_: &Tape, p: &Var| p.mean()),
        ];
        for (i, b) in builds.iter().enumerate() {
            // division build keeps denominators near 3, log build positive
            let at = if i == 7 { at.map(|v| v + 0.5) } else { at.clone() };
            check_against_fd(b.as_ref(), &at, 1e-4);
        }
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let at = rand_grid(&mut rng, 2, 3, 2);
        check_against_fd(
            &|_t: &Tape, p: &Var| p.upsample_nearest(2).square().sum(),
            &at,
            1e-4,
        );
        check_against_fd(
            &|_t: &Tape, p: &Var| {
                let a = p.scale(2.0);
                concat_channels(&[p, &a]).square().sum()
            },
            &at,
            1e-4,
        );
        let bias = rand_grid(&mut rng, 1, 1, 2);
        check_against_fd(
            &{
                let bias = bias.clone();
                move |t: &Tape, p: &Var| {
                    let b = t.constant(bias.clone());
                    p.add_bias(&b).square().sum()
                }
            },
            &at,
            1e-4,
        );
        // bias as the differentiated side
        let x = rand_grid(&mut rng, 3, 4, 2);
        check_against_fd(
            &{
                let x = x.clone();
                move |t: &Tape, p: &Var| {
                    let xv = t.constant(x.clone());
                    xv.add_bias(p).square().sum()
                }
            },
            &rand_grid(&mut rng, 1, 1, 2),
            1e-4,
        );
    }

    #[test]
    fn sampling_and_conv_graph_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        // bilinear: differentiate w.r.t. source
        let coords_data: Vec<f64> = (0..6)
            .flat_map(|_| {
                [
                    rng.gen_range(0.3..3.5),
                    rng.gen_range(0.3..2.5),
                ]
            })
            .collect();
        let coords = Grid::from_vec(2, 3, 2, coords_data).unwrap();
        let src = rand_grid(&mut rng, 4, 5, 2);
        check_against_fd(
            &{
                let coords = coords.clone();
                move |t: &Tape, p: &Var| {
                    let c = t.constant(coords.clone());
                    let (v, _m) = p.bilinear_sample(&c);
                    v.square().sum()
                }
            },
            &src,
            1e-4,
        );
        // bilinear: differentiate w.r.t. coordinates
        check_against_fd(
            &{
                let src = src.clone();
                move |t: &Tape, p: &Var| {
                    let s = t.constant(src.clone());
                    let (v, _m) = s.bilinear_sample(p);
                    v.square().sum()
                }
            },
            &coords,
            1e-4,
        );
        // conv2d w.r.t. input, weights, bias; both strides
        for stride in [1usize, 2] {
            let x = rand_grid(&mut rng, 4, 4, 2);
            let wgt = rand_grid(&mut rng, 18, 2, 1).scale(0.5);
            let bias = rand_grid(&mut rng, 1, 1, 2);
            check_against_fd(
                &{
                    let (wgt, bias) = (wgt.clone(), bias.clone());
                    move |t: &Tape, p: &Var| {
                        let w = t.constant(wgt.clone());
                        let b = t.constant(bias.clone());
                        p.conv2d(&w, &b, 3, stride).square().sum()
                    }
                },
                &x,
                1e-4,
            );
            check_against_fd(
                &{
                    let (x, bias) = (x.clone(), bias.clone());
                    move |t: &Tape, p: &Var| {
                        let xv = t.constant(x.clone());
                        let b = t.constant(bias.clone());
                        xv.conv2d(p, &b, 3, stride).square().sum()
                    }
                },
                &wgt,
                1e-4,
            );
            check_against_fd(
                &{
                    let (x, wgt) = (x.clone(), wgt.clone());
                    move |t: &Tape, p: &Var| {
                        let xv = t.constant(x.clone());
                        let w = t.constant(wgt.clone());
                        xv.conv2d(&w, p, 3, stride).square().sum()
                    }
                },
                &bias,
                1e-4,
            );
        }
        // conv3d volume
        let vol = rand_grid(&mut rng, 3, 4, 5);
        let k3 = rand_grid(&mut rng, 3, 3, 3);
        check_against_fd(
            &{
                let k3 = k3.clone();
                move |t: &Tape, p: &Var| {
                    let w = t.constant(k3.clone());
                    let b = t.constant(Grid::zeros(1, 1, 1));
                    p.conv3d_volume(&w, &b).square().sum()
                }
            },
            &vol,
            1e-4,
        );
        check_against_fd(
            &{
                let vol = vol.clone();
                move |t: &Tape, p: &Var| {
                    let x = t.constant(vol.clone());
                    let b = t.constant(Grid::zeros(1, 1, 1));
                    x.conv3d_volume(p, &b).square().sum()
                }
            },
            &k3,
            1e-4,
        );
    }

    #[test]
    fn constants_receive_no_gradient_slots() {
        let tape = Tape::new();
        let c = tape.constant(Grid::new(2, 2, 1, 3.0));
        let p = tape.param(Grid::new(2, 2, 1, 2.0));
        let loss = c.mul(&p).sum();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.wrt(&p).data(), &[3.0; 4]);
        // the constant's slot stays empty; wrt() reports zeros
        assert_eq!(grads.wrt(&c).data(), &[0.0; 4]);
    }

    #[test]
    fn random_composite_graphs_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for trial in 0..20 {
            let at = rand_grid(&mut rng, 3, 4, 2);
            let aux = rand_grid(&mut rng, 3, 4, 2);
            let build = {
                let aux = aux.clone();
                move |t: &Tape, p: &Var| {
                    let a = t.constant(aux.clone());
                    let x = p.mul(&a).leaky_relu(0.2);
                    let y = x.add(p).softmax_channels();
                    let z = y.mul(&x).sum_channels();
                    z.square().sum()
                }
            };
            check_against_fd(&build, &at, 2e-4);
            let _ = trial;
        }
    }
}
