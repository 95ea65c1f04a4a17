//! Reverse-mode automatic differentiation over a dynamically recorded graph.
//!
//! Every forward pass records a fresh tape; `backward` sweeps the nodes in
//! reverse recording order. Values live behind `Rc` so backward closures can
//! capture the inputs they need without copying.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};
use std::cell::RefCell;
use std::rc::Rc;

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

type GradFn<E> = Box<dyn Fn(&Tensor<E>) -> Vec<Tensor<E>>>;

struct Node<E: Scalar> {
    value: Rc<Tensor<E>>,
    parents: Vec<usize>,
    grad_fn: Option<GradFn<E>>,
}

pub struct Tape<E: Scalar = f32> {
    nodes: RefCell<Vec<Node<E>>>,
}

/// Gradients of a scalar loss with respect to every tape node.
pub struct Gradients<E: Scalar = f32> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v.0].as_ref()
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Tensor<E>, parents: Vec<usize>, grad_fn: Option<GradFn<E>>) -> Var {
        debug_assert!(value.is_finite(), "non-finite tensor produced by an op");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            grad_fn,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf with no gradient tracking (e.g. detached teacher outputs, masks).
    pub fn constant(&self, t: Tensor<E>) -> Var {
        self.push(t, vec![], None)
    }

    /// Trainable leaf; identical to `constant` but named for intent.
    pub fn param(&self, t: Tensor<E>) -> Var {
        self.push(t, vec![], None)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<E>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn unary(
        &self,
        a: Var,
        f: impl Fn(E) -> E,
        df: impl Fn(E, E) -> E + 'static, // (x, y) -> dy/dx
    ) -> Var {
        let x = self.value(a);
        let y = x.map(f);
        let yc = Rc::new(y.clone());
        let grad_fn: GradFn<E> = Box::new(move |g| {
            let mut out = Tensor::zeros(x.shape().to_vec());
            for ((o, (&xv, &yv)), &gv) in out
                .data_mut()
                .iter_mut()
                .zip(x.data().iter().zip(yc.data()))
                .zip(g.data())
            {
                *o = gv * df(xv, yv);
            }
            vec![out]
        });
        self.push(y, vec![a.0], Some(grad_fn))
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        ctx: &'static str,
        f: impl Fn(E, E) -> E,
        df: impl Fn(E, E, E) -> (E, E) + 'static, // (x, y, g) -> (dx, dy)
    ) -> Var {
        let xa = self.value(a);
        let xb = self.value(b);
        assert_eq!(xa.shape(), xb.shape(), "shape mismatch in {ctx}");
        let y = xa.zip_map(&xb, f);
        let grad_fn: GradFn<E> = Box::new(move |g| {
            let mut ga = Tensor::zeros(xa.shape().to_vec());
            let mut gb = Tensor::zeros(xb.shape().to_vec());
            for i in 0..g.numel() {
                let (da, db) = df(xa.data()[i], xb.data()[i], g.data()[i]);
                ga.data_mut()[i] = da;
                gb.data_mut()[i] = db;
            }
            vec![ga, gb]
        });
        self.push(y, vec![a.0, b.0], Some(grad_fn))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, "add", |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, "sub", |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, "mul", |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    /// Elementwise max; ties route the gradient to the first argument.
    pub fn max2(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            "max2",
            |x, y| if x >= y { x } else { y },
            |x, y, g| {
                if x >= y {
                    (g, E::zero())
                } else {
                    (E::zero(), g)
                }
            },
        )
    }

    /// Elementwise min; ties route the gradient to the first argument.
    pub fn min2(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            "min2",
            |x, y| if x <= y { x } else { y },
            |x, y, g| {
                if x <= y {
                    (g, E::zero())
                } else {
                    (E::zero(), g)
                }
            },
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            "div",
            |x, y| x / y,
            |x, y, g| (g / y, -g * x / (y * y)),
        )
    }

    /// Elementwise max(x, c).
    pub fn max_scalar(&self, a: Var, c: f64) -> Var {
        let c = E::from_f64(c);
        self.unary(
            a,
            move |x| if x >= c { x } else { c },
            move |x, _| if x >= c { E::one() } else { E::zero() },
        )
    }

    /// Elementwise min(x, c).
    pub fn min_scalar(&self, a: Var, c: f64) -> Var {
        let c = E::from_f64(c);
        self.unary(
            a,
            move |x| if x <= c { x } else { c },
            move |x, _| if x <= c { E::one() } else { E::zero() },
        )
    }

    /// Channels [from, to) of a [C,H,W] map.
    pub fn slice_channels(&self, a: Var, from: usize, to: usize) -> Var {
        let x = self.value(a);
        let sh = x.shape().to_vec();
        assert_eq!(sh.len(), 3, "slice_channels expects [C,H,W]");
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        assert!(from < to && to <= c, "bad channel slice {from}..{to} of {c}");
        let hw = h * w;
        let data = x.data()[from * hw..to * hw].to_vec();
        let grad_fn: GradFn<E> = Box::new(move |g| {
            let mut gi = Tensor::zeros(vec![c, h, w]);
            gi.data_mut()[from * hw..to * hw].copy_from_slice(g.data());
            vec![gi]
        });
        self.push(
            Tensor::from_vec(vec![to - from, h, w], data).unwrap(),
            vec![a.0],
            Some(grad_fn),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |x| -x, |_, _| -E::one())
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let c = E::from_f64(c);
        self.unary(a, move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let c = E::from_f64(c);
        self.unary(a, move |x| x + c, |_, _| E::one())
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > E::zero() { x } else { E::zero() },
            |x, _| if x > E::zero() { E::one() } else { E::zero() },
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| E::one() / (E::one() + (-x).exp()),
            |_, y| y * (E::one() - y),
        )
    }

    /// Natural log; callers clamp the input away from zero first.
    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), |x, _| E::one() / x)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |_, y| y)
    }

    pub fn sqr(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| E::from_f64(2.0) * x)
    }

    /// x^p for x >= 0.
    pub fn powf(&self, a: Var, p: f64) -> Var {
        let pe = E::from_f64(p);
        self.unary(
            a,
            move |x| x.powf(pe),
            move |x, _| {
                if x == E::zero() {
                    E::zero()
                } else {
                    pe * x.powf(pe - E::one())
                }
            },
        )
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.abs(),
            |x, _| {
                if x >= E::zero() {
                    E::one()
                } else {
                    -E::one()
                }
            },
        )
    }

    /// Clamp to [lo, hi]; gradient passes only strictly inside the range.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let lo = E::from_f64(lo);
        let hi = E::from_f64(hi);
        self.unary(
            a,
            move |x| {
                if x < lo {
                    lo
                } else if x > hi {
                    hi
                } else {
                    x
                }
            },
            move |x, _| {
                if x < lo || x > hi {
                    E::zero()
                } else {
                    E::one()
                }
            },
        )
    }

    /// Elementwise multiply by a fixed tensor (no gradient into the mask).
    pub fn mul_const(&self, a: Var, m: &Tensor<E>) -> Var {
        let xa = self.value(a);
        assert_eq!(xa.shape(), m.shape(), "shape mismatch in mul_const");
        let y = xa.zip_map(m, |x, c| x * c);
        let m = m.clone();
        let grad_fn: GradFn<E> = Box::new(move |g| vec![g.zip_map(&m, |gv, c| gv * c)]);
        self.push(y, vec![a.0], Some(grad_fn))
    }

    /// Elementwise add of a fixed tensor.
    pub fn add_const(&self, a: Var, t: &Tensor<E>) -> Var {
        let xa = self.value(a);
        assert_eq!(xa.shape(), t.shape(), "shape mismatch in add_const");
        let y = xa.zip_map(t, |x, c| x + c);
        let grad_fn: GradFn<E> = Box::new(move |g| vec![g.clone()]);
        self.push(y, vec![a.0], Some(grad_fn))
    }

    pub fn sum(&self, a: Var) -> Var {
        let x = self.value(a);
        let s = x
            .data()
            .iter()
            .fold(E::zero(), |acc, &v| acc + v);
        let shape = x.shape().to_vec();
        let grad_fn: GradFn<E> = Box::new(move |g| {
            let gv = g.item();
            vec![Tensor::full(shape.clone(), gv)]
        });
        self.push(Tensor::scalar(s), vec![a.0], Some(grad_fn))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// [C,H,W] -> [H,W] mean over the channel axis.
    pub fn mean_channels(&self, a: Var) -> Var {
        let x = self.value(a);
        let sh = x.shape().to_vec();
        assert_eq!(sh.len(), 3, "mean_channels expects [C,H,W]");
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let hw = h * w;
        let inv_c = E::from_f64(1.0 / c as f64);
        let mut out = Tensor::zeros(vec![h, w]);
        for ci in 0..c {
            let plane = &x.data()[ci * hw..(ci + 1) * hw];
            for (o, &v) in out.data_mut().iter_mut().zip(plane) {
                *o = *o + v * inv_c;
            }
        }
        let grad_fn: GradFn<E> = Box::new(move |g| {
            let mut gi = Tensor::zeros(vec![c, h, w]);
            for ci in 0..c {
                let plane = &mut gi.data_mut()[ci * hw..(ci + 1) * hw];
                for (o, &gv) in plane.iter_mut().zip(g.data()) {
                    *o = gv * inv_c;
                }
            }
            vec![gi]
        });
        self.push(out, vec![a.0], Some(grad_fn))
    }

    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Var {
        let x = self.value(a);
        let old = x.shape().to_vec();
        let y = (*x).clone().reshaped(shape).expect("reshape numel mismatch");
        let grad_fn: GradFn<E> = Box::new(move |g| {
            vec![g.clone().reshaped(old.clone()).unwrap()]
        });
        self.push(y, vec![a.0], Some(grad_fn))
    }

    /// Gather elements of a flattened tensor into a 1-D vector.
    pub fn gather(&self, a: Var, indices: &[usize]) -> Var {
        let x = self.value(a);
        let n = x.numel();
        for &i in indices {
            assert!(i < n, "gather index {i} out of bounds for {n} elements");
        }
        let data: Vec<E> = indices.iter().map(|&i| x.data()[i]).collect();
        let shape = x.shape().to_vec();
        let idx: Vec<usize> = indices.to_vec();
        let grad_fn: GradFn<E> = Box::new(move |g| {
            let mut gi = Tensor::zeros(shape.clone());
            for (&i, &gv) in idx.iter().zip(g.data()) {
                gi.data_mut()[i] = gi.data_mut()[i] + gv;
            }
            vec![gi]
        });
        self.push(
            Tensor::from_vec(vec![indices.len()], data).unwrap(),
            vec![a.0],
            Some(grad_fn),
        )
    }

    /// Concatenate 1-D vectors.
    pub fn concat(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero vectors");
        let mut data = Vec::new();
        let mut lens = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.shape().len(), 1, "concat expects 1-D inputs");
            lens.push(v.numel());
            data.extend_from_slice(v.data());
        }
        let total = data.len();
        let grad_fn: GradFn<E> = Box::new(move |g| {
            let mut out = Vec::with_capacity(lens.len());
            let mut off = 0;
            for &l in &lens {
                out.push(
                    Tensor::from_vec(vec![l], g.data()[off..off + l].to_vec()).unwrap(),
                );
                off += l;
            }
            out
        });
        self.push(
            Tensor::from_vec(vec![total], data).unwrap(),
            parts.iter().map(|p| p.0).collect(),
            Some(grad_fn),
        )
    }

    /// Numerically stable softmax over a 1-D vector at the given temperature.
    pub fn softmax(&self, a: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 {
            return Err(Error::Parameter(format!(
                "softmax temperature must be > 0, got {temperature}"
            )));
        }
        let x = self.value(a);
        assert_eq!(x.shape().len(), 1, "softmax expects a 1-D vector");
        let t = E::from_f64(temperature);
        let y = softmax_slice(x.data(), t);
        let yc = y.clone();
        let grad_fn: GradFn<E> = Box::new(move |g| {
            vec![softmax_backward(&yc, g.data(), t)]
        });
        Ok(self.push(
            Tensor::from_vec(vec![x.numel()], y).unwrap(),
            vec![a.0],
            Some(grad_fn),
        ))
    }

    /// Softmax over the channel axis of a [C,H,W] map, per position.
    pub fn softmax_channels(&self, a: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 {
            return Err(Error::Parameter(format!(
                "softmax temperature must be > 0, got {temperature}"
            )));
        }
        let x = self.value(a);
        let sh = x.shape().to_vec();
        assert_eq!(sh.len(), 3, "softmax_channels expects [C,H,W]");
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let hw = h * w;
        let t = E::from_f64(temperature);
        let mut out = Tensor::zeros(sh.clone());
        let mut col = vec![E::zero(); c];
        for p in 0..hw {
            for ci in 0..c {
                col[ci] = x.data()[ci * hw + p];
            }
            let sm = softmax_slice(&col, t);
            for ci in 0..c {
                out.data_mut()[ci * hw + p] = sm[ci];
            }
        }
        let yc = Rc::new(out.clone());
        let grad_fn: GradFn<E> = Box::new(move |g| {
            let mut gi = Tensor::zeros(vec![c, h, w]);
            let mut ycol = vec![E::zero(); c];
            let mut gcol = vec![E::zero(); c];
            for p in 0..hw {
                for ci in 0..c {
                    ycol[ci] = yc.data()[ci * hw + p];
                    gcol[ci] = g.data()[ci * hw + p];
                }
                let gx = softmax_backward(&ycol, &gcol, t);
                for ci in 0..c {
                    gi.data_mut()[ci * hw + p] = gx.data()[ci];
                }
            }
            vec![gi]
        });
        Ok(self.push(out, vec![a.0], Some(grad_fn)))
    }

    /// KL(p || q) = sum p_i ln(p_i / q_i) with the 0 ln 0 = 0 convention.
    /// q is clamped to 1e-12 where needed; gradient flows to both arguments.
    pub fn kl_div(&self, p: Var, q: Var) -> Var {
        let xp = self.value(p);
        let xq = self.value(q);
        assert_eq!(xp.shape(), xq.shape(), "shape mismatch in kl_div");
        let floor = E::from_f64(1e-12);
        let mut s = E::zero();
        for (&pi, &qi) in xp.data().iter().zip(xq.data()) {
            if pi > E::zero() {
                let qc = if qi < floor { floor } else { qi };
                s = s + pi * (pi / qc).ln();
            }
        }
        let grad_fn: GradFn<E> = Box::new(move |g| {
            let gv = g.item();
            let mut gp = Tensor::zeros(xp.shape().to_vec());
            let mut gq = Tensor::zeros(xq.shape().to_vec());
            for i in 0..xp.numel() {
                let pi = xp.data()[i];
                let qi = xq.data()[i];
                let qc = if qi < floor { floor } else { qi };
                if pi > E::zero() {
                    gp.data_mut()[i] = gv * ((pi / qc).ln() + E::one());
                    gq.data_mut()[i] = if qi < floor {
                        E::zero()
                    } else {
                        -gv * pi / qc
                    };
                }
            }
            vec![gp, gq]
        });
        self.push(Tensor::scalar(s), vec![p.0, q.0], Some(grad_fn))
    }

    /// Nearest-neighbour 2x upsample of a [C,H,W] map.
    pub fn upsample_nearest2(&self, a: Var) -> Var {
        let x = self.value(a);
        let sh = x.shape().to_vec();
        assert_eq!(sh.len(), 3, "upsample_nearest2 expects [C,H,W]");
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let (h2, w2) = (h * 2, w * 2);
        let mut out = Tensor::zeros(vec![c, h2, w2]);
        for ci in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out.data_mut()[ci * h2 * w2 + y * w2 + xx] =
                        x.data()[ci * h * w + (y / 2) * w + (xx / 2)];
                }
            }
        }
        let grad_fn: GradFn<E> = Box::new(move |g| {
            let mut gi = Tensor::zeros(vec![c, h, w]);
            for ci in 0..c {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        let v = g.data()[ci * h2 * w2 + y * w2 + xx];
                        let idx = ci * h * w + (y / 2) * w + (xx / 2);
                        gi.data_mut()[idx] = gi.data_mut()[idx] + v;
                    }
                }
            }
            vec![gi]
        });
        self.push(out, vec![a.0], Some(grad_fn))
    }

    /// 2-D convolution: input [B,Cin,H,W], weight [Cout,Cin,kH,kW], bias [Cout].
    pub fn conv2d(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects 4-D input and weight, got {:?} and {:?}",
                xs, ws
            )));
        }
        let (bsz, cin, h, win) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin != wcin {
            return Err(Error::ShapeMismatch {
                context: "conv2d input channels (input axis 1 vs weight axis 1)",
                lhs: xs,
                rhs: ws,
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Parameter(format!(
                "conv2d kernel dims must be odd, got {kh}x{kw}"
            )));
        }
        if stride < 1 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                context: "conv2d bias (expected [Cout])",
                lhs: b.shape().to_vec(),
                rhs: vec![cout],
            });
        }
        if h + 2 * pad < kh || win + 2 * pad < kw {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                win + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (win + 2 * pad - kw) / stride + 1;

        let out = conv2d_forward(&x, &w, &b, stride, pad, ho, wo);
        let xc = x.clone();
        let wc = w.clone();
        let grad_fn: GradFn<E> = Box::new(move |g| {
            let (gi, gw, gb) = conv2d_backward(&xc, &wc, g, stride, pad);
            vec![gi, gw, gb]
        });
        let _ = (bsz, cout);
        Ok(self.push(out, vec![input.0, weight.0, bias.0], Some(grad_fn)))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Gradients<E> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.numel(),
            1,
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(E::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(ref f) = nodes[id].grad_fn {
                let pgrads = f(&g);
                for (pid, pg) in nodes[id].parents.iter().zip(pgrads) {
                    match &mut grads[*pid] {
                        Some(acc) => {
                            for (a, &b) in acc.data_mut().iter_mut().zip(pg.data()) {
                                *a = *a + b;
                            }
                        }
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn softmax_slice<E: Scalar>(x: &[E], t: E) -> Vec<E> {
    let mx = x.iter().cloned().fold(E::neg_infinity(), E::max);
    let mut out: Vec<E> = x.iter().map(|&v| ((v - mx) / t).exp()).collect();
    let s = out.iter().fold(E::zero(), |a, &b| a + b);
    for o in &mut out {
        *o = *o / s;
    }
    out
}

/// dL/dx_i = y_i (g_i - sum_m g_m y_m) / T
fn softmax_backward<E: Scalar>(y: &[E], g: &[E], t: E) -> Tensor<E> {
    let dot = y
        .iter()
        .zip(g)
        .fold(E::zero(), |acc, (&yi, &gi)| acc + yi * gi);
    let data: Vec<E> = y
        .iter()
        .zip(g)
        .map(|(&yi, &gi)| yi * (gi - dot) / t)
        .collect();
    Tensor::from_vec(vec![y.len()], data).unwrap()
}

fn conv2d_forward<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Tensor<E> {
    let (bsz, cin, h, win) = dims4(x);
    let (cout, _, kh, kw) = dims4(w);
    let mut out = Tensor::zeros(vec![bsz, cout, ho, wo]);
    let xd = x.data();
    let wd = w.data();
    for bi in 0..bsz {
        for co in 0..cout {
            let oplane = &mut out.data_mut()[(bi * cout + co) * ho * wo..][..ho * wo];
            oplane.fill(b.data()[co]);
            for ci in 0..cin {
                let iplane = &xd[(bi * cin + ci) * h * win..][..h * win];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[((co * cin + ci) * kh + ky) * kw + kx];
                        if wv == E::zero() {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(kx, pad, stride, win, wo);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let irow = &iplane[(iy - pad) * win..][..win];
                            let orow = &mut oplane[oy * wo..][..wo];
                            let ibase = ox_lo * stride + kx - pad;
                            if stride == 1 {
                                let src = &irow[ibase..ibase + (ox_hi - ox_lo)];
                                for (o, &i) in orow[ox_lo..ox_hi].iter_mut().zip(src) {
                                    *o = *o + wv * i;
                                }
                            } else {
                                for (n, o) in orow[ox_lo..ox_hi].iter_mut().enumerate() {
                                    *o = *o + wv * irow[ibase + n * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    g: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (bsz, cin, h, win) = dims4(x);
    let (cout, _, kh, kw) = dims4(w);
    let (_, _, ho, wo) = dims4(g);
    let mut gi = Tensor::zeros(x.shape().to_vec());
    let mut gw = Tensor::zeros(w.shape().to_vec());
    let mut gb = Tensor::zeros(vec![cout]);
    let xd = x.data();
    let wd = w.data();
    let gd = g.data();
    for bi in 0..bsz {
        for co in 0..cout {
            let gplane = &gd[(bi * cout + co) * ho * wo..][..ho * wo];
            let mut s = E::zero();
            for &v in gplane {
                s = s + v;
            }
            gb.data_mut()[co] = gb.data_mut()[co] + s;
            for ci in 0..cin {
                let iplane = &xd[(bi * cin + ci) * h * win..][..h * win];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                        let wv = wd[widx];
                        let mut wacc = E::zero();
                        let (ox_lo, ox_hi) = valid_range(kx, pad, stride, win, wo);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let irow = &iplane[(iy - pad) * win..][..win];
                            let grow = &gplane[oy * wo..][..wo];
                            let gi_row = &mut gi.data_mut()
                                [(bi * cin + ci) * h * win + (iy - pad) * win..][..win];
                            let ibase = ox_lo * stride + kx - pad;
                            if stride == 1 {
                                let n = ox_hi - ox_lo;
                                let gs = &grow[ox_lo..ox_hi];
                                let src = &irow[ibase..ibase + n];
                                let dst = &mut gi_row[ibase..ibase + n];
                                for (d, &gv) in dst.iter_mut().zip(gs) {
                                    *d = *d + gv * wv;
                                }
                                // 4-lane partial sums so the reduction
                                // vectorizes too
                                let mut acc = [E::zero(); 4];
                                let mut chunks_g = gs.chunks_exact(4);
                                let mut chunks_i = src.chunks_exact(4);
                                for (cg, ci_) in (&mut chunks_g).zip(&mut chunks_i) {
                                    for l in 0..4 {
                                        acc[l] = acc[l] + cg[l] * ci_[l];
                                    }
                                }
                                for (&gv, &iv) in
                                    chunks_g.remainder().iter().zip(chunks_i.remainder())
                                {
                                    wacc = wacc + gv * iv;
                                }
                                wacc = wacc + acc[0] + acc[1] + acc[2] + acc[3];
                            } else {
                                for (n, &gv) in grow[ox_lo..ox_hi].iter().enumerate() {
                                    let ix = ibase + n * stride;
                                    wacc = wacc + gv * irow[ix];
                                    gi_row[ix] = gi_row[ix] + gv * wv;
                                }
                            }
                        }
                        gw.data_mut()[widx] = gw.data_mut()[widx] + wacc;
                    }
                }
            }
        }
    }
    (gi, gw, gb)
}

/// Output columns whose input column ox*stride + k - pad lands inside
/// [0, win); empty ranges come back as (lo, lo).
fn valid_range(k: usize, pad: usize, stride: usize, win: usize, wo: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if win + pad > k {
        ((win + pad - k - 1) / stride + 1).min(wo)
    } else {
        lo
    };
    (lo, hi.max(lo))
}

fn dims4<E: Scalar>(t: &Tensor<E>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}
