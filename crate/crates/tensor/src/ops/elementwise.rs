use std::sync::Arc;

use crate::{Real, Result, Tensor, TensorError, Var};

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out`, the linear index it reads in a tensor of shape `src`.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        let o = i + rank - src.len();
        strides[o] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let n: usize = out.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        idx.push(off);
        for d in (0..rank).rev() {
            counter[d] += 1;
            off += strides[d];
            if counter[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            counter[d] = 0;
        }
    }
    idx
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// (d/da, d/db) at (a, b).
    #[inline]
    fn partials<T: Real>(self, a: T, b: T) -> (T, T) {
        match self {
            BinOp::Add => (T::one(), T::one()),
            BinOp::Sub => (T::one(), -T::one()),
            BinOp::Mul => (b, a),
            BinOp::Div => (T::one() / b, -a / (b * b)),
        }
    }
}

// fallible arithmetic, so the operator traits do not fit
#[allow(clippy::should_implement_trait)]
impl<'g, T: Real> Var<'g, T> {
    fn binary(self, rhs: Var<'g, T>, op: BinOp) -> Result<Var<'g, T>> {
        debug_assert!(self.same_graph(&rhs));
        let a = self.value();
        let b = rhs.value();
        let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            TensorError::shape(
                op.name(),
                format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
            )
        })?;
        let (ia, ib) = if a.shape() == b.shape() {
            (None, None)
        } else {
            let ia =
                (a.shape() != out_shape.as_slice()).then(|| broadcast_index(a.shape(), &out_shape));
            let ib =
                (b.shape() != out_shape.as_slice()).then(|| broadcast_index(b.shape(), &out_shape));
            (ia, ib)
        };
        let n: usize = out_shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let at = |i: usize| ia.as_ref().map_or(i, |v| v[i]);
        let bt = |i: usize| ib.as_ref().map_or(i, |v| v[i]);
        let data: Vec<T> = (0..n).map(|i| op.apply(ad[at(i)], bd[bt(i)])).collect();
        let out = Tensor::from_parts(out_shape, data);
        let (aid, bid) = (self.id(), rhs.id());
        Ok(self.graph().push(
            op.name(),
            &[self, rhs],
            Arc::new(out),
            Box::new(move |g, sink| {
                let (ad, bd) = (a.data(), b.data());
                let at = |i: usize| ia.as_ref().map_or(i, |v| v[i]);
                let bt = |i: usize| ib.as_ref().map_or(i, |v| v[i]);
                if let Some(ga) = sink.acc(aid) {
                    for (i, &gi) in g.iter().enumerate() {
                        let (da, _) = op.partials(ad[at(i)], bd[bt(i)]);
                        ga[at(i)] = ga[at(i)] + gi * da;
                    }
                }
                if let Some(gb) = sink.acc(bid) {
                    for (i, &gi) in g.iter().enumerate() {
                        let (_, db) = op.partials(ad[at(i)], bd[bt(i)]);
                        gb[bt(i)] = gb[bt(i)] + gi * db;
                    }
                }
            }),
        ))
    }

    pub fn add(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, BinOp::Add)
    }

    pub fn sub(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, BinOp::Sub)
    }

    pub fn mul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, BinOp::Mul)
    }

    pub fn div(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, BinOp::Div)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn map_unary(
        self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'g, T> {
        let x = self.value();
        let y = Arc::new(x.map(f));
        let xid = self.id();
        let (xs, ys) = (x.clone(), y.clone());
        self.graph().push(
            op,
            &[self],
            y,
            Box::new(move |g, sink| {
                if let Some(gx) = sink.acc(xid) {
                    for (i, ((&gi, &xi), &yi)) in g.iter().zip(xs.data()).zip(ys.data()).enumerate()
                    {
                        gx[i] = gx[i] + gi * df(xi, yi);
                    }
                }
            }),
        )
    }

    pub fn neg(self) -> Var<'g, T> {
        self.map_unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn relu(self) -> Var<'g, T> {
        self.map_unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.map_unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.map_unary("tanh", |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn exp(self) -> Var<'g, T> {
        self.map_unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'g, T> {
        self.map_unary("ln", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.map_unary("sqrt", |x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn abs(self) -> Var<'g, T> {
        self.map_unary(
            "abs",
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sin(self) -> Var<'g, T> {
        self.map_unary("sin", |x| x.sin(), |x, _| x.cos())
    }

    pub fn square(self) -> Var<'g, T> {
        self.map_unary("square", |x| x * x, |x, _| T::of(2.0) * x)
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        self.map_unary("add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(self, c: T) -> Var<'g, T> {
        self.map_unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    /// `x^p` for a constant exponent.
    pub fn powf(self, p: T) -> Var<'g, T> {
        self.map_unary(
            "powf",
            move |x| x.powf(p),
            move |x, _| p * x.powf(p - T::one()),
        )
    }

    /// Clamp with pass-through gradient strictly inside `[lo, hi]` and zero
    /// gradient where the bound is active.
    pub fn clamp(self, lo: T, hi: T) -> Var<'g, T> {
        self.map_unary(
            "clamp",
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// `ln(x / (1 - x))` after clamping `x` to `[eps, 1 - eps]`; finite for any input.
    pub fn logit_clamped(self, eps: T) -> Var<'g, T> {
        let hi = T::one() - eps;
        self.map_unary(
            "logit_clamped",
            move |x| logit(x.max(eps).min(hi)),
            move |x, _| {
                if x >= eps && x <= hi {
                    T::one() / (x * (T::one() - x))
                } else {
                    T::zero()
                }
            },
        )
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn logit<T: Real>(x: T) -> T {
    (x / (T::one() - x)).ln()
}
