use std::sync::Arc;

use crate::tensor::split_at_axis;
use crate::{Real, Result, Tensor, TensorError, Var};

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::shape(
            op,
            format!(
                "axis {axis} out of range for rank-{} tensor {shape:?}",
                shape.len()
            ),
        ));
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim || s.len() == 1 {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

impl<'g, T: Real> Var<'g, T> {
    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let n = x.len();
        let xid = self.id();
        self.graph().push(
            "sum",
            &[self],
            Arc::new(Tensor::scalar(x.sum())),
            Box::new(move |g, sink| {
                if let Some(gx) = sink.acc(xid) {
                    for v in gx.iter_mut().take(n) {
                        *v = *v + g[0];
                    }
                }
            }),
        )
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.numel();
        self.sum().mul_scalar(T::one() / T::of(n as f64))
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis("sum_axis", x.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + xd[base + i];
                }
            }
        }
        let xid = self.id();
        Ok(self.graph().push(
            "sum_axis",
            &[self],
            Arc::new(Tensor::from_parts(
                reduced_shape(x.shape(), axis, keepdim),
                out,
            )),
            Box::new(move |g, sink| {
                if let Some(gx) = sink.acc(xid) {
                    for o in 0..outer {
                        for k in 0..len {
                            let base = (o * len + k) * inner;
                            for i in 0..inner {
                                gx[base + i] = gx[base + i] + g[o * inner + i];
                            }
                        }
                    }
                }
            }),
        ))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g, T>> {
        let shape = self.shape();
        check_axis("mean_axis", &shape, axis)?;
        let n = T::of(shape[axis] as f64);
        Ok(self.sum_axis(axis, keepdim)?.mul_scalar(T::one() / n))
    }

    /// Maximum along `axis`; the gradient flows to the first maximal entry.
    pub fn max_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g, T>> {
        self.extremum_axis("max_axis", axis, keepdim, |a, b| a > b)
    }

    /// Minimum along `axis`; the gradient flows to the first minimal entry.
    pub fn min_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g, T>> {
        self.extremum_axis("min_axis", axis, keepdim, |a, b| a < b)
    }

    fn extremum_axis(
        self,
        op: &'static str,
        axis: usize,
        keepdim: bool,
        better: fn(T, T) -> bool,
    ) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis(op, x.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for k in 1..len {
                    let idx = (o * len + k) * inner + i;
                    if better(xd[idx], xd[best]) {
                        best = idx;
                    }
                }
                out[o * inner + i] = xd[best];
                arg[o * inner + i] = best;
            }
        }
        let xid = self.id();
        Ok(self.graph().push(
            op,
            &[self],
            Arc::new(Tensor::from_parts(
                reduced_shape(x.shape(), axis, keepdim),
                out,
            )),
            Box::new(move |g, sink| {
                if let Some(gx) = sink.acc(xid) {
                    for (&gi, &a) in g.iter().zip(&arg) {
                        gx[a] = gx[a] + gi;
                    }
                }
            }),
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(x.shape(), axis);
        let xd = x.data();
        let mut y = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).fold(T::neg_infinity(), |m, k| m.max(xd[at(k)]));
                let mut s = T::zero();
                for k in 0..len {
                    let e = (xd[at(k)] - m).exp();
                    y[at(k)] = e;
                    s = s + e;
                }
                for k in 0..len {
                    y[at(k)] = y[at(k)] / s;
                }
            }
        }
        let y = Arc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let ys = y.clone();
        let xid = self.id();
        Ok(self.graph().push(
            "softmax",
            &[self],
            y,
            Box::new(move |g, sink| {
                if let Some(gx) = sink.acc(xid) {
                    let yd = ys.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot = (0..len).fold(T::zero(), |s, k| s + g[at(k)] * yd[at(k)]);
                            for k in 0..len {
                                gx[at(k)] = gx[at(k)] + yd[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    #[test]
    fn softmax_examples() {
        let g = Graph::<f64>::new();
        let u = g
            .constant(Tensor::from_f64(&[3], &[0.0, 0.0, 0.0]).unwrap())
            .softmax(0)
            .unwrap();
        for &v in u.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let s = g
            .constant(Tensor::from_f64(&[3], &[1000.0, 0.0, 0.0]).unwrap())
            .softmax(0)
            .unwrap();
        assert!(g.check().is_ok());
        assert!((s.value().data()[0] - 1.0).abs() < 1e-12);
        let h = g
            .constant(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap())
            .softmax(0)
            .unwrap();
        let expected = [0.09003, 0.24473, 0.66524];
        for (v, e) in h.value().data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-4);
        }
    }

    #[test]
    fn axis_reductions() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        assert_eq!(
            x.sum_axis(0, false).unwrap().value().data(),
            &[3.0, 5.0, 7.0]
        );
        assert_eq!(x.sum_axis(1, true).unwrap().shape(), vec![2, 1]);
        assert_eq!(x.max_axis(1, false).unwrap().value().data(), &[2.0, 5.0]);
        assert_eq!(
            x.min_axis(0, false).unwrap().value().data(),
            &[0.0, 1.0, 2.0]
        );
        assert!(x.sum_axis(2, false).is_err());
    }
}
