use std::sync::Arc;

use crate::tensor::{numel, split_at_axis};
use crate::{Graph, Real, Result, Tensor, TensorError, Var};

/// Mirror index into `0..n` without repeating the edge sample; folds
/// repeatedly so any offset is valid. `n == 1` always maps to 0.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

impl<'g, T: Real> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        if numel(shape) != x.len() || shape.contains(&0) {
            return Err(TensorError::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", x.shape()),
            ));
        }
        let out = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
        let xid = self.id();
        Ok(self.graph().push(
            "reshape",
            &[self],
            Arc::new(out),
            Box::new(move |g, sink| {
                if let Some(gx) = sink.acc(xid) {
                    for (a, &b) in gx.iter_mut().zip(g) {
                        *a = *a + b;
                    }
                }
            }),
        ))
    }

    /// Contiguous slice `start..start + len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::shape(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_at_axis(shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = len;
        let xid = self.id();
        Ok(self.graph().push(
            "narrow",
            &[self],
            Arc::new(Tensor::from_parts(oshape, out)),
            Box::new(move |g, sink| {
                if let Some(gx) = sink.acc(xid) {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        for j in 0..len * inner {
                            gx[base + j] = gx[base + j] + g[o * len * inner + j];
                        }
                    }
                }
            }),
        ))
    }

    /// Generalized transpose: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::shape(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let ostrides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = x.len();
        let mut src = Vec::with_capacity(n);
        let mut counter = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n {
            src.push(off);
            for d in (0..rank).rev() {
                counter[d] += 1;
                off += ostrides[d];
                if counter[d] < oshape[d] {
                    break;
                }
                off -= ostrides[d] * oshape[d];
                counter[d] = 0;
            }
        }
        let out: Vec<T> = src.iter().map(|&s| x.data()[s]).collect();
        let xid = self.id();
        Ok(self.graph().push(
            "permute",
            &[self],
            Arc::new(Tensor::from_parts(oshape, out)),
            Box::new(move |g, sink| {
                if let Some(gx) = sink.acc(xid) {
                    for (&s, &gi) in src.iter().zip(g) {
                        gx[s] = gx[s] + gi;
                    }
                }
            }),
        ))
    }

    /// Gathers slices along axis 0; indices may repeat.
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape();
        if indices.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return Err(TensorError::shape(
                "index_select",
                format!(
                    "indices {indices:?} invalid for leading extent {}",
                    shape[0]
                ),
            ));
        }
        let row: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
        }
        let mut oshape = shape.to_vec();
        oshape[0] = indices.len();
        let idx = indices.to_vec();
        let xid = self.id();
        Ok(self.graph().push(
            "index_select",
            &[self],
            Arc::new(Tensor::from_parts(oshape, out)),
            Box::new(move |g, sink| {
                if let Some(gx) = sink.acc(xid) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..row {
                            gx[i * row + j] = gx[i * row + j] + g[r * row + j];
                        }
                    }
                }
            }),
        ))
    }

    /// Reflect-pads the last two axes by `pad` on every side.
    pub fn pad_reflect2d(self, pad: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape();
        if shape.len() < 2 {
            return Err(TensorError::shape(
                "pad_reflect2d",
                format!("needs rank >= 2, got {shape:?}"),
            ));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = x.len() / (h * w);
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let mut src = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            let sy = reflect_index(y as isize - pad as isize, h);
            for xx in 0..ow {
                let sx = reflect_index(xx as isize - pad as isize, w);
                src.push(sy * w + sx);
            }
        }
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &x.data()[p * h * w..(p + 1) * h * w];
            out.extend(src.iter().map(|&s| plane[s]));
        }
        let mut oshape = shape.to_vec();
        let r = oshape.len();
        oshape[r - 2] = oh;
        oshape[r - 1] = ow;
        let xid = self.id();
        Ok(self.graph().push(
            "pad_reflect2d",
            &[self],
            Arc::new(Tensor::from_parts(oshape, out)),
            Box::new(move |g, sink| {
                if let Some(gx) = sink.acc(xid) {
                    for p in 0..planes {
                        for (j, &s) in src.iter().enumerate() {
                            gx[p * h * w + s] = gx[p * h * w + s] + g[p * oh * ow + j];
                        }
                    }
                }
            }),
        ))
    }
}

impl<T: Real> Graph<T> {
    /// Joins vars along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let Some(first) = parts.first() else {
            return Err(TensorError::invalid("concat", "nothing to concatenate"));
        };
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::shape(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let values: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        for (k, v) in values.iter().enumerate() {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(TensorError::shape(
                    "concat",
                    format!(
                        "part {k} has shape {s:?}, incompatible with {base:?} along axis {axis}"
                    ),
                ));
            }
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut oshape = base.clone();
        oshape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        Ok(self.push(
            "concat",
            parts,
            Arc::new(Tensor::from_parts(oshape, out)),
            Box::new(move |g, sink| {
                let mut offset = 0;
                for (&id, &l) in ids.iter().zip(&lens) {
                    if let Some(gx) = sink.acc(id) {
                        for o in 0..outer {
                            for j in 0..l * inner {
                                gx[o * l * inner + j] =
                                    gx[o * l * inner + j] + g[(o * total + offset) * inner + j];
                            }
                        }
                    }
                    offset += l;
                }
            }),
        ))
    }
}
