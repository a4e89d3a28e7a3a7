use std::sync::Arc;

use crate::{Real, Result, Tensor, TensorError, Var};

impl<'g, T: Real> Var<'g, T> {
    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = rhs.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data(),
            k as isize,
            1,
            b.data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let (aid, bid) = (self.id(), rhs.id());
        Ok(self.graph().push(
            "matmul",
            &[self, rhs],
            Arc::new(Tensor::from_parts(vec![m, n], out)),
            Box::new(move |g, sink| {
                if let Some(ga) = sink.acc(aid) {
                    // dA = G B^T
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        n as isize,
                        1,
                        b.data(),
                        1,
                        n as isize,
                        T::one(),
                        ga,
                        k as isize,
                        1,
                    );
                }
                if let Some(gb) = sink.acc(bid) {
                    // dB = A^T G
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        a.data(),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        T::one(),
                        gb,
                        n as isize,
                        1,
                    );
                }
            }),
        ))
    }
}
