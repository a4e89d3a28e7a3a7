//! Parameter initialization and small layer helpers shared by every block.
//!
//! Each tensor draws from its own RNG stream keyed by `(seed, name)`, so a
//! parameter's initial value does not depend on which other blocks exist.
//! Ablation variants therefore share identical weights for their common parts.

use a2o_tensor::{Bound, Graph, ParamSet, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Result;

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub struct Init<'a> {
    params: &'a mut ParamSet<f32>,
    seed: u64,
}

impl<'a> Init<'a> {
    pub fn new(params: &'a mut ParamSet<f32>, seed: u64) -> Self {
        Self { params, seed }
    }

    fn normal(&self, name: &str, shape: &[usize], std: f64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * std) as f32
        })
    }

    fn put(&mut self, name: String, value: Tensor<f32>) -> Result<()> {
        self.params.insert(name, value)?;
        Ok(())
    }

    /// He-normal conv weight `[out, in, k, k]` plus a zero bias when requested.
    pub fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize, bias: bool) -> Result<()> {
        let std = (2.0 / (inp * k * k) as f64).sqrt();
        let w = self.normal(&format!("{name}.w"), &[out, inp, k, k], std);
        self.put(format!("{name}.w"), w)?;
        if bias {
            self.put(format!("{name}.b"), Tensor::zeros(&[out]))?;
        }
        Ok(())
    }

    /// Conv whose weight and bias start at zero.
    pub fn conv_zero(
        &mut self,
        name: &str,
        out: usize,
        inp: usize,
        k: usize,
        bias: bool,
    ) -> Result<()> {
        self.put(format!("{name}.w"), Tensor::zeros(&[out, inp, k, k]))?;
        if bias {
            self.put(format!("{name}.b"), Tensor::zeros(&[out]))?;
        }
        Ok(())
    }

    /// Dense layer stored as `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, name: &str, inp: usize, out: usize) -> Result<()> {
        let std = (2.0 / inp as f64).sqrt();
        let w = self.normal(&format!("{name}.w"), &[inp, out], std);
        self.put(format!("{name}.w"), w)?;
        self.put(format!("{name}.b"), Tensor::zeros(&[out]))
    }

    pub fn linear_zero(&mut self, name: &str, inp: usize, out: usize) -> Result<()> {
        self.put(format!("{name}.w"), Tensor::zeros(&[inp, out]))?;
        self.put(format!("{name}.b"), Tensor::zeros(&[out]))
    }

    pub fn scalar(&mut self, name: &str, value: f32) -> Result<()> {
        self.put(name.to_string(), Tensor::scalar(value))
    }
}

pub fn conv<'g, T: Real>(
    p: &Bound<'g, T>,
    name: &str,
    x: Var<'g, T>,
    stride: usize,
    pad: usize,
) -> Result<Var<'g, T>> {
    let w = p.get(&format!("{name}.w"))?;
    let bname = format!("{name}.b");
    let b = if p.contains(&bname) {
        Some(p.get(&bname)?)
    } else {
        None
    };
    Ok(x.conv2d(w, b, stride, pad)?)
}

/// 3×3 same-size conv followed by ReLU.
pub fn conv_relu<'g, T: Real>(p: &Bound<'g, T>, name: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(conv(p, name, x, 1, 1)?.relu())
}

/// `x [rows, in] · w + b`.
pub fn linear<'g, T: Real>(p: &Bound<'g, T>, name: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(x.matmul(w)?.add(b)?)
}

/// `[1, C, H, W]` → `[C, H, W]` and back.
pub fn squeeze0<'g, T: Real>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    Ok(x.reshape(&s[1..])?)
}

pub fn unsqueeze0<'g, T: Real>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let mut s = vec![1];
    s.extend(x.shape());
    Ok(x.reshape(&s)?)
}

/// Normalized `(x, y)` coordinates of pixel centers as `[2, H, W]`.
pub fn coord_planes<T: Real>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[2, h, w], |i| {
        let (c, rem) = (i / (h * w), i % (h * w));
        let (y, x) = (rem / w, rem % w);
        if c == 0 {
            T::of((x as f64 + 0.5) / w as f64)
        } else {
            T::of((y as f64 + 0.5) / h as f64)
        }
    })
}

pub fn constant_like<'g, T: Real>(g: &'g Graph<T>, shape: &[usize], value: f64) -> Var<'g, T> {
    g.constant(Tensor::full(shape, T::of(value)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name() {
        let mut a = ParamSet::new();
        let mut b = ParamSet::new();
        Init::new(&mut a, 3).conv("x", 4, 2, 3, true).unwrap();
        let mut ib = Init::new(&mut b, 3);
        ib.conv("other", 4, 2, 3, true).unwrap();
        ib.conv("x", 4, 2, 3, true).unwrap();
        assert_eq!(a.get("x.w"), b.get("x.w"));
        assert_ne!(b.get("x.w"), b.get("other.w"));
    }
}
