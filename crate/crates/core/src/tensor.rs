//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is immutable once built. The payload sits behind an `Arc`, so
//! clones are cheap and share identity; the autodiff tape keys leaf gradients
//! on that identity.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.shape);
        if self.data.len() <= 16 {
            d.field("data", &self.data);
        } else {
            d.field("data", &format_args!("[{} values]", self.data.len()));
        }
        d.field("requires_grad", &self.requires_grad).finish()
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes, or `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out` (zero on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Visits every multi-index of `out` in row-major order, yielding the linear
/// offsets into two broadcast operands.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = rank - 1;
    let inner = out[last];
    let (ia, ib) = (sa[last], sb[last]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    loop {
        let (mut pa, mut pb) = (oa, ob);
        for _ in 0..inner {
            f(o, pa, pb);
            o += 1;
            pa += ia;
            pb += ib;
        }
        // carry into the outer axes
        let mut ax = last;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

impl Tensor {
    /// Builds a tensor from external data, rejecting bad lengths, zero
    /// extents and non-finite values.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i, value: data[i] });
        }
        Ok(Self::from_parts(shape, data))
    }

    /// Internal constructor for computed values; only the length is checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "shape {shape:?}");
        Self { shape, data: Arc::new(data), requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::from_parts(shape, vec![v; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    /// Same values, marked as a trainable leaf. The result gets a fresh identity.
    pub fn into_param(self) -> Self {
        Self { shape: self.shape, data: Arc::new((*self.data).clone()), requires_grad: true }
    }

    /// Same values and identity with the gradient flag set to `flag`.
    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        (*self.data).clone()
    }

    /// The scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Identity of the underlying buffer; shared by clones.
    pub fn id(&self) -> usize {
        Arc::as_ptr(&self.data) as usize
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self { shape, data: Arc::clone(&self.data), requires_grad: self.requires_grad })
    }

    /// New tensor (fresh identity) with `f` applied to each value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut t = Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect());
        t.requires_grad = self.requires_grad;
        t
    }

    /// Replaces the payload in place while keeping shape and gradient flag.
    /// The tensor gets a fresh identity.
    pub fn set_data(&mut self, data: Vec<f64>) {
        assert_eq!(data.len(), self.numel());
        self.data = Arc::new(data);
    }

    pub fn zip_broadcast(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let out = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| {
            Error::Dimension(format!("cannot broadcast {:?} with {:?}", self.shape, other.shape))
        })?;
        if self.shape == other.shape {
            let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Self::from_parts(out, data));
        }
        let sa = broadcast_strides(&self.shape, &out);
        let sb = broadcast_strides(&other.shape, &out);
        let mut data = vec![0.0; numel(&out)];
        let (a, b) = (&self.data, &other.data);
        for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(a[i], b[j]));
        Ok(Self::from_parts(out, data))
    }

    /// Sums a broadcast result back down to `shape`.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let sa = broadcast_strides(shape, &self.shape);
        let zero = vec![0; self.shape.len()];
        let mut out = vec![0.0; numel(shape)];
        let src = &self.data;
        for_each_broadcast(&self.shape, &sa, &zero, |o, i, _| out[i] += src[o]);
        Self::from_parts(shape.to_vec(), out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(other.data.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Batched matrix product with broadcast batch axes. `ta`/`tb` transpose the
/// trailing two axes of the respective operand.
pub(crate) fn bmm(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::Dimension(format!(
            "matmul needs rank >= 2 operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (ra, rb) = (a.rank(), b.rank());
    let (a0, a1) = (a.shape[ra - 2], a.shape[ra - 1]);
    let (b0, b1) = (b.shape[rb - 2], b.shape[rb - 1]);
    let (m, ka) = if ta { (a1, a0) } else { (a0, a1) };
    let (kb, n) = if tb { (b1, b0) } else { (b0, b1) };
    if ka != kb {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let k = ka;
    let batch = broadcast_shape(&a.shape[..ra - 2], &b.shape[..rb - 2]).ok_or_else(|| {
        Error::Dimension(format!("matmul batch extents differ: {:?} x {:?}", a.shape, b.shape))
    })?;
    let sa = broadcast_strides(&a.shape[..ra - 2], &batch);
    let sb = broadcast_strides(&b.shape[..rb - 2], &batch);
    let nb = numel(&batch);
    let mut out = vec![0.0; nb * m * n];
    let (ad, bd) = (a.data(), b.data());
    let mut pairs = Vec::with_capacity(nb);
    for_each_broadcast(&batch, &sa, &sb, |_, i, j| pairs.push((i, j)));
    for (bi, &(ia, ib)) in pairs.iter().enumerate() {
        let am = &ad[ia * a0 * a1..(ia + 1) * a0 * a1];
        let bm = &bd[ib * b0 * b1..(ib + 1) * b0 * b1];
        let om = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut om[i * n..(i + 1) * n];
            for p in 0..k {
                let av = if ta { am[p * a1 + i] } else { am[i * a1 + p] };
                if av == 0.0 {
                    continue;
                }
                if tb {
                    for (j, o) in orow.iter_mut().enumerate() {
                        *o += av * bm[j * b1 + p];
                    }
                } else {
                    let brow = &bm[p * b1..(p + 1) * b1];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
    }
    let mut shape = batch;
    shape.push(m);
    shape.push(n);
    Ok(Tensor::from_parts(shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_rejects_bad_input() {
        assert!(Tensor::new([2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::new([2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(Tensor::new([2], vec![f64::INFINITY, 0.0]).is_err());
        assert!(Tensor::new([0, 3], vec![]).is_err());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[4, 1, 3], &[5, 1]), Some(vec![4, 5, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
        assert_eq!(broadcast_shape(&[], &[2]), Some(vec![2]));
    }

    #[test]
    fn zip_and_sum_to_shape() {
        let a = Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new([3], vec![10., 20., 30.]).unwrap();
        let c = a.zip_broadcast(&b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
        assert_eq!(c.sum_to_shape(&[3]).data(), &[25., 47., 69.]);
        assert_eq!(c.sum_to_shape(&[2, 1]).data(), &[66., 75.]);
    }

    #[test]
    fn bmm_transposes() {
        let a = Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new([3, 2], vec![1., 0., 0., 1., 1., 1.]).unwrap();
        assert_eq!(bmm(&a, &b, false, false).unwrap().data(), &[4., 5., 10., 11.]);
        let at = Tensor::new([3, 2], vec![1., 4., 2., 5., 3., 6.]).unwrap();
        assert_eq!(bmm(&at, &b, true, false).unwrap().data(), &[4., 5., 10., 11.]);
        let bt = Tensor::new([2, 3], vec![1., 0., 1., 0., 1., 1.]).unwrap();
        assert_eq!(bmm(&a, &bt, false, true).unwrap().data(), &[4., 5., 10., 11.]);
    }

    #[test]
    fn bmm_broadcasts_batch() {
        let a = Tensor::new([2, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new([2, 1], vec![1., 1.]).unwrap();
        let c = bmm(&a, &b, false, false).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[3., 7.]);
    }
}
