//! Dense row-major arrays of `f64` or `Complex64`.

use num_complex::Complex64;

use crate::error::{AutodiffError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Real,
    Complex,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

impl Storage {
    pub fn len(&self) -> usize {
        match self {
            Storage::Real(v) => v.len(),
            Storage::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            Storage::Real(_) => Dtype::Real,
            Storage::Complex(_) => Dtype::Complex,
        }
    }
}

/// An n-dimensional array. `product(shape) == buffer length` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Storage,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, storage: Storage) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != storage.len() {
            return Err(AutodiffError::BadBuffer {
                shape,
                len: storage.len(),
            });
        }
        Ok(Self { shape, storage })
    }

    pub fn real(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, Storage::Real(data))
    }

    pub fn complex(shape: Vec<usize>, data: Vec<Complex64>) -> Result<Self> {
        Self::new(shape, Storage::Complex(data))
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            storage: Storage::Real(vec![v]),
        }
    }

    pub fn zeros(shape: &[usize], dtype: Dtype) -> Self {
        let n = shape.iter().product();
        let storage = match dtype {
            Dtype::Real => Storage::Real(vec![0.0; n]),
            Dtype::Complex => Storage::Complex(vec![Complex64::new(0.0, 0.0); n]),
        };
        Self {
            shape: shape.to_vec(),
            storage,
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            storage: Storage::Real(vec![v; shape.iter().product()]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.storage.len()
    }

    pub fn dtype(&self) -> Dtype {
        self.storage.dtype()
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn into_storage(self) -> Storage {
        self.storage
    }

    pub fn as_real(&self) -> Option<&[f64]> {
        match &self.storage {
            Storage::Real(v) => Some(v),
            Storage::Complex(_) => None,
        }
    }

    pub fn as_complex(&self) -> Option<&[Complex64]> {
        match &self.storage {
            Storage::Complex(v) => Some(v),
            Storage::Real(_) => None,
        }
    }

    pub fn as_real_mut(&mut self) -> Option<&mut [f64]> {
        match &mut self.storage {
            Storage::Real(v) => Some(v),
            Storage::Complex(_) => None,
        }
    }

    pub fn as_complex_mut(&mut self) -> Option<&mut [Complex64]> {
        match &mut self.storage {
            Storage::Complex(v) => Some(v),
            Storage::Real(_) => None,
        }
    }

    /// Real buffer; panics on a complex tensor. Used where dtype was checked upstream.
    pub(crate) fn re(&self) -> &[f64] {
        self.as_real().expect("real tensor expected")
    }

    pub(crate) fn cx(&self) -> &[Complex64] {
        self.as_complex().expect("complex tensor expected")
    }

    /// Value of a one-element real tensor.
    pub fn item(&self) -> Option<f64> {
        match &self.storage {
            Storage::Real(v) if v.len() == 1 => Some(v[0]),
            _ => None,
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        match &self.storage {
            Storage::Real(v) => v.iter().all(|x| x.is_finite()),
            Storage::Complex(v) => v.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
        }
    }

    /// In-place `self += other` for equal shapes and dtypes.
    pub(crate) fn accumulate(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        match (&mut self.storage, &other.storage) {
            (Storage::Real(a), Storage::Real(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y;
                }
            }
            (Storage::Complex(a), Storage::Complex(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y;
                }
            }
            _ => panic!("accumulate: dtype mismatch"),
        }
    }

    pub(crate) fn map_real(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            storage: Storage::Real(self.re().iter().map(|&x| f(x)).collect()),
        }
    }

    pub(crate) fn map_complex(&self, f: impl Fn(Complex64) -> Complex64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            storage: Storage::Complex(self.cx().iter().map(|&x| f(x)).collect()),
        }
    }

    pub(crate) fn from_real(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            storage: Storage::Real(data),
        }
    }

    pub(crate) fn from_complex(shape: Vec<usize>, data: Vec<Complex64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            storage: Storage::Complex(data),
        }
    }
}

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (rank-aligned), zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out` in row-major order.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if na == total && nb == total {
        for i in 0..total {
            f(i, i, i);
        }
        return;
    }
    if na == total && nb == 1 {
        for i in 0..total {
            f(i, i, 0);
        }
        return;
    }
    if na == 1 && nb == total {
        for i in 0..total {
            f(i, 0, i);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    loop {
        let mut ia: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let mut ib: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // odometer over all but the innermost axis
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary<T: Copy, U: Copy + Default>(
    a: &[T],
    sa: &[usize],
    b: &[T],
    sb: &[usize],
    out: &[usize],
    f: impl Fn(T, T) -> U,
) -> Vec<U> {
    let mut res = vec![U::default(); out.iter().product()];
    for_each_broadcast(out, sa, sb, |o, ia, ib| res[o] = f(a[ia], b[ib]));
    res
}

/// Sums `grad` (laid out as `out`) down to `target`, the inverse of broadcasting.
pub(crate) fn reduce_to<T: Copy + Default + std::ops::AddAssign>(
    grad: &[T],
    out: &[usize],
    target: &[usize],
) -> Vec<T> {
    let n: usize = target.iter().product();
    if n == grad.len() {
        return grad.to_vec();
    }
    let mut res = vec![T::default(); n];
    for_each_broadcast(out, target, out, |o, it, _| res[it] += grad[o]);
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[3, 1], &[4]).unwrap(), vec![3, 4]);
        assert_eq!(broadcast_shape("t", &[], &[2, 2]).unwrap(), vec![2, 2]);
        assert!(broadcast_shape("t", &[3], &[4]).is_err());
    }

    #[test]
    fn broadcast_binary_matches_manual() {
        let a = [1.0, 2.0, 3.0];
        let b = [10.0, 20.0];
        let out = broadcast_binary(&a, &[3, 1], &b, &[2], &[3, 2], |x, y| x + y);
        assert_eq!(out, vec![11.0, 21.0, 12.0, 22.0, 13.0, 23.0]);
        let back = reduce_to(&out, &[3, 2], &[2]);
        assert_eq!(back, vec![36.0, 66.0]);
        let back = reduce_to(&out, &[3, 2], &[3, 1]);
        assert_eq!(back, vec![32.0, 34.0, 36.0]);
    }

    #[test]
    fn bad_buffer_rejected() {
        assert!(Tensor::real(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
