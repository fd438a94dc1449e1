//! Dense row-major tensors and the pure kernels every other module builds on.
//!
//! Values are always held as `f64`. A tensor tagged [`DType::F32`] keeps its
//! values rounded to single precision after every kernel, which is enough to
//! model float32 storage without a second code path.

use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dtype: DType,
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(Error::shape("tensor must have at least one dimension"));
    }
    if dims.contains(&0) {
        return Err(Error::shape(format!("zero extent in dims {dims:?}")));
    }
    Ok(dims.iter().product())
}

fn round_f32(data: &mut [f64]) {
    for v in data {
        *v = *v as f32 as f64;
    }
}

pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_dims(dims)?;
        if data.len() != n {
            return Err(Error::shape(format!(
                "data length {} does not match dims {dims:?} (expected {n})",
                data.len()
            )));
        }
        Ok(Self {
            dtype: DType::F64,
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n = check_dims(dims)?;
        Self::new(dims, (0..n).map(&mut f).collect())
    }

    pub fn full(dims: &[usize], value: f64) -> Result<Self> {
        Self::from_fn(dims, |_| value)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn vector(values: &[f64]) -> Self {
        Self {
            dtype: DType::F64,
            dims: vec![values.len().max(1)],
            data: if values.is_empty() {
                vec![0.0]
            } else {
                values.to_vec()
            },
        }
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    /// Values drawn uniformly from `[lo, hi)` in row-major order.
    pub fn uniform(dims: &[usize], rng: &mut RngState, lo: f64, hi: f64) -> Result<Self> {
        Self::from_fn(dims, |_| rng.uniform(lo, hi))
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn to_dtype(&self, dtype: DType) -> Self {
        let mut out = self.clone();
        out.dtype = dtype;
        if dtype == DType::F32 {
            round_f32(&mut out.data);
        }
        out
    }

    /// Result tensor carrying `like`'s dtype.
    pub(crate) fn derived(dims: Vec<usize>, mut data: Vec<f64>, like: DType) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        if like == DType::F32 {
            round_f32(&mut data);
        }
        Self {
            dtype: like,
            dims,
            data,
        }
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        idx.iter()
            .zip(strides(&self.dims))
            .map(|(i, s)| i * s)
            .sum()
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let i = self.flat_index(idx);
        self.data[i] = v;
    }

    /// Bit-level equality of dims, dtype and payload.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dtype == other.dtype
            && self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::derived(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect(), self.dtype)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    // ---- elementwise -------------------------------------------------------

    pub fn elementwise(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims != b.dims {
            return Err(Error::shape(format!(
                "elementwise {op:?} on mismatched dims {:?} and {:?}",
                a.dims, b.dims
            )));
        }
        if a.dtype != b.dtype {
            return Err(Error::shape(format!(
                "elementwise {op:?} on mixed dtypes {:?} and {:?}",
                a.dtype, b.dtype
            )));
        }
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
        };
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::derived(a.dims.clone(), data, a.dtype))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::elementwise(BinaryOp::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::elementwise(BinaryOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::elementwise(BinaryOp::Mul, self, other)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        let (m, p) = (self.dims[0], self.dims[1]);
        let (p2, n) = (other.dims[0], other.dims[1]);
        if p != p2 {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.dims, other.dims
            )));
        }
        if self.dtype != other.dtype {
            return Err(Error::shape("matmul on mixed dtypes"));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * p..(i + 1) * p];
            let acc = &mut out[i * n..(i + 1) * n];
            for (t, &a) in row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[t * n..(t + 1) * n];
                for (o, &b) in acc.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::derived(vec![m, n], out, self.dtype))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape(format!("transpose needs rank 2, got {:?}", self.dims)));
        }
        self.permute(&[1, 0])
    }

    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        if !self.is_finite() {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let n = *self.dims.last().expect("rank >= 1");
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(Tensor::derived(self.dims.clone(), out, self.dtype))
    }

    /// Vector-Jacobian product of softmax given its output `y`.
    pub(crate) fn softmax_backward(y: &Tensor, grad: &Tensor) -> Tensor {
        let n = *y.dims.last().unwrap();
        let mut out = vec![0.0; y.numel()];
        for ((o, yr), gr) in out
            .chunks_mut(n)
            .zip(y.data.chunks(n))
            .zip(grad.data.chunks(n))
        {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for ((oi, &yi), &gi) in o.iter_mut().zip(yr).zip(gr) {
                *oi = yi * (gi - dot);
            }
        }
        Tensor::derived(y.dims.clone(), out, y.dtype)
    }

    // ---- structural --------------------------------------------------------

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let n = check_dims(dims)?;
        if n != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {dims:?} ({n} elements)",
                self.dims,
                self.numel()
            )));
        }
        Ok(Tensor {
            dtype: self.dtype,
            dims: dims.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r
            || axes.iter().any(|&a| {
                a >= r || std::mem::replace(&mut seen[a], true)
            })
        {
            return Err(Error::shape(format!(
                "{axes:?} is not a permutation of the axes of {:?}",
                self.dims
            )));
        }
        let out_dims: Vec<usize> = axes.iter().map(|&a| self.dims[a]).collect();
        let in_strides = strides(&self.dims);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.numel();
        let mut out = Vec::with_capacity(n);
        let mut idx = vec![0usize; r];
        let mut src = 0usize;
        for _ in 0..n {
            out.push(self.data[src]);
            // odometer increment over output indices
            for ax in (0..r).rev() {
                idx[ax] += 1;
                src += src_strides[ax];
                if idx[ax] < out_dims[ax] {
                    break;
                }
                src -= src_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor::derived(out_dims, out, self.dtype))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        if axis >= first.rank() {
            return Err(Error::shape(format!(
                "concat axis {axis} out of range for {:?}",
                first.dims
            )));
        }
        for p in parts {
            let agree = p.rank() == first.rank()
                && p.dims
                    .iter()
                    .zip(&first.dims)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !agree {
                return Err(Error::shape(format!(
                    "concat on axis {axis}: {:?} incompatible with {:?}",
                    p.dims, first.dims
                )));
            }
        }
        let outer: usize = first.dims[..axis].iter().product();
        let inner: usize = first.dims[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.dims[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.dims[axis] * inner;
                out.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        let mut dims = first.dims.clone();
        dims[axis] = total_axis;
        Ok(Tensor::derived(dims, out, first.dtype))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || len == 0 || start + len > self.dims[axis] {
            return Err(Error::shape(format!(
                "slice [{start}, {}) on axis {axis} out of range for {:?}",
                start + len,
                self.dims
            )));
        }
        let outer: usize = self.dims[..axis].iter().product();
        let inner: usize = self.dims[axis + 1..].iter().product();
        let block = self.dims[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * block + start * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut dims = self.dims.clone();
        dims[axis] = len;
        Ok(Tensor::derived(dims, out, self.dtype))
    }

    /// Adjoint of [`Tensor::slice`]: embeds `part` into zeros of `full_dims`.
    pub(crate) fn unslice(part: &Tensor, full_dims: &[usize], axis: usize, start: usize) -> Tensor {
        let outer: usize = full_dims[..axis].iter().product();
        let inner: usize = full_dims[axis + 1..].iter().product();
        let len = part.dims[axis];
        let block = full_dims[axis] * inner;
        let mut out = vec![0.0; full_dims.iter().product()];
        for o in 0..outer {
            let base = o * block + start * inner;
            out[base..base + len * inner]
                .copy_from_slice(&part.data[o * len * inner..(o + 1) * len * inner]);
        }
        Tensor::derived(full_dims.to_vec(), out, part.dtype)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::shape(format!(
                "reduce axis {axis} out of range for {:?}",
                self.dims
            )));
        }
        let outer: usize = self.dims[..axis].iter().product();
        let n = self.dims[axis];
        let inner: usize = self.dims[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let acc = &mut out[o * inner..(o + 1) * inner];
            for k in 0..n {
                let src = &self.data[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (a, s) in acc.iter_mut().zip(src) {
                    *a += s;
                }
            }
            for a in acc.iter_mut() {
                *a /= n as f64;
            }
        }
        let mut dims: Vec<usize> = self.dims.clone();
        dims.remove(axis);
        if dims.is_empty() {
            dims.push(1);
        }
        Ok(Tensor::derived(dims, out, self.dtype))
    }

    /// Rows of a tensor viewed as `[dims[0], rest]`, selected in `indices` order.
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor> {
        let rows = self.dims[0];
        let row_len = self.numel() / rows;
        let mut out = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index(format!("row index {i} out of range 0..{rows}")));
            }
            out.extend_from_slice(&self.data[i * row_len..(i + 1) * row_len]);
        }
        let mut dims = self.dims.clone();
        dims[0] = indices.len();
        if indices.is_empty() {
            return Err(Error::Index("index_select with no indices".into()));
        }
        Ok(Tensor::derived(dims, out, self.dtype))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(dims: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(dims, &mut RngState::new(seed), -1.0, 1.0).unwrap()
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(Tensor::new(&[], vec![]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn add_small() {
        let a = Tensor::vector(&[1.0, 2.0]);
        let b = Tensor::vector(&[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn sub_self_is_zero() {
        let x = rand(&[3, 5], 1);
        let z = x.sub(&x).unwrap();
        assert_eq!(z.dims(), x.dims());
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mul_matches_double_loop() {
        let a = rand(&[3, 4], 2);
        let b = rand(&[3, 4], 3);
        let c = a.mul(&b).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(c.at(&[i, j]), a.at(&[i, j]) * b.at(&[i, j]));
            }
        }
    }

    #[test]
    fn elementwise_shape_error_names_dims() {
        let err = rand(&[2, 3], 0).add(&rand(&[3, 2], 0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn matmul_identity_and_zero() {
        let b = rand(&[3, 4], 4);
        let i3 = Tensor::identity(3).unwrap();
        assert!(i3.matmul(&b).unwrap().bit_eq(&b));
        let z = Tensor::zeros(&[2, 3]).unwrap().matmul(&b).unwrap();
        assert_eq!(z.dims(), &[2, 4]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = rand(&[4, 5], 5);
        let b = rand(&[5, 3], 6);
        let c = a.matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for t in 0..5 {
                    s += a.at(&[i, t]) * b.at(&[t, j]);
                }
                assert!((c.at(&[i, j]) - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn matmul_errors() {
        assert!(rand(&[2, 3], 0).matmul(&rand(&[2, 3], 0)).is_err());
        assert!(rand(&[6], 0).matmul(&rand(&[6, 1], 0)).is_err());
    }

    #[test]
    fn softmax_uniform_and_shift() {
        let s = Tensor::vector(&[0.0, 0.0, 0.0]).softmax_lastdim().unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = rand(&[2, 6], 7);
        let shifted = x.map(|v| v + 12.5);
        let d = x
            .softmax_lastdim()
            .unwrap()
            .max_abs_diff(&shifted.softmax_lastdim().unwrap());
        assert!(d < 1e-14);
    }

    #[test]
    fn softmax_matches_exp_sum() {
        let x = rand(&[7], 8);
        let s = x.softmax_lastdim().unwrap();
        let total: f64 = x.data().iter().map(|v| v.exp()).sum();
        for (si, xi) in s.data().iter().zip(x.data()) {
            assert!((si - xi.exp() / total).abs() <= 1e-12);
        }
        assert!((s.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::vector(&[0.0, f64::NAN]);
        assert!(matches!(x.softmax_lastdim(), Err(Error::Numeric(_))));
    }

    #[test]
    fn reshape_round_trip() {
        let x = rand(&[2, 3], 9);
        let y = x.reshape(&[3, 2]).unwrap().reshape(&[2, 3]).unwrap();
        assert!(x.bit_eq(&y));
        assert!(x.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn permute_inverse() {
        let x = rand(&[3, 4, 5], 10);
        let y = x.permute(&[1, 2, 0]).unwrap();
        assert_eq!(y.dims(), &[4, 5, 3]);
        assert_eq!(y.at(&[2, 3, 1]), x.at(&[1, 2, 3]));
        let back = y.permute(&[2, 0, 1]).unwrap();
        assert!(x.bit_eq(&back));
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_matches_index_map() {
        let a = rand(&[2, 3], 11);
        let b = rand(&[2, 5], 12);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.dims(), &[2, 8]);
        for i in 0..2 {
            for j in 0..8 {
                let expect = if j < 3 { a.at(&[i, j]) } else { b.at(&[i, j - 3]) };
                assert_eq!(c.at(&[i, j]), expect);
            }
        }
        assert!(Tensor::concat(&[&a, &rand(&[3, 3], 0)], 1).is_err());
    }

    #[test]
    fn slice_and_unslice() {
        let x = rand(&[3, 4, 2], 13);
        let s = x.slice(1, 1, 2).unwrap();
        assert_eq!(s.dims(), &[3, 2, 2]);
        assert_eq!(s.at(&[2, 1, 1]), x.at(&[2, 2, 1]));
        let u = Tensor::unslice(&s, x.dims(), 1, 1);
        assert_eq!(u.at(&[2, 2, 1]), x.at(&[2, 2, 1]));
        assert_eq!(u.at(&[2, 0, 1]), 0.0);
        assert!(x.slice(1, 3, 2).is_err());
    }

    #[test]
    fn mean_axis_cases() {
        let c = Tensor::full(&[3, 4], 2.5).unwrap().mean_axis(0).unwrap();
        assert!(c.data().iter().all(|&v| v == 2.5));
        let m = Tensor::new(&[2, 2], vec![1.0, 3.0, 5.0, 7.0])
            .unwrap()
            .mean_axis(1)
            .unwrap();
        assert_eq!(m.data(), &[2.0, 6.0]);
        let x = rand(&[4, 6], 14);
        let m = x.mean_axis(1).unwrap();
        for i in 0..4 {
            let mut s = 0.0;
            for j in 0..6 {
                s += x.at(&[i, j]);
            }
            assert!((m.at(&[i]) - s / 6.0).abs() <= 1e-14);
        }
        assert!(x.mean_axis(2).is_err());
    }

    #[test]
    fn relu_cases() {
        let r = Tensor::vector(&[-1.0, 0.0, 2.0]).relu();
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let x = rand(&[5, 5], 15);
        assert!(x.relu().relu().bit_eq(&x.relu()));
        for (a, b) in x.relu().data().iter().zip(x.data()) {
            assert_eq!(*a, if *b > 0.0 { *b } else { 0.0 });
        }
    }

    #[test]
    fn f32_tag_rounds() {
        let x = Tensor::vector(&[0.1, 1.0 / 3.0]).to_dtype(DType::F32);
        assert_eq!(x.data()[0], 0.1f32 as f64);
        let y = x.add(&x).unwrap();
        assert_eq!(y.dtype(), DType::F32);
        assert!(x.add(&Tensor::vector(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn index_select_rows() {
        let x = rand(&[4, 2, 3], 16);
        let g = x.index_select(&[3, 0]).unwrap();
        assert_eq!(g.dims(), &[2, 2, 3]);
        assert_eq!(g.at(&[0, 1, 2]), x.at(&[3, 1, 2]));
        assert!(matches!(x.index_select(&[4]), Err(Error::Index(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..8) {
                let n = vals.len() / cols * cols;
                prop_assume!(n > 0);
                let x = Tensor::new(&[n / cols, cols], vals[..n].to_vec()).unwrap();
                let s = x.softmax_lastdim().unwrap();
                for row in s.data().chunks(cols) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                }
            }

            #[test]
            fn permute_round_trip(seed in any::<u64>(), a in 1usize..5, b in 1usize..5, c in 1usize..5) {
                let x = Tensor::uniform(&[a, b, c], &mut RngState::new(seed), -1.0, 1.0).unwrap();
                let y = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
                prop_assert!(x.bit_eq(&y));
                let z = x.reshape(&[a * b * c]).unwrap().reshape(&[a, b, c]).unwrap();
                prop_assert!(x.bit_eq(&z));
            }
        }
    }
}
