//! Dense row-major tensors and the elementary math the rest of the crate
//! builds on.
//!
//! A [`Tensor`] is an immutable value: every op returns a fresh tensor.
//! Reductions run in a fixed left-to-right order so results are
//! reproducible bit-for-bit for a given scalar type.

mod io;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};

pub use io::{load_tensor, load_tensor_any, read_tensor, save_tensor, write_tensor, AnyTensor};

/// Element type tag stored in the binary tensor format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point scalar usable as a tensor element.
pub trait Scalar:
    Float + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const DTYPE: DType;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Raw bit pattern widened to 64 bits, used for fingerprints.
    fn bits(self) -> u64;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// Shorthand for `T::from_f64`.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x)
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{:?} [", std::any::type_name::<T>(), self.dims)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

pub(crate) fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() {
        return Err(Error::Shape("tensor rank must be at least 1".into()));
    }
    if dims.contains(&0) {
        return Err(Error::Shape(format!("dims must be positive, got {dims:?}")));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        check_dims(&dims)?;
        if numel(&dims) != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {} elements, got {}",
                numel(&dims),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    /// Construct without validation. Callers guarantee the invariant.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&dims), data.len());
        debug_assert!(!dims.is_empty());
        Self { dims, data }
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let dims = dims.into();
        check_dims(&dims)?;
        let n = numel(&dims);
        Ok(Self {
            dims,
            data: vec![value; n],
        })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let dims = dims.into();
        check_dims(&dims)?;
        let data = (0..numel(&dims)).map(&mut f).collect();
        Ok(Self { dims, data })
    }

    /// Entries drawn from uniform(-bound, bound).
    pub fn uniform<R: Rng + ?Sized>(
        dims: impl Into<Vec<usize>>,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::from_fn(dims, |_| T::from_f64(rng.gen_range(-bound..=bound)))
    }

    /// Standard normal entries via Box-Muller, so that only `rand` is needed.
    pub fn randn<R: Rng + ?Sized>(dims: impl Into<Vec<usize>>, rng: &mut R) -> Result<Self> {
        Self::from_fn(dims, |_| T::from_f64(standard_normal(rng)))
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn last_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        if index.len() != self.dims.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            if i >= d {
                return None;
            }
            flat = flat * d + i;
        }
        Some(self.data[flat])
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "item() on tensor with dims {:?}",
                self.dims
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        check_dims(&dims)?;
        if numel(&dims) != self.numel() {
            return Err(Error::dims("reshape", &self.dims, &dims));
        }
        Ok(Self {
            dims,
            data: self.data.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::dims(op, &self.dims, &other.dims));
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// Adds `bias` (length = last dim) to every row.
    pub fn add_bias(&self, bias: &Self) -> Result<Self> {
        let n = self.last_dim();
        if bias.numel() != n {
            return Err(Error::dims("add_bias", &self.dims, &bias.dims));
        }
        let data = self
            .data
            .chunks(n)
            .flat_map(|row| row.iter().zip(&bias.data).map(|(&a, &b)| a + b))
            .collect();
        Ok(Self::from_parts(self.dims.clone(), data))
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn gelu(&self) -> Self {
        self.map(gelu)
    }

    /// Sum of all entries in storage order.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.numel() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.dims != other.dims {
            return Err(Error::dims("max_abs_diff", &self.dims, &other.dims));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }

    /// Batched matrix product over the last two dims. Leading batch dims
    /// must agree or be 1 on one side. Each output entry accumulates over
    /// `k` left to right starting from zero.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let plan = MatmulPlan::new(&self.dims, &other.dims)?;
        let mut out = vec![T::zero(); plan.out_numel()];
        plan.run(&self.data, &other.data, &mut out);
        Ok(Self::from_parts(plan.out_dims.clone(), out))
    }

    /// Swaps the last two dims.
    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Shape("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let (dims, index) = permute_index(&self.dims, perm)?;
        let data = index.iter().map(|&i| self.data[i]).collect();
        Ok(Self::from_parts(dims, data))
    }

    /// Concatenates along the last dim; leading dims must match.
    pub fn concat_last(&self, other: &Self) -> Result<Self> {
        let r = self.rank();
        if r != other.rank() || self.dims[..r - 1] != other.dims[..r - 1] {
            return Err(Error::dims("concat_last", &self.dims, &other.dims));
        }
        let (a, b) = (self.last_dim(), other.last_dim());
        let mut data = Vec::with_capacity(self.numel() + other.numel());
        for (ra, rb) in self.data.chunks(a).zip(other.data.chunks(b)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut dims = self.dims.clone();
        dims[r - 1] = a + b;
        Ok(Self::from_parts(dims, data))
    }

    /// Row-wise softmax over the last dim with max subtraction. A row that is
    /// entirely `-inf` maps to all zeros.
    pub fn softmax_rows(&self) -> Result<Self> {
        if self.data.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN in softmax input".into()));
        }
        let n = self.last_dim();
        let mut data = Vec::with_capacity(self.numel());
        for row in self.data.chunks(n) {
            softmax_row_into(row, &mut data);
        }
        Ok(Self::from_parts(self.dims.clone(), data))
    }
}

pub(crate) fn softmax_row_into<T: Scalar>(row: &[T], out: &mut Vec<T>) {
    let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if m == T::neg_infinity() {
        out.extend(std::iter::repeat_n(T::zero(), row.len()));
        return;
    }
    let start = out.len();
    let mut denom = T::zero();
    for &v in row {
        let e = (v - m).exp();
        denom = denom + e;
        out.push(e);
    }
    for e in &mut out[start..] {
        *e = *e / denom;
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = lit::<T>(0.5);
    half * x * (T::one() + (x * lit::<T>(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// d/dx of [`gelu`]: Phi(x) + x * phi(x).
#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = lit::<T>(0.5);
    let cdf = half * (T::one() + (x * lit::<T>(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * lit::<T>(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Sentinel index that gathers a zero.
pub const PAD_INDEX: usize = usize::MAX;

impl<T: Scalar> Tensor<T> {
    /// `out[i] = self[index[i]]`, or zero where `index[i] == PAD_INDEX`.
    pub fn gather(&self, index: &[usize], dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        check_dims(&dims)?;
        if numel(&dims) != index.len() {
            return Err(Error::Shape(format!(
                "gather of {} indices into dims {dims:?}",
                index.len()
            )));
        }
        let n = self.numel();
        let mut data = Vec::with_capacity(index.len());
        for &i in index {
            if i == PAD_INDEX {
                data.push(T::zero());
            } else if i < n {
                data.push(self.data[i]);
            } else {
                return Err(Error::Shape(format!("gather index {i} out of range {n}")));
            }
        }
        Ok(Self::from_parts(dims, data))
    }
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Source index for every output position of a permutation.
pub(crate) fn permute_index(dims: &[usize], perm: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let r = dims.len();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Shape(format!("invalid permutation {perm:?} for dims {dims:?}")));
    }
    let mut strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let n = numel(dims);
    let mut index = Vec::with_capacity(n);
    let mut counter = vec![0usize; r];
    let mut src = 0usize;
    for _ in 0..n {
        index.push(src);
        for ax in (0..r).rev() {
            counter[ax] += 1;
            src += out_strides[ax];
            if counter[ax] < out_dims[ax] {
                break;
            }
            src -= out_strides[ax] * out_dims[ax];
            counter[ax] = 0;
        }
    }
    Ok((out_dims, index))
}

/// Shape bookkeeping shared by the eager and taped matmul.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_dims: Vec<usize>,
    /// (a batch offset, b batch offset) for each output batch.
    pub batches: Vec<(usize, usize)>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::dims("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::dims("matmul", a, b));
        }
        let ba = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let r = ba.len().max(bb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; r - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut out_batch = Vec::with_capacity(r);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x == y || y == 1 {
                out_batch.push(x);
            } else if x == 1 {
                out_batch.push(y);
            } else {
                return Err(Error::dims("matmul", a, b));
            }
        }
        let strides = |s: &[usize], unit: usize| -> Vec<usize> {
            let mut st = vec![0; r];
            let mut acc = unit;
            for i in (0..r).rev() {
                st[i] = if s[i] == 1 { 0 } else { acc };
                acc *= s[i];
            }
            st
        };
        let (sa, sb) = (strides(&pa, m * k), strides(&pb, k * n));
        let nb = numel(&out_batch);
        let mut batches = Vec::with_capacity(nb);
        for flat in 0..nb {
            let mut rem = flat;
            let (mut oa, mut ob) = (0, 0);
            for i in (0..r).rev() {
                let idx = rem % out_batch[i];
                rem /= out_batch[i];
                oa += idx * sa[i];
                ob += idx * sb[i];
            }
            batches.push((oa, ob));
        }
        let mut out_dims = out_batch;
        out_dims.push(m);
        out_dims.push(n);
        Ok(Self {
            m,
            k,
            n,
            out_dims,
            batches,
        })
    }

    pub fn out_numel(&self) -> usize {
        self.batches.len() * self.m * self.n
    }

    pub fn run<T: Scalar>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for (bi, &(oa, ob)) in self.batches.iter().enumerate() {
            let o = &mut out[bi * m * n..(bi + 1) * m * n];
            let a = &a[oa..oa + m * k];
            let b = &b[ob..ob + k * n];
            // i-p-j order: every out[i][j] still accumulates p = 0, 1, .. in sequence
            for i in 0..m {
                let orow = &mut o[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    let brow = &b[p * n..(p + 1) * n];
                    for (ov, &bv) in orow.iter_mut().zip(brow) {
                        *ov = *ov + av * bv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    fn triple_loop(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
        let (m, k) = (a.dims()[0], a.dims()[1]);
        let n = b.dims()[1];
        let mut out = vec![0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0f32;
                for p in 0..k {
                    s += a.as_slice()[i * k + p] * b.as_slice()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        assert_eq!(id.matmul(&b).unwrap(), b);
        let r = t(&[1, 2], &[1., 2.]).matmul(&t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.as_slice(), &[11.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f32>::randn([7, 5], &mut rng).unwrap();
        let b = Tensor::<f32>::randn([5, 3], &mut rng).unwrap();
        let got = a.matmul(&b).unwrap();
        let want = triple_loop(&a, &b);
        for (g, w) in got.as_slice().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-6);
        }
    }

    #[test]
    fn matmul_broadcasts_batch_of_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::randn([3, 4, 2], &mut rng).unwrap();
        let w = Tensor::<f64>::randn([2, 5], &mut rng).unwrap();
        let out = a.matmul(&w).unwrap();
        assert_eq!(out.dims(), &[3, 4, 5]);
        let second = Tensor::new([4, 2], a.as_slice()[8..16].to_vec()).unwrap();
        assert_eq!(&out.as_slice()[20..40], second.matmul(&w).unwrap().as_slice());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros([2, 3]).unwrap();
        let b = Tensor::<f32>::zeros([4, 2]).unwrap();
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[4], &[0., 0., 0., 0.]).softmax_rows().unwrap();
        assert_eq!(s.as_slice(), &[0.25; 4]);
        let s = t(&[2], &[1000., 1000.]).softmax_rows().unwrap();
        assert_eq!(s.as_slice(), &[0.5, 0.5]);
        let s = t(&[3], &[0., f64::NEG_INFINITY, 0.]).softmax_rows().unwrap();
        assert_eq!(s.as_slice(), &[0.5, 0., 0.5]);
        let s = t(&[2], &[f64::NEG_INFINITY; 2]).softmax_rows().unwrap();
        assert_eq!(s.as_slice(), &[0., 0.]);
        assert!(matches!(
            t(&[2], &[0., f64::NAN]).softmax_rows(),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn constructor_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f32>::zeros([0, 2]).is_err());
    }

    #[test]
    fn elementwise_ops_match_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f32>::randn([4, 6], &mut rng).unwrap();
        let b = Tensor::<f32>::randn([4, 6], &mut rng).unwrap();
        let add = a.add(&b).unwrap();
        let mul = a.mul(&b).unwrap();
        let relu = a.relu();
        let sig = a.sigmoid();
        for i in 0..a.numel() {
            let (x, y) = (a.as_slice()[i], b.as_slice()[i]);
            assert_eq!(add.as_slice()[i], x + y);
            assert_eq!(mul.as_slice()[i], x * y);
            assert_eq!(relu.as_slice()[i], if x > 0.0 { x } else { 0.0 });
            let s = if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                x.exp() / (1.0 + x.exp())
            };
            assert_eq!(sig.as_slice()[i], s);
        }
        assert!(a.add(&Tensor::zeros([6, 4]).unwrap()).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::<f64>::from_fn([2, 3, 4], |i| i as f64).unwrap();
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.dims(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]), x.get(&[1, 2, 3]));
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back, x);
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols)
    }

    proptest! {
        #[test]
        fn matmul_is_associative(
            (m, k, l, n) in (1usize..5, 1usize..5, 1usize..5, 1usize..5),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f64>::randn([m, k], &mut rng).unwrap();
            let b = Tensor::<f64>::randn([k, l], &mut rng).unwrap();
            let c = Tensor::<f64>::randn([l, n], &mut rng).unwrap();
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-10);

            let (a32, b32, c32) = (a.cast::<f32>(), b.cast::<f32>(), c.cast::<f32>());
            let l32 = a32.matmul(&b32).unwrap().matmul(&c32).unwrap();
            let r32 = a32.matmul(&b32.matmul(&c32).unwrap()).unwrap();
            let scale = l32.max_abs().max(1.0);
            prop_assert!(l32.max_abs_diff(&r32).unwrap() <= 1e-4 * scale);
        }

        #[test]
        fn softmax_is_permutation_equivariant(row in small_matrix(1, 6), shift in 0usize..6) {
            let x = Tensor::new([6], row.clone()).unwrap();
            let mut rotated = row.clone();
            rotated.rotate_left(shift);
            let sx = x.softmax_rows().unwrap();
            let sr = Tensor::new([6], rotated).unwrap().softmax_rows().unwrap();
            let mut expect = sx.as_slice().to_vec();
            expect.rotate_left(shift);
            for (a, b) in sr.as_slice().iter().zip(&expect) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
            prop_assert!((sx.sum() - 1.0).abs() <= 1e-6);
        }
    }
}
