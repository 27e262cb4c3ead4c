//! Dense 4-D tensors in row-major (N, C, H, W) layout.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::autograd::direct;
use crate::autograd::kernels::{self, ConvGeom, Tile, Workspace};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// (batch, channels, height, width).
pub type Dims = [usize; 4];

/// Floating-point element. `f32` drives training; `f64` exists for gradient checks.
pub trait Element:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    #[doc(hidden)]
    #[inline(always)]
    fn micro_kernel(a: &[Self], b: &[Self], acc: &mut Tile<Self>) {
        kernels::micro_kernel_generic(a, b, acc)
    }

    #[doc(hidden)]
    #[inline(always)]
    fn dot_4x2(a: [&[Self]; 4], b: [&[Self]; 2]) -> [[Self; 2]; 4] {
        kernels::dot_4x2_generic(a, b)
    }

    /// Convolution without a column matrix; `false` means not handled.
    #[doc(hidden)]
    fn conv_direct(_g: &ConvGeom, _x: &[Self], _w: &[Self], _out: &mut [Self], _ws: &mut Workspace<Self>) -> bool {
        false
    }

    #[doc(hidden)]
    fn conv_weight_grad(_g: &ConvGeom, _x: &[Self], _dout: &[Self], _dw: &mut [Self], _ws: &mut Workspace<Self>) -> bool {
        false
    }
}

impl Element for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn micro_kernel(a: &[Self], b: &[Self], acc: &mut Tile<Self>) {
        kernels::micro_kernel_f32(a, b, acc)
    }
    #[inline(always)]
    fn dot_4x2(a: [&[Self]; 4], b: [&[Self]; 2]) -> [[Self; 2]; 4] {
        kernels::dot_4x2_f32(a, b)
    }
    fn conv_direct(g: &ConvGeom, x: &[Self], w: &[Self], out: &mut [Self], ws: &mut Workspace<Self>) -> bool {
        direct::conv_accumulate(g, x, w, out, ws)
    }
    fn conv_weight_grad(g: &ConvGeom, x: &[Self], dout: &[Self], dw: &mut [Self], ws: &mut Workspace<Self>) -> bool {
        direct::conv_weight_grad(g, x, dout, dw, ws)
    }
}

impl Element for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Element> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("len", &self.data.len())
            .finish()
    }
}

fn flat_len(dims: Dims) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::SizeOverflow(dims))
}

impl<T: Element> Tensor<T> {
    pub fn filled(dims: Dims, value: T) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite("Tensor::filled"));
        }
        let len = flat_len(dims)?;
        Ok(Tensor {
            dims,
            data: vec![value; len],
        })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::filled(dims, T::zero())
    }

    /// Panicking zero constructor for dims already known to be valid.
    pub(crate) fn zeros_unchecked(dims: Dims) -> Self {
        Tensor {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        let len = flat_len(dims)?;
        if data.len() != len {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("{dims:?} needs {len} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    /// 1-D parameter vector stored as dims `[len, 1, 1, 1]`.
    pub fn vector(values: Vec<T>) -> Self {
        Tensor {
            dims: [values.len(), 1, 1, 1],
            data: values,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            dims: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.dims;
        ((n * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    pub fn min(&self) -> Option<T> {
        self.data.iter().copied().reduce(T::min)
    }

    pub fn max(&self) -> Option<T> {
        self.data.iter().copied().reduce(T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Surrounds every (n, c) plane with `pad` rows/columns of `value`.
    pub fn pad2d(&self, pad: usize, value: T) -> Tensor<T> {
        if pad == 0 {
            return self.clone();
        }
        let [n, c, h, w] = self.dims;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut data = vec![value; n * c * ph * pw];
        for plane in 0..n * c {
            let src = &self.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut data[plane * ph * pw..(plane + 1) * ph * pw];
            for (y, row) in src.chunks_exact(w.max(1)).enumerate().take(h) {
                let start = (y + pad) * pw + pad;
                dst[start..start + w].copy_from_slice(row);
            }
        }
        Tensor {
            dims: [n, c, ph, pw],
            data,
        }
    }

    /// Removes `pad` rows/columns from every side; inverse of [`Tensor::pad2d`].
    pub fn crop2d(&self, pad: usize) -> Result<Tensor<T>> {
        let [n, c, h, w] = self.dims;
        if 2 * pad > h || 2 * pad > w {
            return Err(Error::shape(
                "crop2d",
                format!("cannot crop {pad} from each side of {h}x{w}"),
            ));
        }
        let (oh, ow) = (h - 2 * pad, w - 2 * pad);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            for y in 0..oh {
                let start = plane * h * w + (y + pad) * w + pad;
                data.extend_from_slice(&self.data[start..start + ow]);
            }
        }
        Ok(Tensor {
            dims: [n, c, oh, ow],
            data,
        })
    }

    /// Copies image `i` of the batch into its own `[1, C, H, W]` tensor.
    pub fn batch_item(&self, i: usize) -> Tensor<T> {
        let [_, c, h, w] = self.dims;
        let per = c * h * w;
        Tensor {
            dims: [1, c, h, w],
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.dims;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            let [tn, tc, th, tw] = t.dims;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", first.dims, t.dims),
                ));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            dims: [n, c, h, w],
            data,
        })
    }
}

/// He-normal initialization: N(0, 2 / fan_in).
pub fn he_normal_init<T: Element>(dims: Dims, fan_in: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::InvalidArgument("he_normal_init: fan_in must be > 0".into()));
    }
    let len = flat_len(dims)?;
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..len).map(|_| T::of(rng.normal() * std)).collect();
    Ok(Tensor { dims, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    #[test]
    fn filled_examples() {
        let t = Tensor::<f32>::filled([1, 1, 2, 2], 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::<f32>::filled([1, 3, 1, 1], 1.5).unwrap();
        assert_eq!(t.data(), &[1.5; 3]);
        let t = Tensor::<f32>::filled([0, 1, 4, 4], 7.0).unwrap();
        assert_eq!(t.len(), 0);
        assert_eq!(t.dims(), [0, 1, 4, 4]);
    }

    #[test]
    fn filled_rejects_overflow_and_nan() {
        assert!(matches!(
            Tensor::<f32>::filled([usize::MAX, 2, 1, 1], 0.0),
            Err(Error::SizeOverflow(_))
        ));
        assert!(Tensor::<f32>::filled([1, 1, 1, 1], f32::NAN).is_err());
    }

    #[test]
    fn pad_zero_is_identity() {
        let t = Tensor::from_vec([1, 1, 2, 3], vec![1.0f32, 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.pad2d(0, 9.0), t);
    }

    #[test]
    fn pad_single_element() {
        let t = Tensor::from_vec([1, 1, 1, 1], vec![5.0f32]).unwrap();
        let p = t.pad2d(1, 0.0);
        assert_eq!(p.dims(), [1, 1, 3, 3]);
        assert_eq!(p.data(), &[0., 0., 0., 0., 5., 0., 0., 0., 0.]);
    }

    #[test]
    fn pad_ramp_with_negative_border() {
        let t = Tensor::from_vec([1, 1, 2, 2], vec![1.0f32, 2., 3., 4.]).unwrap();
        let p = t.pad2d(1, -1.0);
        assert_eq!(p.dims(), [1, 1, 4, 4]);
        // element-wise placement: interior at (1..3, 1..3), everything else -1
        for y in 0..4 {
            for x in 0..4 {
                let expected = if (1..3).contains(&y) && (1..3).contains(&x) {
                    t.at(0, 0, y - 1, x - 1)
                } else {
                    -1.0
                };
                assert_eq!(p.at(0, 0, y, x), expected, "({y},{x})");
            }
        }
    }

    #[test]
    fn he_init_mean_near_zero() {
        let mut rng = Rng::new(1);
        let t: Tensor<f64> = he_normal_init([1, 1, 100, 100], 9, &mut rng).unwrap();
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn he_init_std_fan_in_two() {
        let mut rng = Rng::new(2);
        let t: Tensor<f64> = he_normal_init([10, 10, 1000, 1], 2, &mut rng).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn he_init_deterministic_and_rejects_zero_fan_in() {
        let a: Tensor<f32> = he_normal_init([2, 3, 3, 3], 27, &mut Rng::new(9)).unwrap();
        let b: Tensor<f32> = he_normal_init([2, 3, 3, 3], 27, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(he_normal_init::<f32>([1, 1, 1, 1], 0, &mut Rng::new(0)).is_err());
    }

    proptest! {
        #[test]
        fn pad_then_crop_round_trips(
            n in 1usize..3, c in 1usize..3, h in 1usize..6, w in 1usize..6,
            pad in 0usize..4, seed in any::<u64>(),
        ) {
            let mut rng = Rng::new(seed);
            let data = (0..n * c * h * w).map(|_| rng.normal() as f32).collect();
            let t = Tensor::from_vec([n, c, h, w], data).unwrap();
            let back = t.pad2d(pad, 3.25).crop2d(pad).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn filled_min_equals_max(v in -1e6f32..1e6, h in 1usize..5, w in 1usize..5) {
            let t = Tensor::filled([1, 2, h, w], v).unwrap();
            prop_assert_eq!(t.min(), Some(v));
            prop_assert_eq!(t.max(), Some(v));
        }
    }
}
