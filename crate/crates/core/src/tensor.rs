//! Dense row-major tensors and the scalar abstraction shared by the numeric
//! stack.
//!
//! Networks train in `f32`; gradient verification runs the same code in `f64`
//! so finite differences are meaningful. The [`Scalar`] trait is the pivot:
//! everything downstream (graph, layers, losses) is generic over it, and the
//! matrix-multiply backend is dispatched per concrete type.

use crate::error::{Error, Result};

/// Floating-point element type usable throughout the numeric stack.
///
/// Adds to `num_traits::Float` the two things the stack needs: a GEMM kernel
/// and explicit f64 conversions (checkpoints store f32; accumulators and
/// metrics run in f64).
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + std::iter::Sum + Send + Sync + 'static
{
    /// `c := alpha * a·b + beta * c` with arbitrary strides.
    ///
    /// `a` is m×k with strides (rsa, csa), `b` is k×n with (rsb, csb), `c` is
    /// m×n with (rsc, csc); strides are in elements. The stride generality is
    /// what lets convolution backward express transposed operands without
    /// materializing them.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        // Safety: callers pass buffers sized for the (m, k, n) problem with
        // the given strides; debug assertions in `gemm` verify the extents.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Row-major contiguous dense matrix product over slices:
/// `c[m×n] := alpha * a[m×k] · b[k×n] + beta * c`.
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, alpha: T, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    T::gemm_strided(m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1);
}

/// Dense n-dimensional array, row-major, contiguous.
///
/// Feature maps use the layout `[channels, height, width]`; scalars are rank-1
/// tensors of length 1. Shapes are dynamic because the networks mix ranks
/// (images, label-probability volumes, per-pixel stat maps, loss scalars).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Channel count of a `[C, H, W]` tensor.
    pub fn channels(&self) -> usize {
        debug_assert_eq!(self.rank(), 3);
        self.shape[0]
    }

    /// Height of a `[C, H, W]` tensor.
    pub fn height(&self) -> usize {
        debug_assert_eq!(self.rank(), 3);
        self.shape[1]
    }

    /// Width of a `[C, H, W]` tensor.
    pub fn width(&self) -> usize {
        debug_assert_eq!(self.rank(), 3);
        self.shape[2]
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: T) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        same_shape(self, other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Values clamped into `[0, 1]` — the inference-time output convention.
    pub fn clipped01(&self) -> Self {
        self.map(|v| num_traits::clamp(v, T::zero(), T::one()))
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy element-type conversion (f32 storage ↔ f64 verification builds).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    /// Spatial crop of a `[C, H, W]` tensor: `crop_h × crop_w` starting at
    /// `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, crop_h: usize, crop_w: usize) -> Result<Tensor<T>> {
        debug_assert_eq!(self.rank(), 3);
        let (c, h, w) = (self.channels(), self.height(), self.width());
        if y0 + crop_h > h || x0 + crop_w > w {
            return Err(Error::Shape(format!(
                "crop {crop_h}x{crop_w}@({y0},{x0}) exceeds {h}x{w}"
            )));
        }
        let mut data = Vec::with_capacity(c * crop_h * crop_w);
        for ch in 0..c {
            for y in 0..crop_h {
                let start = (ch * h + y0 + y) * w + x0;
                data.extend_from_slice(&self.data[start..start + crop_w]);
            }
        }
        Ok(Tensor {
            shape: vec![c, crop_h, crop_w],
            data,
        })
    }
}

/// Errors unless the two tensors have identical shapes.
pub fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "expected matching shapes, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn chw_indexing_roundtrip() {
        let mut t = Tensor::<f32>::zeros(&[2, 3, 4]);
        t.set3(1, 2, 3, 7.5);
        assert_eq!(t.at3(1, 2, 3), 7.5);
        assert_eq!(t.data()[(1 * 3 + 2) * 4 + 3], 7.5);
    }

    #[test]
    fn clipping_clamps_into_unit_interval() {
        let t = Tensor::<f32>::from_vec(&[4], vec![-0.5, 0.25, 0.75, 1.5]).unwrap();
        assert_eq!(t.clipped01().data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn gemm_matches_hand_product() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        gemm(2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_transposed_operand_via_strides() {
        // aᵀ·b where a is stored 2×3 row-major; pass a with swapped strides.
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [1.0f64, 0.0, 0.0, 1.0]; // 2×2 identity
        let mut c = [0.0f64; 6]; // 3×2
        f64::gemm_strided(3, 2, 2, 1.0, &a, 1, 3, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn cast_roundtrips_exact_small_values() {
        let t = Tensor::<f32>::from_vec(&[3], vec![0.5, -1.25, 3.0]).unwrap();
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert_eq!(t, back);
    }
}
