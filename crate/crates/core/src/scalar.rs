//! Floating-point element types the engine is generic over.
//!
//! `f32` is the training type and dispatches dense products to an optimized
//! SGEMM. `f64` is the verification type: its products run through a plain
//! in-order kernel so results are reproducible term-for-term against loop
//! oracles.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::distributions::uniform::SampleUniform;

/// Element type tag used by the on-disk formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U64 = 2,
    U8 = 3,
}

impl DType {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U64),
            3 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::U64 => 8,
            DType::U8 => 1,
        }
    }
}

/// Strided view of a row-major-ish matrix operand: element (r, c) lives at
/// `data[r * row_stride + c * col_stride]`.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// The transpose of a row-major `rows x cols` buffer, viewed as `cols x rows`.
    pub fn transposed(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef { data, rows: cols, cols: rows, row_stride: 1, col_stride: cols }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
        }
    }
}

/// Real scalar usable by every tensor kernel.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + SampleUniform
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c = a * b` (or `c += a * b` when `accumulate`), with `c` described by
    /// its own strides. Dimensions must already agree.
    fn gemm(a: MatRef<'_, Self>, b: MatRef<'_, Self>, c: &mut [Self], rsc: usize, csc: usize, accumulate: bool);

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

fn check_gemm_bounds<T>(a: &MatRef<'_, T>, b: &MatRef<'_, T>, c_len: usize, rsc: usize, csc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.rows == 0 || a.cols == 0 || a.max_index() < a.data.len(), "gemm: lhs out of bounds");
    assert!(b.rows == 0 || b.cols == 0 || b.max_index() < b.data.len(), "gemm: rhs out of bounds");
    if a.rows > 0 && b.cols > 0 {
        assert!((a.rows - 1) * rsc + (b.cols - 1) * csc < c_len, "gemm: output out of bounds");
    }
}

/// In-order reference product. For each output element the sum runs over the
/// inner index from 0 upwards, starting from zero (or the prior value of `c`
/// when accumulating), with separate multiply and add.
pub fn reference_gemm<T: Scalar>(
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    rsc: usize,
    csc: usize,
    accumulate: bool,
) {
    check_gemm_bounds(&a, &b, c.len(), rsc, csc);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    for i in 0..m {
        if !accumulate {
            for j in 0..n {
                c[i * rsc + j * csc] = T::zero();
            }
        }
        for p in 0..k {
            let aip = a.data[i * a.row_stride + p * a.col_stride];
            let brow = p * b.row_stride;
            for j in 0..n {
                let prod = aip * b.data[brow + j * b.col_stride];
                c[i * rsc + j * csc] += prod;
            }
        }
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn gemm(a: MatRef<'_, f32>, b: MatRef<'_, f32>, c: &mut [f32], rsc: usize, csc: usize, accumulate: bool) {
        check_gemm_bounds(&a, &b, c.len(), rsc, csc);
        let (m, k, n) = (a.rows, a.cols, b.cols);
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            if !accumulate {
                for i in 0..m {
                    for j in 0..n {
                        c[i * rsc + j * csc] = 0.0;
                    }
                }
            }
            return;
        }
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: bounds of all three operands were checked above against
        // their strides and dimensions.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                a.row_stride as isize,
                a.col_stride as isize,
                b.data.as_ptr(),
                b.row_stride as isize,
                b.col_stride as isize,
                beta,
                c.as_mut_ptr(),
                rsc as isize,
                csc as isize,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn gemm(a: MatRef<'_, f64>, b: MatRef<'_, f64>, c: &mut [f64], rsc: usize, csc: usize, accumulate: bool) {
        reference_gemm(a, b, c, rsc, csc, accumulate);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}
