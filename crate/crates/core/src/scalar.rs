//! Floating-point element types supported by the kernels.
//!
//! Training runs in `f32`; `f64` exists for gradient verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

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

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(format!("unknown dtype '{other}' (expected f32 or f64)")),
        }
    }
}

/// Matrix layout descriptor for [`Scalar::gemm`]: `(rows, cols, row_stride, col_stride)`.
#[derive(Debug, Clone, Copy)]
pub struct MatRef {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatRef {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `cols x rows` matrix.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rs: 1,
            cs: rows as isize,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    /// `c <- alpha * a * b + beta * c` on strided matrices.
    fn gemm_raw(alpha: Self, a: &[Self], la: MatRef, b: &[Self], lb: MatRef, beta: Self, c: &mut [Self], lc: MatRef);

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable")
    }
}

fn check_gemm(la: MatRef, lb: MatRef, lc: MatRef, na: usize, nb: usize, nc: usize) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimension");
    assert_eq!(la.rows, lc.rows, "gemm output rows");
    assert_eq!(lb.cols, lc.cols, "gemm output cols");
    assert!(la.rs >= 0 && la.cs >= 0 && lb.rs >= 0 && lb.cs >= 0 && lc.rs >= 0 && lc.cs >= 0);
    if la.rows * la.cols > 0 {
        assert!(la.max_offset() < na, "gemm lhs out of bounds");
    }
    if lb.rows * lb.cols > 0 {
        assert!(lb.max_offset() < nb, "gemm rhs out of bounds");
    }
    if lc.rows * lc.cols > 0 {
        assert!(lc.max_offset() < nc, "gemm output out of bounds");
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn gemm_raw(alpha: f32, a: &[f32], la: MatRef, b: &[f32], lb: MatRef, beta: f32, c: &mut [f32], lc: MatRef) {
        check_gemm(la, lb, lc, a.len(), b.len(), c.len());
        if lc.rows == 0 || lc.cols == 0 {
            return;
        }
        // SAFETY: all strides are non-negative and every addressed element was
        // bounds-checked against the slice lengths above.
        unsafe {
            matrixmultiply::sgemm(
                la.rows,
                la.cols,
                lb.cols,
                alpha,
                a.as_ptr(),
                la.rs,
                la.cs,
                b.as_ptr(),
                lb.rs,
                lb.cs,
                beta,
                c.as_mut_ptr(),
                lc.rs,
                lc.cs,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn gemm_raw(alpha: f64, a: &[f64], la: MatRef, b: &[f64], lb: MatRef, beta: f64, c: &mut [f64], lc: MatRef) {
        check_gemm(la, lb, lc, a.len(), b.len(), c.len());
        if lc.rows == 0 || lc.cols == 0 {
            return;
        }
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                la.rows,
                la.cols,
                lb.cols,
                alpha,
                a.as_ptr(),
                la.rs,
                la.cs,
                b.as_ptr(),
                lb.rs,
                lb.cs,
                beta,
                c.as_mut_ptr(),
                lc.rs,
                lc.cs,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}
