//! Elementwise kernels and the checked GEMM wrapper.

use crate::scalar::Scalar;

/// Strided 2-D view into a flat buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mat {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Mat {
    /// Contiguous row-major `rows x cols` view at offset 0.
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { off: 0, rows, cols, rs: cols, cs: 1 }
    }

    /// Row-major view with an explicit row stride.
    pub fn strided(off: usize, rows: usize, cols: usize, rs: usize) -> Self {
        Self { off, rows, cols, rs, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { off: self.off, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn end(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.off;
        }
        self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
    }
}

/// `c <- alpha * a * b + beta * c` with bounds-checked views.
///
/// When `beta` is zero the previous contents of `c` are ignored.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(alpha: T, a: &[T], la: Mat, b: &[T], lb: Mat, beta: T, c: &mut [T], lc: Mat) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimension");
    assert_eq!(lc.rows, la.rows, "gemm output rows");
    assert_eq!(lc.cols, lb.cols, "gemm output cols");
    if lc.rows == 0 || lc.cols == 0 {
        return;
    }
    assert!(lc.end() <= c.len(), "gemm output view out of bounds");
    if la.cols == 0 {
        for i in 0..lc.rows {
            for j in 0..lc.cols {
                let x = &mut c[lc.off + i * lc.rs + j * lc.cs];
                *x = if beta == T::zero() { T::zero() } else { *x * beta };
            }
        }
        return;
    }
    assert!(la.end() <= a.len(), "gemm lhs view out of bounds");
    assert!(lb.end() <= b.len(), "gemm rhs view out of bounds");
    // SAFETY: every view was checked to lie inside its slice, and `c` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            la.rows,
            la.cols,
            lb.cols,
            alpha,
            a.as_ptr().add(la.off),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr().add(lb.off),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr().add(lc.off),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `0.5 (1 + tanh(u)) = sigmoid(2u)`; one `exp` is much cheaper than `tanh`.
fn gelu_gate<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    x * gelu_gate(x)
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let g = gelu_gate(x);
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    g + T::lit(2.0) * x * g * (T::one() - g) * du
}

/// In-place numerically stable softmax.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// Log-sum-exp of a row.
pub fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Adds `src` into `dst` elementwise.
pub fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(1.0, &a, Mat::new(2, 3), &b, Mat::new(3, 4), 0.0, &mut c, Mat::new(2, 4));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // (b^T) [4x3] times (a^T) [3x2] == (a b)^T
        let mut ct = vec![0.0; 8];
        gemm(1.0, &b, Mat::new(3, 4).t(), &a, Mat::new(2, 3).t(), 0.0, &mut ct, Mat::new(4, 2));
        for i in 0..2 {
            for j in 0..4 {
                assert_eq!(ct[j * 2 + i], c[i * 4 + j]);
            }
        }
    }

    #[test]
    fn gemm_with_empty_inner_dimension_scales_output() {
        let mut c = vec![2.0f64; 4];
        gemm(1.0, &[], Mat::new(2, 0), &[], Mat::new(0, 2), 0.5, &mut c, Mat::new(2, 2));
        assert_eq!(c, vec![1.0; 4]);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn gelu_equals_tanh_form() {
        for i in -400..=400 {
            let x = i as f64 * 0.125;
            let tanh_form = 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh());
            assert!((gelu(x) - tanh_form).abs() <= 1e-12 * (1.0 + x.abs()), "x={x}");
            assert!(gelu_grad(x).is_finite());
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut r = vec![1.0f64, 2.0, 3.0, -50.0];
        softmax_in_place(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((logsumexp(&[0.0f64, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}
