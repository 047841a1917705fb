//! Raw compute kernels behind the tape ops.
//!
//! Loop order in the matmuls is i-k-j so the inner loop runs over
//! contiguous rows of the right operand; the compiler vectorizes the
//! j loop without changing summation order, which keeps every run of a
//! kernel bit-identical. Matrix-multiply kernels tally their
//! multiply-accumulate count into a thread-local counter used by the
//! complexity benchmark.

use std::cell::Cell;

use super::Scalar;

thread_local! {
    static MAC_COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Reset the calling thread's multiply-accumulate tally.
pub fn mac_count_reset() {
    MAC_COUNT.with(|c| c.set(0));
}

/// Multiply-accumulates performed by matmul kernels on this thread since
/// the last reset.
pub fn mac_count_total() -> u64 {
    MAC_COUNT.with(|c| c.get())
}

fn mac_add(n: u64) {
    MAC_COUNT.with(|c| c.set(c.get() + n));
}

/// C(m,n) = A(m,k) @ B(k,n), accumulated into `out` (must be zeroed).
pub fn matmul_into<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + a_ik * b_row[j];
            }
        }
    }
    mac_add((m * k * n) as u64);
}

/// C(m,n) += A(m,k) @ B(n,k)^T. Inner loop is a dot product over
/// contiguous rows of both operands.
pub fn matmul_bt_into<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for kk in 0..k {
                acc = acc + a_row[kk] * b_row[kk];
            }
            let o = &mut out[i * n + j];
            *o = *o + acc;
        }
    }
    mac_add((m * k * n) as u64);
}

/// C(m,n) += A(k,m)^T @ B(k,n).
pub fn matmul_at_into<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let a_ki = a_row[i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + a_ki * b_row[j];
            }
        }
    }
    mac_add((m * k * n) as u64);
}

/// Numerically stable softmax of one lane scaled by 1/delta.
pub fn softmax_lane<E: Scalar>(src: &[E], dst: &mut [E], delta: E) {
    debug_assert_eq!(src.len(), dst.len());
    let mut mx = E::neg_infinity();
    for &v in src {
        let v = v / delta;
        if v > mx {
            mx = v;
        }
    }
    let mut sum = E::zero();
    for (d, &v) in dst.iter_mut().zip(src.iter()) {
        let e = ((v / delta) - mx).exp();
        *d = e;
        sum = sum + e;
    }
    for d in dst.iter_mut() {
        *d = *d / sum;
    }
}

/// GELU, tanh approximation.
pub fn gelu_scalar<E: Scalar>(x: E) -> E {
    let half = E::from_f64(0.5);
    let c = E::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = E::from_f64(0.044_715);
    let u = c * (x + a * x * x * x);
    half * x * (E::one() + u.tanh())
}

/// d/dx of the tanh-approximation GELU.
pub fn gelu_grad_scalar<E: Scalar>(x: E) -> E {
    let half = E::from_f64(0.5);
    let c = E::from_f64(0.797_884_560_802_865_4);
    let a = E::from_f64(0.044_715);
    let three = E::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * c * (E::one() + three * a * x * x)
}

/// Bilinear sample weights for one output coordinate (half-pixel centers,
/// clamped at the borders). Returns (lo_index, hi_index, hi_weight).
pub fn bilinear_axis(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let x = (dst as f64 + 0.5) * scale - 0.5;
    let x = x.clamp(0.0, (src_len - 1) as f64);
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, x - lo as f64)
}
