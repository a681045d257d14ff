//! Small row-major kernels. Loops are arranged so the innermost loop runs
//! over contiguous memory.

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-major transpose of an r × c matrix.
pub(crate) fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    const BLK: usize = 16;
    let mut t = vec![0.0; r * c];
    for i0 in (0..r).step_by(BLK) {
        for j0 in (0..c).step_by(BLK) {
            for i in i0..(i0 + BLK).min(r) {
                for j in j0..(j0 + BLK).min(c) {
                    t[j * r + i] = a[i * c + j];
                }
            }
        }
    }
    t
}

/// out (m×n) += a (m×k) · bᵀ where b is n×k.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        let oi = &mut out[i * n..(i + 1) * n];
        for (j, o) in oi.iter_mut().enumerate() {
            *o += dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out (m×n) += a (m×k) · b where b is k×n.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: feature checked at runtime
            return unsafe { gemm_nn_avx512(a, b, out, m, k, n) };
        }
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: features checked at runtime
            return unsafe { gemm_nn_avx2(a, b, out, m, k, n) };
        }
    }
    gemm_nn_portable(a, b, out, m, k, n)
}

fn gemm_nn_portable(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_nn_kernel::<4, 8, false>(a, b, out, m, k, n)
}

// Vector paths fuse multiply-add, so their last bits can differ from the
// portable path. Each machine still always takes the same path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_nn_avx2(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_nn_kernel::<4, 8, true>(a, b, out, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_nn_avx512(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_nn_kernel::<4, 16, true>(a, b, out, m, k, n)
}

#[inline(always)]
fn gemm_nn_kernel<const R: usize, const C: usize, const FMA: bool>(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    let full_rows = m / R * R;
    tiles::<R, C, FMA>(a, b, out, 0..full_rows, k, n);
    tiles::<1, C, FMA>(a, b, out, full_rows..m, k, n);
    // ragged right edge
    let full_cols = n / C * C;
    if full_cols < n {
        for i in 0..m {
            let oi = &mut out[i * n + full_cols..(i + 1) * n];
            for p in 0..k {
                axpy(a[i * k + p], &b[p * n + full_cols..(p + 1) * n], oi);
            }
        }
    }
}

// R × C output tiles accumulated in registers over the whole k range
#[inline(always)]
fn tiles<const R: usize, const C: usize, const FMA: bool>(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    rows: std::ops::Range<usize>,
    k: usize,
    n: usize,
) {
    let full_cols = n / C * C;
    for i in rows.step_by(R) {
        for j in (0..full_cols).step_by(C) {
            let mut acc = [[0.0f64; C]; R];
            for p in 0..k {
                let bp: &[f64; C] = b[p * n + j..p * n + j + C].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let s = a[(i + r) * k + p];
                    for c in 0..C {
                        row[c] = if FMA { s.mul_add(bp[c], row[c]) } else { row[c] + s * bp[c] };
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let o = &mut out[(i + r) * n + j..(i + r) * n + j + C];
                for c in 0..C {
                    o[c] += row[c];
                }
            }
        }
    }
}

/// out (n×k) += aᵀ · b where a is m×n and b is m×k.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    if k >= 16 || k >= n {
        gemm_nn(&transpose(a, m, n), b, out, n, m, k);
    } else {
        // narrow output: form its transpose, which tiles better
        let mut t = vec![0.0; k * n];
        gemm_nn(&transpose(b, m, k), a, &mut t, k, m, n);
        for (i, row) in out.chunks_mut(k).enumerate() {
            for (j, o) in row.iter_mut().enumerate() {
                *o += t[j * n + i];
            }
        }
    }
}

// exp on x ≤ 0 by range reduction and a degree-13 polynomial. Only IEEE
// add/mul/div and bit arithmetic, so vectorized and scalar calls agree.
#[inline(always)]
fn exp_nonpos(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const MAGIC: f64 = 6_755_399_441_055_744.0;
    let x = if x < -700.0 { -700.0 } else { x };
    let t = x * LOG2E + MAGIC;
    let n = t - MAGIC;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let ni = (t.to_bits() as i64).wrapping_sub(MAGIC.to_bits() as i64);
    p * f64::from_bits((ni + 1023).wrapping_shl(52) as u64)
}

#[inline(always)]
pub(crate) fn sigmoid(x: f64) -> f64 {
    let e = exp_nonpos(-x.abs());
    let s = 1.0 / (1.0 + e);
    if x >= 0.0 {
        s
    } else {
        e * s
    }
}

#[inline(always)]
pub(crate) fn tanh(x: f64) -> f64 {
    let a = x.abs();
    let e = exp_nonpos(-2.0 * a);
    let big = (1.0 - e) / (1.0 + e);
    // series near zero, where 1 − e cancels
    let a2 = a * a;
    let mut p = 21_844.0 / 6_081_075.0;
    for c in [-1_382.0 / 155_925.0, 62.0 / 2_835.0, -17.0 / 315.0, 2.0 / 15.0, -1.0 / 3.0, 1.0] {
        p = p * a2 + c;
    }
    let small = a * p;
    (if a < 0.125 { small } else { big }).copysign(x)
}

macro_rules! elementwise {
    ($name:ident, $f:ident, $avx2:ident, $avx512:ident) => {
        pub(crate) fn $name(v: &mut [f64]) {
            #[cfg(target_arch = "x86_64")]
            {
                if std::is_x86_feature_detected!("avx512f") {
                    // SAFETY: feature checked at runtime
                    return unsafe { $avx512(v) };
                }
                if std::is_x86_feature_detected!("avx2") {
                    // SAFETY: feature checked at runtime
                    return unsafe { $avx2(v) };
                }
            }
            v.iter_mut().for_each(|x| *x = $f(*x));
        }

        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $avx2(v: &mut [f64]) {
            v.iter_mut().for_each(|x| *x = $f(*x));
        }

        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx512f")]
        unsafe fn $avx512(v: &mut [f64]) {
            v.iter_mut().for_each(|x| *x = $f(*x));
        }
    };
}

elementwise!(sigmoid_slice, sigmoid, sigmoid_avx2, sigmoid_avx512);
elementwise!(tanh_slice, tanh, tanh_avx2, tanh_avx512);
