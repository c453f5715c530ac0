//! Minimal dense matrix kernels for the fusion stages.
//!
//! Row-major f64 throughout. The layouts keep every inner loop streaming
//! contiguous memory with no loop-carried reduction, which is what lets
//! the chunked attention pass stay inside its single-threaded time budget:
//!
//! * `a . b` broadcasts one `a` element across a contiguous `b` row
//!   (i-k-j); narrow outputs (the C-wide feature matrices) go through a
//!   const-width variant whose accumulator row lives in registers.
//! * `a . b^T` transposes `b` into scratch once and reuses the i-k-j form.
//! * softmax runs max / exponentiate / normalize as separate passes, with
//!   reductions in four fixed lanes so the result is deterministic.
//!
//! Accumulation order per output element is fixed (ascending k; lane sums
//! combined in one order), so every kernel is bit-reproducible run to run.


/// Fused multiply-add on hardware that has it, plain mul+add elsewhere.
/// `mul_add` without an fma unit lowers to a slow libm call, so the
/// fallback keeps non-fma builds usable; the two variants round slightly
/// differently, which every consumer tolerates.
#[inline(always)]
fn fma(a: f64, b: f64, c: f64) -> f64 {
    #[cfg(target_feature = "fma")]
    {
        a.mul_add(b, c)
    }
    #[cfg(not(target_feature = "fma"))]
    {
        a * b + c
    }
}

/// `out[m x n] = a[m x k] . b[k x n]`.
pub(crate) fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    match n {
        8 => matmul_narrow::<8>(a, m, k, b, out),
        16 => matmul_narrow::<16>(a, m, k, b, out),
        32 => matmul_narrow::<32>(a, m, k, b, out),
        _ => matmul_wide(a, m, k, b, n, out),
    }
}

/// i-k-j with the n-wide accumulator rows kept on the stack (in registers
/// for the common channel widths). Rows are processed four at a time so
/// each `b` row is loaded once per four outputs instead of once per output.
fn matmul_narrow<const N: usize>(a: &[f64], m: usize, k: usize, b: &[f64], out: &mut [f64]) {
    let m4 = m / 4 * 4;
    let mut i = 0;
    while i < m4 {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        let mut acc = [[0.0f64; N]; 4];
        for (kk, brow) in b.chunks_exact(N).enumerate() {
            let (v0, v1, v2, v3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
            for t in 0..N {
                let bv = brow[t];
                acc[0][t] += v0 * bv;
                acc[1][t] += v1 * bv;
                acc[2][t] += v2 * bv;
                acc[3][t] += v3 * bv;
            }
        }
        for (r, row) in acc.iter().enumerate() {
            out[(i + r) * N..(i + r + 1) * N].copy_from_slice(row);
        }
        i += 4;
    }
    for i in m4..m {
        let arow = &a[i * k..(i + 1) * k];
        let mut acc = [0.0f64; N];
        for (&av, brow) in arow.iter().zip(b.chunks_exact(N)) {
            for t in 0..N {
                acc[t] = fma(av, brow[t], acc[t]);
            }
        }
        out[i * N..(i + 1) * N].copy_from_slice(&acc);
    }
}

fn matmul_wide(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert!(k >= 1);
    // 4 x 16 register tiles: four output rows and sixteen columns
    // accumulate in registers across the whole k loop, so each b element
    // loads once per four outputs and out is written exactly once
    let m4 = m / 4 * 4;
    let n16 = n / 16 * 16;
    let mut i = 0;
    while i < m4 {
        let arows = [
            &a[i * k..(i + 1) * k],
            &a[(i + 1) * k..(i + 2) * k],
            &a[(i + 2) * k..(i + 3) * k],
            &a[(i + 3) * k..(i + 4) * k],
        ];
        let mut jb = 0;
        while jb < n16 {
            let mut acc = [[0.0f64; 16]; 4];
            for kk in 0..k {
                let brow = &b[kk * n + jb..kk * n + jb + 16];
                for r in 0..4 {
                    let av = arows[r][kk];
                    for t in 0..16 {
                        acc[r][t] = fma(av, brow[t], acc[r][t]);
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + jb..(i + r) * n + jb + 16].copy_from_slice(row);
            }
            jb += 16;
        }
        for j in n16..n {
            let mut acc = [0.0f64; 4];
            for kk in 0..k {
                let bv = b[kk * n + j];
                for r in 0..4 {
                    acc[r] = fma(arows[r][kk], bv, acc[r]);
                }
            }
            for r in 0..4 {
                out[(i + r) * n + j] = acc[r];
            }
        }
        i += 4;
    }
    for i in m4..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let av0 = arow[0];
        for (o, &bv) in orow.iter_mut().zip(&b[..n]) {
            *o = av0 * bv;
        }
        for (kk, &av) in arow.iter().enumerate().skip(1) {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = fma(av, bv, *o);
            }
        }
    }
}

/// `out[m x n] = a[m x d] . b^T` where `b` is `n x d` (row-major).
/// `b` is transposed into scratch so the accumulation streams rows.
pub(crate) fn matmul_nt(a: &[f64], m: usize, d: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * d);
    debug_assert_eq!(b.len(), n * d);
    debug_assert_eq!(out.len(), m * n);
    let mut bt = vec![0.0f64; d * n];
    for j in 0..n {
        for t in 0..d {
            bt[t * n + j] = b[j * d + t];
        }
    }
    matmul(a, m, d, &bt, n, out);
}

/// `out[k x n] = a^T . b` where `a` is `m x k` and `b` is `m x n`.
pub(crate) fn matmul_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = fma(av, bv, *o);
            }
        }
    }
}

/// Exponentiate `scale * (x - rowmax)` per row, in place, and push each
/// row's reciprocal sum into `inv_sums`. Rows therefore hold unnormalized
/// softmax numerators; multiplying a row (or anything linear in it) by the
/// matching reciprocal finishes the softmax. Splitting it this way lets
/// the attention pass fold the normalization into its output stage
/// instead of rewriting the full score matrix.
pub(crate) fn exp_rows_scaled(
    x: &mut [f64],
    m: usize,
    n: usize,
    scale: f64,
    inv_sums: &mut Vec<f64>,
) {
    debug_assert_eq!(x.len(), m * n);
    inv_sums.clear();
    inv_sums.reserve(m);
    for i in 0..m {
        let row = &mut x[i * n..(i + 1) * n];

        // max in four lanes (max is exact, so lane order cannot matter)
        let mut mx = [f64::NEG_INFINITY; 4];
        for ch in row.chunks_exact(4) {
            mx[0] = mx[0].max(ch[0]);
            mx[1] = mx[1].max(ch[1]);
            mx[2] = mx[2].max(ch[2]);
            mx[3] = mx[3].max(ch[3]);
        }
        let mut max = mx[0].max(mx[1]).max(mx[2]).max(mx[3]);
        for &v in row.chunks_exact(4).remainder() {
            max = max.max(v);
        }

        // exponentiate and sum in fixed lanes in one pass
        let mut lanes = [0.0f64; 4];
        for ch in row.chunks_exact_mut(4) {
            ch[0] = fast_exp(scale * (ch[0] - max));
            ch[1] = fast_exp(scale * (ch[1] - max));
            ch[2] = fast_exp(scale * (ch[2] - max));
            ch[3] = fast_exp(scale * (ch[3] - max));
            lanes[0] += ch[0];
            lanes[1] += ch[1];
            lanes[2] += ch[2];
            lanes[3] += ch[3];
        }
        let mut sum = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
        for v in row.chunks_exact_mut(4).into_remainder() {
            *v = fast_exp(scale * (*v - max));
            sum += *v;
        }
        inv_sums.push(1.0 / sum);
    }
}

/// Numerically stable softmax of `scale * x` over each row, in place.
/// With `scale > 0` every output row is a probability vector.
pub(crate) fn scaled_softmax_rows(x: &mut [f64], m: usize, n: usize, scale: f64) {
    let mut inv_sums = Vec::new();
    exp_rows_scaled(x, m, n, scale, &mut inv_sums);
    for (i, &inv) in inv_sums.iter().enumerate() {
        for v in &mut x[i * n..(i + 1) * n] {
            *v *= inv;
        }
    }
}

/// Branch-free `exp` for the softmax hot loop.
///
/// `exp(x) = 2^k * exp(r)` with `k = round(x / ln 2)` and `|r| <= ln2 / 2`;
/// `exp(r)` is a degree-12 Taylor polynomial (truncation below 2e-16 on
/// that interval) and `2^k` is assembled from the rounding constant's bit
/// pattern, so no float-to-int conversion is needed and the whole loop
/// vectorizes. Inputs clamp to `[-708, 709]`: softmax feeds `x - max <= 0`,
/// and anything below -708 lands at ~3e-308 instead of exactly 0, far
/// below every tolerance in use. Relative error vs libm is a few 1e-16
/// (checked in tests).
#[inline]
pub(crate) fn fast_exp(x: f64) -> f64 {
    const LOG2_E: f64 = std::f64::consts::LOG2_E;
    // ln2 split into high/low parts for an accurate argument reduction
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // 1.5 * 2^52: adding it rounds to the nearest integer (|arg| < 2^51)
    // and leaves that integer in the low mantissa bits
    const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;
    const MAGIC_BITS: u64 = 0x4338_0000_0000_0000;
    const INV_FACT: [f64; 13] = [
        1.0,
        1.0,
        0.5,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362880.0,
        1.0 / 3628800.0,
        1.0 / 39916800.0,
        1.0 / 479001600.0,
    ];
    let x = x.clamp(-708.0, 709.0);
    let u = x * LOG2_E + ROUND_MAGIC;
    let kf = u - ROUND_MAGIC;
    let r = (x - kf * LN2_HI) - kf * LN2_LO;
    let mut p = INV_FACT[12];
    for i in (0..12).rev() {
        p = fma(p, r, INV_FACT[i]);
    }
    let scale = f64::from_bits(u.to_bits().wrapping_sub(MAGIC_BITS).wrapping_add(1023) << 52);
    p * scale
}
