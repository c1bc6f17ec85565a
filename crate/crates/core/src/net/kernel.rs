//! `C += A · B` for the forward pass, all row-major.
//!
//! Every output element is a single fused multiply-add chain over `k` in
//! ascending order, whatever the tile shape or instruction set. A row's result
//! therefore depends only on that row of `A`: evaluating a viewpoint alone or
//! inside any batch gives bit-identical outputs. Rows are processed four at a
//! time without packing, so single-row calls stay cheap.

/// `c (m×n) += a (m×k) · b (k×n)`.
pub fn sgemm_acc(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            // SAFETY: feature checked above; bounds asserted above.
            unsafe { x86::avx512(m, k, n, a.as_ptr(), b.as_ptr(), c.as_mut_ptr()) };
            return;
        }
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            // SAFETY: as above.
            unsafe { x86::avx2(m, k, n, a.as_ptr(), b.as_ptr(), c.as_mut_ptr()) };
            return;
        }
    }
    portable(m, k, n, a, b, c);
}

fn portable(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (cv, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv = av.mul_add(bv, *cv);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    macro_rules! by_rows {
        ($rows:expr, $f:ident, $v:literal, $($arg:expr),*) => {
            match $rows {
                4 => $f::<4, $v>($($arg),*),
                3 => $f::<3, $v>($($arg),*),
                2 => $f::<2, $v>($($arg),*),
                _ => $f::<1, $v>($($arg),*),
            }
        };
    }

    /// `R` rows by `16·V` columns (or the first `tail` columns when `V = 1`
    /// and `tail < 16`).
    #[inline]
    #[target_feature(enable = "avx512f,avx2,fma")]
    unsafe fn tile512<const R: usize, const V: usize>(
        a: *const f32,
        lda: usize,
        b: *const f32,
        ldb: usize,
        c: *mut f32,
        ldc: usize,
        k: usize,
        mask: __mmask16,
    ) {
        let mut acc = [[_mm512_setzero_ps(); V]; R];
        for r in 0..R {
            for v in 0..V {
                acc[r][v] = _mm512_maskz_loadu_ps(mask, c.add(r * ldc + 16 * v));
            }
        }
        for p in 0..k {
            let brow = b.add(p * ldb);
            let mut bv = [_mm512_setzero_ps(); V];
            for v in 0..V {
                bv[v] = _mm512_maskz_loadu_ps(mask, brow.add(16 * v));
            }
            for r in 0..R {
                let av = _mm512_set1_ps(*a.add(r * lda + p));
                for v in 0..V {
                    acc[r][v] = _mm512_fmadd_ps(av, bv[v], acc[r][v]);
                }
            }
        }
        for r in 0..R {
            for v in 0..V {
                _mm512_mask_storeu_ps(c.add(r * ldc + 16 * v), mask, acc[r][v]);
            }
        }
    }

    #[target_feature(enable = "avx512f,avx2,fma")]
    pub unsafe fn avx512(m: usize, k: usize, n: usize, a: *const f32, b: *const f32, c: *mut f32) {
        let mut i = 0;
        while i < m {
            let rows = (m - i).min(4);
            let (ar, cr) = (a.add(i * k), c.add(i * n));
            let mut j = 0;
            while j + 64 <= n {
                by_rows!(rows, tile512, 4, ar, k, b.add(j), n, cr.add(j), n, k, 0xffff);
                j += 64;
            }
            while j < n {
                let w = (n - j).min(16);
                let mask = if w == 16 { 0xffff } else { (1u16 << w) - 1 };
                by_rows!(rows, tile512, 1, ar, k, b.add(j), n, cr.add(j), n, k, mask);
                j += 16;
            }
            i += rows;
        }
    }

    #[inline]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn tile256<const R: usize, const V: usize>(
        a: *const f32,
        lda: usize,
        b: *const f32,
        ldb: usize,
        c: *mut f32,
        ldc: usize,
        k: usize,
    ) {
        let mut acc = [[_mm256_setzero_ps(); V]; R];
        for r in 0..R {
            for v in 0..V {
                acc[r][v] = _mm256_loadu_ps(c.add(r * ldc + 8 * v));
            }
        }
        for p in 0..k {
            let brow = b.add(p * ldb);
            let mut bv = [_mm256_setzero_ps(); V];
            for v in 0..V {
                bv[v] = _mm256_loadu_ps(brow.add(8 * v));
            }
            for r in 0..R {
                let av = _mm256_set1_ps(*a.add(r * lda + p));
                for v in 0..V {
                    acc[r][v] = _mm256_fmadd_ps(av, bv[v], acc[r][v]);
                }
            }
        }
        for r in 0..R {
            for v in 0..V {
                _mm256_storeu_ps(c.add(r * ldc + 8 * v), acc[r][v]);
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn avx2(m: usize, k: usize, n: usize, a: *const f32, b: *const f32, c: *mut f32) {
        let mut i = 0;
        while i < m {
            let rows = (m - i).min(4);
            let (ar, cr) = (a.add(i * k), c.add(i * n));
            let mut j = 0;
            while j + 16 <= n {
                by_rows!(rows, tile256, 2, ar, k, b.add(j), n, cr.add(j), n, k);
                j += 16;
            }
            // remaining columns one at a time, same fused chain per element
            for jj in j..n {
                for r in 0..rows {
                    let cp = cr.add(r * n + jj);
                    let mut s = *cp;
                    for p in 0..k {
                        s = (*ar.add(r * k + p)).mul_add(*b.add(p * n + jj), s);
                    }
                    *cp = s;
                }
            }
            i += rows;
        }
    }
}
