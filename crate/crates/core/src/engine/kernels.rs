//! Matrix-product kernels over row-major buffers, backed by the packed
//! single-threaded GEMM of `matrixmultiply`. The summation order depends
//! only on the shapes, so results are reproducible run to run.

use crate::scalar::Scalar;

fn rm(cols: usize) -> (isize, isize) {
    (cols as isize, 1)
}

fn tr(cols: usize) -> (isize, isize) {
    (1, cols as isize)
}

/// `c[b] += a[b] · b[b]` with `a: [batch, m, k]`, `b: [k, n]` (shared) or
/// `[batch, k, n]`, `c: [batch, m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mm_nn<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) {
    let (ra, ca) = rm(k);
    let (rb, cb) = rm(n);
    let (rc, cc) = rm(n);
    if !b_batched {
        T::gemm_acc(batch * m, k, n, (a, ra, ca), (b, rb, cb), (c, rc, cc));
        return;
    }
    for bi in 0..batch {
        T::gemm_acc(
            m,
            k,
            n,
            (&a[bi * m * k..(bi + 1) * m * k], ra, ca),
            (&b[bi * k * n..(bi + 1) * k * n], rb, cb),
            (&mut c[bi * m * n..(bi + 1) * m * n], rc, cc),
        );
    }
}

/// `c[b] += a[b] · b[b]ᵀ` with `a: [batch, m, k]`, `b: [n, k]` or
/// `[batch, n, k]`, `c: [batch, m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mm_nt<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) {
    let (ra, ca) = rm(k);
    let (rb, cb) = tr(k);
    let (rc, cc) = rm(n);
    if !b_batched {
        T::gemm_acc(batch * m, k, n, (a, ra, ca), (b, rb, cb), (c, rc, cc));
        return;
    }
    for bi in 0..batch {
        T::gemm_acc(
            m,
            k,
            n,
            (&a[bi * m * k..(bi + 1) * m * k], ra, ca),
            (&b[bi * n * k..(bi + 1) * n * k], rb, cb),
            (&mut c[bi * m * n..(bi + 1) * m * n], rc, cc),
        );
    }
}

/// `c += Σ_b a[b]ᵀ · g[b]` (shared output `[k, n]`) or per-batch
/// `c[b] += a[b]ᵀ · g[b]` (`[batch, k, n]`), with `a: [batch, m, k]`,
/// `g: [batch, m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mm_tn<T: Scalar>(
    a: &[T],
    g: &[T],
    c: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    c_batched: bool,
) {
    let (ra, ca) = tr(k);
    let (rg, cg) = rm(n);
    let (rc, cc) = rm(n);
    if !c_batched {
        T::gemm_acc(k, batch * m, n, (a, ra, ca), (g, rg, cg), (c, rc, cc));
        return;
    }
    for bi in 0..batch {
        T::gemm_acc(
            k,
            m,
            n,
            (&a[bi * m * k..(bi + 1) * m * k], ra, ca),
            (&g[bi * m * n..(bi + 1) * m * n], rg, cg),
            (&mut c[bi * k * n..(bi + 1) * k * n], rc, cc),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        (0..r * c).map(|q| x[(q % r) * c + q / r]).collect()
    }

    #[test]
    fn variants_agree_with_naive_product() {
        let (m, k, n) = (37, 53, 41);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 5) % 11) as f64 - 5.0).collect();
        let expect = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        mm_nn(&a, &b, &mut c, 1, m, k, n, false);
        assert_eq!(c, expect);

        let bt = transpose(&b, k, n);
        let mut c = vec![0.0; m * n];
        mm_nt(&a, &bt, &mut c, 1, m, k, n, false);
        assert_eq!(c, expect);

        let at = transpose(&a, m, k);
        let mut c = vec![0.0; m * n];
        mm_tn(&at, &b, &mut c, 1, k, m, n, false);
        assert_eq!(c, expect);
    }

    #[test]
    fn shared_tn_sums_over_batch() {
        // two batches of a 1x1 · 1x1 product
        let a = [2.0, 3.0];
        let g = [5.0, 7.0];
        let mut c = [0.0];
        mm_tn(&a, &g, &mut c, 2, 1, 1, 1, false);
        assert_eq!(c[0], 31.0);
        let mut c = [0.0, 0.0];
        mm_tn(&a, &g, &mut c, 2, 1, 1, 1, true);
        assert_eq!(c, [10.0, 21.0]);
    }
}
