//! Row-major f32 matrix product with a fixed accumulation order.
//!
//! Every output element is accumulated as `c0 + a[i,0]·b[0,j] + a[i,1]·b[1,j] + …`
//! strictly left to right, so the result is bit-identical to the naive
//! triple loop. Vectorization happens across output columns only.

use super::Real;

const MR: usize = 4;
const NR: usize = 16;

/// `c[m×n] (+)= a[m×k] · b[k×n]`.
///
/// With `accumulate == false` the previous contents of `c` are ignored and
/// each sum starts from `0.0`.
pub fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    assert_eq!(a.len(), m * k, "gemm: a has wrong length");
    assert_eq!(b.len(), k * n, "gemm: b has wrong length");
    assert_eq!(c.len(), m * n, "gemm: c has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }

    let mut packed = vec![T::zero(); k * NR];
    for j0 in (0..n).step_by(NR) {
        let width = NR.min(n - j0);
        for kk in 0..k {
            let dst = &mut packed[kk * NR..kk * NR + NR];
            dst[..width].copy_from_slice(&b[kk * n + j0..kk * n + j0 + width]);
            dst[width..].fill(T::zero());
        }

        let mut i0 = 0;
        while i0 + MR <= m {
            let mut acc = [[T::zero(); NR]; MR];
            if accumulate {
                for (r, row) in acc.iter_mut().enumerate() {
                    row[..width].copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + width]);
                }
            }
            let rows: [&[T]; MR] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
            for kk in 0..k {
                let bv: &[T; NR] = packed[kk * NR..kk * NR + NR].try_into().unwrap();
                for r in 0..MR {
                    let x = rows[r][kk];
                    for j in 0..NR {
                        acc[r][j] += x * bv[j];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + width].copy_from_slice(&row[..width]);
            }
            i0 += MR;
        }
        for i in i0..m {
            let mut acc = [T::zero(); NR];
            if accumulate {
                acc[..width].copy_from_slice(&c[i * n + j0..i * n + j0 + width]);
            }
            let ai = &a[i * k..(i + 1) * k];
            for kk in 0..k {
                let bv: &[T; NR] = packed[kk * NR..kk * NR + NR].try_into().unwrap();
                let x = ai[kk];
                for j in 0..NR {
                    acc[j] += x * bv[j];
                }
            }
            c[i * n + j0..i * n + j0 + width].copy_from_slice(&acc[..width]);
        }
    }
}

/// Transposes a row-major `rows×cols` matrix.
pub(crate) fn transpose<T: Real>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![T::zero(); rows * cols];
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c0: Option<&[f32]>) -> Vec<f32> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = c0.map_or(0.0, |c| c[i * n + j]);
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn bit_identical_to_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, k, n) in &[(1, 1, 1), (5, 7, 3), (4, 16, 16), (9, 33, 50), (16, 27, 100)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c0: Vec<f32> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let mut c = vec![7.0; m * n];
            gemm(m, k, n, &a, &b, &mut c, false);
            assert_eq!(c, naive(m, k, n, &a, &b, None));

            let mut c = c0.clone();
            gemm(m, k, n, &a, &b, &mut c, true);
            assert_eq!(c, naive(m, k, n, &a, &b, Some(&c0)));
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let src: Vec<f32> = (0..35).map(|x| x as f32).collect();
        let t = transpose(5, 7, &src);
        assert_eq!(t[7 * 5 - 1], 34.0);
        assert_eq!(transpose(7, 5, &t), src);
    }
}
