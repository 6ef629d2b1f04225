//! Raw numeric kernels on flat row-major slices.
//!
//! Loop nests are written with contiguous inner loops (i-p-j for matmul) so
//! they autovectorize, and every reduction runs left to right so results are
//! reproducible bit for bit.

use crate::scalar::Scalar;

/// `c += a[m×k] · b[k×n]`
pub fn matmul_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &apv) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += apv * bv;
            }
        }
    }
}

/// `c += a[m×k] · b[n×k]ᵀ` — both operands walked along contiguous rows.
pub fn matmul_bt_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c += a[k×m]ᵀ · b[k×n]`
pub fn matmul_at_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub fn transpose<F: Scalar>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Decomposes a shape around `axis` into (outer, len, inner) extents so a
/// reduction along `axis` can walk lanes at stride `inner`.
pub fn lane_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Numerically stabilized softmax along `axis`.
pub fn softmax<F: Scalar>(x: &[F], shape: &[usize], axis: usize) -> Vec<F> {
    let (outer, len, inner) = lane_split(shape, axis);
    let mut out = vec![F::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = F::neg_infinity();
            for j in 0..len {
                let v = x[base + j * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = F::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] /= sum;
            }
        }
    }
    out
}

/// Backward of softmax: `dx = y ⊙ (dy − Σ_lane dy ⊙ y)`.
pub fn softmax_backward<F: Scalar>(
    y: &[F],
    dy: &[F],
    shape: &[usize],
    axis: usize,
    dx: &mut [F],
) {
    let (outer, len, inner) = lane_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = F::zero();
            for j in 0..len {
                let idx = base + j * inner;
                dot += dy[idx] * y[idx];
            }
            for j in 0..len {
                let idx = base + j * inner;
                dx[idx] += y[idx] * (dy[idx] - dot);
            }
        }
    }
}

/// Exact GELU: `0.5·x·(1 + erf(x/√2))`.
pub fn gelu<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let inv_sqrt2 = F::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (F::one() + (x * inv_sqrt2).erf())
}

/// Derivative of the exact GELU.
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let inv_sqrt2 = F::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = F::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    half * (F::one() + (x * inv_sqrt2).erf()) + x * inv_sqrt_2pi * (-half * x * x).exp()
}

pub struct LayerNormSaved<F> {
    pub normalized: Vec<F>,
    pub inv_std: Vec<F>,
}

/// Row-wise layer norm over the last axis: zero mean, unit variance, then
/// `gamma ⊙ x̂ + beta`. The biased variance plus `eps` keeps constant rows
/// finite.
pub fn layernorm<F: Scalar>(
    x: &[F],
    dim: usize,
    gamma: &[F],
    beta: &[F],
    eps: F,
) -> (Vec<F>, LayerNormSaved<F>) {
    let rows = x.len() / dim;
    let mut out = vec![F::zero(); x.len()];
    let mut normalized = vec![F::zero(); x.len()];
    let mut inv_std = vec![F::zero(); rows];
    let n = F::from_f64(dim as f64);
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mut mean = F::zero();
        for &v in row {
            mean += v;
        }
        mean /= n;
        let mut var = F::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var /= n;
        let istd = F::one() / (var + eps).sqrt();
        inv_std[r] = istd;
        for j in 0..dim {
            let xhat = (row[j] - mean) * istd;
            normalized[r * dim + j] = xhat;
            out[r * dim + j] = xhat * gamma[j] + beta[j];
        }
    }
    (out, LayerNormSaved { normalized, inv_std })
}

pub fn layernorm_backward<F: Scalar>(
    dy: &[F],
    saved: &LayerNormSaved<F>,
    dim: usize,
    gamma: &[F],
    dx: Option<&mut [F]>,
    dgamma: Option<&mut [F]>,
    dbeta: Option<&mut [F]>,
) {
    let rows = dy.len() / dim;
    let n = F::from_f64(dim as f64);
    if let Some(dg) = dgamma {
        for r in 0..rows {
            for j in 0..dim {
                dg[j] += dy[r * dim + j] * saved.normalized[r * dim + j];
            }
        }
    }
    if let Some(db) = dbeta {
        for r in 0..rows {
            for j in 0..dim {
                db[j] += dy[r * dim + j];
            }
        }
    }
    if let Some(dx) = dx {
        for r in 0..rows {
            let mut mean_dxhat = F::zero();
            let mut mean_dxhat_xhat = F::zero();
            for j in 0..dim {
                let idx = r * dim + j;
                let dxhat = dy[idx] * gamma[j];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * saved.normalized[idx];
            }
            mean_dxhat /= n;
            mean_dxhat_xhat /= n;
            for j in 0..dim {
                let idx = r * dim + j;
                let dxhat = dy[idx] * gamma[j];
                dx[idx] +=
                    saved.inv_std[r] * (dxhat - mean_dxhat - saved.normalized[idx] * mean_dxhat_xhat);
            }
        }
    }
}

/// Per-row softmax probabilities and mean cross-entropy of `logits[b×c]`
/// against integer labels.
pub fn cross_entropy<F: Scalar>(logits: &[F], classes: usize, labels: &[usize]) -> (F, Vec<F>) {
    let batch = labels.len();
    let probs = softmax(logits, &[batch, classes], 1);
    let mut loss = F::zero();
    for (b, &y) in labels.iter().enumerate() {
        let p = probs[b * classes + y];
        loss -= p.max(F::from_f64(1e-300)).ln();
    }
    loss /= F::from_f64(batch as f64);
    (loss, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        let b = [3.0, 4.0, 5.0, 6.0];
        let mut c = [0.0; 4];
        matmul_acc(&eye, &b, &mut c, 2, 2, 2);
        assert_eq!(c, b);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2]] · [[3],[4]] = [[11]]
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = [0.0];
        matmul_acc(&a, &b, &mut c, 1, 2, 1);
        assert_eq!(c[0], 11.0);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul_acc(&a, &b, &mut c, 2, 3, 4);

        let bt = transpose(&b, 3, 4); // 4x3
        let mut c2 = vec![0.0; 8];
        matmul_bt_acc(&a, &bt, &mut c2, 2, 3, 4);
        assert_eq!(c, c2);

        let at = transpose(&a, 2, 3); // 3x2
        let mut c3 = vec![0.0; 8];
        matmul_at_acc(&at, &b, &mut c3, 2, 3, 4);
        assert_eq!(c, c3);
    }

    #[test]
    fn softmax_symmetry_and_analytic() {
        let y = softmax(&[0.0f64, 0.0, 0.0], &[3], 0);
        for v in &y {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax(&[1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()], &[3], 0);
        assert!((y[0] - 1.0 / 6.0).abs() < 1e-15);
        assert!((y[1] - 2.0 / 6.0).abs() < 1e-15);
        assert!((y[2] - 3.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn layernorm_analytic() {
        // Constant row: zero variance handled by eps.
        let (y, _) = layernorm(&[5.0f64, 5.0, 5.0], 3, &[1.0; 3], &[0.0; 3], 1e-5);
        for v in &y {
            assert!(v.abs() < 1e-12);
        }
        // Row [1,3] with eps→0 normalizes to [-1,1].
        let (y, _) = layernorm(&[1.0f64, 3.0], 2, &[1.0; 2], &[0.0; 2], 1e-12);
        assert!((y[0] + 1.0).abs() < 1e-6);
        assert!((y[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        // gelu(x) → x for large x, → 0 for very negative x.
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-12);
        assert!(gelu(-10.0f64).abs() < 1e-12);
    }

    #[test]
    fn f32_kernels_run() {
        let y = softmax(&[0.0f32, 0.0], &[2], 0);
        assert!((y[0] - 0.5).abs() < 1e-6);
        assert!((gelu(1.0f32) - 0.8413447).abs() < 1e-4);
    }
}
