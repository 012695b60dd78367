//! im2col convolution kernels backed by `matrixmultiply::dgemm`.

/// Unfolds `input` (cin, h, w) into a (cin*k*k) x (ho*wo) column matrix.
pub fn im2col(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let rows = cin * k * k;
    let cols = ho * wo;
    let mut out = vec![0.0; rows * cols];
    for c in 0..cin {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * wo + ox] = plane[src_row + ix as usize];
                    }
                }
            }
        }
    }
    (out, ho, wo)
}

/// Scatter-adds a column-matrix gradient back to the input layout.
pub fn col2im(
    dcols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let cols = ho * wo;
    let mut dinput = vec![0.0; cin * h * w];
    for c in 0..cin {
        let plane = &mut dinput[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &dcols[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[dst_row + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
    dinput
}

/// C(m x n) = A(m x p) * B(p x n), all row-major, overwriting C.
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, n: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            p,
            n,
            1.0,
            a.as_ptr(),
            p as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C += A^T(m x p)^T ... helper: C(p x n) = A(m x p)^T * B(m x n).
pub fn matmul_at_b(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, n: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), p * n);
    unsafe {
        matrixmultiply::dgemm(
            p,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            p as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C(m x p) = A(m x n) * B(p x n)^T.
pub fn matmul_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(c.len(), m * p);
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            p,
            1.0,
            a.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            0.0,
            c.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_oracle() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        matmul(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn im2col_identity_kernel_positions() {
        // 1 channel 3x3, k=3, pad=1, stride=1: center row equals the input.
        let input: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let (cols, ho, wo) = im2col(&input, 1, 3, 3, 3, 1, 1);
        assert_eq!((ho, wo), (3, 3));
        let center_row = &cols[4 * 9..5 * 9];
        assert_eq!(center_row, &input[..]);
    }

    #[test]
    fn col2im_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let mut rng = crate::rng::Rng::seed_from(9);
        let (cin, h, w, k, s, pad) = (2, 5, 4, 3, 2, 1);
        let x: Vec<f64> = (0..cin * h * w).map(|_| rng.normal()).collect();
        let (cols, ho, wo) = im2col(&x, cin, h, w, k, s, pad);
        let y: Vec<f64> = (0..cols.len()).map(|_| rng.normal()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, cin, h, w, k, s, pad, ho, wo);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-10);
    }
}
