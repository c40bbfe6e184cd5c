//! Dense kernels behind matmul and convolution.

/// `C = β·C + op(A)·op(B)` for row-major buffers, with `op(A)` of size
/// `m × k` and `op(B)` of size `k × n`. A transposed operand is stored with
/// its two axes swapped (`A` as `k × m`, `B` as `n × k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, c: &mut [f64], beta: f64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches for the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Patch matrix `[c·k·k, h·w]` for a stride-1, `k/2`-padded convolution.
pub(crate) fn im2col(input: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let src = sy as usize * w;
                    let dst = &mut row[y * w + x0..y * w + x1];
                    let from = (src as isize + x0 as isize + dx) as usize;
                    dst.copy_from_slice(&plane[from..from + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`], accumulated into `out`.
pub(crate) fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let from = (sy as usize * w) as isize + x0 as isize + dx;
                    let plane = &mut out[ch * hw + from as usize..][..x1 - x0];
                    for (o, v) in plane.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_all_transpose_combinations() {
        // A = [[1,2,3],[4,5,6]] (2x3), B = [[1,0],[2,1],[0,3]] (3x2)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0, 0.0, 2.0, 1.0, 0.0, 3.0];
        let bt = [1.0, 2.0, 0.0, 0.0, 1.0, 3.0];
        let expected = [5.0, 11.0, 14.0, 23.0];
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = [0.0; 4];
                gemm(2, 3, 2, aa, ta, bb, tb, &mut c, 0.0);
                assert_eq!(c, expected);
            }
        }
    }

    #[test]
    fn im2col_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, k) = (2, 5, 4, 3);
        let x: Vec<f64> = (0..c * h * w).map(|v| (v as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * k * k * h * w).map(|v| (v as f64 * 0.11).cos()).collect();
        let cols = im2col(&x, c, h, w, k);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&y, c, h, w, k, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // centre tap is the identity
        let centre = &cols[(4) * h * w..5 * h * w];
        assert_eq!(centre, &x[..h * w]);
    }
}
