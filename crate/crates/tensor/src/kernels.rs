//! Raw slice kernels shared by the graph operations.
//!
//! Every kernel accumulates each output element in a fixed, sequential order
//! over the reduction index, so results are reproducible bit-for-bit and agree
//! exactly with straightforward nested-loop formulations.

const MR: usize = 4;
const NR: usize = 8;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major and contiguous.
pub fn gemm_acc(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let n_main = n - n % NR;
    let m_main = m - m % MR;

    let mut i = 0;
    while i < m_main {
        let mut j = 0;
        while j < n_main {
            micro_kernel(i, j, n, k, a, b, c);
            j += NR;
        }
        if n_main < n {
            edge_block(i, i + MR, n_main, n, n, k, a, b, c);
        }
        i += MR;
    }
    if m_main < m {
        edge_block(m_main, m, 0, n, n, k, a, b, c);
    }
}

#[inline(always)]
fn micro_kernel(i: usize, j: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let mut acc = [[0.0f64; NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
    }
    let a0 = &a[i * k..(i + 1) * k];
    let a1 = &a[(i + 1) * k..(i + 2) * k];
    let a2 = &a[(i + 2) * k..(i + 3) * k];
    let a3 = &a[(i + 3) * k..(i + 4) * k];
    for p in 0..k {
        let brow: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
        let av = [a0[p], a1[p], a2[p], a3[p]];
        for r in 0..MR {
            for q in 0..NR {
                acc[r][q] += av[r] * brow[q];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
    }
}

#[allow(clippy::too_many_arguments)]
fn edge_block(
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
    n: usize,
    k: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
) {
    for i in i0..i1 {
        let arow = &a[i * k..(i + 1) * k];
        for j in j0..j1 {
            let mut acc = c[i * n + j];
            for (p, &av) in arow.iter().enumerate() {
                acc += av * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
}

/// Transposes a row-major `rows×cols` matrix.
pub fn transpose(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    const BLK: usize = 16;
    for r0 in (0..rows).step_by(BLK) {
        for c0 in (0..cols).step_by(BLK) {
            for r in r0..(r0 + BLK).min(rows) {
                for c in c0..(c0 + BLK).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

/// Geometry of a 2-D convolution over an NHWC image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub c_in: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding.0 - self.kernel.0) / self.stride.0 + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding.1 - self.kernel.1) / self.stride.1 + 1
    }

    /// Length of one im2col row: `kh · kw · c_in`.
    pub fn patch_len(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.c_in
    }

    /// Writes the patch matrix `[out_h·out_w, kh·kw·c_in]` for one image.
    /// Out-of-bounds taps are zero.
    pub fn im2col(&self, image: &[f64], col: &mut [f64]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let plen = self.patch_len();
        let c_in = self.c_in;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut col[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
                let mut off = 0;
                for ky in 0..self.kernel.0 {
                    let iy = (oy * self.stride.0 + ky) as isize - self.padding.0 as isize;
                    for kx in 0..self.kernel.1 {
                        let ix = (ox * self.stride.1 + kx) as isize - self.padding.1 as isize;
                        let dst = &mut row[off..off + c_in];
                        if iy < 0 || ix < 0 || iy >= self.height as isize || ix >= self.width as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                        } else {
                            let src = (iy as usize * self.width + ix as usize) * c_in;
                            dst.copy_from_slice(&image[src..src + c_in]);
                        }
                        off += c_in;
                    }
                }
            }
        }
    }

    /// Scatters patch-matrix gradients back onto the image gradient.
    pub fn col2im_add(&self, col: &[f64], image_grad: &mut [f64]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let plen = self.patch_len();
        let c_in = self.c_in;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &col[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
                let mut off = 0;
                for ky in 0..self.kernel.0 {
                    let iy = (oy * self.stride.0 + ky) as isize - self.padding.0 as isize;
                    for kx in 0..self.kernel.1 {
                        let ix = (ox * self.stride.1 + kx) as isize - self.padding.1 as isize;
                        if iy >= 0 && ix >= 0 && iy < self.height as isize && ix < self.width as isize {
                            let dst = (iy as usize * self.width + ix as usize) * c_in;
                            for (d, s) in image_grad[dst..dst + c_in].iter_mut().zip(&row[off..off + c_in]) {
                                *d += s;
                            }
                        }
                        off += c_in;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
        for i in 0..m {
            for j in 0..n {
                let mut acc = c[i * n + j];
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
    }

    #[test]
    fn gemm_matches_naive_bitwise_on_ragged_shapes() {
        let mut seed = 12345u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for &(m, n, k) in &[(1, 1, 1), (4, 8, 3), (5, 9, 7), (13, 17, 11), (3, 2, 0), (8, 16, 33)] {
            let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| next()).collect();
            let c0: Vec<f64> = (0..m * n).map(|_| next()).collect();
            let mut c1 = c0.clone();
            let mut c2 = c0.clone();
            gemm_acc(m, n, k, &a, &b, &mut c1);
            naive(m, n, k, &a, &b, &mut c2);
            assert_eq!(c1, c2, "m={m} n={n} k={k}");
        }
    }

    #[test]
    fn transpose_round_trips() {
        let src: Vec<f64> = (0..35).map(|v| v as f64).collect();
        let t = transpose(5, 7, &src);
        assert_eq!(t[5], src[1]);
        assert_eq!(transpose(7, 5, &t), src);
    }

    #[test]
    fn im2col_zero_pads_borders() {
        let g = ConvGeometry { height: 1, width: 3, c_in: 1, kernel: (1, 3), stride: (1, 1), padding: (0, 1) };
        let mut col = vec![f64::NAN; 9];
        g.im2col(&[1.0, 2.0, 3.0], &mut col);
        assert_eq!(col, vec![0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]);
    }
}
