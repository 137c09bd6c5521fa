//! Thin wrapper over `matrixmultiply::sgemm` plus the im2col/col2im and
//! layout permutations shared by the convolution layers.

/// `c = a · b + beta · c` with `a` logically `m×k` and `b` logically `k×n`.
///
/// When `a_t` is set, `a` is stored as `k×m` row-major (i.e. we multiply by
/// its transpose); likewise `b_t` means `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are bounds-checked above against the logical
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
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

/// Geometry of a square-kernel sliding window over an `N×C×H×W` tensor.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn new(n: usize, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Window {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unfold `x` (`N×C×H×W`) into a `(C·K·K) × (N·OH·OW)` patch matrix.
pub(crate) fn im2col(x: &[f32], g: &Window) -> Vec<f32> {
    let cols = g.col_cols();
    let mut out = vec![0.0f32; g.col_rows() * cols];
    let plane = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let base = (n * g.oh + oy) * g.ow;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back into `N×C×H×W`.
pub(crate) fn col2im(cols_buf: &[f32], g: &Window) -> Vec<f32> {
    let cols = g.col_cols();
    let plane = g.h * g.w;
    let mut out = vec![0.0f32; g.n * g.c * plane];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let dst = &mut out[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (n * g.oh + oy) * g.ow;
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `N×C×S` → `C×(N·S)`.
pub(crate) fn batch_to_channel_major(x: &[f32], n: usize, c: usize, s: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * s..(b * c + ch + 1) * s];
            out[ch * n * s + b * s..ch * n * s + (b + 1) * s].copy_from_slice(src);
        }
    }
    out
}

/// `C×(N·S)` → `N×C×S`.
pub(crate) fn channel_to_batch_major(x: &[f32], n: usize, c: usize, s: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * s..(b * c + ch + 1) * s]
                .copy_from_slice(&x[ch * n * s + b * s..ch * n * s + (b + 1) * s]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f32], r: usize, c: usize) -> Vec<f32> {
        let mut t = vec![0.0; x.len()];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f32> = (0..m * k).map(|v| (v as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|v| (v as f32 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        for (at, bt) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if at { transpose(&a, m, k) } else { a.clone() };
            let bb = if bt { transpose(&b, k, n) } else { b.clone() };
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &aa, at, &bb, bt, 0.0, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = Window::new(2, 3, 6, 6, 4, 2, 1).unwrap();
        let x: Vec<f32> = (0..2 * 3 * 36).map(|v| (v as f32 * 0.13).sin()).collect();
        let y: Vec<f32> = (0..g.col_rows() * g.col_cols())
            .map(|v| (v as f32 * 0.07).cos())
            .collect();
        let lhs: f64 = im2col(&x, &g)
            .iter()
            .zip(&y)
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        let rhs: f64 = x
            .iter()
            .zip(&col2im(&y, &g))
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }

    #[test]
    fn layout_permutations_invert() {
        let x: Vec<f32> = (0..2 * 3 * 4).map(|v| v as f32).collect();
        let cm = batch_to_channel_major(&x, 2, 3, 4);
        assert_eq!(channel_to_batch_major(&cm, 2, 3, 4), x);
    }
}
