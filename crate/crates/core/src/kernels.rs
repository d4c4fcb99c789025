//! Low-level dense kernels shared by the tape's forward and backward passes.

use crate::tensor::strides;

/// Strided read-only view of a matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view out of bounds");
        MatRef { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        MatRef { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// `c = alpha * a * b + beta * c` with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "inner extents disagree");
    assert!(c.len() >= m * n, "output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // SAFETY: every view was bounds-checked on construction (row-major or its
    // transpose), and the output covers m*n contiguous elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Extents of a channels-last "same" convolution on one image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
}

impl ConvGeometry {
    pub fn image_in(&self) -> usize {
        self.h * self.w * self.cin
    }

    pub fn image_out(&self) -> usize {
        self.h * self.w * self.cout
    }

    /// Calls `f(out_pixel, in_pixel, tap)` for every in-bounds kernel tap.
    #[inline(always)]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w) = (self.h as isize, self.w as isize);
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        for y in 0..h {
            for x in 0..w {
                let p = (y * w + x) as usize;
                for ki in 0..self.kh as isize {
                    let sy = y + ki - ph;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for kj in 0..self.kw as isize {
                        let sx = x + kj - pw;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        f(p, (sy * w + sx) as usize, (ki * self.kw as isize + kj) as usize);
                    }
                }
            }
        }
    }

    /// Accumulates the convolution of image `x` `[h, w, cin]` with `kernel`
    /// `[kh, kw, cin, cout]` into `out` `[h, w, cout]`.
    pub fn forward(&self, x: &[f64], kernel: &[f64], out: &mut [f64]) {
        dispatch_channels!(self, tap_forward, x, kernel, out)
    }

    /// Accumulates the kernel gradient for one image given output gradient `g`.
    pub fn kernel_grad(&self, x: &[f64], g: &[f64], gk: &mut [f64]) {
        dispatch_channels!(self, tap_kernel_grad, x, g, gk)
    }

    /// Accumulates the input gradient for one image given output gradient `g`.
    pub fn input_grad(&self, kernel: &[f64], g: &[f64], gx: &mut [f64]) {
        dispatch_channels!(self, tap_input_grad, kernel, g, gx)
    }
}

// Channel counts known at compile time let the per-tap loops unroll; the
// common stem widths get their own instantiation.
macro_rules! dispatch_channels {
    ($geo:expr, $kernel:ident, $a:expr, $b:expr, $c:expr) => {
        match ($geo.cin, $geo.cout) {
            (1, 4) => $kernel::<1, 4>($geo, $a, $b, $c),
            (4, 4) => $kernel::<4, 4>($geo, $a, $b, $c),
            (1, 8) => $kernel::<1, 8>($geo, $a, $b, $c),
            (4, 8) => $kernel::<4, 8>($geo, $a, $b, $c),
            (8, 4) => $kernel::<8, 4>($geo, $a, $b, $c),
            (8, 8) => $kernel::<8, 8>($geo, $a, $b, $c),
            _ => $kernel::<0, 0>($geo, $a, $b, $c),
        }
    };
}
use dispatch_channels;

/// `CI == 0` selects the runtime channel counts.
#[inline(always)]
fn channels<const CI: usize, const CO: usize>(geo: &ConvGeometry) -> (usize, usize) {
    if CI == 0 {
        (geo.cin, geo.cout)
    } else {
        (CI, CO)
    }
}

fn tap_forward<const CI: usize, const CO: usize>(geo: &ConvGeometry, x: &[f64], kernel: &[f64], out: &mut [f64]) {
    let (cin, cout) = channels::<CI, CO>(geo);
    geo.for_each_tap(|p, q, tap| {
        let o = &mut out[p * cout..(p + 1) * cout];
        let xs = &x[q * cin..(q + 1) * cin];
        let kt = &kernel[tap * cin * cout..(tap + 1) * cin * cout];
        for ci in 0..cin {
            let krow = &kt[ci * cout..(ci + 1) * cout];
            for co in 0..cout {
                o[co] += xs[ci] * krow[co];
            }
        }
    });
}

fn tap_kernel_grad<const CI: usize, const CO: usize>(geo: &ConvGeometry, x: &[f64], g: &[f64], gk: &mut [f64]) {
    let (cin, cout) = channels::<CI, CO>(geo);
    geo.for_each_tap(|p, q, tap| {
        let gp = &g[p * cout..(p + 1) * cout];
        let xs = &x[q * cin..(q + 1) * cin];
        let kt = &mut gk[tap * cin * cout..(tap + 1) * cin * cout];
        for ci in 0..cin {
            let krow = &mut kt[ci * cout..(ci + 1) * cout];
            for co in 0..cout {
                krow[co] += xs[ci] * gp[co];
            }
        }
    });
}

fn tap_input_grad<const CI: usize, const CO: usize>(geo: &ConvGeometry, kernel: &[f64], g: &[f64], gx: &mut [f64]) {
    let (cin, cout) = channels::<CI, CO>(geo);
    geo.for_each_tap(|p, q, tap| {
        let gp = &g[p * cout..(p + 1) * cout];
        let dx = &mut gx[q * cin..(q + 1) * cin];
        let kt = &kernel[tap * cin * cout..(tap + 1) * cin * cout];
        for ci in 0..cin {
            let krow = &kt[ci * cout..(ci + 1) * cout];
            let mut acc = 0.0;
            for co in 0..cout {
                acc += krow[co] * gp[co];
            }
            dx[ci] += acc;
        }
    });
}

/// Calls `f(out_flat, src_flat)` for every element of the permuted layout.
pub(crate) fn for_each_permuted(shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mapped: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let total: usize = shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let inner = out_shape[rank - 1];
    let inner_stride = mapped[rank - 1];
    let mut out = 0usize;
    while out < total {
        let mut s = src;
        for _ in 0..inner {
            f(out, s);
            out += 1;
            s += inner_stride;
        }
        // advance the odometer over all but the innermost axis
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            src += mapped[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            src -= mapped[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

/// For a tensor of `shape` and a reduced operand living on `axes`, returns the
/// operand's flat index for every flat index of the full tensor.
pub(crate) fn broadcast_offsets(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let kept: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let kept_strides = strides(&kept);
    let mut mapped = vec![0usize; shape.len()];
    for (i, &a) in axes.iter().enumerate() {
        mapped[a] = kept_strides[i];
    }
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        let mut axis = rank;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            off += mapped[axis];
            if idx[axis] < shape[axis] {
                break;
            }
            off -= mapped[axis] * shape[axis];
            idx[axis] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 2.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(1.0, MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4), 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // (b^T a^T) = (a b)^T
        let mut ct = vec![0.0; 8];
        gemm(1.0, MatRef::new(&b, 3, 4).t(), MatRef::new(&a, 2, 3).t(), 0.0, &mut ct);
        for i in 0..2 {
            for j in 0..4 {
                assert_eq!(ct[j * 2 + i], c[i * 4 + j]);
            }
        }
    }

    #[test]
    fn permute_enumerates_transpose() {
        let mut pairs = Vec::new();
        for_each_permuted(&[2, 3], &[1, 0], |o, s| pairs.push((o, s)));
        assert_eq!(pairs, vec![(0, 0), (1, 3), (2, 1), (3, 4), (4, 2), (5, 5)]);
    }

    #[test]
    fn broadcast_offsets_follow_kept_axes() {
        assert_eq!(broadcast_offsets(&[2, 3], &[1]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_offsets(&[2, 3], &[0]), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(broadcast_offsets(&[2, 2, 2], &[0, 2]), vec![0, 1, 0, 1, 2, 3, 2, 3]);
    }

    /// Reference convolution by explicit patch gathering and a product with
    /// the flattened kernel.
    fn patch_conv(geo: &ConvGeometry, x: &[f64], kernel: &[f64]) -> Vec<f64> {
        let ckk = geo.kh * geo.kw * geo.cin;
        let mut cols = vec![0.0; geo.h * geo.w * ckk];
        for y in 0..geo.h {
            for xx in 0..geo.w {
                for ki in 0..geo.kh {
                    for kj in 0..geo.kw {
                        let sy = y as isize + ki as isize - (geo.kh / 2) as isize;
                        let sx = xx as isize + kj as isize - (geo.kw / 2) as isize;
                        if sy < 0 || sx < 0 || sy >= geo.h as isize || sx >= geo.w as isize {
                            continue;
                        }
                        for c in 0..geo.cin {
                            cols[(y * geo.w + xx) * ckk + (ki * geo.kw + kj) * geo.cin + c] =
                                x[(sy as usize * geo.w + sx as usize) * geo.cin + c];
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; geo.image_out()];
        gemm(1.0, MatRef::new(&cols, geo.h * geo.w, ckk), MatRef::new(kernel, ckk, geo.cout), 0.0, &mut out);
        out
    }

    #[test]
    fn direct_conv_matches_patch_product_and_its_adjoints() {
        for (cin, cout, kh) in [(2, 3, 3), (4, 4, 3), (1, 8, 5), (8, 4, 1)] {
            check_conv(ConvGeometry { h: 4, w: 5, cin, kh, kw: kh, cout });
        }
    }

    fn check_conv(geo: ConvGeometry) {
        let x: Vec<f64> = (0..geo.image_in()).map(|v| ((v * 7) % 5) as f64 - 2.0).collect();
        let k: Vec<f64> = (0..geo.kh * geo.kw * geo.cin * geo.cout).map(|v| ((v * 3) % 7) as f64 * 0.25 - 0.5).collect();
        let g: Vec<f64> = (0..geo.image_out()).map(|v| ((v * 5) % 11) as f64 - 5.0).collect();
        let mut out = vec![0.0; geo.image_out()];
        geo.forward(&x, &k, &mut out);
        let want = patch_conv(&geo, &x, &k);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let lhs: f64 = out.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut gx = vec![0.0; x.len()];
        geo.input_grad(&k, &g, &mut gx);
        let rhs_x: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let mut gk = vec![0.0; k.len()];
        geo.kernel_grad(&x, &g, &mut gk);
        let rhs_k: f64 = gk.iter().zip(&k).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-9 && (lhs - rhs_k).abs() < 1e-9);
    }
}
