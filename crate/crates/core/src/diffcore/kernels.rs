//! Dense loops behind the graph ops.
//!
//! Every output element accumulates its products in ascending index order
//! starting from zero, independent of how many rows share the call. That
//! keeps per-sample results identical across batch compositions.

use super::tensor::Scalar;

/// `out[n,p] = a[n,m] * b[m,p]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], n: usize, m: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * p];
    for i in 0..n {
        let row = &mut out[i * p..(i + 1) * p];
        for k in 0..m {
            let aik = a[i * m + k];
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
    out
}

/// `out[n,p] = a[m,n]^T * b[m,p]`
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * p];
    for k in 0..m {
        let arow = &a[k * n..(k + 1) * n];
        let brow = &b[k * p..(k + 1) * p];
        for (i, &aki) in arow.iter().enumerate() {
            if aki == T::zero() {
                continue;
            }
            let row = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aki * bv;
            }
        }
    }
    out
}

/// `out[n,p] = a[n,m] * b[p,m]^T`
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], n: usize, m: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * p];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..p {
            let brow = &b[j * m..(j + 1) * m];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            out[i * p + j] = s;
        }
    }
    out
}

/// Geometry of a stride-1 "same" convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Row length of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

/// Unfolds one `[C,H,W]` sample into a `[H*W, C*k*k]` patch matrix, zero padded.
/// Columns are ordered channel-major, then kernel row, then kernel column.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (h, w, k, pad) = (g.height, g.width, g.kernel, g.pad() as isize);
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); g.positions() * plen];
    for y in 0..h {
        for xx in 0..w {
            let row = &mut cols[(y * w + xx) * plen..(y * w + xx + 1) * plen];
            let mut idx = 0;
            for c in 0..g.channels {
                let plane = &x[c * h * w..(c + 1) * h * w];
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad;
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            row[idx] = plane[sy as usize * w + sx as usize];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto one sample.
pub fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (h, w, k, pad) = (g.height, g.width, g.kernel, g.pad() as isize);
    let plen = g.patch_len();
    for y in 0..h {
        for xx in 0..w {
            let row = &cols[(y * w + xx) * plen..(y * w + xx + 1) * plen];
            let mut idx = 0;
            for c in 0..g.channels {
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad;
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            let at = c * h * w + sy as usize * w + sx as usize;
                            dx[at] = dx[at] + row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling over `[B,C,H,W]`. Returns pooled values and
/// the flat source index of each maximum; ties go to the first element in
/// row-major window order.
pub fn max_pool2<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(batch * channels * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..batch * channels {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let at = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[at] > x[best] {
                        best = at;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
