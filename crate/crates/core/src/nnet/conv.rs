//! Planar valid (unpadded) strided convolution on flattened channels.
//!
//! Both the lifting and the group convolution expand their kernels into an
//! ordinary `[out_planes][in_planes * k * k]` matrix and delegate here. The
//! heavy lifting is an im2col copy followed by a single-threaded sgemm, so the
//! summation order of every output element is fixed regardless of where it
//! sits in the map.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_planes: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.in_planes * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }
}

fn im2col(x: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let plane = g.height * g.width;
    for c in 0..g.in_planes {
        let src = &x[c * plane..(c + 1) * plane];
        for i in 0..k {
            for j in 0..k {
                let row = (c * k + i) * k + j;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let sy = y * g.stride + i;
                    let base = sy * g.width + j;
                    let out_row = &mut dst[y * ow..(y + 1) * ow];
                    if g.stride == 1 {
                        out_row.copy_from_slice(&src[base..base + ow]);
                    } else {
                        for (x, v) in out_row.iter_mut().enumerate() {
                            *v = src[base + x * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeometry, dx: &mut [f32]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let plane = g.height * g.width;
    for c in 0..g.in_planes {
        let dst = &mut dx[c * plane..(c + 1) * plane];
        for i in 0..k {
            for j in 0..k {
                let row = (c * k + i) * k + j;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let sy = y * g.stride + i;
                    let base = sy * g.width + j;
                    for x in 0..ow {
                        dst[base + x * g.stride] += src[y * ow + x];
                    }
                }
            }
        }
    }
}

/// `c[m x n] = alpha * op(a) * op(b) + beta * c`, row-major, with optional
/// transposes expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // in-bounds row-major layouts of those slices.
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

/// Samples per batched gemm; bounds the im2col scratch buffer.
const CHUNK: usize = 16;

/// Copies `batch` samples of `planes` planes of `len` values from the
/// `[b][p][len]` layout into `[p][b][len]`, or back when `inverse`.
fn interleave(src: &[f32], batch: usize, planes: usize, len: usize, dst: &mut [f32], inverse: bool) {
    for b in 0..batch {
        for p in 0..planes {
            let sample_major = (b * planes + p) * len;
            let plane_major = (p * batch + b) * len;
            if inverse {
                dst[sample_major..sample_major + len].copy_from_slice(&src[plane_major..plane_major + len]);
            } else {
                dst[plane_major..plane_major + len].copy_from_slice(&src[sample_major..sample_major + len]);
            }
        }
    }
}

/// Lays out the im2col matrices of `batch` samples side by side:
/// `[col_rows][batch * col_cols]`.
fn im2col_batch(x: &[f32], batch: usize, g: &ConvGeometry, scratch: &mut [f32], cols: &mut [f32]) {
    let in_len = g.in_planes * g.height * g.width;
    let n = g.col_cols();
    if g.is_pointwise() {
        interleave(x, batch, g.in_planes, n, cols, false);
        return;
    }
    let single = g.col_rows() * n;
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut scratch[..single]);
        for r in 0..g.col_rows() {
            let dst = (r * batch + b) * n;
            cols[dst..dst + n].copy_from_slice(&scratch[r * n..(r + 1) * n]);
        }
    }
}

/// Forward pass for a batch. `x` holds `batch` samples of `g.in_planes`
/// planes; `weight` is `[out_planes][g.col_rows()]`; `y` receives
/// `batch * out_planes * out_h * out_w` values.
pub(crate) fn conv_forward(
    x: &[f32],
    batch: usize,
    g: &ConvGeometry,
    weight: &[f32],
    out_planes: usize,
    y: &mut [f32],
) {
    let in_len = g.in_planes * g.height * g.width;
    let n = g.col_cols();
    let out_len = out_planes * n;
    let chunk = CHUNK.min(batch);
    let mut scratch = vec![0.0f32; g.col_rows() * n];
    let mut cols = vec![0.0f32; g.col_rows() * n * chunk];
    let mut prod = vec![0.0f32; out_len * chunk];
    for b0 in (0..batch).step_by(chunk) {
        let nb = chunk.min(batch - b0);
        let xs = &x[b0 * in_len..(b0 + nb) * in_len];
        let cols = &mut cols[..g.col_rows() * n * nb];
        im2col_batch(xs, nb, g, &mut scratch, cols);
        let prod = &mut prod[..out_len * nb];
        gemm(out_planes, g.col_rows(), n * nb, weight, false, cols, false, 0.0, prod);
        interleave(prod, nb, out_planes, n, &mut y[b0 * out_len..(b0 + nb) * out_len], true);
    }
}

/// Backward pass. Accumulates into `dweight`; when `dx` is given, it is
/// overwritten with the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f32],
    batch: usize,
    g: &ConvGeometry,
    weight: &[f32],
    out_planes: usize,
    dy: &[f32],
    mut dx: Option<&mut [f32]>,
    dweight: &mut [f32],
) {
    let in_len = g.in_planes * g.height * g.width;
    let n = g.col_cols();
    let out_len = out_planes * n;
    let rows = g.col_rows();
    let chunk = CHUNK.min(batch);
    let mut scratch = vec![0.0f32; rows * n];
    let mut cols = vec![0.0f32; rows * n * chunk];
    let mut dys = vec![0.0f32; out_len * chunk];
    if let Some(dx) = dx.as_deref_mut() {
        dx.iter_mut().for_each(|v| *v = 0.0);
    }
    for b0 in (0..batch).step_by(chunk) {
        let nb = chunk.min(batch - b0);
        let cols = &mut cols[..rows * n * nb];
        let dys = &mut dys[..out_len * nb];
        im2col_batch(&x[b0 * in_len..(b0 + nb) * in_len], nb, g, &mut scratch, cols);
        interleave(&dy[b0 * out_len..(b0 + nb) * out_len], nb, out_planes, n, dys, false);
        // dW += dY * cols^T
        gemm(out_planes, n * nb, rows, dys, false, cols, true, 1.0, dweight);
        if let Some(dx) = dx.as_deref_mut() {
            // dcols = W^T * dY, reusing the im2col buffer
            gemm(rows, out_planes, n * nb, weight, true, dys, false, 0.0, cols);
            let dxs = &mut dx[b0 * in_len..(b0 + nb) * in_len];
            if g.is_pointwise() {
                interleave(cols, nb, g.in_planes, n, dxs, true);
            } else {
                for b in 0..nb {
                    for r in 0..rows {
                        let src = (r * nb + b) * n;
                        scratch[r * n..(r + 1) * n].copy_from_slice(&cols[src..src + n]);
                    }
                    col2im(&scratch, g, &mut dxs[b * in_len..(b + 1) * in_len]);
                }
            }
        }
    }
}
