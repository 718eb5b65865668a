//! Raw slice kernels behind the graph ops. Shapes are validated by callers.

use std::ops::Range;

use crate::scalar::Scalar;

/// Target size, in elements, of one column-matrix tile; keeps the unfolded
/// input cache resident while the GEMM consumes it.
const TILE_ELEMS: usize = 1 << 17;

/// Spatial geometry of one convolution, with precomputed output extents.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1x1 stride-1 unpadded convolutions read the input directly as the
    /// column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output rows per column tile.
    fn tile_rows(&self) -> usize {
        (TILE_ELEMS / (self.col_rows() * self.out_w).max(1)).clamp(1, self.out_h.max(1))
    }

    fn tiles(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        let step = self.tile_rows();
        (0..self.out_h).step_by(step).map(move |y0| y0..(y0 + step).min(self.out_h))
    }
}

/// Unfolds output rows `rows` of one image (`in_c x in_h x in_w`) into a
/// column matrix of `(in_c * k * k) x (rows.len() * out_w)`, zero-filled
/// where taps fall in padding.
pub(crate) fn im2col<T: Scalar>(input: &[T], s: &ConvShape, rows: Range<usize>, cols: &mut [T]) {
    let plane = rows.len() * s.out_w;
    for ci in 0..s.in_c {
        let src = &input[ci * s.in_h * s.in_w..(ci + 1) * s.in_h * s.in_w];
        for ki in 0..s.k {
            for kj in 0..s.k {
                let row = (ci * s.k + ki) * s.k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for (ly, oy) in rows.clone().enumerate() {
                    let line = &mut dst[ly * s.out_w..(ly + 1) * s.out_w];
                    let iy = (oy * s.stride + ki * s.dilation) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_line = &src[iy as usize * s.in_w..(iy as usize + 1) * s.in_w];
                    let x0 = (kj * s.dilation) as isize - s.pad as isize;
                    if s.stride == 1 {
                        let (lo, hi) = valid_range(x0, s.out_w, s.in_w);
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if lo < hi {
                            let start = (lo as isize + x0) as usize;
                            line[lo..hi].copy_from_slice(&src_line[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s.stride) as isize + x0;
                            *v = if ix >= 0 && ix < s.in_w as isize { src_line[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix for output rows `rows`
/// back into an image, accumulating into `out`.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], s: &ConvShape, rows: Range<usize>, out: &mut [T]) {
    let plane = rows.len() * s.out_w;
    for ci in 0..s.in_c {
        let dst = &mut out[ci * s.in_h * s.in_w..(ci + 1) * s.in_h * s.in_w];
        for ki in 0..s.k {
            for kj in 0..s.k {
                let row = (ci * s.k + ki) * s.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for (ly, oy) in rows.clone().enumerate() {
                    let iy = (oy * s.stride + ki * s.dilation) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.in_h as isize {
                        continue;
                    }
                    let line = &src[ly * s.out_w..(ly + 1) * s.out_w];
                    let dst_line = &mut dst[iy as usize * s.in_w..(iy as usize + 1) * s.in_w];
                    let x0 = (kj * s.dilation) as isize - s.pad as isize;
                    if s.stride == 1 {
                        let (lo, hi) = valid_range(x0, s.out_w, s.in_w);
                        if lo < hi {
                            let start = (lo as isize + x0) as usize;
                            for (d, &v) in dst_line[start..start + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                                *d += v;
                            }
                        }
                    } else {
                        for (ox, &v) in line.iter().enumerate() {
                            let ix = (ox * s.stride) as isize + x0;
                            if ix >= 0 && ix < s.in_w as isize {
                                dst_line[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `ox` in `[lo, hi)` whose input column `ox + x0` is in bounds.
fn valid_range(x0: isize, out_w: usize, in_w: usize) -> (usize, usize) {
    let lo = (-x0).clamp(0, out_w as isize) as usize;
    let hi = (in_w as isize - x0).clamp(0, out_w as isize) as usize;
    (lo, hi.max(lo))
}

/// Forward convolution of a whole batch. `out` must be sized
/// `batch * out_c * out_h * out_w`.
pub(crate) fn conv2d_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    batch: usize,
    s: &ConvShape,
    out: &mut [T],
) {
    let in_item = s.in_c * s.in_h * s.in_w;
    let out_item = s.out_c * s.out_plane();
    let rows = s.col_rows();
    let plane = s.out_plane();
    let mut cols = if s.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * s.tile_rows() * s.out_w] };
    for b in 0..batch {
        let x = &input[b * in_item..(b + 1) * in_item];
        let y = &mut out[b * out_item..(b + 1) * out_item];
        match bias {
            Some(bias) => {
                for (co, chunk) in y.chunks_mut(plane).enumerate() {
                    chunk.fill(bias[co]);
                }
            }
            None => y.fill(T::zero()),
        }
        if s.is_pointwise() {
            T::gemm(
                s.out_c, rows, plane, T::one(), weight, rows as isize, 1, x, plane as isize, 1, T::one(), y,
                plane as isize, 1,
            );
            continue;
        }
        for tile in s.tiles() {
            let n = tile.len() * s.out_w;
            let off = tile.start * s.out_w;
            im2col(x, s, tile, &mut cols);
            T::gemm(
                s.out_c, rows, n, T::one(), weight, rows as isize, 1, &cols, n as isize, 1, T::one(), &mut y[off..],
                plane as isize, 1,
            );
        }
    }
}

/// Backward convolution. Accumulates into whichever of the three gradient
/// buffers are supplied.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    batch: usize,
    s: &ConvShape,
    mut grad_input: Option<&mut [T]>,
    mut grad_weight: Option<&mut [T]>,
    mut grad_bias: Option<&mut [T]>,
) {
    let in_item = s.in_c * s.in_h * s.in_w;
    let out_item = s.out_c * s.out_plane();
    let rows = s.col_rows();
    let plane = s.out_plane();
    let pointwise = s.is_pointwise();
    let tile_len = rows * s.tile_rows() * s.out_w;
    let mut cols = if pointwise || grad_weight.is_none() { Vec::new() } else { vec![T::zero(); tile_len] };
    let mut dcols = if pointwise || grad_input.is_none() { Vec::new() } else { vec![T::zero(); tile_len] };
    for b in 0..batch {
        let x = &input[b * in_item..(b + 1) * in_item];
        let dy = &grad_out[b * out_item..(b + 1) * out_item];
        if let Some(gb) = grad_bias.as_deref_mut() {
            for (co, chunk) in dy.chunks(plane).enumerate() {
                gb[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if pointwise {
            if let Some(gw) = grad_weight.as_deref_mut() {
                // dW (out_c x rows) += dY (out_c x plane) * X^T (plane x rows)
                T::gemm(
                    s.out_c, plane, rows, T::one(), dy, plane as isize, 1, x, 1, plane as isize, T::one(), gw,
                    rows as isize, 1,
                );
            }
            if let Some(gi) = grad_input.as_deref_mut() {
                // dX (in_c x plane) += W^T (in_c x out_c) * dY
                T::gemm(
                    rows, s.out_c, plane, T::one(), weight, 1, rows as isize, dy, plane as isize, 1, T::one(),
                    &mut gi[b * in_item..(b + 1) * in_item], plane as isize, 1,
                );
            }
            continue;
        }
        for tile in s.tiles() {
            let n = tile.len() * s.out_w;
            let dy_tile = &dy[tile.start * s.out_w..];
            if let Some(gw) = grad_weight.as_deref_mut() {
                im2col(x, s, tile.clone(), &mut cols);
                T::gemm(
                    s.out_c, n, rows, T::one(), dy_tile, plane as isize, 1, &cols, 1, n as isize, T::one(), gw,
                    rows as isize, 1,
                );
            }
            if let Some(gi) = grad_input.as_deref_mut() {
                T::gemm(
                    rows, s.out_c, n, T::one(), weight, 1, rows as isize, dy_tile, plane as isize, 1, T::zero(),
                    &mut dcols, n as isize, 1,
                );
                col2im_add(&dcols, s, tile, &mut gi[b * in_item..(b + 1) * in_item]);
            }
        }
    }
}

/// 2x2 stride-2 max pooling over `planes` independent `h x w` planes.
/// Records the flat input index of each window maximum (first on ties).
pub(crate) fn maxpool2_forward<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour 2x upsampling.
pub(crate) fn upsample2_forward<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ow = 2 * w;
    let mut out = vec![T::zero(); planes * 4 * h * w];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..h {
            let row = &mut dst[2 * y * ow..(2 * y + 1) * ow];
            for x in 0..w {
                row[2 * x] = src[y * w + x];
                row[2 * x + 1] = src[y * w + x];
            }
            let (top, bottom) = dst[2 * y * ow..(2 * y + 2) * ow].split_at_mut(ow);
            bottom.copy_from_slice(top);
        }
    }
    out
}

pub(crate) fn upsample2_backward_add<T: Scalar>(grad_out: &[T], planes: usize, h: usize, w: usize, grad_in: &mut [T]) {
    let ow = 2 * w;
    for p in 0..planes {
        let src = &grad_out[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut grad_in[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * ow + 2 * x;
                dst[y * w + x] += src[i] + src[i + 1] + src[i + ow] + src[i + ow + 1];
            }
        }
    }
}
