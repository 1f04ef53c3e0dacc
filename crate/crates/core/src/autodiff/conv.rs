//! Valid (unpadded) 2-D cross-correlation via im2col + GEMM.

use crate::scalar::{MatRef, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
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

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn image_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }
}

/// Unfolds one image into a `[Cin*K*K, Ho*Wo]` matrix. Rows are ordered by
/// (channel, kernel row, kernel column).
fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let (k, s) = (g.kernel, g.stride);
    let (ho, wo) = (g.out_height(), g.out_width());
    let npos = ho * wo;
    for ci in 0..g.in_channels {
        let plane = &image[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oh in 0..ho {
                    let src_row = (oh * s + kh) * g.width + kw;
                    let d = &mut dst[oh * wo..(oh + 1) * wo];
                    if s == 1 {
                        d.copy_from_slice(&plane[src_row..src_row + wo]);
                    } else {
                        for (ow, v) in d.iter_mut().enumerate() {
                            *v = plane[src_row + ow * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im_add<T: Scalar>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let (k, s) = (g.kernel, g.stride);
    let (ho, wo) = (g.out_height(), g.out_width());
    let npos = ho * wo;
    for ci in 0..g.in_channels {
        let plane = &mut image[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let src = &cols[row * npos..(row + 1) * npos];
                for oh in 0..ho {
                    let dst_row = (oh * s + kh) * g.width + kw;
                    for ow in 0..wo {
                        plane[dst_row + ow * s] += src[oh * wo + ow];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let npos = g.out_positions();
    let plen = g.patch_len();
    let out_img = g.out_channels * npos;
    let mut out = vec![T::zero(); g.batch * out_img];
    let mut cols = vec![T::zero(); plen * npos];
    let w = MatRef::row_major(kernel, g.out_channels, plen);
    for b in 0..g.batch {
        im2col(g, &input[b * g.image_len()..(b + 1) * g.image_len()], &mut cols);
        let dst = &mut out[b * out_img..(b + 1) * out_img];
        T::gemm(w, MatRef::row_major(&cols, plen, npos), dst, npos, 1, false);
        for (co, chunk) in dst.chunks_mut(npos).enumerate() {
            let bv = bias[co];
            for v in chunk {
                *v += bv;
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (want_x, want_w, want_b) = want;
    let npos = g.out_positions();
    let plen = g.patch_len();
    let out_img = g.out_channels * npos;
    let mut dx = want_x.then(|| vec![T::zero(); input.len()]);
    let mut dw = want_w.then(|| vec![T::zero(); kernel.len()]);
    let mut db = want_b.then(|| vec![T::zero(); g.out_channels]);
    let mut cols = vec![T::zero(); plen * npos];
    let mut dcols = if want_x { vec![T::zero(); plen * npos] } else { Vec::new() };
    let w = MatRef::row_major(kernel, g.out_channels, plen);
    for b in 0..g.batch {
        let gy = &grad_out[b * out_img..(b + 1) * out_img];
        let gy_mat = MatRef::row_major(gy, g.out_channels, npos);
        if let Some(db) = db.as_mut() {
            for (co, chunk) in gy.chunks(npos).enumerate() {
                db[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(g, &input[b * g.image_len()..(b + 1) * g.image_len()], &mut cols);
            T::gemm(gy_mat, MatRef::transposed(&cols, plen, npos), dw, plen, 1, true);
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(w.t(), gy_mat, &mut dcols, npos, 1, false);
            col2im_add(g, &dcols, &mut dx[b * g.image_len()..(b + 1) * g.image_len()]);
        }
    }
    ConvGrads { input: dx, kernel: dw, bias: db }
}
