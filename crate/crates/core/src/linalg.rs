//! Matrix kernels and the im2col machinery behind conv2d.
//!
//! All kernels parallelize over disjoint output rows, so results are
//! bit-identical for any thread pool size.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// C[m,n] = A[m,k] * B[k,n]
pub fn mm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f32; m * n];
    c.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cj, &bj) in row.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    });
    c
}

/// C[m,n] = A[m,k] * B[n,k]^T
pub fn mm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0f32; m * n];
    c.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cj) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *cj = acc;
        }
    });
    c
}

/// C[m,n] = A[k,m]^T * B[k,n]
pub fn mm_tn(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f32; m * n];
    c.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for l in 0..k {
            let av = a[l * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cj, &bj) in row.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    });
    c
}

/// Geometry of a stride-1, zero-padded "same" convolution on NHWC data.
/// Weights are laid out `[kh, kw, c_in, c_out]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
}

impl ConvGeom {
    pub fn validate(&self) -> Result<()> {
        if self.kh % 2 == 0 || self.kw % 2 == 0 {
            return Err(Error::invalid(format!(
                "same-padded conv needs odd kernel dims, got {}x{}",
                self.kh, self.kw
            )));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    pub fn rows(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// Gather padded k×k patches: output is `[n*h*w, kh*kw*c_in]` row-major.
pub fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let plen = g.patch_len();
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let mut cols = vec![0.0f32; g.rows() * plen];
    cols.par_chunks_mut(g.h * g.w * plen)
        .enumerate()
        .for_each(|(img, chunk)| {
            let base = img * g.h * g.w * g.c_in;
            for oy in 0..g.h {
                for ox in 0..g.w {
                    let patch = &mut chunk[(oy * g.w + ox) * plen..(oy * g.w + ox + 1) * plen];
                    let mut p = 0;
                    for ky in 0..g.kh {
                        let iy = oy as isize + ky as isize - ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            p += g.kw * g.c_in;
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = ox as isize + kx as isize - pw as isize;
                            if ix < 0 || ix >= g.w as isize {
                                p += g.c_in;
                                continue;
                            }
                            let src = base + ((iy as usize * g.w) + ix as usize) * g.c_in;
                            patch[p..p + g.c_in].copy_from_slice(&x[src..src + g.c_in]);
                            p += g.c_in;
                        }
                    }
                }
            }
        });
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the image grid.
pub fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let plen = g.patch_len();
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let mut x = vec![0.0f32; g.n * g.h * g.w * g.c_in];
    x.par_chunks_mut(g.h * g.w * g.c_in)
        .enumerate()
        .for_each(|(img, out)| {
            let cbase = img * g.h * g.w * plen;
            for oy in 0..g.h {
                for ox in 0..g.w {
                    let patch = &cols[cbase + (oy * g.w + ox) * plen..][..plen];
                    let mut p = 0;
                    for ky in 0..g.kh {
                        let iy = oy as isize + ky as isize - ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            p += g.kw * g.c_in;
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = ox as isize + kx as isize - pw as isize;
                            if ix < 0 || ix >= g.w as isize {
                                p += g.c_in;
                                continue;
                            }
                            let dst = ((iy as usize * g.w) + ix as usize) * g.c_in;
                            for c in 0..g.c_in {
                                out[dst + c] += patch[p + c];
                            }
                            p += g.c_in;
                        }
                    }
                }
            }
        });
    x
}

/// y[n,h,w,oc] = sum_{ky,kx,ic} x_pad[n, h+ky-ph, w+kx-pw, ic] * w[ky,kx,ic,oc] + b[oc]
pub fn conv_forward(x: &[f32], w: &[f32], b: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let cols = im2col(x, g);
    let mut y = mm_nn(&cols, w, g.rows(), g.patch_len(), g.c_out);
    if let Some(b) = b {
        y.par_chunks_mut(g.c_out).for_each(|row| {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        });
    }
    y
}

/// Gradient of [`conv_forward`] with respect to the input.
pub fn conv_backward_data(dy: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    let dcols = mm_nt(dy, w, g.rows(), g.c_out, g.patch_len());
    col2im(&dcols, g)
}

/// Gradients of [`conv_forward`] with respect to the weights and bias.
pub fn conv_backward_weights(x: &[f32], dy: &[f32], g: &ConvGeom) -> (Vec<f32>, Vec<f32>) {
    let cols = im2col(x, g);
    let dw = mm_tn(&cols, dy, g.rows(), g.patch_len(), g.c_out);
    let mut db = vec![0.0f32; g.c_out];
    for row in dy.chunks(g.c_out) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    (dw, db)
}
