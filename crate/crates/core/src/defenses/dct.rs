//! JPEG-style DCT quantization as a purification baseline: blockwise
//! orthonormal 8x8 DCT, divide-round-multiply against a quality-scaled
//! quantization table, inverse transform. No entropy coding; compression
//! artifacts are the whole point.

use std::f32::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BLOCK: usize = 8;

/// Standard base luminance quantization table (quality 50), row-major.
const BASE_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Standard base chrominance quantization table (quality 50), row-major.
const BASE_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Quality-scaled 8x8 quantization tables. Every entry stays in [1, 255].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantTables {
    pub luminance: [u16; 64],
    pub chrominance: [u16; 64],
    pub quality: u8,
}

impl QuantTables {
    /// Scale the base tables with the usual convention:
    /// scale = 5000/q below 50, otherwise 200 - 2q; entries are
    /// floor((base*scale + 50)/100) clamped to [1, 255].
    pub fn new(quality: u8) -> Result<QuantTables> {
        if !(1..=100).contains(&quality) {
            return Err(Error::invalid(format!(
                "quality must be in [1, 100], got {quality}"
            )));
        }
        let scale: u32 = if quality < 50 {
            5000 / quality as u32
        } else {
            200 - 2 * quality as u32
        };
        let scaled = |base: &[u16; 64]| {
            let mut out = [0u16; 64];
            for (o, &b) in out.iter_mut().zip(base) {
                *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
            }
            out
        };
        Ok(QuantTables {
            luminance: scaled(&BASE_LUMA),
            chrominance: scaled(&BASE_CHROMA),
            quality,
        })
    }
}

/// cos(pi*(2n+1)k/16) with the orthonormal scale factors, cached.
fn basis() -> &'static [[f32; BLOCK]; BLOCK] {
    static BASIS: OnceLock<[[f32; BLOCK]; BLOCK]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0f32; BLOCK]; BLOCK];
        for (k, row) in b.iter_mut().enumerate() {
            let ck = if k == 0 {
                (1.0 / BLOCK as f32).sqrt()
            } else {
                (2.0 / BLOCK as f32).sqrt()
            };
            for (n, v) in row.iter_mut().enumerate() {
                *v = ck * (PI * (2 * n + 1) as f32 * k as f32 / (2 * BLOCK) as f32).cos();
            }
        }
        b
    })
}

fn check_block(block: &Tensor) -> Result<()> {
    if block.shape() != [BLOCK, BLOCK] {
        return Err(Error::shape("dct block", &[BLOCK, BLOCK], block.shape()));
    }
    Ok(())
}

fn dct2d(x: &[f32; 64]) -> [f32; 64] {
    let b = basis();
    let mut tmp = [0.0f32; 64];
    // Rows: tmp[i][k] = sum_n x[i][n] * b[k][n]
    for i in 0..BLOCK {
        for k in 0..BLOCK {
            let mut acc = 0.0;
            for n in 0..BLOCK {
                acc += x[i * BLOCK + n] * b[k][n];
            }
            tmp[i * BLOCK + k] = acc;
        }
    }
    // Columns: out[k][j] = sum_i tmp[i][j] * b[k][i]
    let mut out = [0.0f32; 64];
    for k in 0..BLOCK {
        for j in 0..BLOCK {
            let mut acc = 0.0;
            for i in 0..BLOCK {
                acc += tmp[i * BLOCK + j] * b[k][i];
            }
            out[k * BLOCK + j] = acc;
        }
    }
    out
}

fn idct2d(c: &[f32; 64]) -> [f32; 64] {
    let b = basis();
    let mut tmp = [0.0f32; 64];
    // Rows: tmp[u][n] = sum_k c[u][k] * b[k][n]
    for u in 0..BLOCK {
        for n in 0..BLOCK {
            let mut acc = 0.0;
            for k in 0..BLOCK {
                acc += c[u * BLOCK + k] * b[k][n];
            }
            tmp[u * BLOCK + n] = acc;
        }
    }
    // Columns: out[i][n] = sum_u tmp[u][n] * b[u][i]
    let mut out = [0.0f32; 64];
    for i in 0..BLOCK {
        for n in 0..BLOCK {
            let mut acc = 0.0;
            for u in 0..BLOCK {
                acc += tmp[u * BLOCK + n] * b[u][i];
            }
            out[i * BLOCK + n] = acc;
        }
    }
    out
}

/// Orthonormal 2-D type-II DCT of one 8x8 block.
pub fn dct8x8(block: &Tensor) -> Result<Tensor> {
    check_block(block)?;
    let mut x = [0.0f32; 64];
    x.copy_from_slice(block.data());
    Tensor::new(vec![BLOCK, BLOCK], dct2d(&x).to_vec())
}

/// Exact inverse of `dct8x8`.
pub fn idct8x8(coeffs: &Tensor) -> Result<Tensor> {
    check_block(coeffs)?;
    let mut c = [0.0f32; 64];
    c.copy_from_slice(coeffs.data());
    Tensor::new(vec![BLOCK, BLOCK], idct2d(&c).to_vec())
}

/// Blockwise DCT quantization of an `[h, w, c]` image in [0,1].
///
/// Pixels are mapped to the centered 0..255 scale the tables are defined
/// on; every channel uses the luminance table (the input is RGB or gray,
/// not luma/chroma, and there is no subsampling). Edge blocks replicate
/// the last row/column and are cropped back after the inverse transform.
pub fn dct_quant_defense(image: &Tensor, quality: u8) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::invalid(format!(
            "dct_quant_defense expects an [h, w, c] image, got rank {}",
            image.rank()
        )));
    }
    let tables = QuantTables::new(quality)?;
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let bh = h.div_ceil(BLOCK) * BLOCK;
    let bw = w.div_ceil(BLOCK) * BLOCK;

    let mut out = vec![0.0f32; h * w * c];
    let mut padded = vec![0.0f32; bh * bw];
    for ch in 0..c {
        // Replication-pad one channel onto the block grid, centered scale.
        for i in 0..bh {
            let si = i.min(h - 1);
            for j in 0..bw {
                let sj = j.min(w - 1);
                padded[i * bw + j] = image.data()[(si * w + sj) * c + ch] * 255.0 - 128.0;
            }
        }
        for bi in (0..bh).step_by(BLOCK) {
            for bj in (0..bw).step_by(BLOCK) {
                let mut block = [0.0f32; 64];
                for i in 0..BLOCK {
                    for j in 0..BLOCK {
                        block[i * BLOCK + j] = padded[(bi + i) * bw + bj + j];
                    }
                }
                let mut coeffs = dct2d(&block);
                for (v, &q) in coeffs.iter_mut().zip(&tables.luminance) {
                    *v = (*v / q as f32).round() * q as f32;
                }
                let pixels = idct2d(&coeffs);
                for i in 0..BLOCK {
                    if bi + i >= h {
                        break;
                    }
                    for j in 0..BLOCK {
                        if bj + j >= w {
                            break;
                        }
                        let v = (pixels[i * BLOCK + j] + 128.0) / 255.0;
                        out[((bi + i) * w + bj + j) * c + ch] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}
