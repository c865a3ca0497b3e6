//! Blockwise normal-float quantization.
//!
//! Each block stores an fp16 scale (the block's absmax, rounded up to the next
//! representable half) followed by `block_size` codebook indices packed
//! LSB-first into a little-endian bit stream.

use half::f16;

use crate::lut_store::LutError;

/// 4-bit normal-float codebook (16 entries, ascending, exact 0 and ±1).
#[allow(clippy::excessive_precision)]
pub const NF4_CODEBOOK: [f32; 16] = [
    -1.0,
    -0.69619289060372,
    -0.5250730386952291,
    -0.3949174906993099,
    -0.2844413576181077,
    -0.18477343519288886,
    -0.09104999214427931,
    0.0,
    0.07958032909416937,
    0.16093017270493618,
    0.2461122939299359,
    0.33791519352165506,
    0.44070980241319013,
    0.562616970075237,
    0.7229567278928821,
    1.0,
];

/// 3-bit normal-float codebook (8 entries, ascending, exact 0 and ±1).
#[allow(clippy::excessive_precision)]
pub const NF3_CODEBOOK: [f32; 8] = [
    -1.0,
    -0.4786291601159111,
    -0.21714181782574396,
    0.0,
    0.16093017270493618,
    0.33791519352165506,
    0.562616970075237,
    1.0,
];

pub fn codebook(bits: u32) -> Result<&'static [f32], LutError> {
    match bits {
        4 => Ok(&NF4_CODEBOOK),
        3 => Ok(&NF3_CODEBOOK),
        other => Err(LutError::UnsupportedBits(other)),
    }
}

/// Largest distance between adjacent codebook entries.
pub fn max_codebook_gap(bits: u32) -> Result<f32, LutError> {
    let cb = codebook(bits)?;
    Ok(cb.windows(2).map(|w| w[1] - w[0]).fold(0.0, f32::max))
}

/// Bytes one quantized block occupies: fp16 scale plus packed codes.
pub fn block_bytes(bits: u32, block_size: usize) -> usize {
    2 + (block_size * bits as usize).div_ceil(8)
}

/// Quantized bytes over fp16 bytes for one block.
pub fn compression_ratio(bits: u32, block_size: usize) -> Result<f64, LutError> {
    if block_size == 0 {
        return Err(LutError::InvalidBlockSize {
            block_size: 0,
            reason: "must be positive".into(),
        });
    }
    let ratio = (block_size as f64 * bits as f64 / 8.0 + 2.0) / (block_size as f64 * 2.0);
    if ratio > 1.0 || bits == 0 {
        return Err(LutError::UnsupportedBits(bits));
    }
    Ok(ratio)
}

/// Index of the nearest codebook entry, ties toward the lower index.
pub fn nearest_code(codebook: &[f32], x: f32) -> usize {
    // The codebook is ascending, so the nearest entry is one of the two
    // neighbours of the insertion point.
    let hi = codebook.partition_point(|&c| c < x);
    if hi == 0 {
        return 0;
    }
    if hi == codebook.len() {
        return hi - 1;
    }
    let (lo_d, hi_d) = (x - codebook[hi - 1], codebook[hi] - x);
    if hi_d < lo_d {
        hi
    } else {
        hi - 1
    }
}

/// Smallest fp16 value that is `>= x` for finite non-negative `x`.
fn f16_round_up(x: f32) -> f16 {
    let h = f16::from_f32(x);
    if h.to_f32() >= x {
        h
    } else {
        f16::from_bits(h.to_bits() + 1)
    }
}

fn check_layout(len: usize, bits: u32, block_size: usize) -> Result<(), LutError> {
    codebook(bits)?;
    if block_size == 0 || !len.is_multiple_of(block_size) {
        return Err(LutError::InvalidBlockSize {
            block_size: block_size as u32,
            reason: format!("must be positive and divide the row width {len}"),
        });
    }
    Ok(())
}

/// Appends the quantized blocks of `values` to `out`.
pub fn quantize_row_into(values: &[f32], bits: u32, block_size: usize, out: &mut Vec<u8>) -> Result<(), LutError> {
    check_layout(values.len(), bits, block_size)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(LutError::NonFinite);
    }
    let cb = codebook(bits)?;
    let code_bytes = block_bytes(bits, block_size) - 2;
    for block in values.chunks_exact(block_size) {
        let absmax = block.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        if absmax > f16::MAX.to_f32() {
            return Err(LutError::NonFinite);
        }
        let scale = f16_round_up(absmax);
        out.extend_from_slice(&scale.to_bits().to_le_bytes());
        let s = scale.to_f32();
        let start = out.len();
        out.resize(start + code_bytes, 0);
        let packed = &mut out[start..];
        for (i, &v) in block.iter().enumerate() {
            let code = if s == 0.0 {
                nearest_code(cb, 0.0)
            } else {
                nearest_code(cb, v / s)
            };
            put_bits(packed, i * bits as usize, bits, code as u32);
        }
    }
    Ok(())
}

pub fn quantize_row(values: &[f32], bits: u32, block_size: usize) -> Result<Vec<u8>, LutError> {
    let mut out = Vec::with_capacity(values.len() / block_size.max(1) * block_bytes(bits, block_size.max(1)));
    quantize_row_into(values, bits, block_size, &mut out)?;
    Ok(out)
}

/// Decodes `d` values from consecutive blocks in `bytes` into `out`.
pub fn dequantize_row_into(bytes: &[u8], bits: u32, block_size: usize, out: &mut [f32]) -> Result<(), LutError> {
    check_layout(out.len(), bits, block_size)?;
    let cb = codebook(bits)?;
    let bb = block_bytes(bits, block_size);
    let n_blocks = out.len() / block_size;
    if bytes.len() != n_blocks * bb {
        return Err(LutError::PayloadLengthMismatch {
            expected: (n_blocks * bb) as u64,
            actual: bytes.len() as u64,
        });
    }
    for (block, dst) in bytes.chunks_exact(bb).zip(out.chunks_exact_mut(block_size)) {
        let scale = f16::from_bits(u16::from_le_bytes([block[0], block[1]])).to_f32();
        for (i, o) in dst.iter_mut().enumerate() {
            let code = get_bits(&block[2..], i * bits as usize, bits) as usize;
            *o = cb[code] * scale;
        }
    }
    Ok(())
}

pub fn dequantize_row(bytes: &[u8], bits: u32, block_size: usize, d: usize) -> Result<Vec<f32>, LutError> {
    let mut out = vec![0.0; d];
    dequantize_row_into(bytes, bits, block_size, &mut out)?;
    Ok(out)
}

fn put_bits(buf: &mut [u8], bit: usize, width: u32, value: u32) {
    for b in 0..width as usize {
        if value >> b & 1 == 1 {
            let pos = bit + b;
            buf[pos / 8] |= 1 << (pos % 8);
        }
    }
}

fn get_bits(buf: &[u8], bit: usize, width: u32) -> u32 {
    let mut v = 0;
    for b in 0..width as usize {
        let pos = bit + b;
        v |= ((buf[pos / 8] >> (pos % 8)) as u32 & 1) << b;
    }
    v
}
