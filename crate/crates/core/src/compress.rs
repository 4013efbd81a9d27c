//! Compressor codecs and error-feedback state.
//!
//! Four codecs share one interface:
//!
//! * `Identity` — lossless pass-through, the uncompressed baseline.
//! * `OneBit` — one sign bit per element plus a single scale factor,
//!   `l2(input) / l2(sign_vector)`, so the reconstruction has the magnitude
//!   of the input. `sign(0) = +1`.
//! * `TopK` — keeps the `ceil(k_percent/100 * len)` entries of largest
//!   absolute value (ties to the lowest index), zero elsewhere.
//! * `StochasticQuant` — unbiased rounding onto `levels` uniform levels
//!   spanning `[-max|input|, +max|input|]`.
//!
//! Error feedback wraps any codec: the residual `delta` left by one call is
//! added to the next call's input, so what compression loses is re-injected
//! instead of dropped. The exact per-call identity
//! `decompress(out) + residual_after == input + residual_before`
//! is what every downstream conservation check rests on.
//!
//! Wire sizes are accounted exactly from the formats fixed here; the
//! byte serialization (`to_bytes` / `from_bytes`) is little-endian with
//! fixed-width headers and is stable across runs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseVector;

/// Which codec to apply, plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompressorSpec {
    Identity,
    OneBit,
    TopK { k_percent: f64 },
    StochasticQuant { levels: u32, seed: u64 },
}

impl CompressorSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            CompressorSpec::TopK { k_percent } => {
                if !(*k_percent > 0.0 && *k_percent <= 100.0) {
                    return Err(Error::config(format!(
                        "top_k k_percent must be in (0, 100], got {k_percent}"
                    )));
                }
            }
            CompressorSpec::StochasticQuant { levels, .. } => {
                if *levels < 2 {
                    return Err(Error::config(format!(
                        "stochastic_quant needs at least 2 levels, got {levels}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Seed for stochastic kinds; deterministic kinds draw nothing.
    pub fn seed(&self) -> u64 {
        match self {
            CompressorSpec::StochasticQuant { seed, .. } => *seed,
            _ => 0,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            CompressorSpec::Identity => "identity",
            CompressorSpec::OneBit => "one_bit",
            CompressorSpec::TopK { .. } => "top_k",
            CompressorSpec::StochasticQuant { .. } => "stochastic_quant",
        }
    }
}

/// How many of `len` entries a top-k codec keeps.
///
/// Rounds up and never returns zero for a nonempty input, so tiny test
/// vectors still send something. The product is formed before the division
/// so integral percentages stay exact in float (e.g. 10% of 12500 is 1250,
/// not 1250.0000000000002 rounded up to 1251).
pub fn top_k_kept(len: usize, k_percent: f64) -> usize {
    if len == 0 {
        return 0;
    }
    let kept = ((len as f64) * k_percent / 100.0).ceil() as usize;
    kept.clamp(1, len)
}

fn sq_bits_per_element(levels: u32) -> u64 {
    debug_assert!(levels >= 2);
    u64::from(u32::BITS - (levels - 1).leading_zeros())
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    Identity(Vec<f64>),
    OneBit {
        scale: f64,
        /// Packed LSB-first; a set bit means the element is negative.
        signs: Vec<u8>,
    },
    TopK {
        indices: Vec<u32>,
        values: Vec<f64>,
    },
    StochasticQuant {
        lo: f64,
        hi: f64,
        levels: u32,
        /// Packed little-endian bit stream, `ceil(log2 levels)` bits each.
        codes: Vec<u8>,
    },
}

/// Codec output for one chunk: payload plus enough metadata to reconstruct
/// a dense vector of `original_len` elements.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedChunk {
    original_len: usize,
    payload: Payload,
}

/// Per-(owner, chunk) compression residual; the `delta` of error feedback.
#[derive(Debug, Clone)]
pub struct ErrorState {
    residual: DenseVector,
}

impl ErrorState {
    pub fn zeros(len: usize) -> Self {
        ErrorState { residual: DenseVector::zeros(len) }
    }

    pub fn residual(&self) -> &DenseVector {
        &self.residual
    }

    pub fn len(&self) -> usize {
        self.residual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residual.is_empty()
    }
}

/// Round `x` onto grid point `lo + code * step`, going up with probability
/// equal to its fractional position between the neighboring levels. Unbiased:
/// the expected reconstruction equals `x`.
fn quantize_stochastic<R: Rng + ?Sized>(
    x: f64,
    lo: f64,
    step: f64,
    levels: u32,
    rng: &mut R,
) -> u32 {
    if step == 0.0 {
        return 0;
    }
    let pos = ((x - lo) / step).clamp(0.0, (levels - 1) as f64);
    let base = pos.floor();
    let frac = pos - base;
    let mut code = base as u32;
    if frac > 0.0 && rng.random::<f64>() < frac {
        code += 1;
    }
    code.min(levels - 1)
}

fn pack_bits(codes: &[u32], bits_per: u64) -> Vec<u8> {
    let total_bits = codes.len() as u64 * bits_per;
    let mut out = vec![0u8; total_bits.div_ceil(8) as usize];
    let mut bit_pos = 0u64;
    for &code in codes {
        for b in 0..bits_per {
            if (code >> b) & 1 == 1 {
                out[(bit_pos / 8) as usize] |= 1 << (bit_pos % 8);
            }
            bit_pos += 1;
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], bits_per: u64, count: usize) -> Vec<u32> {
    let mut codes = Vec::with_capacity(count);
    let mut bit_pos = 0u64;
    for _ in 0..count {
        let mut code = 0u32;
        for b in 0..bits_per {
            let byte = bytes[(bit_pos / 8) as usize];
            if (byte >> (bit_pos % 8)) & 1 == 1 {
                code |= 1 << b;
            }
            bit_pos += 1;
        }
        codes.push(code);
    }
    codes
}

/// Compress one chunk. Deterministic codecs ignore `rng`.
pub fn compress<R: Rng + ?Sized>(
    spec: &CompressorSpec,
    input: &DenseVector,
    rng: &mut R,
) -> Result<CompressedChunk> {
    spec.validate()?;
    let len = input.len();
    if len > u32::MAX as usize {
        return Err(Error::config("chunk longer than u32::MAX"));
    }
    let payload = match spec {
        CompressorSpec::Identity => Payload::Identity(input.as_slice().to_vec()),
        CompressorSpec::OneBit => {
            let input_norm = input.l2_norm();
            // sign vector is all +/-1, so its norm is sqrt(len)
            let scale = if len == 0 || input_norm == 0.0 {
                0.0
            } else {
                input_norm / (len as f64).sqrt()
            };
            let mut signs = vec![0u8; len.div_ceil(8)];
            for (i, v) in input.iter().enumerate() {
                if *v < 0.0 {
                    signs[i / 8] |= 1 << (i % 8);
                }
            }
            Payload::OneBit { scale, signs }
        }
        CompressorSpec::TopK { k_percent } => {
            let kept = top_k_kept(len, *k_percent);
            let mut order: Vec<u32> = (0..len as u32).collect();
            // sort by |value| descending, ties to the lowest index
            order.sort_unstable_by(|&a, &b| {
                let (va, vb) = (input[a as usize].abs(), input[b as usize].abs());
                vb.partial_cmp(&va).unwrap().then(a.cmp(&b))
            });
            let mut indices: Vec<u32> = order[..kept].to_vec();
            indices.sort_unstable();
            let values = indices.iter().map(|&i| input[i as usize]).collect();
            Payload::TopK { indices, values }
        }
        CompressorSpec::StochasticQuant { levels, .. } => {
            let levels = *levels;
            let max_abs = input.max_abs();
            let (lo, hi) = (-max_abs, max_abs);
            let step = if levels > 1 { (hi - lo) / (levels - 1) as f64 } else { 0.0 };
            let codes: Vec<u32> = input
                .iter()
                .map(|&x| quantize_stochastic(x, lo, step, levels, rng))
                .collect();
            let packed = pack_bits(&codes, sq_bits_per_element(levels));
            Payload::StochasticQuant { lo, hi, levels, codes: packed }
        }
    };
    Ok(CompressedChunk { original_len: len, payload })
}

impl CompressedChunk {
    pub fn original_len(&self) -> usize {
        self.original_len
    }

    /// The one-bit scale factor, if this chunk came from the one-bit codec.
    pub fn one_bit_scale(&self) -> Option<f64> {
        match &self.payload {
            Payload::OneBit { scale, .. } => Some(*scale),
            _ => None,
        }
    }

    /// Number of (index, value) pairs carried by a top-k chunk.
    pub fn top_k_sent(&self) -> Option<usize> {
        match &self.payload {
            Payload::TopK { indices, .. } => Some(indices.len()),
            _ => None,
        }
    }

    /// Dense reconstruction of exactly `original_len` elements.
    pub fn decompress(&self) -> DenseVector {
        let len = self.original_len;
        let data = match &self.payload {
            Payload::Identity(values) => values.clone(),
            Payload::OneBit { scale, signs } => (0..len)
                .map(|i| {
                    if (signs[i / 8] >> (i % 8)) & 1 == 1 {
                        -scale
                    } else {
                        *scale
                    }
                })
                .collect(),
            Payload::TopK { indices, values } => {
                let mut data = vec![0.0; len];
                for (&i, &v) in indices.iter().zip(values.iter()) {
                    data[i as usize] = v;
                }
                data
            }
            Payload::StochasticQuant { lo, hi, levels, codes } => {
                let step = if *levels > 1 { (hi - lo) / (*levels - 1) as f64 } else { 0.0 };
                let unpacked = unpack_bits(codes, sq_bits_per_element(*levels), len);
                unpacked.into_iter().map(|c| lo + c as f64 * step).collect()
            }
        };
        DenseVector::from_vec_unchecked(data)
    }

    /// Exact wire size of payload plus codec metadata, in bits.
    ///
    /// * one-bit: one sign bit per element + one f64 scale;
    /// * top-k: 96 bits per kept entry (u32 index + f64 value) + a 64-bit count;
    /// * identity: 64 bits per element;
    /// * stochastic quant: `ceil(log2 levels)` bits per element + 128 bits of
    ///   grid bounds.
    ///
    /// The self-describing container header written by [`to_bytes`]
    /// (kind byte + original length) is bookkeeping, not payload, and is not
    /// counted here.
    ///
    /// [`to_bytes`]: CompressedChunk::to_bytes
    pub fn wire_size_bits(&self) -> u64 {
        match &self.payload {
            Payload::Identity(values) => 64 * values.len() as u64,
            Payload::OneBit { .. } => self.original_len as u64 + 64,
            Payload::TopK { indices, .. } => indices.len() as u64 * 96 + 64,
            Payload::StochasticQuant { levels, .. } => {
                self.original_len as u64 * sq_bits_per_element(*levels) + 128
            }
        }
    }

    /// Serialize: `[kind u8][original_len u64 LE][codec payload]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let kind: u8 = match &self.payload {
            Payload::Identity(_) => 0,
            Payload::OneBit { .. } => 1,
            Payload::TopK { .. } => 2,
            Payload::StochasticQuant { .. } => 3,
        };
        out.push(kind);
        out.extend_from_slice(&(self.original_len as u64).to_le_bytes());
        match &self.payload {
            Payload::Identity(values) => {
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::OneBit { scale, signs } => {
                out.extend_from_slice(&scale.to_le_bytes());
                out.extend_from_slice(signs);
            }
            Payload::TopK { indices, values } => {
                out.extend_from_slice(&(indices.len() as u64).to_le_bytes());
                for (i, v) in indices.iter().zip(values.iter()) {
                    out.extend_from_slice(&i.to_le_bytes());
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::StochasticQuant { lo, hi, levels, codes } => {
                out.extend_from_slice(&lo.to_le_bytes());
                out.extend_from_slice(&hi.to_le_bytes());
                out.extend_from_slice(&levels.to_le_bytes());
                out.extend_from_slice(codes);
            }
        }
        out
    }

    /// Parse and validate a serialized chunk.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let kind = r.u8()?;
        let len = r.u64()? as usize;
        let payload = match kind {
            0 => {
                let mut values = Vec::with_capacity(len);
                for _ in 0..len {
                    values.push(r.finite_f64()?);
                }
                Payload::Identity(values)
            }
            1 => {
                let scale = r.finite_f64()?;
                let signs = r.take(len.div_ceil(8))?.to_vec();
                Payload::OneBit { scale, signs }
            }
            2 => {
                let count = r.u64()? as usize;
                if count > len {
                    return Err(Error::Decode(format!(
                        "top_k count {count} exceeds length {len}"
                    )));
                }
                let mut indices = Vec::with_capacity(count);
                let mut values = Vec::with_capacity(count);
                let mut prev: Option<u32> = None;
                for _ in 0..count {
                    let idx = r.u32()?;
                    if idx as usize >= len {
                        return Err(Error::Decode(format!(
                            "top_k index {idx} out of range {len}"
                        )));
                    }
                    if let Some(p) = prev {
                        if idx <= p {
                            return Err(Error::Decode(
                                "top_k indices not strictly increasing".into(),
                            ));
                        }
                    }
                    prev = Some(idx);
                    indices.push(idx);
                    values.push(r.finite_f64()?);
                }
                Payload::TopK { indices, values }
            }
            3 => {
                let lo = r.finite_f64()?;
                let hi = r.finite_f64()?;
                let levels = r.u32()?;
                if levels < 2 {
                    return Err(Error::Decode(format!("invalid level count {levels}")));
                }
                let bits = sq_bits_per_element(levels);
                let n_bytes = (len as u64 * bits).div_ceil(8) as usize;
                let codes = r.take(n_bytes)?.to_vec();
                for c in unpack_bits(&codes, bits, len) {
                    if c >= levels {
                        return Err(Error::Decode(format!(
                            "code {c} exceeds level count {levels}"
                        )));
                    }
                }
                Payload::StochasticQuant { lo, hi, levels, codes }
            }
            k => return Err(Error::Decode(format!("unknown codec kind {k}"))),
        };
        r.finish()?;
        Ok(CompressedChunk { original_len: len, payload })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Decode("truncated chunk".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finite_f64(&mut self) -> Result<f64> {
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Decode(format!("non-finite payload value {v}")));
        }
        Ok(v)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Decode(format!(
                "{} trailing bytes after chunk",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Error-compensated compression: compress `input + residual`, then store
/// what the codec lost back into `residual`.
///
/// Per-call identity (exact up to float rounding):
/// `decompress(output) + residual_after == input + residual_before`.
pub fn compress_with_error_feedback<R: Rng + ?Sized>(
    spec: &CompressorSpec,
    input: &DenseVector,
    state: &mut ErrorState,
    rng: &mut R,
) -> Result<CompressedChunk> {
    if state.len() != input.len() {
        return Err(Error::dim(format!(
            "error state len {} vs input len {}",
            state.len(),
            input.len()
        )));
    }
    let compensated = input.add(&state.residual)?;
    let chunk = compress(spec, &compensated, rng)?;
    state.residual = compensated.sub(&chunk.decompress())?;
    Ok(chunk)
}
