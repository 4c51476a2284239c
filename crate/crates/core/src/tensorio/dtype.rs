use std::fmt;

use half::{bf16, f16};

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    /// Name used in safetensors headers (`F32`, `F16`, `BF16`).
    pub fn safetensors_name(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    /// Case-insensitive parse of `f32` / `f16` / `bf16`.
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" | "float32" => Some(DType::F32),
            "f16" | "float16" => Some(DType::F16),
            "bf16" | "bfloat16" => Some(DType::BF16),
            _ => None,
        }
    }

    /// Little-endian storage bytes to values.
    pub fn decode(self, bytes: &[u8]) -> Vec<f32> {
        match self {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            DType::F16 => bytes
                .chunks_exact(2)
                .map(|c| f16_to_f32(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
            DType::BF16 => bytes
                .chunks_exact(2)
                .map(|c| bf16_to_f32(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
        }
    }

    /// Values to little-endian storage bytes, rounding to nearest even.
    pub fn encode(self, values: &[f32]) -> Vec<u8> {
        let mut out = Vec::with_capacity(values.len() * self.size());
        match self {
            DType::F32 => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DType::F16 => values
                .iter()
                .for_each(|&v| out.extend_from_slice(&f32_to_f16(v).to_le_bytes())),
            DType::BF16 => values
                .iter()
                .for_each(|&v| out.extend_from_slice(&f32_to_bf16(v).to_le_bytes())),
        }
        out
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::BF16 => "bf16",
        })
    }
}

// NaNs are widened/narrowed by moving the payload bits directly so that
// signalling NaNs survive a round trip; everything else goes through `half`,
// which is exact for values that originated in the narrow type.

fn f16_to_f32(bits: u16) -> f32 {
    let exp = bits & 0x7C00;
    let man = bits & 0x03FF;
    if exp == 0x7C00 && man != 0 {
        let sign = ((bits & 0x8000) as u32) << 16;
        return f32::from_bits(sign | 0x7F80_0000 | ((man as u32) << 13));
    }
    f16::from_bits(bits).to_f32()
}

fn f32_to_f16(v: f32) -> u16 {
    if v.is_nan() {
        let bits = v.to_bits();
        let sign = ((bits >> 16) & 0x8000) as u16;
        let man = ((bits >> 13) & 0x03FF) as u16;
        return sign | 0x7C00 | if man == 0 { 0x0200 } else { man };
    }
    f16::from_f32(v).to_bits()
}

fn bf16_to_f32(bits: u16) -> f32 {
    f32::from_bits((bits as u32) << 16)
}

fn f32_to_bf16(v: f32) -> u16 {
    let bits = v.to_bits();
    if bits & 0xFFFF == 0 {
        return (bits >> 16) as u16;
    }
    if v.is_nan() {
        let hi = (bits >> 16) as u16;
        return if hi & 0x007F == 0 { hi | 0x0040 } else { hi };
    }
    bf16::from_f32(v).to_bits()
}
