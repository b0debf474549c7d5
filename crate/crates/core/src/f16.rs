//! IEEE-754 binary16 conversion with round-to-nearest-even.

/// Largest finite binary16 value.
pub const F16_MAX: f32 = 65504.0;
/// Smallest positive subnormal binary16 value, 2⁻²⁴.
pub const F16_MIN_SUBNORMAL: f32 = 5.960_464_5e-8;

const MAX_FINITE_BITS: u16 = 0x7bff;

/// Result of narrowing one value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Narrowed {
    pub bits: u16,
    /// The value rounded beyond ±65504 and was clamped.
    pub clamped: bool,
}

/// Narrows `x` to binary16 bits. Magnitudes that round past the largest
/// finite half (including infinities) clamp to ±65504. Returns `None` for NaN.
pub fn f32_to_f16(x: f32) -> Option<Narrowed> {
    if x.is_nan() {
        return None;
    }
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xff) as i32;
    let mant = bits & 0x7f_ffff;
    let clamp = Narrowed {
        bits: sign | MAX_FINITE_BITS,
        clamped: true,
    };
    if exp == 0xff {
        return Some(clamp);
    }
    if exp == 0 {
        // f32 subnormals are far below half precision.
        return Some(Narrowed { bits: sign, clamped: false });
    }
    let e = exp - 127;
    if e > 15 {
        return Some(clamp);
    }
    if e >= -14 {
        let mut half_exp = (e + 15) as u32;
        let mut m = mant >> 13;
        let rem = mant & 0x1fff;
        if rem > 0x1000 || (rem == 0x1000 && m & 1 == 1) {
            m += 1;
            if m == 0x400 {
                m = 0;
                half_exp += 1;
            }
        }
        if half_exp >= 31 {
            return Some(clamp);
        }
        return Some(Narrowed {
            bits: sign | ((half_exp << 10) | m) as u16,
            clamped: false,
        });
    }
    // Subnormal half: value = m · 2⁻²⁴ with m = sig · 2^(e+1).
    let sig = mant | 0x80_0000;
    let shift = (-e - 1) as u32;
    if shift >= 26 {
        return Some(Narrowed { bits: sign, clamped: false });
    }
    let mut m = sig >> shift;
    let rem = sig & ((1 << shift) - 1);
    let half = 1 << (shift - 1);
    if rem > half || (rem == half && m & 1 == 1) {
        m += 1;
    }
    // m == 0x400 carries into the smallest normal, which has the same bits.
    Some(Narrowed {
        bits: sign | m as u16,
        clamped: false,
    })
}

/// Widens binary16 bits to f32 exactly.
pub fn f16_to_f32(h: u16) -> f32 {
    let sign = ((h & 0x8000) as u32) << 16;
    let exp = ((h >> 10) & 0x1f) as u32;
    let m = (h & 0x3ff) as u32;
    if exp == 0 {
        let v = m as f32 * F16_MIN_SUBNORMAL;
        return if sign != 0 { -v } else { v };
    }
    if exp == 31 {
        return f32::from_bits(sign | 0x7f80_0000 | (m << 13));
    }
    f32::from_bits(sign | ((exp + 112) << 23) | (m << 13))
}

/// f32 → f16 → f32. NaN stays NaN.
pub fn round_trip(x: f32) -> f32 {
    f32_to_f16(x).map_or(f32::NAN, |n| f16_to_f32(n.bits))
}
