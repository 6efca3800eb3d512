//! Software emulation of bfloat16 rounding.
//!
//! bfloat16 keeps the f32 layout truncated to 16 bits: 1 sign bit, 8 exponent
//! bits, 7 mantissa bits. We never store 16-bit containers; `bf16_round`
//! produces the nearest bf16-representable value widened back to f32, and
//! tensors tagged `Dtype::Bf16` hold only such fixed points.

/// Round an f32 to the nearest bfloat16-representable value
/// (round-to-nearest-even) and widen the result back to f32.
///
/// ±0, ±inf and NaN pass through unchanged. Values just above the largest
/// finite bf16 round to ±inf, matching IEEE semantics for the narrower type.
#[inline]
pub fn bf16_round(x: f32) -> f32 {
    if x.is_nan() {
        return x;
    }
    let bits = x.to_bits();
    // Round-to-nearest-even on bit 16: add 0x7FFF plus the parity of the
    // bit that survives, then truncate. Carries propagate through the
    // exponent, which is exactly the overflow-to-infinity behaviour we want.
    let rounded = bits.wrapping_add(0x7FFF + ((bits >> 16) & 1));
    f32::from_bits(rounded & 0xFFFF_0000)
}

/// True if `x` is already a bf16 fixed point (low 16 bits clear, or NaN).
#[inline]
pub fn is_bf16(x: f32) -> bool {
    x.is_nan() || x.to_bits() & 0xFFFF == 0
}

/// Round every element of a slice in place.
pub fn bf16_round_slice(xs: &mut [f32]) {
    for x in xs.iter_mut() {
        *x = bf16_round(*x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent round-to-nearest-even oracle: walk the 2^16 bf16 lattice
    /// explicitly instead of using the bit trick under test.
    ///
    /// For finite x, the two candidate lattice points are the truncation of x
    /// and its upper neighbour; distances are compared exactly in f64 (every
    /// f32 and every midpoint of adjacent f32 lattice points is exact in f64).
    fn oracle_round(x: f32) -> f32 {
        if x.is_nan() || x.is_infinite() || x == 0.0 {
            return x;
        }
        let bits = x.to_bits();
        let lo_bits = bits & 0xFFFF_0000;
        let lo = f32::from_bits(lo_bits);
        if lo == x {
            return x; // already on the lattice
        }
        // Upper neighbour on the lattice, in the direction away from zero.
        // Stepping the truncated magnitude by one lattice unit covers exponent
        // boundaries and overflow to infinity; the infinity candidate sits at
        // the virtual lattice point +-2^128 for distance purposes.
        let hi = f32::from_bits(lo_bits.wrapping_add(0x0001_0000));
        let (xa, la) = (x as f64, lo as f64);
        let ha = if hi.is_infinite() {
            2f64.powi(128).copysign(hi as f64)
        } else {
            hi as f64
        };
        let (dl, dh) = ((xa - la).abs(), (ha - xa).abs());
        if dl < dh {
            lo
        } else if dh < dl {
            hi
        } else {
            // Tie: pick the candidate whose surviving mantissa is even.
            if lo_bits & 0x0001_0000 == 0 {
                lo
            } else {
                hi
            }
        }
    }

    #[test]
    fn exact_values_pass_through() {
        assert_eq!(bf16_round(1.0), 1.0);
        assert_eq!(bf16_round(-2.5), -2.5);
        assert_eq!(bf16_round(0.0).to_bits(), 0.0f32.to_bits());
        assert_eq!(bf16_round(-0.0).to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn tenth_rounds_to_known_value() {
        // 0.1 is not a bf16 fixed point; nearest lattice value is
        // 0.10009765625 (0x3DCD << 16).
        #[allow(clippy::excessive_precision)]
        let nearest = 0.10009765625f32;
        assert_eq!(bf16_round(0.1), nearest);
        assert_eq!(bf16_round(0.1), oracle_round(0.1));
    }

    #[test]
    fn infinities_and_nan() {
        assert_eq!(bf16_round(f32::INFINITY), f32::INFINITY);
        assert_eq!(bf16_round(f32::NEG_INFINITY), f32::NEG_INFINITY);
        assert!(bf16_round(f32::NAN).is_nan());
        // f32::MAX is closer to bf16 infinity than to the largest finite bf16.
        assert_eq!(bf16_round(f32::MAX), f32::INFINITY);
        assert_eq!(bf16_round(-f32::MAX), f32::NEG_INFINITY);
    }

    #[test]
    fn subnormals_round_on_lattice() {
        let tiny = f32::from_bits(0x0000_8000); // below the bf16 subnormal step
        assert_eq!(bf16_round(tiny), oracle_round(tiny));
        let sub = f32::from_bits(0x0001_8001);
        assert_eq!(bf16_round(sub), oracle_round(sub));
    }

    #[test]
    fn ties_go_to_even() {
        // Exactly halfway between lattice points 0x3F80_0000 (1.0) and
        // 0x3F81_0000: must round to the even mantissa (1.0).
        let half = f32::from_bits(0x3F80_8000);
        assert_eq!(bf16_round(half), 1.0);
        assert_eq!(bf16_round(half), oracle_round(half));
        // Halfway between 0x3F81 and 0x3F82: rounds up to even 0x3F82.
        let half2 = f32::from_bits(0x3F81_8000);
        assert_eq!(bf16_round(half2).to_bits(), 0x3F82_0000);
        assert_eq!(bf16_round(half2), oracle_round(half2));
    }

    #[test]
    fn matches_oracle_on_dense_sample() {
        // Deterministic LCG walk over the f32 bit space, plus edge patterns.
        let mut state = 0x1234_5678_9ABC_DEF0u64;
        for _ in 0..200_000 {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let bits = (state >> 32) as u32;
            let x = f32::from_bits(bits);
            let got = bf16_round(x);
            let want = oracle_round(x);
            if x.is_nan() {
                assert!(got.is_nan());
            } else {
                assert_eq!(got.to_bits(), want.to_bits(), "input bits {bits:#010x}");
            }
        }
    }

    #[test]
    fn idempotent_and_bounded_relative_error() {
        let mut state = 42u64;
        for _ in 0..50_000 {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let x = f32::from_bits((state >> 32) as u32);
            if !x.is_finite() {
                continue;
            }
            let r = bf16_round(x);
            assert_eq!(bf16_round(r).to_bits(), r.to_bits(), "idempotence at {x}");
            // Normals that stay finite after rounding: the half-ULP bound.
            // (The sliver above bf16 max-finite rounds to infinity instead.)
            if x.is_normal() && r.is_finite() {
                // 7 explicit mantissa bits: half-ULP relative error <= 2^-8.
                let rel = ((r as f64 - x as f64) / x as f64).abs();
                assert!(rel <= 2f64.powi(-8), "rel err {rel} at {x}");
            }
        }
    }
}
