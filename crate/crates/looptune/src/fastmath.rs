//! Branch-light exponential used in kernel evaluations.
//!
//! Kernel math spends almost all of its time in `exp`. This implementation
//! trades the last bit of accuracy for speed: range reduction to
//! `x = n ln2 + r` with `|r| <= ln2/2`, a degree-12 Taylor polynomial for
//! `e^r` (relative error below 1e-15 on that interval), and exponent
//! reconstruction through the IEEE-754 bit layout. Pure f64 arithmetic with
//! no table lookups, so results are identical on every platform.

const LOG2_E: f64 = std::f64::consts::LOG2_E;
const LN_2_HI: f64 = 6.931_471_803_691_238e-1;
const LN_2_LO: f64 = 1.908_214_929_270_587_7e-10;

/// `e^x` with relative error below about 2e-15.
#[inline]
pub fn exp(x: f64) -> f64 {
    if x < -708.0 {
        return 0.0;
    }
    if x > 709.0 {
        return if x.is_nan() { x } else { f64::INFINITY };
    }

    let n = (x * LOG2_E).round();
    // Two-part ln2 keeps the reduced argument accurate for large |x|.
    let r = (x - n * LN_2_HI) - n * LN_2_LO;

    // Taylor polynomial of e^r, Horner form, |r| <= 0.3466.
    let mut p = 1.0 / 479_001_600.0; // 1/12!
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;

    // Multiply by 2^n through the exponent field; n is in [-1022, 1024)
    // after the range checks above, so no subnormal handling is needed
    // beyond flushing the extreme low end to zero.
    let ni = n as i64;
    if ni <= -1022 {
        // Subnormal result: scale in two steps.
        let half = f64::from_bits(((ni / 2 + 1023) as u64) << 52);
        let rest = f64::from_bits(((ni - ni / 2 + 1023) as u64) << 52);
        return p * half * rest;
    }
    p * f64::from_bits(((ni + 1023) as u64) << 52)
}
