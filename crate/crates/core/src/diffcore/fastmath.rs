//! Branch-light elementwise kernels for the activation functions. The libm
//! calls behind `f64::exp`/`ln_1p`/`tanh` dominate training time on wide
//! batches; these versions vectorise and stay within a few ulp of std.

use std::f64::consts::{LN_2, SQRT_2};

// Split of ln 2 as published with fdlibm, digits kept verbatim.
#[allow(clippy::excessive_precision)]
const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
#[allow(clippy::excessive_precision)]
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;

/// 1.5·2^52: adding it rounds to an integer held in the low mantissa bits.
const SHIFTER: f64 = 6_755_399_441_055_744.0;

/// `e^x` for finite `x`; inputs are clamped to `[-708, 709]`.
#[inline(always)]
pub fn exp(x: f64) -> f64 {
    let x = x.clamp(-708.0, 709.0);
    // round-to-nearest without a libm call, so the loop vectorises on SSE2
    let t = x * std::f64::consts::LOG2_E + SHIFTER;
    let k = t - SHIFTER;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor to degree 12 on |r| <= ln2/2: truncation ~2e-17 relative.
    let mut p = 1.0 / 479_001_600.0;
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
    // k + 1023 lies in [1, 2046] after the clamp; only its low 11 bits
    // survive the shift
    p * f64::from_bits(t.to_bits().wrapping_add(1023) << 52)
}

/// `ln(1 + e)` for `e` in `[0, 1]`, accurate in relative terms for tiny `e`.
#[inline(always)]
pub fn ln_1p_unit(e: f64) -> f64 {
    // Fold 1+e into (1/√2·…, √2]: above √2 use ln(y) = ln(y/2) + ln 2.
    let y = 1.0 + e;
    let big = y > SQRT_2;
    let (num, den, shift) = if big {
        // y/2 - 1 = (e - 1)/2 ; y/2 + 1 = (e + 3)/2
        (e - 1.0, e + 3.0, LN_2)
    } else {
        (e, 2.0 + e, 0.0)
    };
    let s = num / den;
    let s2 = s * s;
    // 2·atanh(s) = 2(s + s³/3 + s⁵/5 + ...), |s| <= 0.1716
    let mut p = 1.0 / 23.0;
    p = p * s2 + 1.0 / 21.0;
    p = p * s2 + 1.0 / 19.0;
    p = p * s2 + 1.0 / 17.0;
    p = p * s2 + 1.0 / 15.0;
    p = p * s2 + 1.0 / 13.0;
    p = p * s2 + 1.0 / 11.0;
    p = p * s2 + 1.0 / 9.0;
    p = p * s2 + 1.0 / 7.0;
    p = p * s2 + 1.0 / 5.0;
    p = p * s2 + 1.0 / 3.0;
    p = p * s2 + 1.0;
    2.0 * s * p + shift
}

/// Softplus `ln(1 + e^z)` and its derivative, the logistic sigmoid.
#[inline(always)]
pub fn softplus_and_sigmoid(z: f64) -> (f64, f64) {
    let e = exp(-z.abs());
    let sp = z.max(0.0) + ln_1p_unit(e);
    let inv = 1.0 / (1.0 + e);
    let sig = if z >= 0.0 { inv } else { e * inv };
    (sp, sig)
}

#[inline(always)]
pub fn sigmoid(z: f64) -> f64 {
    softplus_and_sigmoid(z).1
}

/// `e^x - 1`, accurate in relative terms near zero.
#[inline(always)]
pub fn expm1(x: f64) -> f64 {
    // |x| <= ln2/2: x·(1 + x/2 + x²/6 + ...) to degree 13
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * x + 1.0 / 479_001_600.0;
    p = p * x + 1.0 / 39_916_800.0;
    p = p * x + 1.0 / 3_628_800.0;
    p = p * x + 1.0 / 362_880.0;
    p = p * x + 1.0 / 40_320.0;
    p = p * x + 1.0 / 5_040.0;
    p = p * x + 1.0 / 720.0;
    p = p * x + 1.0 / 120.0;
    p = p * x + 1.0 / 24.0;
    p = p * x + 1.0 / 6.0;
    p = p * x + 0.5;
    p = p * x + 1.0;
    let near = x * p;
    let far = exp(x) - 1.0;
    if x.abs() <= 0.5 * LN_2 {
        near
    } else {
        far
    }
}

#[inline(always)]
pub fn tanh(z: f64) -> f64 {
    let em = expm1(-2.0 * z.abs());
    (-em / (2.0 + em)).copysign(z)
}

/// Runs `$body` (a loop over slices) through an AVX2 copy when the CPU has
/// it. Only the vector width changes: no FMA contraction happens, so both
/// paths give bit-identical results.
macro_rules! dispatch {
    ($name:ident($($arg:ident: $ty:ty),*) $body:block) => {
        pub fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide($($arg: $ty),*) $body
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the feature was detected at runtime.
                    return unsafe { wide($($arg),*) };
                }
            }
            $body
        }
    };
}

dispatch!(softplus_into(z: &[f64], sp: &mut [f64], sig: &mut [f64]) {
    for ((&v, s), g) in z.iter().zip(sp.iter_mut()).zip(sig.iter_mut()) {
        (*s, *g) = softplus_and_sigmoid(v);
    }
});

dispatch!(tanh_into(z: &[f64], out: &mut [f64]) {
    for (&v, o) in z.iter().zip(out.iter_mut()) {
        *o = tanh(v);
    }
});
