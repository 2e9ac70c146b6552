//! Posit(4,1) codec, scaled variants, and a general P(n,es) decoder.
//!
//! A Posit4 code is 4 bits: sign, run-length regime, one exponent bit and
//! (range permitting) nothing else; with `es = 1` the useed is `2^(2^1) = 4`
//! and the 16 codes decode to
//!
//! ```text
//! [-16, -4, -2, -1, -0.5, -0.25, -0.0625, 0, 0.0625, 0.25, 0.5, 1, 2, 4, 16]
//! ```
//!
//! plus the single NaR pattern `0b1000`. Every nonzero magnitude is a power
//! of two, which is what makes the MAC datapath a shift (see
//! [`crate::macsim`]). The scaled variants divide the value set by 4 or 8,
//! implemented as an exponent offset (a binary point shift), never as a
//! separate table.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;

/// The NaR (not-a-real) bit pattern, `0b1000`.
pub const NAR_BITS: u8 = 0b1000;

/// Number of finite values representable by a Posit4 variant.
pub const TABLE_LEN: usize = 15;

/// Unit-variant decode table indexed by raw code 0..=15. `None` is NaR.
///
/// Codes 1..=7 follow the regime/exponent rules of P(4,1); codes 9..=15 are
/// the two's-complement negations of 7..=1.
const UNIT_VALUES: [Option<f64>; 16] = [
    Some(0.0),     // 0b0000
    Some(0.0625),  // 0b0001  k=-2
    Some(0.25),    // 0b0010  k=-1, e=0
    Some(0.5),     // 0b0011  k=-1, e=1
    Some(1.0),     // 0b0100  k=0,  e=0
    Some(2.0),     // 0b0101  k=0,  e=1
    Some(4.0),     // 0b0110  k=1
    Some(16.0),    // 0b0111  k=2
    None,          // 0b1000  NaR
    Some(-16.0),   // 0b1001
    Some(-4.0),    // 0b1010
    Some(-2.0),    // 0b1011
    Some(-1.0),    // 0b1100
    Some(-0.5),    // 0b1101
    Some(-0.25),   // 0b1110
    Some(-0.0625), // 0b1111
];

/// Base-2 exponent of each nonzero unit magnitude, indexed by `bits & 0b0111`
/// (index 0 unused). Sign is carried separately.
const UNIT_EXPONENTS: [i32; 8] = [0, -4, -2, -1, 0, 1, 2, 4];

/// Codes ordered by decoded value, i.e. by the signed two's-complement
/// interpretation of the 4-bit pattern (NaR excluded).
const SORTED_CODES: [u8; TABLE_LEN] = [9, 10, 11, 12, 13, 14, 15, 0, 1, 2, 3, 4, 5, 6, 7];

/// Scale applied to the Posit4 value set: 1, 1/4 or 1/8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleVariant {
    Unit,
    Sc4,
    Sc8,
}

impl ScaleVariant {
    pub const ALL: [ScaleVariant; 3] = [ScaleVariant::Unit, ScaleVariant::Sc4, ScaleVariant::Sc8];

    /// log2 of the scale factor: 0, -2 or -3.
    pub fn scale_log2(self) -> i32 {
        match self {
            ScaleVariant::Unit => 0,
            ScaleVariant::Sc4 => -2,
            ScaleVariant::Sc8 => -3,
        }
    }

    /// The scale factor itself (a power of two, exact in binary floating point).
    pub fn scale(self) -> f64 {
        (self.scale_log2() as f64).exp2()
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleVariant::Unit => "unit",
            ScaleVariant::Sc4 => "sc4",
            ScaleVariant::Sc8 => "sc8",
        }
    }
}

impl std::fmt::Display for ScaleVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A 4-bit Posit code tagged with its scale variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Posit4Code {
    bits: u8,
    variant: ScaleVariant,
}

/// Decoded fixed-point form of a nonzero Posit4: `sign * 2^exp`, exactly.
///
/// `exp` already includes the variant offset (-2 for Sc4, -3 for Sc8), so it
/// spans -4..=4 for Unit and -7..=1 for Sc8. Written as a one-hot position in
/// a 9-slot field plus a sign bit, this is the 10-bit raw form consumed by
/// the MAC decoder LUT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawPosit {
    /// +1 or -1.
    pub sign: i8,
    /// Power-of-two exponent, variant offset included.
    pub exp: i32,
}

impl RawPosit {
    /// Exact value `sign * 2^exp`.
    pub fn value(self) -> f64 {
        f64::from(self.sign) * (self.exp as f64).exp2()
    }

    /// Exponent with the variant offset removed (always in -4..=4).
    pub fn unit_exp(self, variant: ScaleVariant) -> i32 {
        self.exp - variant.scale_log2()
    }
}

/// Result of decoding a code to raw form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawForm {
    Zero,
    NaR,
    Pow2(RawPosit),
}

impl Posit4Code {
    /// Wraps a 4-bit pattern. Bits above the low nibble are rejected.
    pub fn new(bits: u8, variant: ScaleVariant) -> Result<Self, CoreError> {
        if bits > 0x0F {
            return Err(CoreError::InvalidConfig(format!(
                "posit4 code {bits:#x} does not fit in 4 bits"
            )));
        }
        Ok(Self { bits, variant })
    }

    /// Like [`Posit4Code::new`] but masks to the low nibble.
    pub fn from_bits_truncated(bits: u8, variant: ScaleVariant) -> Self {
        Self { bits: bits & 0x0F, variant }
    }

    pub fn bits(self) -> u8 {
        self.bits
    }

    pub fn variant(self) -> ScaleVariant {
        self.variant
    }

    pub fn is_nar(self) -> bool {
        self.bits == NAR_BITS
    }

    pub fn is_zero(self) -> bool {
        self.bits == 0
    }

    /// Two's-complement negation in 4 bits. Zero and NaR map to themselves.
    pub fn negate(self) -> Self {
        Self { bits: self.bits.wrapping_neg() & 0x0F, variant: self.variant }
    }

    /// The 4-bit pattern sign-extended to a signed integer. Interpreting
    /// codes this way orders decoded values strictly increasingly (NaR, the
    /// most negative pattern, excluded).
    pub fn as_signed(self) -> i8 {
        ((self.bits << 4) as i8) >> 4
    }

    /// Decodes to the represented value; `None` is NaR.
    ///
    /// All values are small dyadic rationals, so the `f64` result is exact.
    pub fn value(self) -> Option<f64> {
        UNIT_VALUES[self.bits as usize].map(|v| v * self.variant.scale())
    }

    /// Decodes to the sign/power-of-two raw form via the 16-entry LUT.
    pub fn raw(self) -> RawForm {
        match self.bits {
            0 => RawForm::Zero,
            NAR_BITS => RawForm::NaR,
            b => {
                let sign: i8 = if b & 0b1000 != 0 { -1 } else { 1 };
                let mag = if sign < 0 { b.wrapping_neg() & 0x0F } else { b };
                RawForm::Pow2(RawPosit {
                    sign,
                    exp: UNIT_EXPONENTS[mag as usize] + self.variant.scale_log2(),
                })
            }
        }
    }
}

/// The 15 finite values of a variant, sorted ascending.
///
/// Entries are exact dyadics and odd-symmetric around the middle entry 0.
pub fn posit_table(variant: ScaleVariant) -> [f64; TABLE_LEN] {
    let mut table = [0.0; TABLE_LEN];
    for (slot, &code) in table.iter_mut().zip(SORTED_CODES.iter()) {
        *slot = Posit4Code { bits: code, variant }.value().expect("table codes are finite");
    }
    table
}

/// Nearest-value quantization onto a variant's table.
///
/// Never returns NaR; values beyond the extremes saturate to the nearest
/// endpoint. An input exactly midway between two table values takes the one
/// of smaller magnitude.
pub fn posit_quantize(x: f64, variant: ScaleVariant) -> Result<Posit4Code, CoreError> {
    if !x.is_finite() {
        return Err(CoreError::NonFiniteInput(x));
    }
    let table = posit_table(variant);
    let mut best = 0usize;
    let mut best_dist = (x - table[0]).abs();
    for (i, &v) in table.iter().enumerate().skip(1) {
        let d = (x - v).abs();
        if d < best_dist || (d == best_dist && v.abs() < table[best].abs()) {
            best = i;
            best_dist = d;
        }
    }
    Ok(Posit4Code { bits: SORTED_CODES[best], variant })
}

/// Shorthand for quantize-then-decode.
pub fn posit_round(x: f64, variant: ScaleVariant) -> Result<f64, CoreError> {
    Ok(posit_quantize(x, variant)?.value().expect("quantizer never returns NaR"))
}

/// Width parameters of a general Posit format P(n,es).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositConfig {
    n: u32,
    es: u32,
}

impl PositConfig {
    /// Requires `2 <= n <= 32`, `es <= 3` and `es < n - 1`.
    pub fn new(n: u32, es: u32) -> Result<Self, CoreError> {
        if !(2..=32).contains(&n) {
            return Err(CoreError::InvalidConfig(format!("posit width n={n} out of range 2..=32")));
        }
        if es > 3 || es >= n - 1 {
            return Err(CoreError::InvalidConfig(format!(
                "posit exponent width es={es} invalid for n={n}"
            )));
        }
        Ok(Self { n, es })
    }

    pub fn n(self) -> u32 {
        self.n
    }

    pub fn es(self) -> u32 {
        self.es
    }

    fn mask(self) -> u32 {
        if self.n == 32 {
            u32::MAX
        } else {
            (1u32 << self.n) - 1
        }
    }
}

/// Decodes an arbitrary P(n,es) bit pattern; `None` is NaR.
///
/// Field walk: sign, then the regime run (k = -m for a run of m zeros,
/// m - 1 for m ones), a terminator when one fits, up to `es` exponent bits
/// (missing low bits read as zero), and the fraction. The value is
/// `(-1)^s * (2^(2^es))^k * 2^e * (1 + f)`, with `e` the unsigned integer
/// value of the exponent field.
///
/// Decode-only by design; P(4,1) is the only format encoded in this crate.
pub fn posit_val_general(bits: u32, cfg: PositConfig) -> Option<f64> {
    let n = cfg.n;
    let mask = cfg.mask();
    assert!(bits <= mask, "bit pattern {bits:#x} does not fit in {n} bits");

    let sign_bit = 1u32 << (n - 1);
    if bits == 0 {
        return Some(0.0);
    }
    if bits == sign_bit {
        return None;
    }

    let negative = bits & sign_bit != 0;
    let mag = if negative { bits.wrapping_neg() & mask } else { bits };

    // Regime run starts just below the sign bit.
    let first = (mag >> (n - 2)) & 1;
    let mut run = 1u32;
    while run < n - 1 && (mag >> (n - 1 - run - 1)) & 1 == first {
        run += 1;
    }
    let k = if first == 1 { run as i64 - 1 } else { -(run as i64) };

    // Bits remaining after sign, run and (when present) the terminator.
    let consumed = 1 + run + u32::from(run < n - 1);
    let rest_len = n - consumed;
    let rest = if rest_len == 0 { 0 } else { mag & ((1u32 << rest_len) - 1) };

    let exp_len = rest_len.min(cfg.es);
    let frac_len = rest_len - exp_len;
    let exp_field = if exp_len == 0 { 0 } else { (rest >> frac_len) as i64 };
    // A truncated exponent field keeps its weight: missing low bits are zero.
    let e = exp_field << (cfg.es - exp_len);
    let frac = if frac_len == 0 { 0u64 } else { u64::from(rest & ((1u32 << frac_len) - 1)) };

    let power = (k << cfg.es) + e;
    let significand = 1.0 + frac as f64 / (frac_len as f64).exp2();
    let value = (power as f64).exp2() * significand;
    Some(if negative { -value } else { value })
}

/// Rows of the code-table CSV export: one per 4-bit pattern.
pub fn decode_table_rows() -> Vec<DecodeRow> {
    (0u8..16)
        .map(|bits| {
            let value = |variant| Posit4Code { bits, variant }.value();
            DecodeRow {
                code: bits,
                bit_pattern: format!("{bits:04b}"),
                value_unit: value(ScaleVariant::Unit),
                value_sc4: value(ScaleVariant::Sc4),
                value_sc8: value(ScaleVariant::Sc8),
            }
        })
        .collect()
}

/// One row of the exported decode table. `None` renders as `NaR`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRow {
    pub code: u8,
    pub bit_pattern: String,
    pub value_unit: Option<f64>,
    pub value_sc4: Option<f64>,
    pub value_sc8: Option<f64>,
}
