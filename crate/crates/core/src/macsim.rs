//! Bit-exact simulation of the Posit/FixP and FixP/FixP MAC datapaths, the
//! combined unit that routes between them, and the energy-overhead model.
//!
//! The Posit operand decodes (via LUT) to a sign and a single power of two,
//! so the multiply is a shift of the 4-bit activation code. The product field
//! is 14 bits wide; the accumulator adds 10 guard bits on top of the widest
//! product, giving 24 bits on the Posit path and 18 bits on the FixP path.
//! Accumulators hold plain integers; the Posit path counts sub-units of
//! `2^-4` (the smallest unscaled Posit4 magnitude), and the Sc4/Sc8 point
//! shift is applied at readout rather than by widening the accumulator.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::posit::{Posit4Code, RawForm, ScaleVariant};

/// Accumulator width on the Posit/FixP path.
pub const POSIT_ACC_WIDTH: u32 = 24;
/// Accumulator width on the fully-FixP path.
pub const FIXP_ACC_WIDTH: u32 = 18;
/// Width allocated to the shifted product on the Posit path.
pub const PRODUCT_WIDTH: u32 = 14;
/// log2 of the Posit-path sub-unit: stored integer = value * 2^4.
pub const SUBUNIT_BITS: i32 = 4;

/// A saturating signed accumulator of a given bit width.
///
/// `value` stays within `width`-bit two's complement; once an addition has to
/// clamp, the sticky `saturated` flag is set and stays set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacAccumulator {
    pub value: i64,
    pub width: u32,
    pub saturated: bool,
}

impl MacAccumulator {
    pub fn new(width: u32) -> Self {
        assert!((2..=63).contains(&width), "accumulator width {width} out of range");
        Self { value: 0, width, saturated: false }
    }

    pub fn posit_path() -> Self {
        Self::new(POSIT_ACC_WIDTH)
    }

    pub fn fixp_path() -> Self {
        Self::new(FIXP_ACC_WIDTH)
    }

    pub fn max_value(&self) -> i64 {
        (1i64 << (self.width - 1)) - 1
    }

    pub fn min_value(&self) -> i64 {
        -(1i64 << (self.width - 1))
    }

    fn add_saturating(&mut self, delta: i64) {
        let sum = self.value + delta;
        if sum > self.max_value() {
            self.value = self.max_value();
            self.saturated = true;
        } else if sum < self.min_value() {
            self.value = self.min_value();
            self.saturated = true;
        } else {
            self.value = sum;
        }
    }
}

/// One Posit/FixP MAC step: `acc += sign(w) * (a << (exp(w) + 4))`.
///
/// The shift uses the unscaled exponent, so the accumulator counts sub-units
/// of `2^-4` relative to the variant scale; the readout multiplies the
/// variant scale back in. NaR weights are invalid operands; a zero weight or
/// zero activation leaves the accumulator unchanged.
pub fn mac_posit_fixp(w: Posit4Code, a: u8, mut acc: MacAccumulator) -> Result<MacAccumulator, CoreError> {
    assert_eq!(acc.width, POSIT_ACC_WIDTH, "posit path accumulator must be 24 bits");
    assert!(a <= 0x0F, "activation code {a} does not fit in 4 bits");
    let raw = match w.raw() {
        RawForm::NaR => return Err(CoreError::NarOperand),
        RawForm::Zero => return Ok(acc),
        RawForm::Pow2(raw) => raw,
    };
    let shift = raw.unit_exp(w.variant()) + SUBUNIT_BITS;
    debug_assert!((0..=8).contains(&shift));
    let magnitude = i64::from(a) << shift;
    // The paper allocates a 14-bit product; the tight bound is one bit less.
    // Keep the checkable claim that the extra bit is never needed.
    assert!(magnitude < 1i64 << (PRODUCT_WIDTH - 2));
    acc.add_saturating(i64::from(raw.sign) * magnitude);
    Ok(acc)
}

/// One fully-FixP MAC step: `acc += w * a` with an 8-bit product.
pub fn mac_fixp_fixp(w: i8, a: u8, mut acc: MacAccumulator) -> MacAccumulator {
    assert_eq!(acc.width, FIXP_ACC_WIDTH, "fixp path accumulator must be 18 bits");
    assert!((-8..=7).contains(&w), "weight code {w} does not fit in 4 bits");
    assert!(a <= 0x0F, "activation code {a} does not fit in 4 bits");
    let product = i64::from(w) * i64::from(a);
    debug_assert!(product.abs() < 1 << 7);
    acc.add_saturating(product);
    acc
}

/// A weight routed through the combined MAC unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightOperand {
    /// Signed 4-bit FixP grid code (grid value = code * step).
    Fixp(i8),
    Posit(Posit4Code),
}

/// Readout scales composing accumulator integers back into real values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DotScales {
    /// Per-tensor FixP weight scale (Eq.-style mean-abs scale).
    pub fixp_scale: f64,
    /// FixP grid step (0.25 for the 2+2 split).
    pub fixp_step: f64,
    /// Real value of one activation code step.
    pub act_scale: f64,
}

/// Result of a combined-unit dot product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedDotResult {
    /// Composed real value of both accumulators.
    pub value: f64,
    /// Posit-path accumulator content in 2^-4 sub-units (pre variant scale).
    pub posit_acc: i64,
    /// FixP-path accumulator content in integer product units.
    pub fixp_acc: i64,
    pub posit_variant: Option<ScaleVariant>,
    pub saturated: bool,
    pub posit_macs: u64,
    pub fixp_macs: u64,
}

impl MixedDotResult {
    /// Real value of one sub-unit on the dominant path, the resolution below
    /// which the readout cannot distinguish values.
    pub fn subunit_value(&self, scales: &DotScales) -> f64 {
        let posit_unit = self
            .posit_variant
            .map(|v| (-(SUBUNIT_BITS) as f64).exp2() * v.scale() * scales.act_scale)
            .unwrap_or(0.0);
        let fixp_unit = if self.fixp_macs > 0 {
            scales.fixp_step * scales.fixp_scale * scales.act_scale
        } else {
            0.0
        };
        posit_unit.max(fixp_unit)
    }
}

/// Runs a whole dot product through the combined unit, routing each element
/// to the matching MAC path.
///
/// All Posit weights in one call must share a scale variant (one readout
/// point shift per dot product). Saturation is reported in the result, not
/// as an error.
pub fn dot_product_mixed(
    weights: &[WeightOperand],
    acts: &[u8],
    scales: &DotScales,
) -> Result<MixedDotResult, CoreError> {
    if weights.len() != acts.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "weights ({}) and activations ({}) differ in length",
            weights.len(),
            acts.len()
        )));
    }
    let mut posit_acc = MacAccumulator::posit_path();
    let mut fixp_acc = MacAccumulator::fixp_path();
    let mut variant: Option<ScaleVariant> = None;
    let mut posit_macs = 0u64;
    let mut fixp_macs = 0u64;

    for (&w, &a) in weights.iter().zip(acts) {
        match w {
            WeightOperand::Fixp(code) => {
                fixp_acc = mac_fixp_fixp(code, a, fixp_acc);
                fixp_macs += 1;
            }
            WeightOperand::Posit(code) => {
                match variant {
                    None => variant = Some(code.variant()),
                    Some(v) if v != code.variant() => {
                        return Err(CoreError::MixedVariants(v, code.variant()));
                    }
                    Some(_) => {}
                }
                posit_acc = mac_posit_fixp(code, a, posit_acc)?;
                posit_macs += 1;
            }
        }
    }

    let posit_value = variant
        .map(|v| posit_acc.value as f64 * (-(SUBUNIT_BITS) as f64).exp2() * v.scale())
        .unwrap_or(0.0)
        * scales.act_scale;
    let fixp_value = fixp_acc.value as f64 * scales.fixp_step * scales.fixp_scale * scales.act_scale;

    Ok(MixedDotResult {
        value: posit_value + fixp_value,
        posit_acc: posit_acc.value,
        fixp_acc: fixp_acc.value,
        posit_variant: variant,
        saturated: posit_acc.saturated || fixp_acc.saturated,
        posit_macs,
        fixp_macs,
    })
}

/// Energy-overhead model: Posit/FixP MACs cost a fixed ratio more than
/// fully-FixP MACs, and MAC compute is a bounded share of system energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    /// Extra energy of a Posit/FixP MAC relative to a FixP MAC (0.30).
    pub posit_mac_overhead: f64,
    /// Fraction of total system energy spent in MAC compute (0.10).
    pub compute_share: f64,
    /// Energy of one FixP MAC in abstract units.
    pub e_fixp_mac: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self { posit_mac_overhead: 0.30, compute_share: 0.10, e_fixp_mac: 1.0 }
    }
}

/// Per-layer MAC operation counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMacCount {
    pub layer_id: String,
    pub total_macs: u64,
    pub posit_macs: u64,
}

/// MAC counts aggregated over a model or a workload.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacTrace {
    pub layers: Vec<LayerMacCount>,
}

impl MacTrace {
    pub fn push(&mut self, layer_id: impl Into<String>, total_macs: u64, posit_macs: u64) {
        assert!(posit_macs <= total_macs, "posit MACs cannot exceed total MACs");
        self.layers.push(LayerMacCount { layer_id: layer_id.into(), total_macs, posit_macs });
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.total_macs).sum()
    }

    pub fn posit_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.posit_macs).sum()
    }
}

/// Energy report: overhead of the mixed workload over an all-FixP one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub per_layer: Vec<LayerMacCount>,
    pub posit_mac_fraction: f64,
    /// System-level energy overhead in percent.
    pub overhead_pct: f64,
}

/// `overhead = posit_fraction * posit_mac_overhead * compute_share`.
pub fn energy_report(trace: &MacTrace, em: &EnergyModel) -> Result<EnergyReport, CoreError> {
    let total = trace.total_macs();
    if total == 0 {
        return Err(CoreError::EmptyTrace);
    }
    let posit_fraction = trace.posit_macs() as f64 / total as f64;
    Ok(EnergyReport {
        per_layer: trace.layers.clone(),
        posit_mac_fraction: posit_fraction,
        overhead_pct: posit_fraction * em.posit_mac_overhead * em.compute_share * 100.0,
    })
}

/// Weight field of a replayable MAC record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceWeightKind {
    Fixp,
    Unit,
    Sc4,
    Sc8,
}

/// One replayable MAC operation, serialized as newline-delimited JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacRecord {
    pub layer_id: String,
    /// FixP: signed grid code. Posit: the 4-bit pattern.
    pub w_code: i16,
    pub variant: TraceWeightKind,
    pub a_code: u8,
}

impl MacRecord {
    pub fn from_operand(layer_id: &str, w: WeightOperand, a: u8) -> Self {
        let (w_code, variant) = match w {
            WeightOperand::Fixp(c) => (i16::from(c), TraceWeightKind::Fixp),
            WeightOperand::Posit(c) => {
                let kind = match c.variant() {
                    ScaleVariant::Unit => TraceWeightKind::Unit,
                    ScaleVariant::Sc4 => TraceWeightKind::Sc4,
                    ScaleVariant::Sc8 => TraceWeightKind::Sc8,
                };
                (i16::from(c.bits()), kind)
            }
        };
        Self { layer_id: layer_id.to_string(), w_code, variant, a_code: a }
    }

    pub fn operand(&self) -> Result<WeightOperand, CoreError> {
        let op = match self.variant {
            TraceWeightKind::Fixp => WeightOperand::Fixp(self.w_code as i8),
            TraceWeightKind::Unit => {
                WeightOperand::Posit(Posit4Code::new(self.w_code as u8, ScaleVariant::Unit)?)
            }
            TraceWeightKind::Sc4 => {
                WeightOperand::Posit(Posit4Code::new(self.w_code as u8, ScaleVariant::Sc4)?)
            }
            TraceWeightKind::Sc8 => {
                WeightOperand::Posit(Posit4Code::new(self.w_code as u8, ScaleVariant::Sc8)?)
            }
        };
        Ok(op)
    }
}

/// Writes records as newline-delimited JSON.
pub fn write_trace_records<W: Write>(mut out: W, records: &[MacRecord]) -> std::io::Result<()> {
    for r in records {
        let line = serde_json::to_string(r).expect("trace records serialize");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Reads newline-delimited JSON records.
pub fn read_trace_records<R: BufRead>(input: R) -> std::io::Result<Vec<MacRecord>> {
    let mut records = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: MacRecord = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        records.push(r);
    }
    Ok(records)
}
