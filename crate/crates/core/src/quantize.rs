//! Weight and activation quantizers with their backward gradient estimators.
//!
//! Weights use either the uniform FixP4 scheme (per-tensor scale from the
//! mean absolute value, 2 integer + 2 fraction bits) or nearest-value Posit4.
//! Activations use PACT: a trainable clip to `[0, alpha]` followed by unsigned
//! 4-bit uniform quantization. Backward passes use the straight-through
//! estimator for the uniform grids and a tanh-bump estimator for the
//! non-uniform Posit grid.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::posit::{posit_quantize, posit_table, ScaleVariant, TABLE_LEN};

/// Uniform fixed-point weight quantizer parameters.
///
/// With the default 2+2 bit split the normalized grid is
/// `{-2.0, -1.75, ..., +1.75}` (step 0.25) and the dequantized weight seen by
/// the network is `scale * grid_value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixPParams {
    pub n: u32,
    pub int_bits: u32,
    pub frac_bits: u32,
    pub low: f64,
    pub high: f64,
    /// Per-tensor scale; written by [`fixp_quantize_weights`] and frozen in
    /// the stored scheme.
    pub scale: f64,
}

impl Default for FixPParams {
    fn default() -> Self {
        Self { n: 4, int_bits: 2, frac_bits: 2, low: -2.0, high: 1.75, scale: 1.0 }
    }
}

impl FixPParams {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.int_bits + self.frac_bits != self.n {
            return Err(CoreError::InvalidConfig(format!(
                "fixp bit split {}+{} does not sum to n={}",
                self.int_bits, self.frac_bits, self.n
            )));
        }
        if !(self.low < self.high) {
            return Err(CoreError::InvalidConfig(format!(
                "fixp bounds low={} >= high={}",
                self.low, self.high
            )));
        }
        Ok(())
    }

    /// Number of grid levels, `2^n`.
    pub fn levels(&self) -> u32 {
        1u32 << self.n
    }

    /// Quantization step `(high - low) / (2^n - 1)`.
    pub fn step(&self) -> f64 {
        (self.high - self.low) / f64::from(self.levels() - 1)
    }

    /// Signed integer code of a normalized grid value, in `[-2^(n-1), 2^(n-1) - 1]`
    /// for the default bounds (grid value = code * step).
    pub fn code_of_normalized(&self, wq: f64) -> i8 {
        (wq / self.step()).round() as i8
    }
}

/// Rounding used everywhere a `round()` appears: half away from zero.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Per-tensor scale: `mean(|w|) * (2^n - 1) / 2^(n-1)`.
///
/// All-zero tensors have no usable scale and are reported as degenerate so
/// the caller can skip quantization for that tensor.
pub fn fixp_scale(w: &[f64], p: &FixPParams) -> Result<f64, CoreError> {
    if w.is_empty() {
        return Err(CoreError::ShapeMismatch("cannot quantize an empty tensor".into()));
    }
    let mut sum = 0.0;
    for &x in w {
        if !x.is_finite() {
            return Err(CoreError::NonFiniteInput(x));
        }
        sum += x.abs();
    }
    let mean_abs = sum / w.len() as f64;
    if mean_abs == 0.0 {
        return Err(CoreError::DegenerateScale);
    }
    Ok(mean_abs * f64::from(p.levels() - 1) / f64::from(p.levels() / 2))
}

/// Quantizes one normalized value (already divided by the scale) onto the
/// uniform grid.
#[inline]
pub fn fixp_snap_normalized(x: f64, p: &FixPParams) -> f64 {
    let step = p.step();
    let clipped = x.clamp(p.low, p.high);
    let index = round_half_away((clipped - p.low) / step);
    index * step + p.low
}

/// Weight quantization: computes the scale, clips and rounds onto the grid.
///
/// Returns the normalized grid values together with the scale; the effective
/// dequantized weight used downstream is `scale * w_q`.
pub fn fixp_quantize_weights(w: &[f64], p: &FixPParams) -> Result<(Vec<f64>, f64), CoreError> {
    let scale = fixp_scale(w, p)?;
    let wq = w.iter().map(|&x| fixp_snap_normalized(x / scale, p)).collect();
    Ok((wq, scale))
}

/// Quantize-dequantize with a frozen scale: returns effective real-unit weights.
pub fn fixp_fake_quantize(w: &[f64], p: &FixPParams, scale: f64) -> Vec<f64> {
    w.iter().map(|&x| scale * fixp_snap_normalized(x / scale, p)).collect()
}

/// Elementwise nearest-value Posit quantization, returned in real units.
///
/// Every output element is a member of `posit_table(variant)`.
pub fn posit_quantize_weights(w: &[f64], variant: ScaleVariant) -> Result<Vec<f64>, CoreError> {
    w.iter()
        .map(|&x| Ok(posit_quantize(x, variant)?.value().expect("quantizer never returns NaR")))
        .collect()
}

/// PACT activation parameters: trainable clipping threshold and bit width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PactParams {
    pub alpha: f64,
    pub n: u32,
}

impl Default for PactParams {
    fn default() -> Self {
        Self { alpha: 10.0, n: 4 }
    }
}

impl PactParams {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.alpha > 0.0) {
            return Err(CoreError::InvalidConfig(format!("pact alpha={} must be > 0", self.alpha)));
        }
        Ok(())
    }

    /// Largest activation code, `2^n - 1`.
    pub fn max_code(&self) -> u32 {
        (1u32 << self.n) - 1
    }

    /// Real value of one activation code step, `alpha / (2^n - 1)`.
    pub fn act_scale(&self) -> f64 {
        self.alpha / f64::from(self.max_code())
    }
}

/// Clipped activation `y = clip(x, 0, alpha)`, elementwise.
pub fn pact_forward(x: &[f64], p: &PactParams) -> Vec<f64> {
    // max/min instead of clamp: a diverged alpha must not panic, the training
    // loop reports it as a diagnostic.
    x.iter().map(|&v| v.max(0.0).min(p.alpha)).collect()
}

/// Quantizes clipped activations to unsigned codes and their dequantized values.
///
/// Inputs must already lie in `[0, alpha]` (guaranteed by [`pact_forward`]).
pub fn pact_quantize(y: &[f64], p: &PactParams) -> (Vec<u8>, Vec<f64>) {
    let max_code = f64::from(p.max_code());
    let mut codes = Vec::with_capacity(y.len());
    let mut values = Vec::with_capacity(y.len());
    for &v in y {
        debug_assert!((0.0..=p.alpha).contains(&v), "pact_quantize input {v} outside [0, alpha]");
        let code = round_half_away(v * max_code / p.alpha) as u8;
        codes.push(code);
        values.push(f64::from(code) * p.alpha / max_code);
    }
    (codes, values)
}

/// Gradient of `y = clip(x, 0, alpha)` w.r.t. `x`: passes on the closed interval.
pub fn pact_input_grad(x: f64, p: &PactParams) -> f64 {
    if (0.0..=p.alpha).contains(&x) {
        1.0
    } else {
        0.0
    }
}

/// Gradient of the clipped activation w.r.t. `alpha`: 1 where `x >= alpha`.
pub fn pact_alpha_grad(x: f64, p: &PactParams) -> f64 {
    if x >= p.alpha {
        1.0
    } else {
        0.0
    }
}

/// Straight-through estimator: 1 on the closed interval `[low, high]`, else 0.
pub fn ste_grad(x: f64, low: f64, high: f64) -> f64 {
    if (low..=high).contains(&x) {
        1.0
    } else {
        0.0
    }
}

/// The sorted value table of a Posit variant plus its 14 interval midpoints,
/// used by the tanh gradient estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct PositGrid {
    pub variant: ScaleVariant,
    pub alphas: [f64; TABLE_LEN],
    pub thresholds: [f64; TABLE_LEN - 1],
}

impl PositGrid {
    pub fn new(variant: ScaleVariant) -> Self {
        let alphas = posit_table(variant);
        let mut thresholds = [0.0; TABLE_LEN - 1];
        for (i, t) in thresholds.iter_mut().enumerate() {
            *t = 0.5 * (alphas[i] + alphas[i + 1]);
        }
        Self { variant, alphas, thresholds }
    }

    /// Index of the interval `[alphas[i], alphas[i+1])` containing `x`.
    /// The last interval is closed on the right. `None` outside the table.
    fn interval_of(&self, x: f64) -> Option<usize> {
        let last = TABLE_LEN - 1;
        if x < self.alphas[0] || x > self.alphas[last] {
            return None;
        }
        let i = self.alphas.partition_point(|&a| a <= x);
        Some(if i == 0 { 0 } else { (i - 1).min(last - 1) })
    }
}

/// sech^2, computed through cosh.
#[inline]
fn sech2(u: f64) -> f64 {
    let c = u.cosh();
    1.0 / (c * c)
}

/// Tanh surrogate for the Posit quantizer on one interval: the backward pass
/// uses its derivative so that updates concentrate near the interval midpoint
/// (the rounding threshold) and vanish near the representable endpoints.
///
/// For `x` in `[a_i, a_{i+1}]` with width `d` and midpoint `m`:
/// `surrogate(x) = (2/d) * tanh((5/d) * (x - m))`.
pub fn posit_grad_surrogate(x: f64, grid: &PositGrid) -> f64 {
    match grid.interval_of(x) {
        None => 0.0,
        Some(i) => {
            let d = grid.alphas[i + 1] - grid.alphas[i];
            let m = 0.5 * (grid.alphas[i] + grid.alphas[i + 1]);
            (2.0 / d) * ((5.0 / d) * (x - m)).tanh()
        }
    }
}

/// Backward gradient estimate for the Posit quantizer: the analytic
/// derivative of [`posit_grad_surrogate`], `10/d^2 * sech^2((5/d)(x - m))`;
/// zero outside the representable range.
pub fn posit_grad(x: f64, grid: &PositGrid) -> f64 {
    match grid.interval_of(x) {
        None => 0.0,
        Some(i) => {
            let d = grid.alphas[i + 1] - grid.alphas[i];
            let m = 0.5 * (grid.alphas[i] + grid.alphas[i + 1]);
            10.0 / (d * d) * sech2((5.0 / d) * (x - m))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixp_scale_matches_hand_trace() {
        let p = FixPParams::default();
        let w = [0.5, -0.25, 0.25, -0.5];
        let (wq, scale) = fixp_quantize_weights(&w, &p).unwrap();
        assert_eq!(scale, 0.703125);
        assert_eq!(wq, vec![0.75, -0.25, 0.25, -0.75]);
    }

    #[test]
    fn fixp_scale_of_constant_tensor() {
        let p = FixPParams::default();
        let w = [0.5; 16];
        let scale = fixp_scale(&w, &p).unwrap();
        assert_eq!(scale, 0.9375);
    }

    #[test]
    fn fixp_is_idempotent_with_frozen_scale() {
        let p = FixPParams::default();
        let w = [0.31, -1.2, 0.07, 2.9, -0.66];
        let (wq, scale) = fixp_quantize_weights(&w, &p).unwrap();
        let again: Vec<f64> = wq.iter().map(|&x| fixp_snap_normalized(x, &p)).collect();
        assert_eq!(wq, again);
        // Effective weights are also fixed points of fake quantization.
        let eff = fixp_fake_quantize(&w, &p, scale);
        let eff2 = fixp_fake_quantize(&eff, &p, scale);
        assert_eq!(eff, eff2);
    }

    #[test]
    fn fixp_rejects_degenerate_and_non_finite() {
        let p = FixPParams::default();
        assert!(matches!(fixp_quantize_weights(&[0.0; 4], &p), Err(CoreError::DegenerateScale)));
        assert!(matches!(
            fixp_quantize_weights(&[1.0, f64::NAN], &p),
            Err(CoreError::NonFiniteInput(_))
        ));
        assert!(fixp_quantize_weights(&[], &p).is_err());
    }

    #[test]
    fn fixp_codes_cover_signed_range() {
        let p = FixPParams::default();
        assert_eq!(p.step(), 0.25);
        assert_eq!(p.code_of_normalized(-2.0), -8);
        assert_eq!(p.code_of_normalized(1.75), 7);
        assert_eq!(p.code_of_normalized(0.0), 0);
    }

    #[test]
    fn posit_weights_land_on_table() {
        let wq = posit_quantize_weights(&[0.3, -0.3], ScaleVariant::Unit).unwrap();
        assert_eq!(wq, vec![0.25, -0.25]);
        let wq = posit_quantize_weights(&[0.0, 20.0], ScaleVariant::Unit).unwrap();
        assert_eq!(wq, vec![0.0, 16.0]);
    }

    #[test]
    fn pact_forward_clips() {
        let p = PactParams { alpha: 6.0, n: 4 };
        assert_eq!(pact_forward(&[-1.0, 3.0, 9.0], &p), vec![0.0, 3.0, 6.0]);
    }

    #[test]
    fn pact_quantize_examples() {
        let p = PactParams { alpha: 6.0, n: 4 };
        let (codes, xq) = pact_quantize(&[3.0, 0.0, 6.0], &p);
        assert_eq!(codes, vec![8, 0, 15]);
        assert_eq!(xq[0], 3.2);
        assert_eq!(xq[1], 0.0);
        assert_eq!(xq[2], 6.0);
    }

    #[test]
    fn pact_quantize_is_monotone() {
        let p = PactParams { alpha: 4.0, n: 4 };
        let xs: Vec<f64> = (0..2000).map(|i| -1.0 + i as f64 * 0.003).collect();
        let y = pact_forward(&xs, &p);
        let (codes, _) = pact_quantize(&y, &p);
        for w in codes.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn ste_grad_boundaries_are_closed() {
        assert_eq!(ste_grad(0.0, -2.0, 1.75), 1.0);
        assert_eq!(ste_grad(5.0, -2.0, 1.75), 0.0);
        assert_eq!(ste_grad(-2.0, -2.0, 1.75), 1.0);
        assert_eq!(ste_grad(1.75, -2.0, 1.75), 1.0);
    }

    #[test]
    fn pact_grads_follow_clip_regions() {
        let p = PactParams { alpha: 6.0, n: 4 };
        assert_eq!(pact_input_grad(-0.5, &p), 0.0);
        assert_eq!(pact_input_grad(3.0, &p), 1.0);
        assert_eq!(pact_input_grad(7.0, &p), 0.0);
        assert_eq!(pact_alpha_grad(3.0, &p), 0.0);
        assert_eq!(pact_alpha_grad(6.0, &p), 1.0);
        assert_eq!(pact_alpha_grad(9.0, &p), 1.0);
    }

    #[test]
    fn grid_thresholds_are_midpoints() {
        let grid = PositGrid::new(ScaleVariant::Unit);
        for i in 0..TABLE_LEN - 1 {
            assert_eq!(grid.thresholds[i], 0.5 * (grid.alphas[i] + grid.alphas[i + 1]));
            assert!(grid.thresholds[i] > grid.alphas[i]);
        }
        for w in grid.thresholds.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn posit_grad_peaks_at_midpoint() {
        let grid = PositGrid::new(ScaleVariant::Unit);
        // Midpoint of [1, 2]: width 1, sech^2(0) = 1.
        assert_eq!(posit_grad(1.5, &grid), 10.0);
        // Interval boundary: 10 * sech^2(2.5).
        let g = posit_grad(1.0, &grid);
        assert!((g - 10.0 * sech2(2.5)).abs() < 1e-12);
        assert!((g - 0.266).abs() < 1e-3);
        // Outside the representable range.
        assert_eq!(posit_grad(30.0, &grid), 0.0);
        assert_eq!(posit_grad(-30.0, &grid), 0.0);
    }

    #[test]
    fn posit_grad_boundary_to_peak_ratio() {
        for variant in ScaleVariant::ALL {
            let grid = PositGrid::new(variant);
            for i in 0..TABLE_LEN - 2 {
                // Stay off the very last closed interval edge case.
                let mid = 0.5 * (grid.alphas[i] + grid.alphas[i + 1]);
                let ratio = posit_grad(grid.alphas[i], &grid) / posit_grad(mid, &grid);
                assert!((ratio - sech2(2.5)).abs() < 1e-12);
                assert!(ratio < 0.03);
            }
        }
    }

    #[test]
    fn posit_grad_matches_surrogate_derivative() {
        // Central finite differences of the surrogate, step scaled per interval.
        let grid = PositGrid::new(ScaleVariant::Sc8);
        for i in 0..TABLE_LEN - 1 {
            let a = grid.alphas[i];
            let b = grid.alphas[i + 1];
            let d = b - a;
            let h = 1e-5 * d;
            for frac in [0.1, 0.35, 0.5, 0.8] {
                let x = a + frac * d;
                let fd = (posit_grad_surrogate(x + h, &grid) - posit_grad_surrogate(x - h, &grid))
                    / (2.0 * h);
                let g = posit_grad(x, &grid);
                assert!((fd - g).abs() <= 1e-6 * g.abs(), "interval {i} x {x}: fd {fd} vs {g}");
            }
        }
    }
}
