//! Per-layer sensitivity scores and the budget-constrained assignment of
//! layers to Posit or FixP.
//!
//! A layer's score combines how much Posit reduces quantization error over
//! FixP with how strongly the loss reacts to perturbations of that layer's
//! weights (first-order: the gradient norm), normalized by parameter count.
//! Layers are then admitted to the Posit set greedily in descending score
//! order until the admitted parameter count exceeds the budget fraction
//! `eta` of all quantizable parameters.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::posit::ScaleVariant;
use crate::quantize::{fixp_quantize_weights, posit_quantize_weights, FixPParams};

/// Sensitivity results for one quantizable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub layer_id: String,
    /// Position in the model's layer order; used as a deterministic tie-break.
    pub index: usize,
    /// Parameter count of the layer's weight tensor.
    pub n_l: usize,
    pub s_sc4: f64,
    pub s_sc8: f64,
    /// `max(s_sc4, s_sc8)`.
    pub s_l: f64,
}

impl LayerStats {
    /// The variant achieving `s_l`; Sc8 wins exact ties.
    pub fn best_variant(&self) -> ScaleVariant {
        if self.s_sc8 >= self.s_sc4 {
            ScaleVariant::Sc8
        } else {
            ScaleVariant::Sc4
        }
    }
}

/// Outcome of the layer assignment under budget `eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentPlan {
    pub eta: f64,
    /// Admitted layers in admission (descending score) order.
    pub posit_layers: Vec<(String, ScaleVariant)>,
    pub fixp_layers: Vec<String>,
    pub posit_param_count: usize,
    pub total_param_count: usize,
}

impl AssignmentPlan {
    pub fn posit_param_fraction(&self) -> f64 {
        if self.total_param_count == 0 {
            0.0
        } else {
            self.posit_param_count as f64 / self.total_param_count as f64
        }
    }

    pub fn variant_for(&self, layer_id: &str) -> Option<ScaleVariant> {
        self.posit_layers.iter().find(|(id, _)| id == layer_id).map(|&(_, v)| v)
    }
}

/// The score formula on precomputed norms:
/// `(fixp_err - posit_err) * grad_norm / n_l`.
#[inline]
pub fn sensitivity_score(fixp_err: f64, posit_err: f64, grad_norm: f64, n_l: usize) -> f64 {
    (fixp_err - posit_err) * grad_norm / n_l as f64
}

fn l2_norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Sensitivity of one layer for one Posit variant.
///
/// Both quantizers are measured after dequantization to real weight units:
/// FixP error uses `scale * w_q`, Posit error uses the table value.
pub fn layer_sensitivity(
    w: &[f64],
    grad: &[f64],
    variant: ScaleVariant,
    fixp: &FixPParams,
) -> Result<f64, CoreError> {
    if w.len() != grad.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "weights ({}) and gradients ({}) differ in length",
            w.len(),
            grad.len()
        )));
    }
    let (wq, scale) = fixp_quantize_weights(w, fixp)?;
    let fixp_err = l2_norm(w.iter().zip(&wq).map(|(&x, &q)| scale * q - x));
    let posit = posit_quantize_weights(w, variant)?;
    let posit_err = l2_norm(w.iter().zip(&posit).map(|(&x, &q)| q - x));
    let grad_norm = l2_norm(grad.iter().copied());
    Ok(sensitivity_score(fixp_err, posit_err, grad_norm, w.len()))
}

/// Computes [`LayerStats`] for every `(layer_id, weights, gradient)` triple.
///
/// Gradients are expected from full-precision backprop averaged over the
/// calibration set; each triple must pair tensors of identical length.
pub fn compute_all_sensitivities(
    layers: &[(String, &[f64], &[f64])],
    fixp: &FixPParams,
) -> Result<Vec<LayerStats>, CoreError> {
    layers
        .iter()
        .enumerate()
        .map(|(index, (id, w, g))| {
            let s_sc4 = layer_sensitivity(w, g, ScaleVariant::Sc4, fixp)?;
            let s_sc8 = layer_sensitivity(w, g, ScaleVariant::Sc8, fixp)?;
            Ok(LayerStats {
                layer_id: id.clone(),
                index,
                n_l: w.len(),
                s_sc4,
                s_sc8,
                s_l: s_sc4.max(s_sc8),
            })
        })
        .collect()
}

/// Options for [`select_layers`].
#[derive(Debug, Clone, Copy)]
pub struct SelectOptions {
    /// Skip layers whose score is <= 0 (Posit neutral or harmful there).
    /// Disable to admit purely by rank order regardless of sign.
    pub skip_nonpositive: bool,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self { skip_nonpositive: true }
    }
}

/// Greedy admission of layers to the Posit set under budget `eta`.
///
/// Candidates are sorted by score descending (ties broken by ascending layer
/// index) and admitted while the running Posit parameter count stays within
/// `eta * N`; the check runs after each admission, so the final plan may
/// exceed the budget by at most one layer. Admitted layers carry their
/// best-scoring variant.
pub fn select_layers(stats: &[LayerStats], eta: f64, opts: SelectOptions) -> AssignmentPlan {
    assert!((0.0..=1.0).contains(&eta), "eta={eta} outside [0, 1]");

    let total: usize = stats.iter().map(|s| s.n_l).sum();
    let budget = eta * total as f64;

    let mut order: Vec<&LayerStats> =
        stats.iter().filter(|s| !opts.skip_nonpositive || s.s_l > 0.0).collect();
    order.sort_by(|a, b| {
        b.s_l.partial_cmp(&a.s_l).expect("scores are finite").then(a.index.cmp(&b.index))
    });

    let mut posit_layers = Vec::new();
    let mut posit_param_count = 0usize;
    for s in &order {
        posit_layers.push((s.layer_id.clone(), s.best_variant()));
        posit_param_count += s.n_l;
        if posit_param_count as f64 > budget {
            break;
        }
    }

    let fixp_layers = stats
        .iter()
        .filter(|s| !posit_layers.iter().any(|(id, _)| id == &s.layer_id))
        .map(|s| s.layer_id.clone())
        .collect();

    AssignmentPlan { eta, posit_layers, fixp_layers, posit_param_count, total_param_count: total }
}

/// JSON report emitted by the analyze step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub eta: f64,
    #[serde(rename = "N")]
    pub total_param_count: usize,
    pub posit_param_count: usize,
    pub posit_param_fraction: f64,
    pub layers: Vec<LayerReportEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReportEntry {
    pub layer_id: String,
    pub n_l: usize,
    pub s_sc4: f64,
    pub s_sc8: f64,
    pub s_l: f64,
    pub chosen: bool,
    /// Present only on chosen (Posit) layers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<ScaleVariant>,
}

impl SensitivityReport {
    pub fn build(stats: &[LayerStats], plan: &AssignmentPlan) -> Self {
        let layers = stats
            .iter()
            .map(|s| {
                let variant = plan.variant_for(&s.layer_id);
                LayerReportEntry {
                    layer_id: s.layer_id.clone(),
                    n_l: s.n_l,
                    s_sc4: s.s_sc4,
                    s_sc8: s.s_sc8,
                    s_l: s.s_l,
                    chosen: variant.is_some(),
                    variant,
                }
            })
            .collect();
        Self {
            eta: plan.eta,
            total_param_count: plan.total_param_count,
            posit_param_count: plan.posit_param_count,
            posit_param_fraction: plan.posit_param_fraction(),
            layers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(id: &str, index: usize, n_l: usize, s_sc4: f64, s_sc8: f64) -> LayerStats {
        LayerStats { layer_id: id.into(), index, n_l, s_sc4, s_sc8, s_l: s_sc4.max(s_sc8) }
    }

    #[test]
    fn score_formula() {
        assert!((sensitivity_score(0.10, 0.04, 2.0, 8) - 0.015).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_gives_zero_score() {
        let w = [0.3, -0.7, 0.1, 0.9];
        let g = [0.0; 4];
        let s = layer_sensitivity(&w, &g, ScaleVariant::Sc8, &FixPParams::default()).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn posit_representable_weights_have_nonnegative_score() {
        // Both entries are exact table members in every variant.
        let w = [0.25, -0.5];
        let g = [1.0, 1.0];
        for variant in ScaleVariant::ALL {
            let s = layer_sensitivity(&w, &g, variant, &FixPParams::default()).unwrap();
            assert!(s >= 0.0, "{variant}: {s}");
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let r = layer_sensitivity(&[1.0, 2.0], &[1.0], ScaleVariant::Sc4, &FixPParams::default());
        assert!(matches!(r, Err(CoreError::ShapeMismatch(_))));
    }

    #[test]
    fn greedy_stops_after_first_budget_overshoot() {
        let s = vec![
            stats("a", 0, 50, 0.5, 0.4),
            stats("b", 1, 30, 0.2, 0.1),
            stats("c", 2, 40, 0.1, 0.05),
        ];
        let plan = select_layers(&s, 0.1, SelectOptions::default());
        // Budget 12; the first admission (50 params) already exceeds it.
        assert_eq!(plan.posit_layers.len(), 1);
        assert_eq!(plan.posit_layers[0].0, "a");
        assert_eq!(plan.posit_param_count, 50);
        assert_eq!(plan.fixp_layers, vec!["b".to_string(), "c".to_string()]);
    }

    #[test]
    fn eta_zero_still_admits_top_layer() {
        let s = vec![stats("a", 0, 10, 0.1, 0.2), stats("b", 1, 10, 0.3, 0.25)];
        let plan = select_layers(&s, 0.0, SelectOptions::default());
        assert_eq!(plan.posit_layers, vec![("b".to_string(), ScaleVariant::Sc4)]);
    }

    #[test]
    fn eta_one_admits_all_positive() {
        let s = vec![
            stats("a", 0, 10, 0.1, 0.2),
            stats("b", 1, 10, -0.5, -0.4),
            stats("c", 2, 10, 0.05, 0.02),
        ];
        let plan = select_layers(&s, 1.0, SelectOptions::default());
        let ids: Vec<&str> = plan.posit_layers.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, vec!["a", "c"]);
        assert_eq!(plan.fixp_layers, vec!["b".to_string()]);
    }

    #[test]
    fn nonpositive_filter_can_be_disabled() {
        let s = vec![stats("a", 0, 10, -0.1, -0.2), stats("b", 1, 10, -0.3, -0.25)];
        let strict = select_layers(&s, 0.0, SelectOptions::default());
        assert!(strict.posit_layers.is_empty());
        let literal = select_layers(&s, 0.0, SelectOptions { skip_nonpositive: false });
        assert_eq!(literal.posit_layers.len(), 1);
        assert_eq!(literal.posit_layers[0].0, "a");
    }

    #[test]
    fn ties_break_by_layer_index() {
        let s = vec![stats("x", 0, 5, 0.2, 0.2), stats("y", 1, 5, 0.2, 0.2)];
        let plan = select_layers(&s, 0.0, SelectOptions::default());
        assert_eq!(plan.posit_layers[0].0, "x");
        // Equal sc4/sc8 scores pick Sc8.
        assert_eq!(plan.posit_layers[0].1, ScaleVariant::Sc8);
    }

    #[test]
    fn empty_stats_give_empty_plan() {
        let plan = select_layers(&[], 0.5, SelectOptions::default());
        assert!(plan.posit_layers.is_empty());
        assert!(plan.fixp_layers.is_empty());
        assert_eq!(plan.total_param_count, 0);
        assert_eq!(plan.posit_param_fraction(), 0.0);
    }

    #[test]
    fn budget_holds_up_to_last_admission() {
        let s: Vec<LayerStats> =
            (0..8).map(|i| stats(&format!("l{i}"), i, 10 + i, 0.8 - 0.1 * i as f64, 0.0)).collect();
        for eta in [0.0, 0.1, 0.3, 0.7, 1.0] {
            let plan = select_layers(&s, eta, SelectOptions::default());
            if let Some((last, _)) = plan.posit_layers.last() {
                let last_n = s.iter().find(|x| &x.layer_id == last).unwrap().n_l;
                let before_last = plan.posit_param_count - last_n;
                assert!(before_last as f64 <= eta * plan.total_param_count as f64);
            }
        }
    }

    #[test]
    fn gradient_rescaling_preserves_order() {
        let w1 = [0.4, -0.2, 0.9, 0.05];
        let w2 = [0.01, 0.3, -0.6, 0.44];
        let g1 = [0.5, -0.1, 0.2, 0.3];
        let g2 = [0.9, 0.4, -0.2, 0.1];
        let p = FixPParams::default();
        let base: Vec<f64> = [(&w1, &g1), (&w2, &g2)]
            .iter()
            .map(|(w, g)| layer_sensitivity(*w, *g, ScaleVariant::Sc8, &p).unwrap())
            .collect();
        let scaled: Vec<f64> = [(&w1, &g1), (&w2, &g2)]
            .iter()
            .map(|(w, g)| {
                let g: Vec<f64> = g.iter().map(|&x| 7.5 * x).collect();
                layer_sensitivity(*w, &g, ScaleVariant::Sc8, &p).unwrap()
            })
            .collect();
        assert_eq!(base[0] > base[1], scaled[0] > scaled[1]);
    }

    #[test]
    fn report_shape() {
        let s = vec![stats("a", 0, 50, 0.5, 0.4), stats("b", 1, 30, -0.2, -0.1)];
        let plan = select_layers(&s, 1.0, SelectOptions::default());
        let report = SensitivityReport::build(&s, &plan);
        assert_eq!(report.layers.len(), 2);
        assert!(report.layers[0].chosen);
        assert_eq!(report.layers[0].variant, Some(ScaleVariant::Sc4));
        assert!(!report.layers[1].chosen);
        assert_eq!(report.layers[1].variant, None);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"N\":80"));
        assert!(json.contains("\"variant\":\"sc4\""));
    }
}
