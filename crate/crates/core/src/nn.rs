//! Layer stack, fake-quantized forward passes and reverse-mode backward
//! passes with the custom quantizer gradient estimators.
//!
//! Weight quantization is simulated: layers keep real-valued shadow weights
//! and quantize them on every forward pass while a scheme is attached.
//! Backward passes route the incoming weight gradient through the
//! straight-through estimator (FixP) or the tanh estimator (Posit);
//! full-precision mode bypasses every quantizer and is exact reverse-mode
//! differentiation.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::macsim::MacTrace;
use crate::posit::ScaleVariant;
use crate::quantize::{
    fixp_fake_quantize, fixp_scale, pact_alpha_grad, pact_forward, pact_input_grad, pact_quantize,
    posit_grad, posit_quantize_weights, ste_grad, FixPParams, PactParams, PositGrid,
};
use crate::tensor::Tensor;

/// Per-layer weight-quantizer choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum QuantScheme {
    #[serde(rename = "fixp4")]
    FixP4(FixPParams),
    #[serde(rename = "posit4")]
    Posit4 { variant: ScaleVariant },
}

/// Whether quantizers are applied during a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Fp32,
    Quantized,
}

/// Fully-connected layer; `weight` is `[out, in]` and maps column vectors,
/// `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    pub scheme: Option<QuantScheme>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

/// Stride-1 2D convolution; `weight` is `[k_out, c_in, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    pub padding: Padding,
    pub scheme: Option<QuantScheme>,
}

/// Clipped activation with a trainable threshold; quantizes to unsigned
/// 4-bit codes in quantized mode.
#[derive(Debug, Clone, PartialEq)]
pub struct PactLayer {
    pub name: String,
    pub params: PactParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Conv2d(Conv2dLayer),
    Relu(String),
    Pact(PactLayer),
    Flatten(String),
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Dense(l) => &l.name,
            Layer::Conv2d(l) => &l.name,
            Layer::Relu(name) => name,
            Layer::Pact(l) => &l.name,
            Layer::Flatten(name) => name,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
}

/// Saved intermediates of one layer's forward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Dense {
        input: Tensor,
        /// Weights actually multiplied (quantized when a scheme is active).
        w_eff: Tensor,
    },
    Conv2d {
        input: Tensor,
        w_eff: Tensor,
    },
    Relu {
        input: Tensor,
    },
    Pact {
        input: Tensor,
        /// Unsigned 4-bit activation codes (quantized mode only).
        codes: Option<Vec<u8>>,
    },
    Flatten {
        in_shape: Vec<usize>,
    },
}

/// Forward-pass record consumed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub mode: Mode,
    pub per_layer: Vec<LayerCache>,
    pub output: Tensor,
}

/// Parameter gradients aligned with the model's layer order.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub per_layer: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
pub enum LayerGrads {
    Dense { weight: Tensor, bias: Tensor },
    Conv2d { weight: Tensor, bias: Tensor },
    Pact { alpha: f64 },
    None,
}

/// A mutable view of one trainable parameter tensor.
pub struct ParamMut<'a> {
    pub data: &'a mut [f64],
    pub weight_decay: bool,
}

impl Model {
    /// Effective weights for a dense/conv layer under the given mode.
    fn effective_weights(
        weight: &Tensor,
        scheme: Option<&QuantScheme>,
        mode: Mode,
    ) -> Result<Tensor, CoreError> {
        let data = match (mode, scheme) {
            (Mode::Fp32, _) | (_, None) => weight.data().to_vec(),
            (Mode::Quantized, Some(QuantScheme::FixP4(p))) => {
                fixp_fake_quantize(weight.data(), p, p.scale)
            }
            (Mode::Quantized, Some(QuantScheme::Posit4 { variant })) => {
                posit_quantize_weights(weight.data(), *variant)?
            }
        };
        Tensor::new(weight.shape().to_vec(), data)
    }

    pub fn forward(&self, input: &Tensor, mode: Mode) -> Result<(Tensor, ForwardCache), CoreError> {
        input.check_finite("model input")?;
        let mut x = input.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = match layer {
                Layer::Dense(l) => dense_forward(l, &x, mode)?,
                Layer::Conv2d(l) => conv2d_forward(l, &x, mode)?,
                Layer::Relu(_) => relu_forward(&x),
                Layer::Pact(l) => pact_layer_forward(l, &x, mode),
                Layer::Flatten(_) => flatten_forward(&x)?,
            };
            out.check_finite(layer.name())?;
            per_layer.push(cache);
            x = out;
        }
        let cache = ForwardCache { mode, per_layer, output: x.clone() };
        Ok((x, cache))
    }

    /// Reverse pass from the loss gradient w.r.t. the logits.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Tensor) -> Result<Gradients, CoreError> {
        if cache.per_layer.len() != self.layers.len() {
            return Err(CoreError::ShapeMismatch(
                "forward cache does not match this model".into(),
            ));
        }
        if dlogits.shape() != cache.output.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "loss gradient shape {:?} does not match output {:?}",
                dlogits.shape(),
                cache.output.shape()
            )));
        }
        let mut grads = vec![LayerGrads::None; self.layers.len()];
        let mut dy = dlogits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (dx, g) = match (layer, &cache.per_layer[i]) {
                (Layer::Dense(l), LayerCache::Dense { input, w_eff }) => {
                    dense_backward(l, input, w_eff, &dy, cache.mode)?
                }
                (Layer::Conv2d(l), LayerCache::Conv2d { input, w_eff }) => {
                    conv2d_backward(l, input, w_eff, &dy, cache.mode)?
                }
                (Layer::Relu(_), LayerCache::Relu { input }) => (relu_backward(input, &dy), LayerGrads::None),
                (Layer::Pact(l), LayerCache::Pact { input, .. }) => pact_layer_backward(l, input, &dy),
                (Layer::Flatten(_), LayerCache::Flatten { in_shape }) => {
                    (dy.reshaped(in_shape.clone())?, LayerGrads::None)
                }
                _ => {
                    return Err(CoreError::ShapeMismatch(
                        "forward cache does not match this model".into(),
                    ))
                }
            };
            grads[i] = g;
            dy = dx;
        }
        Ok(Gradients { per_layer: grads })
    }

    /// Recomputes every FixP scheme's scale from the current shadow weights.
    pub fn refresh_fixp_scales(&mut self) -> Result<(), CoreError> {
        for layer in &mut self.layers {
            let (weight, scheme) = match layer {
                Layer::Dense(l) => (&l.weight, &mut l.scheme),
                Layer::Conv2d(l) => (&l.weight, &mut l.scheme),
                _ => continue,
            };
            if let Some(QuantScheme::FixP4(p)) = scheme {
                p.scale = fixp_scale(weight.data(), p)?;
            }
        }
        Ok(())
    }

    /// Permanently snaps shadow weights to their scheme's codomain.
    pub fn snap_weights(&mut self) -> Result<(), CoreError> {
        for layer in &mut self.layers {
            let (weight, scheme) = match layer {
                Layer::Dense(l) => (&mut l.weight, &l.scheme),
                Layer::Conv2d(l) => (&mut l.weight, &l.scheme),
                _ => continue,
            };
            let snapped = match scheme {
                None => continue,
                Some(QuantScheme::FixP4(p)) => fixp_fake_quantize(weight.data(), p, p.scale),
                Some(QuantScheme::Posit4 { variant }) => {
                    posit_quantize_weights(weight.data(), *variant)?
                }
            };
            weight.data_mut().copy_from_slice(&snapped);
        }
        Ok(())
    }

    /// Quantizable layers: dense and conv weight tensors (biases and
    /// activation thresholds never count).
    pub fn quantizable_layers(&self) -> Vec<(&str, &Tensor)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense(d) => Some((d.name.as_str(), &d.weight)),
                Layer::Conv2d(c) => Some((c.name.as_str(), &c.weight)),
                _ => None,
            })
            .collect()
    }

    /// Total quantizable parameter count (the N of the assignment budget).
    pub fn quantizable_param_count(&self) -> usize {
        self.quantizable_layers().iter().map(|(_, w)| w.len()).sum()
    }

    pub fn scheme_for(&self, layer_id: &str) -> Option<&QuantScheme> {
        self.layers.iter().find_map(|l| match l {
            Layer::Dense(d) if d.name == layer_id => d.scheme.as_ref(),
            Layer::Conv2d(c) if c.name == layer_id => c.scheme.as_ref(),
            _ => None,
        })
    }

    pub fn set_scheme(&mut self, layer_id: &str, scheme: Option<QuantScheme>) -> Result<(), CoreError> {
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) if d.name == layer_id => {
                    d.scheme = scheme;
                    return Ok(());
                }
                Layer::Conv2d(c) if c.name == layer_id => {
                    c.scheme = scheme;
                    return Ok(());
                }
                _ => {}
            }
        }
        Err(CoreError::InvalidConfig(format!("no quantizable layer named {layer_id}")))
    }

    pub fn has_any_scheme(&self) -> bool {
        self.layers.iter().any(|l| match l {
            Layer::Dense(d) => d.scheme.is_some(),
            Layer::Conv2d(c) => c.scheme.is_some(),
            _ => false,
        })
    }

    /// Mutable views of all trainable parameters, in layer order:
    /// dense/conv contribute weight then bias, pact contributes alpha.
    /// Weight decay applies to weights and alpha, never to biases.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut params = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(l) => {
                    params.push(ParamMut { data: l.weight.data_mut(), weight_decay: true });
                    params.push(ParamMut { data: l.bias.data_mut(), weight_decay: false });
                }
                Layer::Conv2d(l) => {
                    params.push(ParamMut { data: l.weight.data_mut(), weight_decay: true });
                    params.push(ParamMut { data: l.bias.data_mut(), weight_decay: false });
                }
                Layer::Pact(l) => {
                    params.push(ParamMut {
                        data: std::slice::from_mut(&mut l.params.alpha),
                        weight_decay: true,
                    });
                }
                Layer::Relu(_) | Layer::Flatten(_) => {}
            }
        }
        params
    }

    /// Per-sample MAC operation counts per dense/conv layer; a layer's ops
    /// count as Posit when its scheme is Posit.
    pub fn mac_counts_per_sample(&self, input_shape: &[usize]) -> Result<MacTrace, CoreError> {
        let mut trace = MacTrace::default();
        let mut shape = input_shape.to_vec();
        for layer in &self.layers {
            match layer {
                Layer::Dense(l) => {
                    let out = l.weight.shape()[0];
                    let inp = l.weight.shape()[1];
                    if shape != [inp] {
                        return Err(CoreError::ShapeMismatch(format!(
                            "{}: expected input [{inp}], got {shape:?}",
                            l.name
                        )));
                    }
                    let macs = (inp * out) as u64;
                    let posit =
                        if matches!(l.scheme, Some(QuantScheme::Posit4 { .. })) { macs } else { 0 };
                    trace.push(l.name.clone(), macs, posit);
                    shape = vec![out];
                }
                Layer::Conv2d(l) => {
                    let [k_out, c_in, kh, kw] = conv_weight_dims(&l.weight)?;
                    let (h, w) = (shape[1], shape[2]);
                    let (oh, ow) = conv_output_hw(h, w, kh, kw, l.padding)?;
                    if shape[0] != c_in {
                        return Err(CoreError::ShapeMismatch(format!(
                            "{}: expected {c_in} input channels, got {}",
                            l.name, shape[0]
                        )));
                    }
                    let macs = (k_out * oh * ow * c_in * kh * kw) as u64;
                    let posit =
                        if matches!(l.scheme, Some(QuantScheme::Posit4 { .. })) { macs } else { 0 };
                    trace.push(l.name.clone(), macs, posit);
                    shape = vec![k_out, oh, ow];
                }
                Layer::Flatten(_) => shape = vec![shape.iter().product()],
                Layer::Relu(_) | Layer::Pact(_) => {}
            }
        }
        Ok(trace)
    }
}

fn dense_forward(l: &DenseLayer, x: &Tensor, mode: Mode) -> Result<(Tensor, LayerCache), CoreError> {
    let (out_dim, in_dim) = (l.weight.shape()[0], l.weight.shape()[1]);
    if x.shape().len() != 2 || x.shape()[1] != in_dim {
        return Err(CoreError::ShapeMismatch(format!(
            "{}: expected input [batch, {in_dim}], got {:?}",
            l.name,
            x.shape()
        )));
    }
    let batch = x.shape()[0];
    let w_eff = Model::effective_weights(&l.weight, l.scheme.as_ref(), mode)?;
    let w = w_eff.data();
    let xs = x.data();
    let bias = l.bias.data();
    let mut y = vec![0.0; batch * out_dim];
    for b in 0..batch {
        let row = &xs[b * in_dim..(b + 1) * in_dim];
        for o in 0..out_dim {
            let wrow = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = bias[o];
            for i in 0..in_dim {
                acc += wrow[i] * row[i];
            }
            y[b * out_dim + o] = acc;
        }
    }
    let out = Tensor::new(vec![batch, out_dim], y)?;
    Ok((out, LayerCache::Dense { input: x.clone(), w_eff }))
}

fn dense_backward(
    l: &DenseLayer,
    input: &Tensor,
    w_eff: &Tensor,
    dy: &Tensor,
    mode: Mode,
) -> Result<(Tensor, LayerGrads), CoreError> {
    let (out_dim, in_dim) = (l.weight.shape()[0], l.weight.shape()[1]);
    let batch = input.shape()[0];
    if dy.shape() != [batch, out_dim] {
        return Err(CoreError::ShapeMismatch(format!("{}: bad upstream gradient shape", l.name)));
    }
    let xs = input.data();
    let dys = dy.data();
    let w = w_eff.data();

    let mut dw = vec![0.0; out_dim * in_dim];
    let mut db = vec![0.0; out_dim];
    let mut dx = vec![0.0; batch * in_dim];
    for b in 0..batch {
        let xrow = &xs[b * in_dim..(b + 1) * in_dim];
        let dyrow = &dys[b * out_dim..(b + 1) * out_dim];
        let dxrow = &mut dx[b * in_dim..(b + 1) * in_dim];
        for o in 0..out_dim {
            let g = dyrow[o];
            db[o] += g;
            let wrow = &w[o * in_dim..(o + 1) * in_dim];
            let dwrow = &mut dw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dwrow[i] += g * xrow[i];
                dxrow[i] += g * wrow[i];
            }
        }
    }
    apply_weight_estimator(&mut dw, l.weight.data(), l.scheme.as_ref(), mode);
    Ok((
        Tensor::new(vec![batch, in_dim], dx)?,
        LayerGrads::Dense {
            weight: Tensor::new(vec![out_dim, in_dim], dw)?,
            bias: Tensor::new(vec![out_dim], db)?,
        },
    ))
}

/// Routes the effective-weight gradient through the scheme's estimator to get
/// the shadow-weight gradient. Identity in fp32 mode or without a scheme.
fn apply_weight_estimator(dw: &mut [f64], shadow: &[f64], scheme: Option<&QuantScheme>, mode: Mode) {
    if mode == Mode::Fp32 {
        return;
    }
    match scheme {
        None => {}
        Some(QuantScheme::FixP4(p)) => {
            for (g, &w) in dw.iter_mut().zip(shadow) {
                *g *= ste_grad(w / p.scale, p.low, p.high);
            }
        }
        Some(QuantScheme::Posit4 { variant }) => {
            let grid = PositGrid::new(*variant);
            for (g, &w) in dw.iter_mut().zip(shadow) {
                *g *= posit_grad(w, &grid);
            }
        }
    }
}

fn conv_weight_dims(weight: &Tensor) -> Result<[usize; 4], CoreError> {
    match weight.shape() {
        [k, c, kh, kw] => Ok([*k, *c, *kh, *kw]),
        other => Err(CoreError::ShapeMismatch(format!("conv weight must be 4-d, got {other:?}"))),
    }
}

fn conv_output_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: Padding,
) -> Result<(usize, usize), CoreError> {
    match padding {
        Padding::Valid => {
            if h < kh || w < kw {
                return Err(CoreError::ShapeMismatch(format!(
                    "input {h}x{w} smaller than kernel {kh}x{kw}"
                )));
            }
            Ok((h - kh + 1, w - kw + 1))
        }
        Padding::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(CoreError::ShapeMismatch(
                    "same padding requires odd kernel dimensions".into(),
                ));
            }
            Ok((h, w))
        }
    }
}

fn conv_pad(padding: Padding, kh: usize, kw: usize) -> (usize, usize) {
    match padding {
        Padding::Valid => (0, 0),
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
    }
}

fn conv2d_forward(l: &Conv2dLayer, x: &Tensor, mode: Mode) -> Result<(Tensor, LayerCache), CoreError> {
    let [k_out, c_in, kh, kw] = conv_weight_dims(&l.weight)?;
    if x.shape().len() != 4 || x.shape()[1] != c_in {
        return Err(CoreError::ShapeMismatch(format!(
            "{}: expected input [batch, {c_in}, h, w], got {:?}",
            l.name,
            x.shape()
        )));
    }
    let (batch, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (oh, ow) = conv_output_hw(h, w, kh, kw, l.padding)?;
    let (ph, pw) = conv_pad(l.padding, kh, kw);

    let w_eff = Model::effective_weights(&l.weight, l.scheme.as_ref(), mode)?;
    let wd = w_eff.data();
    let xd = x.data();
    let bias = l.bias.data();
    let mut y = vec![0.0; batch * k_out * oh * ow];

    let x_at = |b: usize, c: usize, i: usize, j: usize| xd[((b * c_in + c) * h + i) * w + j];
    for b in 0..batch {
        for k in 0..k_out {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = bias[k];
                    for c in 0..c_in {
                        for di in 0..kh {
                            let ii = oi + di;
                            if ii < ph || ii - ph >= h {
                                continue;
                            }
                            for dj in 0..kw {
                                let jj = oj + dj;
                                if jj < pw || jj - pw >= w {
                                    continue;
                                }
                                acc += wd[((k * c_in + c) * kh + di) * kw + dj]
                                    * x_at(b, c, ii - ph, jj - pw);
                            }
                        }
                    }
                    y[((b * k_out + k) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    let out = Tensor::new(vec![batch, k_out, oh, ow], y)?;
    Ok((out, LayerCache::Conv2d { input: x.clone(), w_eff }))
}

fn conv2d_backward(
    l: &Conv2dLayer,
    input: &Tensor,
    w_eff: &Tensor,
    dy: &Tensor,
    mode: Mode,
) -> Result<(Tensor, LayerGrads), CoreError> {
    let [k_out, c_in, kh, kw] = conv_weight_dims(&l.weight)?;
    let (batch, h, w) = (input.shape()[0], input.shape()[2], input.shape()[3]);
    let (oh, ow) = conv_output_hw(h, w, kh, kw, l.padding)?;
    if dy.shape() != [batch, k_out, oh, ow] {
        return Err(CoreError::ShapeMismatch(format!("{}: bad upstream gradient shape", l.name)));
    }
    let (ph, pw) = conv_pad(l.padding, kh, kw);

    let xd = input.data();
    let wd = w_eff.data();
    let dyd = dy.data();
    let mut dw = vec![0.0; k_out * c_in * kh * kw];
    let mut db = vec![0.0; k_out];
    let mut dx = vec![0.0; batch * c_in * h * w];

    for b in 0..batch {
        for k in 0..k_out {
            for oi in 0..oh {
                for oj in 0..ow {
                    let g = dyd[((b * k_out + k) * oh + oi) * ow + oj];
                    db[k] += g;
                    for c in 0..c_in {
                        for di in 0..kh {
                            let ii = oi + di;
                            if ii < ph || ii - ph >= h {
                                continue;
                            }
                            for dj in 0..kw {
                                let jj = oj + dj;
                                if jj < pw || jj - pw >= w {
                                    continue;
                                }
                                let xi = ((b * c_in + c) * h + (ii - ph)) * w + (jj - pw);
                                let wi = ((k * c_in + c) * kh + di) * kw + dj;
                                dw[wi] += g * xd[xi];
                                dx[xi] += g * wd[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    apply_weight_estimator(&mut dw, l.weight.data(), l.scheme.as_ref(), mode);
    Ok((
        Tensor::new(vec![batch, c_in, h, w], dx)?,
        LayerGrads::Conv2d {
            weight: Tensor::new(vec![k_out, c_in, kh, kw], dw)?,
            bias: Tensor::new(vec![k_out], db)?,
        },
    ))
}

fn relu_forward(x: &Tensor) -> (Tensor, LayerCache) {
    let y: Vec<f64> = x.data().iter().map(|&v| v.max(0.0)).collect();
    (
        Tensor::new(x.shape().to_vec(), y).expect("same shape"),
        LayerCache::Relu { input: x.clone() },
    )
}

fn relu_backward(input: &Tensor, dy: &Tensor) -> Tensor {
    let dx: Vec<f64> =
        input.data().iter().zip(dy.data()).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
    Tensor::new(input.shape().to_vec(), dx).expect("same shape")
}

fn pact_layer_forward(l: &PactLayer, x: &Tensor, mode: Mode) -> (Tensor, LayerCache) {
    let clipped = pact_forward(x.data(), &l.params);
    let (out, codes) = match mode {
        Mode::Fp32 => (clipped, None),
        Mode::Quantized => {
            let (codes, values) = pact_quantize(&clipped, &l.params);
            (values, Some(codes))
        }
    };
    (
        Tensor::new(x.shape().to_vec(), out).expect("same shape"),
        LayerCache::Pact { input: x.clone(), codes },
    )
}

fn pact_layer_backward(l: &PactLayer, input: &Tensor, dy: &Tensor) -> (Tensor, LayerGrads) {
    let mut dalpha = 0.0;
    let dx: Vec<f64> = input
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&x, &g)| {
            dalpha += g * pact_alpha_grad(x, &l.params);
            g * pact_input_grad(x, &l.params)
        })
        .collect();
    (
        Tensor::new(input.shape().to_vec(), dx).expect("same shape"),
        LayerGrads::Pact { alpha: dalpha },
    )
}

fn flatten_forward(x: &Tensor) -> Result<(Tensor, LayerCache), CoreError> {
    if x.shape().is_empty() {
        return Err(CoreError::ShapeMismatch("flatten needs a batched input".into()));
    }
    let batch = x.shape()[0];
    let rest: usize = x.shape()[1..].iter().product();
    Ok((
        x.reshaped(vec![batch, rest])?,
        LayerCache::Flatten { in_shape: x.shape().to_vec() },
    ))
}

/// Shape of a PACT-activated MLP classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub features: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
    /// Threshold of the input quantizer; 1.0 suits inputs normalized to [0, 1].
    pub input_alpha: f64,
    /// Initial threshold of the hidden activations.
    pub hidden_alpha: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            features: 64,
            hidden: vec![256, 128],
            classes: 10,
            seed: 0,
            input_alpha: 1.0,
            hidden_alpha: 10.0,
        }
    }
}

/// Builds `pact -> (dense -> pact)* -> dense` with seeded He-normal weights.
///
/// The leading PACT layer quantizes the network input in quantized mode, so
/// every dense layer consumes 4-bit activation codes.
pub fn build_mlp(cfg: &MlpConfig) -> Model {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layers = vec![Layer::Pact(PactLayer {
        name: "act0".into(),
        params: PactParams { alpha: cfg.input_alpha, n: 4 },
    })];
    let dims: Vec<usize> =
        std::iter::once(cfg.features).chain(cfg.hidden.iter().copied()).chain([cfg.classes]).collect();
    for (i, pair) in dims.windows(2).enumerate() {
        let (inp, out) = (pair[0], pair[1]);
        let std = (2.0 / inp as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let weight: Vec<f64> = (0..out * inp).map(|_| normal.sample(&mut rng)).collect();
        layers.push(Layer::Dense(DenseLayer {
            name: format!("fc{}", i + 1),
            weight: Tensor::new(vec![out, inp], weight).expect("shape matches"),
            bias: Tensor::zeros(&[out]),
            scheme: None,
        }));
        if i + 2 < dims.len() {
            layers.push(Layer::Pact(PactLayer {
                name: format!("act{}", i + 1),
                params: PactParams { alpha: cfg.hidden_alpha, n: 4 },
            }));
        }
    }
    Model { layers }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), CoreError> {
    if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    let ld = logits.data();
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; batch * classes];
    for b in 0..batch {
        let row = &ld[b * classes..(b + 1) * classes];
        let label = labels[b];
        if label >= classes {
            return Err(CoreError::ShapeMismatch(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln() + max;
        loss += log_denom - row[label];
        let drow = &mut dlogits[b * classes..(b + 1) * classes];
        for (c, slot) in drow.iter_mut().enumerate() {
            let p = (row[c] - max).exp() / denom;
            *slot = (p - if c == label { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    Ok((loss / batch as f64, Tensor::new(vec![batch, classes], dlogits)?))
}

/// Index of the largest logit per row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    let ld = logits.data();
    (0..batch)
        .map(|b| {
            let row = &ld[b * classes..(b + 1) * classes];
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(name: &str, weight: Vec<f64>, out: usize, inp: usize, scheme: Option<QuantScheme>) -> Layer {
        Layer::Dense(DenseLayer {
            name: name.into(),
            weight: Tensor::new(vec![out, inp], weight).unwrap(),
            bias: Tensor::zeros(&[out]),
            scheme,
        })
    }

    #[test]
    fn dense_maps_column_vectors() {
        let model = Model { layers: vec![dense("fc", vec![1.0, 2.0, 3.0, 4.0], 2, 2, None)] };
        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let (y, _) = model.forward(&x, Mode::Fp32).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn posit_representable_weights_make_quantization_invisible() {
        let w = vec![0.25, -0.5, 1.0, 2.0];
        let fp = Model { layers: vec![dense("fc", w.clone(), 2, 2, None)] };
        let q = Model {
            layers: vec![dense(
                "fc",
                w,
                2,
                2,
                Some(QuantScheme::Posit4 { variant: ScaleVariant::Unit }),
            )],
        };
        let x = Tensor::new(vec![2, 2], vec![0.3, -0.9, 1.5, 0.2]).unwrap();
        let (y_fp, _) = fp.forward(&x, Mode::Fp32).unwrap();
        let (y_q, _) = q.forward(&x, Mode::Quantized).unwrap();
        assert_eq!(y_fp.data(), y_q.data());
    }

    #[test]
    fn quantized_mode_without_schemes_equals_fp32_bit_for_bit() {
        let model = Model {
            layers: vec![
                dense("fc1", vec![0.31, -0.7, 0.11, 0.99, -0.4, 0.05], 3, 2, None),
                Layer::Relu("r1".into()),
                dense("fc2", vec![0.2, -0.3, 0.7, 0.1, 0.6, -0.9], 2, 3, None),
            ],
        };
        let x = Tensor::new(vec![2, 2], vec![0.5, -1.2, 0.9, 2.2]).unwrap();
        let (y_fp, _) = model.forward(&x, Mode::Fp32).unwrap();
        let (y_q, _) = model.forward(&x, Mode::Quantized).unwrap();
        assert_eq!(y_fp.data(), y_q.data());
    }

    #[test]
    fn pact_layer_quantizes_only_in_quantized_mode() {
        let model = Model {
            layers: vec![Layer::Pact(PactLayer {
                name: "a".into(),
                params: PactParams { alpha: 6.0, n: 4 },
            })],
        };
        let x = Tensor::new(vec![1, 3], vec![-1.0, 3.0, 9.0]).unwrap();
        let (y, _) = model.forward(&x, Mode::Fp32).unwrap();
        assert_eq!(y.data(), &[0.0, 3.0, 6.0]);
        let (y, cache) = model.forward(&x, Mode::Quantized).unwrap();
        assert_eq!(y.data(), &[0.0, 3.2, 6.0]);
        match &cache.per_layer[0] {
            LayerCache::Pact { codes: Some(codes), .. } => assert_eq!(codes, &vec![0, 8, 15]),
            other => panic!("unexpected cache {other:?}"),
        }
    }

    #[test]
    fn zero_loss_gradient_gives_zero_parameter_gradients() {
        let model = Model {
            layers: vec![dense("fc", vec![0.4, -0.2, 0.1, 0.8], 2, 2, None)],
        };
        let x = Tensor::new(vec![3, 2], vec![0.1, 0.2, -0.4, 0.5, 0.9, -0.7]).unwrap();
        let (_, cache) = model.forward(&x, Mode::Fp32).unwrap();
        let dzero = Tensor::zeros(&[3, 2]);
        let grads = model.backward(&cache, &dzero).unwrap();
        match &grads.per_layer[0] {
            LayerGrads::Dense { weight, bias } => {
                assert!(weight.data().iter().all(|&g| g == 0.0));
                assert!(bias.data().iter().all(|&g| g == 0.0));
            }
            other => panic!("unexpected grads {other:?}"),
        }
    }

    #[test]
    fn posit_estimator_scales_weight_gradients_at_midpoints() {
        // Every weight at the midpoint of [1, 2]: estimator factor 10/d^2 = 10.
        let w = vec![1.5; 4];
        let scheme = Some(QuantScheme::Posit4 { variant: ScaleVariant::Unit });
        let with = Model { layers: vec![dense("fc", w.clone(), 2, 2, scheme)] };
        let without = Model { layers: vec![dense("fc", w, 2, 2, None)] };
        let x = Tensor::new(vec![1, 2], vec![0.3, -0.8]).unwrap();
        let dy = Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap();

        let (_, cache_q) = with.forward(&x, Mode::Quantized).unwrap();
        let gq = with.backward(&cache_q, &dy).unwrap();
        let (_, cache_fp) = without.forward(&x, Mode::Fp32).unwrap();
        let gfp = without.backward(&cache_fp, &dy).unwrap();

        // Compare the raw weight gradients; the quantized path multiplies the
        // fp32 gradient by the estimator. Snapped weights only enter dX, not
        // dW, so the two runs differ exactly by that factor.
        let (LayerGrads::Dense { weight: wq, .. }, LayerGrads::Dense { weight: wf, .. }) =
            (&gq.per_layer[0], &gfp.per_layer[0])
        else {
            panic!("unexpected grads");
        };
        for (a, b) in wq.data().iter().zip(wf.data()) {
            assert!((a - 10.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn ste_kills_gradients_outside_saturation_range() {
        let mut p = FixPParams::default();
        p.scale = 1.0;
        // 3.0 / scale = 3.0 > high = 1.75: gradient blocked.
        let w = vec![3.0, 0.5];
        let model = Model { layers: vec![dense("fc", w, 1, 2, Some(QuantScheme::FixP4(p)))] };
        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let dy = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let (_, cache) = model.forward(&x, Mode::Quantized).unwrap();
        let grads = model.backward(&cache, &dy).unwrap();
        let LayerGrads::Dense { weight, .. } = &grads.per_layer[0] else { panic!() };
        assert_eq!(weight.data()[0], 0.0);
        assert_eq!(weight.data()[1], 1.0);
    }

    #[test]
    fn softmax_xent_gradient_sums_to_zero_per_row() {
        let logits = Tensor::new(vec![2, 3], vec![0.2, -1.0, 0.7, 2.0, 0.1, -0.3]).unwrap();
        let (loss, d) = softmax_xent(&logits, &[2, 0]).unwrap();
        assert!(loss > 0.0);
        for b in 0..2 {
            let s: f64 = d.data()[b * 3..(b + 1) * 3].iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_xent_rejects_bad_labels() {
        let logits = Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        assert!(softmax_xent(&logits, &[3]).is_err());
        assert!(softmax_xent(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn conv_shapes_for_both_paddings() {
        let conv = |padding| {
            Layer::Conv2d(Conv2dLayer {
                name: "c".into(),
                weight: Tensor::zeros(&[2, 3, 3, 3]),
                bias: Tensor::zeros(&[2]),
                padding,
                scheme: None,
            })
        };
        let x = Tensor::zeros(&[1, 3, 5, 6]);
        let (y, _) = Model { layers: vec![conv(Padding::Valid)] }.forward(&x, Mode::Fp32).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 4]);
        let (y, _) = Model { layers: vec![conv(Padding::Same)] }.forward(&x, Mode::Fp32).unwrap();
        assert_eq!(y.shape(), &[1, 2, 5, 6]);
    }

    #[test]
    fn mac_counts_follow_layer_shapes() {
        let model = Model {
            layers: vec![
                Layer::Conv2d(Conv2dLayer {
                    name: "c1".into(),
                    weight: Tensor::zeros(&[4, 1, 3, 3]),
                    bias: Tensor::zeros(&[4]),
                    padding: Padding::Same,
                    scheme: Some(QuantScheme::Posit4 { variant: ScaleVariant::Sc8 }),
                }),
                Layer::Flatten("fl".into()),
                Layer::Dense(DenseLayer {
                    name: "fc".into(),
                    weight: Tensor::zeros(&[10, 4 * 8 * 8]),
                    bias: Tensor::zeros(&[10]),
                    scheme: None,
                }),
            ],
        };
        let trace = model.mac_counts_per_sample(&[1, 8, 8]).unwrap();
        assert_eq!(trace.layers.len(), 2);
        // conv: 4 out channels * 8*8 outputs * 1*3*3 kernel volume.
        assert_eq!(trace.layers[0].total_macs, 4 * 64 * 9);
        assert_eq!(trace.layers[0].posit_macs, 4 * 64 * 9);
        assert_eq!(trace.layers[1].total_macs, 10 * 256);
        assert_eq!(trace.layers[1].posit_macs, 0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let model = Model { layers: vec![dense("fc", vec![0.0; 6], 3, 2, None)] };
        let x = Tensor::zeros(&[1, 5]);
        assert!(matches!(model.forward(&x, Mode::Fp32), Err(CoreError::ShapeMismatch(_))));
    }
}
