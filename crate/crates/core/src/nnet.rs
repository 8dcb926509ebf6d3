//! Small feedforward networks with exact reverse-mode gradients.
//!
//! Weights are stored `inputs × outputs`, so a batch `X` (rows = samples) maps
//! to `act(X·W + b)`. The same type serves as feature extractor, classifier,
//! adversarial critic and VAE encoder/decoder.

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::numeric::{Mat, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// First derivative, given pre-activation `z` and activation `a`.
    #[inline]
    fn d1(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    #[inline]
    fn d2(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
            Activation::Relu | Activation::Identity => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Mat,
    pub bias: Vec<f64>,
    pub act: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    /// Glorot-uniform initialisation; each layer draws from its own child stream.
    pub fn new(dims: &[usize], acts: &[Activation], rng: &RngStream) -> Result<Mlp> {
        if dims.len() < 2 || acts.len() != dims.len() - 1 {
            return Err(dim_mismatch(format!(
                "{} layer sizes need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                acts.len()
            )));
        }
        let layers = dims
            .windows(2)
            .zip(acts)
            .enumerate()
            .map(|(l, (w, &act))| {
                let mut r = rng.split(l as u64);
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Layer {
                    weights: Mat::from_fn(w[0], w[1], |_, _| r.uniform_range(-limit, limit)),
                    bias: vec![0.0; w[1]],
                    act,
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Mlp> {
        if layers.is_empty() {
            return Err(dim_mismatch("network needs at least one layer"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(dim_mismatch(format!("layer {l}: bias length mismatch")));
            }
            if !layer.weights.all_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::Parse(format!("layer {l}: non-finite parameter")));
            }
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(dim_mismatch(format!(
                    "layer {l} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    l + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Mlp { layers })
    }

    /// Same shapes, all parameters zero.
    pub fn zeroed(&self) -> Mlp {
        let mut net = self.clone();
        for layer in &mut net.layers {
            layer.weights.data_mut().fill(0.0);
            layer.bias.fill(0.0);
        }
        net
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    /// All parameters, layer by layer, weights before bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(dim_mismatch("flat parameter length"));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.data().len();
            l.weights.data_mut().copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Forward pass without keeping a tape.
    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            h = affine(&h, layer)?;
            for v in h.data_mut() {
                *v = layer.act.apply(*v);
            }
            if !h.all_finite() {
                return Err(Error::NonFiniteActivation(l));
            }
        }
        Ok(h)
    }

    /// Pretty checkpoint JSON with every float printed to 17 significant digits.
    pub fn to_checkpoint_json(&self) -> String {
        fn floats(xs: &[f64]) -> String {
            let parts: Vec<String> = xs.iter().map(|v| format!("{v:.16e}")).collect();
            format!("[{}]", parts.join(","))
        }
        let layers: Vec<String> = self
            .layers
            .iter()
            .map(|l| {
                format!(
                    "{{\"rows\":{},\"cols\":{},\"w\":{},\"b\":{},\"act\":\"{}\"}}",
                    l.weights.rows(),
                    l.weights.cols(),
                    floats(l.weights.data()),
                    floats(&l.bias),
                    match l.act {
                        Activation::Tanh => "tanh",
                        Activation::Relu => "relu",
                        Activation::Identity => "identity",
                    }
                )
            })
            .collect();
        format!("{{\"layers\":[{}]}}", layers.join(","))
    }

    pub fn from_checkpoint_json(s: &str) -> Result<Mlp> {
        serde_json::from_str(s).map_err(|e| Error::Parse(format!("checkpoint: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
    b: Vec<f64>,
    act: Activation,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpRecord {
    layers: Vec<LayerRecord>,
}

impl Serialize for Mlp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MlpRecord {
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    rows: l.weights.rows(),
                    cols: l.weights.cols(),
                    w: l.weights.data().to_vec(),
                    b: l.bias.clone(),
                    act: l.act,
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mlp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = MlpRecord::deserialize(d)?;
        let layers = rec
            .layers
            .into_iter()
            .map(|l| {
                Ok(Layer {
                    weights: Mat::new(l.rows, l.cols, l.w)?,
                    bias: l.b,
                    act: l.act,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        Mlp::from_layers(layers).map_err(serde::de::Error::custom)
    }
}

fn affine(x: &Mat, layer: &Layer) -> Result<Mat> {
    let mut z = x.matmul(&layer.weights)?;
    for i in 0..z.rows() {
        for (v, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(z)
}

/// Activations cached by [`mlp_forward`] for one backward pass.
#[derive(Debug)]
pub struct GradTape {
    /// Input to each layer.
    inputs: Vec<Mat>,
    /// Post-activation output of each layer.
    outputs: Vec<Mat>,
    /// Pre-activations of each layer.
    pre: Vec<Mat>,
}

pub fn mlp_forward(net: &Mlp, x: &Mat) -> Result<(Mat, GradTape)> {
    if x.cols() != net.input_dim() {
        return Err(dim_mismatch(format!(
            "network expects {} inputs, batch has {}",
            net.input_dim(),
            x.cols()
        )));
    }
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut outputs = Vec::with_capacity(net.layers.len());
    let mut pre = Vec::with_capacity(net.layers.len());
    let mut h = x.clone();
    for (l, layer) in net.layers.iter().enumerate() {
        let z = affine(&h, layer)?;
        let mut a = z.clone();
        for v in a.data_mut() {
            *v = layer.act.apply(*v);
        }
        if !a.all_finite() {
            return Err(Error::NonFiniteActivation(l));
        }
        inputs.push(h);
        pre.push(z);
        h = a.clone();
        outputs.push(a);
    }
    Ok((
        h,
        GradTape {
            inputs,
            outputs,
            pre,
        },
    ))
}

/// Gradient for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Mat,
    pub bias: Vec<f64>,
}

/// Parameter gradients, shaped like the network they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> MlpGrads {
        MlpGrads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Mat::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    fn check_shape(&self, other: &MlpGrads) -> Result<()> {
        let same = self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.shape() == b.weights.shape() && a.bias.len() == b.bias.len());
        if same {
            Ok(())
        } else {
            Err(dim_mismatch("gradient shapes differ"))
        }
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, s: f64) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                *x += s * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += s * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.scale(s);
            for b in &mut l.bias {
                *b *= s;
            }
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.weights.data().iter().map(|v| v * v).sum::<f64>()
                    + l.bias.iter().map(|v| v * v).sum::<f64>()
            })
            .sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.all_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

/// Reverse pass. Consumes the tape; returns parameter and input gradients.
pub fn mlp_backward(net: &Mlp, tape: GradTape, upstream: &Mat) -> Result<(MlpGrads, Mat)> {
    if tape.pre.len() != net.layers.len() {
        return Err(Error::TapeMismatch(format!(
            "tape has {} layers, network {}",
            tape.pre.len(),
            net.layers.len()
        )));
    }
    for (l, (z, layer)) in tape.pre.iter().zip(&net.layers).enumerate() {
        if z.cols() != layer.output_dim() {
            return Err(Error::TapeMismatch(format!("layer {l} width differs")));
        }
    }
    let last = tape.outputs.last().expect("non-empty tape");
    if upstream.shape() != last.shape() {
        return Err(dim_mismatch(format!(
            "upstream {:?} against outputs {:?}",
            upstream.shape(),
            last.shape()
        )));
    }
    let mut grads = MlpGrads::zeros_like(net);
    let mut delta = upstream.clone();
    for l in (0..net.layers.len()).rev() {
        let layer = &net.layers[l];
        let z = &tape.pre[l];
        let a = &tape.outputs[l];
        for ((d, &zv), &av) in delta.data_mut().iter_mut().zip(z.data()).zip(a.data()) {
            *d *= layer.act.d1(zv, av);
        }
        grads.layers[l].weights = tape.inputs[l].t_matmul(&delta)?;
        let gb = &mut grads.layers[l].bias;
        for i in 0..delta.rows() {
            for (g, d) in gb.iter_mut().zip(delta.row(i)) {
                *g += d;
            }
        }
        delta = delta.matmul_t(&layer.weights)?;
    }
    Ok((grads, delta))
}

/// Mean cross-entropy of softmax(logits) and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Mat, labels: &[usize]) -> Result<(f64, Mat)> {
    let (n, k) = logits.shape();
    if labels.len() != n {
        return Err(dim_mismatch(format!("{n} logit rows, {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: k,
        });
    }
    let mut grad = Mat::zeros(n, k);
    let mut losses = Vec::with_capacity(n);
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        losses.push(lse - row[labels[i]]);
        let g = grad.row_mut(i);
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = (row[j] - lse).exp() / n as f64;
        }
        g[labels[i]] -= 1.0 / n as f64;
    }
    Ok((crate::numeric::tree_sum(&losses) / n as f64, grad))
}

/// SGD with momentum and weight decay.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<MlpGrads>,
}

impl SgdState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> SgdState {
        SgdState {
            lr,
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn velocity(&self) -> Option<&MlpGrads> {
        self.velocity.as_ref()
    }
}

/// `v ← momentum·v − lr·(g + decay·w); w ← w + v`.
pub fn sgd_step(state: &mut SgdState, net: &mut Mlp, grads: &MlpGrads) -> Result<()> {
    let template = MlpGrads::zeros_like(net);
    template.check_shape(grads)?;
    let velocity = state.velocity.get_or_insert(template);
    velocity.check_shape(grads)?;
    let (lr, mom, wd) = (state.lr, state.momentum, state.weight_decay);
    for ((layer, g), v) in net
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut velocity.layers)
    {
        for ((w, gw), vw) in layer
            .weights
            .data_mut()
            .iter_mut()
            .zip(g.weights.data())
            .zip(v.weights.data_mut())
        {
            *vw = mom * *vw - lr * (gw + wd * *w);
            *w += *vw;
        }
        for ((b, gb), vb) in layer.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
            *vb = mom * *vb - lr * (gb + wd * *b);
            *b += *vb;
        }
    }
    Ok(())
}

/// Rescales all gradients jointly when their global L2 norm exceeds `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [&mut MlpGrads], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

/// Result of [`stein_critic_pass`].
#[derive(Debug)]
pub struct CriticPass {
    /// `f(x)`, one row per sample.
    pub outputs: Mat,
    /// `∇ₓ·f(x)` per sample.
    pub divergence: Vec<f64>,
    /// Gradient of `mean_i [f(x_i)ᵀw_i + ∇·f(x_i)]` w.r.t. the parameters.
    pub param_grads: MlpGrads,
    /// Gradient of the same mean w.r.t. each input row, holding `w` fixed.
    pub input_grads: Mat,
}

/// Evaluates `mean_i [f(x_i)ᵀ w_i + ∇ₓ·f(x_i)]` and its exact gradients.
///
/// The divergence is carried by forward-mode tangents (one per input axis)
/// and the whole computation is then reversed, so the gradients include the
/// second-order terms of the divergence. Requires `output_dim == input_dim`.
pub fn stein_critic_pass(net: &Mlp, x: &Mat, w: &Mat) -> Result<CriticPass> {
    let d = net.input_dim();
    if net.output_dim() != d {
        return Err(dim_mismatch(format!(
            "critic maps {d} inputs to {} outputs",
            net.output_dim()
        )));
    }
    if x.cols() != d || w.shape() != x.shape() {
        return Err(dim_mismatch("critic batch shapes"));
    }
    let n = x.rows();
    let inv_n = 1.0 / n.max(1) as f64;
    let depth = net.layers.len();
    let mut grads = MlpGrads::zeros_like(net);
    let mut outputs = Mat::zeros(n, d);
    let mut input_grads = Mat::zeros(n, d);
    let mut divergence = Vec::with_capacity(n);

    for r in 0..n {
        // forward: primal activations, pre-activations and tangents T_l (d × width)
        let mut hs: Vec<Vec<f64>> = Vec::with_capacity(depth + 1);
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(depth);
        let mut ts: Vec<Mat> = Vec::with_capacity(depth + 1);
        let mut us: Vec<Mat> = Vec::with_capacity(depth);
        hs.push(x.row(r).to_vec());
        ts.push(Mat::identity(d));
        for (l, layer) in net.layers.iter().enumerate() {
            let h = &hs[l];
            let out = layer.output_dim();
            let mut z = vec![0.0; out];
            for (i, &hi) in h.iter().enumerate() {
                if hi == 0.0 {
                    continue;
                }
                for (zj, wij) in z.iter_mut().zip(layer.weights.row(i)) {
                    *zj += hi * wij;
                }
            }
            for (zj, b) in z.iter_mut().zip(&layer.bias) {
                *zj += b;
            }
            let a: Vec<f64> = z.iter().map(|&v| layer.act.apply(v)).collect();
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation(l));
            }
            let u = ts[l].matmul(&layer.weights)?;
            let mut t = u.clone();
            for k in 0..d {
                for j in 0..out {
                    t[(k, j)] *= layer.act.d1(z[j], a[j]);
                }
            }
            zs.push(z);
            hs.push(a);
            us.push(u);
            ts.push(t);
        }
        let f = &hs[depth];
        outputs.row_mut(r).copy_from_slice(f);
        let t_out = &ts[depth];
        divergence.push((0..d).map(|k| t_out[(k, k)]).sum());

        // reverse
        let mut h_bar: Vec<f64> = w.row(r).iter().map(|v| v * inv_n).collect();
        let mut t_bar = Mat::identity(d);
        t_bar.scale(inv_n);
        for l in (0..depth).rev() {
            let layer = &net.layers[l];
            let (inp, out) = (layer.input_dim(), layer.output_dim());
            let z = &zs[l];
            let a = &hs[l + 1];
            let u = &us[l];
            let mut z_bar = vec![0.0; out];
            let mut u_bar = Mat::zeros(d, out);
            for j in 0..out {
                let a1 = layer.act.d1(z[j], a[j]);
                let a2 = layer.act.d2(a[j]);
                let mut acc = 0.0;
                for k in 0..d {
                    acc += t_bar[(k, j)] * u[(k, j)];
                    u_bar[(k, j)] = t_bar[(k, j)] * a1;
                }
                z_bar[j] = h_bar[j] * a1 + a2 * acc;
            }
            let gw = &mut grads.layers[l].weights;
            let h = &hs[l];
            let t = &ts[l];
            for i in 0..inp {
                let gi = gw.row_mut(i);
                for j in 0..out {
                    let mut s = h[i] * z_bar[j];
                    for k in 0..d {
                        s += t[(k, i)] * u_bar[(k, j)];
                    }
                    gi[j] += s;
                }
            }
            for (gb, zb) in grads.layers[l].bias.iter_mut().zip(&z_bar) {
                *gb += zb;
            }
            let mut next_h_bar = vec![0.0; inp];
            let mut next_t_bar = Mat::zeros(d, inp);
            for i in 0..inp {
                let wi = layer.weights.row(i);
                next_h_bar[i] = z_bar.iter().zip(wi).map(|(a, b)| a * b).sum();
                for k in 0..d {
                    next_t_bar[(k, i)] = u_bar.row(k).iter().zip(wi).map(|(a, b)| a * b).sum();
                }
            }
            h_bar = next_h_bar;
            t_bar = next_t_bar;
        }
        input_grads.row_mut(r).copy_from_slice(&h_bar);
    }
    Ok(CriticPass {
        outputs,
        divergence,
        param_grads: grads,
        input_grads,
    })
}

/// Exact divergence `∇ₓ·f(x)` per row via one reverse pass per output coordinate.
pub fn mlp_divergence(net: &Mlp, x: &Mat) -> Result<Vec<f64>> {
    let d = net.input_dim();
    if net.output_dim() != d {
        return Err(dim_mismatch("divergence needs a square network"));
    }
    let mut div = vec![0.0; x.rows()];
    for k in 0..d {
        let (out, tape) = mlp_forward(net, x)?;
        let mut up = Mat::zeros(out.rows(), d);
        for i in 0..out.rows() {
            up[(i, k)] = 1.0;
        }
        let (_, gx) = mlp_backward(net, tape, &up)?;
        for (i, v) in div.iter_mut().enumerate() {
            *v += gx[(i, k)];
        }
    }
    Ok(div)
}
