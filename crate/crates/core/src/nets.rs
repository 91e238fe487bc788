//! Double-precision multilayer perceptrons with leaky-ReLU hidden layers,
//! Fourier feature maps for coordinate inputs, exact reverse-mode gradients,
//! and the Adam optimizer.
//!
//! Networks operate on row batches: an input matrix has one point per row.
//! Weights are stored `(fan_in, fan_out)` so a layer is `X · W + b`.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::Grid;

/// Negative-side slope of the leaky ReLU.
pub const DEFAULT_SLOPE: f64 = 0.03;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient entry at flat index {0}")]
    NonFiniteGradient(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed parameter stream: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fourier feature expansion of points in `[0, 1]^d`.
///
/// * 1D: `[x, cos(2πkx) for k = 0..=m, sin(2πkx) for k = 1..=m]`, width `2m + 2`.
/// * 2D: `[x, y]` followed by the pair `cos(2π(ix + jy)), sin(2π(ix + jy))`
///   for every `(i, j)` in `1..=m` squared, `i` outer; width `2 + 2m²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureMap {
    dim: usize,
    modes: usize,
}

impl FeatureMap {
    pub fn new(dim: usize, modes: usize) -> Result<Self, NetError> {
        if dim != 1 && dim != 2 {
            return Err(NetError::Config(format!("feature map dimension {dim}")));
        }
        Ok(Self { dim, modes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn width(&self) -> usize {
        match self.dim {
            1 => 2 * self.modes + 2,
            _ => 2 + 2 * self.modes * self.modes,
        }
    }

    pub fn eval_into(&self, x: [f64; 2], out: &mut [f64]) {
        let m = self.modes;
        match self.dim {
            1 => {
                out[0] = x[0];
                for k in 0..=m {
                    out[1 + k] = (2.0 * PI * k as f64 * x[0]).cos();
                }
                for k in 1..=m {
                    out[1 + m + k] = (2.0 * PI * k as f64 * x[0]).sin();
                }
            }
            _ => {
                out[0] = x[0];
                out[1] = x[1];
                let mut c = 2;
                for i in 1..=m {
                    for j in 1..=m {
                        let arg = 2.0 * PI * (i as f64 * x[0] + j as f64 * x[1]);
                        out[c] = arg.cos();
                        out[c + 1] = arg.sin();
                        c += 2;
                    }
                }
            }
        }
    }

    pub fn eval(&self, x: [f64; 2]) -> Vec<f64> {
        let mut out = vec![0.0; self.width()];
        self.eval_into(x, &mut out);
        out
    }

    /// Feature matrix with one row per grid node.
    pub fn eval_grid(&self, grid: &Grid) -> Result<Array2<f64>, NetError> {
        if grid.dim() != self.dim {
            return Err(NetError::Shape(format!(
                "grid dimension {} vs feature map dimension {}",
                grid.dim(),
                self.dim
            )));
        }
        let mut f = Array2::zeros((grid.len(), self.width()));
        for (i, mut row) in f.rows_mut().into_iter().enumerate() {
            self.eval_into(grid.node(i), row.as_slice_mut().unwrap());
        }
        Ok(f)
    }
}

/// Flat view over a parameter-shaped value. Flattening order is layer by
/// layer: weights row-major, then bias.
pub trait Params {
    fn param_count(&self) -> usize;
    fn flatten_into(&self, out: &mut Vec<f64>);
    /// Overwrites parameters from the front of `src`; returns entries consumed.
    fn assign_flat(&mut self, src: &[f64]) -> usize;

    fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        self.flatten_into(&mut v);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    fn fan_out(&self) -> usize {
        self.weight.ncols()
    }
}

fn layers_count(layers: &[Layer]) -> usize {
    layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
}

fn layers_flatten(layers: &[Layer], out: &mut Vec<f64>) {
    for l in layers {
        out.extend(l.weight.iter());
        out.extend(l.bias.iter());
    }
}

fn layers_assign(layers: &mut [Layer], src: &[f64]) -> usize {
    let mut at = 0;
    for l in layers {
        for w in l.weight.iter_mut() {
            *w = src[at];
            at += 1;
        }
        for b in l.bias.iter_mut() {
            *b = src[at];
            at += 1;
        }
    }
    at
}

/// Gradient of a scalar with respect to every parameter of an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub layers: Vec<Layer>,
}

impl MlpGrad {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight *= s;
            l.bias *= s;
        }
    }
}

impl Params for MlpGrad {
    fn param_count(&self) -> usize {
        layers_count(&self.layers)
    }
    fn flatten_into(&self, out: &mut Vec<f64>) {
        layers_flatten(&self.layers, out)
    }
    fn assign_flat(&mut self, src: &[f64]) -> usize {
        layers_assign(&mut self.layers, src)
    }
}

/// Multilayer perceptron: affine layers with leaky ReLU between them and a
/// linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    slope: f64,
}

/// Activations recorded by [`Mlp::forward_tape`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `inputs[l]` is the input to layer `l`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Tape {
    pub fn input(&self) -> &Array2<f64> {
        &self.inputs[0]
    }

    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>, slope: f64) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::Config("network without layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(NetError::Shape(format!("layer {i}: bias length")));
            }
            if i > 0 && layers[i - 1].fan_out() != l.fan_in() {
                return Err(NetError::Shape(format!(
                    "layer {i} expects {} inputs, previous layer yields {}",
                    l.fan_in(),
                    layers[i - 1].fan_out()
                )));
            }
        }
        if !slope.is_finite() {
            return Err(NetError::Config("non-finite activation slope".into()));
        }
        Ok(Self { layers, slope })
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero biases.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self, NetError> {
        Self::init_with_slope(widths, seed, DEFAULT_SLOPE)
    }

    pub fn init_with_slope(widths: &[usize], seed: u64, slope: f64) -> Result<Self, NetError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(NetError::Config(format!("invalid layer widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let a = 1.0 / (w[0] as f64).sqrt();
                let mut layer = Layer::zeros(w[0], w[1]);
                layer
                    .weight
                    .iter_mut()
                    .for_each(|x| *x = rng.random_range(-a..a));
                layer
            })
            .collect();
        Self::from_layers(layers, slope)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].fan_in()];
        w.extend(self.layers.iter().map(Layer::fan_out));
        w
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    fn activate(&self, z: &Array2<f64>) -> Array2<f64> {
        let s = self.slope;
        z.mapv(|v| if v >= 0.0 { v } else { s * v })
    }

    fn check_input(&self, cols: usize) -> Result<(), NetError> {
        if cols != self.input_width() {
            return Err(NetError::Shape(format!(
                "input width {cols}, network expects {}",
                self.input_width()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        let xm = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.forward_batch(xm)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NetError> {
        self.check_input(x.ncols())?;
        let last = self.layers.len() - 1;
        let mut h = x.dot(&self.layers[0].weight) + &self.layers[0].bias;
        for (i, l) in self.layers.iter().enumerate().skip(1) {
            let a = self.activate(&h);
            h = a.dot(&l.weight) + &l.bias;
            debug_assert!(i <= last);
        }
        Ok(h)
    }

    pub fn forward_tape(&self, x: Array2<f64>) -> Result<Tape, NetError> {
        self.check_input(x.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut h = x.dot(&self.layers[0].weight) + &self.layers[0].bias;
        inputs.push(x);
        for l in &self.layers[1..] {
            let a = self.activate(&h);
            let next = a.dot(&l.weight) + &l.bias;
            pre.push(h);
            inputs.push(a);
            h = next;
        }
        Ok(Tape {
            inputs,
            pre,
            output: h,
        })
    }

    /// Reverse pass for the cotangent `upstream` of the tape output. The
    /// input cotangent is only formed when `want_input` is set.
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: Array2<f64>,
        want_input: bool,
    ) -> Result<(MlpGrad, Option<Array2<f64>>), NetError> {
        if upstream.dim() != tape.output.dim() {
            return Err(NetError::Shape(format!(
                "cotangent {:?} vs output {:?}",
                upstream.dim(),
                tape.output.dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream;
        for l in (0..self.layers.len()).rev() {
            if l < self.layers.len() - 1 {
                let s = self.slope;
                ndarray::Zip::from(&mut g)
                    .and(&tape.pre[l])
                    .for_each(|gv, &z| {
                        if z < 0.0 {
                            *gv *= s
                        }
                    });
            }
            let weight = tape.inputs[l].t().dot(&g);
            let bias = g.sum_axis(Axis(0));
            grads.push(Layer { weight, bias });
            if l > 0 || want_input {
                g = g.dot(&self.layers[l].weight.t());
            }
        }
        grads.reverse();
        let input = want_input.then_some(g);
        Ok((MlpGrad { layers: grads }, input))
    }

    /// Parameter and input gradients of `upstream · mlp(x)` for a single input.
    pub fn gradient(&self, x: &[f64], upstream: &[f64]) -> Result<(MlpGrad, Vec<f64>), NetError> {
        let xm = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
        let tape = self.forward_tape(xm)?;
        let up = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec())
            .map_err(|e| NetError::Shape(e.to_string()))?;
        let (g, gi) = self.backward(&tape, up, true)?;
        Ok((g, gi.expect("input gradient").into_raw_vec_and_offset().0))
    }
}

impl Params for Mlp {
    fn param_count(&self) -> usize {
        layers_count(&self.layers)
    }
    fn flatten_into(&self, out: &mut Vec<f64>) {
        layers_flatten(&self.layers, out)
    }
    fn assign_flat(&mut self, src: &[f64]) -> usize {
        layers_assign(&mut self.layers, src)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        Self::with_hyper(param_count, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(param_count: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), NetError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NetError::Shape(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(NetError::Config(format!("learning rate {lr}")));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NetError::NonFiniteGradient(i));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }

    pub fn step<P: Params, G: Params>(&mut self, params: &mut P, grads: &G, lr: f64) -> Result<(), NetError> {
        let mut flat = params.flat();
        self.step_flat(&mut flat, &grads.flat(), lr)?;
        params.assign_flat(&flat);
        Ok(())
    }
}

/// A network together with the metadata written in its parameter header.
///
/// Layout: text lines
///
/// ```text
/// net <name>
/// widths <w0> <w1> ... <wL>
/// slope <f64>
/// features <d> <modes>        | features none
/// seed <u64>
/// params <count>
/// end
/// ```
///
/// followed by `count` little-endian `f64` values in [`Params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetRecord {
    pub name: String,
    pub net: Mlp,
    pub features: Option<FeatureMap>,
    pub seed: u64,
}

impl NetRecord {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), NetError> {
        writeln!(w, "net {}", self.name)?;
        let widths: Vec<String> = self.net.widths().iter().map(|x| x.to_string()).collect();
        writeln!(w, "widths {}", widths.join(" "))?;
        writeln!(w, "slope {:?}", self.net.slope)?;
        match self.features {
            Some(f) => writeln!(w, "features {} {}", f.dim, f.modes)?,
            None => writeln!(w, "features none")?,
        }
        writeln!(w, "seed {}", self.seed)?;
        writeln!(w, "params {}", self.net.param_count())?;
        writeln!(w, "end")?;
        let mut buf = Vec::with_capacity(8 * self.net.param_count());
        for v in self.net.flat() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self, NetError> {
        let mut fields = std::collections::HashMap::new();
        loop {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(NetError::Format("unexpected end of network header".into()));
            }
            let line = line.trim_end();
            if line == "end" {
                break;
            }
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| NetError::Format(format!("bad header line {line:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| NetError::Format(format!("missing `{k}` in network header")))
        };
        let bad = |k: &str| NetError::Format(format!("unparsable `{k}`"));
        let name = get("net")?.clone();
        let widths = get("widths")?
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad("widths"))?;
        let slope: f64 = get("slope")?.parse().map_err(|_| bad("slope"))?;
        let features = match get("features")?.as_str() {
            "none" => None,
            s => {
                let parts: Vec<usize> = s
                    .split_whitespace()
                    .map(|x| x.parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad("features"))?;
                if parts.len() != 2 {
                    return Err(bad("features"));
                }
                Some(FeatureMap::new(parts[0], parts[1])?)
            }
        };
        let seed: u64 = get("seed")?.parse().map_err(|_| bad("seed"))?;
        let count: usize = get("params")?.parse().map_err(|_| bad("params"))?;
        let mut net = Mlp::init_with_slope(&widths, 0, slope)?;
        if net.param_count() != count {
            return Err(NetError::Format(format!(
                "widths imply {} parameters, header declares {count}",
                net.param_count()
            )));
        }
        let mut bytes = vec![0u8; 8 * count];
        r.read_exact(&mut bytes)
            .map_err(|e| NetError::Format(format!("truncated parameter payload: {e}")))?;
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        net.assign_flat(&flat);
        Ok(Self {
            name,
            net,
            features,
            seed,
        })
    }
}
