//! Encode-approximate-reconstruct operator model with neural bases.
//!
//! The encoder maps a sampled input `u` to `z_j = I(Φᴱ_j, u)`, the
//! trapezoidal approximation of `∫ Φᴱ_j u`; the approximator is a plain MLP
//! `ℝᵖ → ℝ^q`; the reconstructor returns `Σ_j w_j Φᴿ_j` evaluated at whatever
//! nodes are requested. Neither basis network ever sees a grid size, only
//! node coordinates, so one set of parameters serves every discretization.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use thiserror::Error;

use crate::grid::{trapezoid_weights, FunctionSample, Grid, GridError};
use crate::nets::{FeatureMap, Mlp, MlpGrad, NetError, NetRecord, Params, Tape, DEFAULT_SLOPE};

const MAGIC: &str = "opbasis-model";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture of the three networks and their feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub encoder_modes: usize,
    pub reconstructor_modes: usize,
    pub encoder_hidden: Vec<usize>,
    pub approximator_hidden: Vec<usize>,
    pub reconstructor_hidden: Vec<usize>,
    pub p: usize,
    pub q: usize,
    pub slope: f64,
}

impl ModelConfig {
    pub fn poisson() -> Self {
        Self {
            dim: 2,
            encoder_modes: 12,
            reconstructor_modes: 12,
            encoder_hidden: vec![128; 3],
            approximator_hidden: vec![256; 2],
            reconstructor_hidden: vec![128; 3],
            p: 96,
            q: 96,
            slope: DEFAULT_SLOPE,
        }
    }

    pub fn burgers() -> Self {
        Self {
            dim: 1,
            encoder_modes: 12,
            reconstructor_modes: 12,
            encoder_hidden: vec![96; 3],
            approximator_hidden: vec![128; 4],
            reconstructor_hidden: vec![96; 3],
            p: 18,
            q: 18,
            slope: DEFAULT_SLOPE,
        }
    }

    pub fn navier_stokes() -> Self {
        Self {
            dim: 2,
            encoder_modes: 10,
            reconstructor_modes: 10,
            encoder_hidden: vec![128; 3],
            approximator_hidden: vec![256; 4],
            reconstructor_hidden: vec![128; 3],
            p: 96,
            q: 96,
            slope: DEFAULT_SLOPE,
        }
    }

    pub fn for_problem(tag: &str) -> Option<Self> {
        match tag {
            "poisson" => Some(Self::poisson()),
            "burgers" => Some(Self::burgers()),
            "navier_stokes" => Some(Self::navier_stokes()),
            _ => None,
        }
    }
}

fn chain(first: usize, hidden: &[usize], last: usize) -> Vec<usize> {
    let mut w = vec![first];
    w.extend_from_slice(hidden);
    w.push(last);
    w
}

/// Per-grid feature matrices. Features depend only on node coordinates, so
/// caching them cannot change any result.
#[derive(Debug, Default)]
pub struct FeatureCache {
    map: HashMap<(FeatureMap, Grid), Array2<f64>>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, fm: FeatureMap, grid: &Grid) -> Result<&Array2<f64>, NetError> {
        use std::collections::hash_map::Entry;
        match self.map.entry((fm, *grid)) {
            Entry::Occupied(e) => Ok(e.into_mut()),
            Entry::Vacant(e) => Ok(e.insert(fm.eval_grid(grid)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorModel {
    problem: String,
    seed: u64,
    encoder: Mlp,
    approximator: Mlp,
    reconstructor: Mlp,
    encoder_features: FeatureMap,
    reconstructor_features: FeatureMap,
}

/// Gradients for the three networks of an [`OperatorModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub encoder: MlpGrad,
    pub approximator: MlpGrad,
    pub reconstructor: MlpGrad,
}

impl ModelGrad {
    pub fn zeros_like(m: &OperatorModel) -> Self {
        Self {
            encoder: MlpGrad::zeros_like(&m.encoder),
            approximator: MlpGrad::zeros_like(&m.approximator),
            reconstructor: MlpGrad::zeros_like(&m.reconstructor),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.encoder.scale(s);
        self.approximator.scale(s);
        self.reconstructor.scale(s);
    }
}

macro_rules! impl_params_triplet {
    ($t:ty) => {
        impl Params for $t {
            fn param_count(&self) -> usize {
                self.encoder.param_count()
                    + self.approximator.param_count()
                    + self.reconstructor.param_count()
            }
            fn flatten_into(&self, out: &mut Vec<f64>) {
                self.encoder.flatten_into(out);
                self.approximator.flatten_into(out);
                self.reconstructor.flatten_into(out);
            }
            fn assign_flat(&mut self, src: &[f64]) -> usize {
                let mut at = self.encoder.assign_flat(src);
                at += self.approximator.assign_flat(&src[at..]);
                at + self.reconstructor.assign_flat(&src[at..])
            }
        }
    };
}

impl_params_triplet!(OperatorModel);
impl_params_triplet!(ModelGrad);

/// Intermediate state of a batched forward pass over samples sharing one
/// input grid, kept for the reverse pass.
pub struct BatchPass {
    encoder_tape: Tape,
    weighted_inputs: Array2<f64>,
    approximator_tape: Tape,
    reconstructor_tape: Tape,
    out_grid: Grid,
    predictions: Array2<f64>,
}

impl BatchPass {
    /// One row per sample, one column per output node.
    pub fn predictions(&self) -> &Array2<f64> {
        &self.predictions
    }

    pub fn out_grid(&self) -> &Grid {
        &self.out_grid
    }

    /// Encoder outputs, one row per sample.
    pub fn latents(&self) -> &Array2<f64> {
        self.approximator_tape.input()
    }

    pub fn coefficients(&self) -> &Array2<f64> {
        self.approximator_tape.output()
    }

    pub fn into_samples(self) -> Result<Vec<FunctionSample>, ModelError> {
        let grid = self.out_grid;
        self.predictions
            .rows()
            .into_iter()
            .map(|r| FunctionSample::new(grid, r.to_vec()).map_err(ModelError::from))
            .collect()
    }

    /// Gradient of `Σ upstream ⊙ predictions` with respect to all parameters.
    pub fn backward(&self, model: &OperatorModel, upstream: Array2<f64>) -> Result<ModelGrad, ModelError> {
        if upstream.dim() != self.predictions.dim() {
            return Err(ModelError::Dimension(format!(
                "cotangent {:?} vs predictions {:?}",
                upstream.dim(),
                self.predictions.dim()
            )));
        }
        let rec_basis = self.reconstructor_tape.output();
        let coeffs = self.approximator_tape.output();
        let d_coeffs = upstream.dot(rec_basis);
        let d_rec_basis = upstream.t().dot(coeffs);
        let (reconstructor, _) = model
            .reconstructor
            .backward(&self.reconstructor_tape, d_rec_basis, false)?;
        let (approximator, d_latent) = model
            .approximator
            .backward(&self.approximator_tape, d_coeffs, true)?;
        let d_enc_basis = self.weighted_inputs.t().dot(&d_latent.expect("input cotangent"));
        let (encoder, _) = model
            .encoder
            .backward(&self.encoder_tape, d_enc_basis, false)?;
        let g = ModelGrad {
            encoder,
            approximator,
            reconstructor,
        };
        if g.flat().iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("gradient"));
        }
        Ok(g)
    }
}

impl OperatorModel {
    pub fn new(cfg: &ModelConfig, problem: &str, seed: u64) -> Result<Self, ModelError> {
        if cfg.p == 0 || cfg.q == 0 {
            return Err(ModelError::Net(NetError::Config("latent sizes must be positive".into())));
        }
        let fe = FeatureMap::new(cfg.dim, cfg.encoder_modes)?;
        let fr = FeatureMap::new(cfg.dim, cfg.reconstructor_modes)?;
        let seeds = crate::seed::derive_many(seed, 3);
        let encoder = Mlp::init_with_slope(&chain(fe.width(), &cfg.encoder_hidden, cfg.p), seeds[0], cfg.slope)?;
        let approximator =
            Mlp::init_with_slope(&chain(cfg.p, &cfg.approximator_hidden, cfg.q), seeds[1], cfg.slope)?;
        let reconstructor =
            Mlp::init_with_slope(&chain(fr.width(), &cfg.reconstructor_hidden, cfg.q), seeds[2], cfg.slope)?;
        Self::from_parts(problem, seed, encoder, approximator, reconstructor, fe, fr)
    }

    pub fn from_parts(
        problem: &str,
        seed: u64,
        encoder: Mlp,
        approximator: Mlp,
        reconstructor: Mlp,
        encoder_features: FeatureMap,
        reconstructor_features: FeatureMap,
    ) -> Result<Self, ModelError> {
        let shape = |m: String| Err(ModelError::Net(NetError::Shape(m)));
        if encoder.input_width() != encoder_features.width() {
            return shape("encoder input width differs from its feature width".into());
        }
        if reconstructor.input_width() != reconstructor_features.width() {
            return shape("reconstructor input width differs from its feature width".into());
        }
        if encoder.output_width() != approximator.input_width() {
            return shape(format!(
                "encoder yields p={} but approximator expects {}",
                encoder.output_width(),
                approximator.input_width()
            ));
        }
        if approximator.output_width() != reconstructor.output_width() {
            return shape(format!(
                "approximator yields q={} but reconstructor has {} basis functions",
                approximator.output_width(),
                reconstructor.output_width()
            ));
        }
        if encoder_features.dim() != reconstructor_features.dim() {
            return Err(ModelError::Dimension("encoder and reconstructor dimensions differ".into()));
        }
        if problem.is_empty() || problem.contains(char::is_whitespace) {
            return Err(ModelError::Checkpoint(format!("invalid problem tag {problem:?}")));
        }
        Ok(Self {
            problem: problem.to_string(),
            seed,
            encoder,
            approximator,
            reconstructor,
            encoder_features,
            reconstructor_features,
        })
    }

    pub fn problem(&self) -> &str {
        &self.problem
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.encoder_features.dim()
    }

    pub fn p(&self) -> usize {
        self.encoder.output_width()
    }

    pub fn q(&self) -> usize {
        self.reconstructor.output_width()
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn approximator(&self) -> &Mlp {
        &self.approximator
    }

    pub fn reconstructor(&self) -> &Mlp {
        &self.reconstructor
    }

    pub fn encoder_mut(&mut self) -> &mut Mlp {
        &mut self.encoder
    }

    pub fn approximator_mut(&mut self) -> &mut Mlp {
        &mut self.approximator
    }

    pub fn reconstructor_mut(&mut self) -> &mut Mlp {
        &mut self.reconstructor
    }

    pub fn encoder_features(&self) -> FeatureMap {
        self.encoder_features
    }

    pub fn reconstructor_features(&self) -> FeatureMap {
        self.reconstructor_features
    }

    fn check_dim(&self, grid: &Grid) -> Result<(), ModelError> {
        if grid.dim() != self.dim() {
            return Err(ModelError::Dimension(format!(
                "grid is {}D, model is {}D",
                grid.dim(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `Φᴱ` evaluated at every node of `grid`, shape `(nodes, p)`.
    pub fn encoder_basis(&self, grid: &Grid) -> Result<Array2<f64>, ModelError> {
        self.check_dim(grid)?;
        let f = self.encoder_features.eval_grid(grid)?;
        Ok(self.encoder.forward_batch(f.view())?)
    }

    /// `Φᴿ` evaluated at every node of `grid`, shape `(nodes, q)`.
    pub fn reconstructor_basis(&self, grid: &Grid) -> Result<Array2<f64>, ModelError> {
        self.check_dim(grid)?;
        let f = self.reconstructor_features.eval_grid(grid)?;
        Ok(self.reconstructor.forward_batch(f.view())?)
    }

    pub fn encode(&self, s: &FunctionSample) -> Result<Vec<f64>, ModelError> {
        let basis = self.encoder_basis(s.grid())?;
        let w = trapezoid_weights(s.grid());
        let weighted: Vec<f64> = s.values().iter().zip(&w.weights).map(|(u, w)| u * w).collect();
        let z = ArrayView1::from(&weighted).dot(&basis);
        Ok(z.to_vec())
    }

    pub fn approximate(&self, z: &[f64]) -> Result<Vec<f64>, ModelError> {
        if z.len() != self.p() {
            return Err(ModelError::Dimension(format!("latent length {} vs p={}", z.len(), self.p())));
        }
        Ok(self.approximator.forward(z)?)
    }

    pub fn reconstruct(&self, w: &[f64], out: &Grid) -> Result<FunctionSample, ModelError> {
        if w.len() != self.q() {
            return Err(ModelError::Dimension(format!("coefficient length {} vs q={}", w.len(), self.q())));
        }
        let basis = self.reconstructor_basis(out)?;
        let v = basis.dot(&ArrayView1::from(w));
        Ok(FunctionSample::new(*out, v.to_vec())?)
    }

    pub fn forward(&self, s: &FunctionSample, out: &Grid) -> Result<FunctionSample, ModelError> {
        let z = self.encode(s)?;
        let w = self.approximate(&z)?;
        self.reconstruct(&w, out)
    }

    /// Gradient of `Σ_nodes upstream · forward(s, out)`.
    pub fn forward_gradient(
        &self,
        s: &FunctionSample,
        out: &Grid,
        upstream: &[f64],
    ) -> Result<ModelGrad, ModelError> {
        let pass = self.forward_pass(&[s], out, &mut FeatureCache::new())?;
        let up = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec())
            .map_err(|e| ModelError::Dimension(e.to_string()))?;
        pass.backward(self, up)
    }

    /// Batched forward over samples sharing one input grid. Each basis
    /// network is evaluated once per call on its grid.
    pub fn forward_pass(
        &self,
        inputs: &[&FunctionSample],
        out: &Grid,
        cache: &mut FeatureCache,
    ) -> Result<BatchPass, ModelError> {
        let first = inputs
            .first()
            .ok_or_else(|| ModelError::Dimension("empty batch".into()))?;
        let in_grid = *first.grid();
        if inputs.iter().any(|s| *s.grid() != in_grid) {
            return Err(ModelError::Dimension("batch mixes input grids".into()));
        }
        self.check_dim(&in_grid)?;
        self.check_dim(out)?;

        let fe = cache.get(self.encoder_features, &in_grid)?.clone();
        let encoder_tape = self.encoder.forward_tape(fe)?;
        let w = trapezoid_weights(&in_grid);
        let mut weighted_inputs = Array2::zeros((inputs.len(), in_grid.len()));
        for (mut row, s) in weighted_inputs.rows_mut().into_iter().zip(inputs) {
            for ((r, u), q) in row.iter_mut().zip(s.values()).zip(&w.weights) {
                *r = u * q;
            }
        }
        let latents = weighted_inputs.dot(encoder_tape.output());
        let approximator_tape = self.approximator.forward_tape(latents)?;

        let fr = cache.get(self.reconstructor_features, out)?.clone();
        let reconstructor_tape = self.reconstructor.forward_tape(fr)?;
        let predictions = approximator_tape.output().dot(&reconstructor_tape.output().t());
        if predictions.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("prediction"));
        }
        Ok(BatchPass {
            encoder_tape,
            weighted_inputs,
            approximator_tape,
            reconstructor_tape,
            out_grid: *out,
            predictions,
        })
    }

    /// Predictions on `out` for samples that share an input grid.
    pub fn predict_batch(
        &self,
        inputs: &[&FunctionSample],
        out: &Grid,
        cache: &mut FeatureCache,
    ) -> Result<Vec<FunctionSample>, ModelError> {
        self.forward_pass(inputs, out, cache)?.into_samples()
    }

    /// Checkpoint layout: a text header
    ///
    /// ```text
    /// opbasis-model 1
    /// problem <tag>
    /// p <p>
    /// q <q>
    /// seed <u64>
    /// end
    /// ```
    ///
    /// followed by the encoder, approximator and reconstructor parameter
    /// blocks in [`NetRecord`] format. No grid size is recorded anywhere.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), ModelError> {
        writeln!(w, "{MAGIC} {VERSION}")?;
        writeln!(w, "problem {}", self.problem)?;
        writeln!(w, "p {}", self.p())?;
        writeln!(w, "q {}", self.q())?;
        writeln!(w, "seed {}", self.seed)?;
        writeln!(w, "end")?;
        let seeds = crate::seed::derive_many(self.seed, 3);
        for (i, (name, net, feats)) in [
            ("encoder", &self.encoder, Some(self.encoder_features)),
            ("approximator", &self.approximator, None),
            ("reconstructor", &self.reconstructor, Some(self.reconstructor_features)),
        ]
        .into_iter()
        .enumerate()
        {
            NetRecord {
                name: name.into(),
                net: net.clone(),
                features: feats,
                seed: seeds[i],
            }
            .write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        let mut line = String::new();
        r.read_line(&mut line)?;
        let mut it = line.split_whitespace();
        if it.next() != Some(MAGIC) {
            return Err(bad("not a model checkpoint"));
        }
        let version: u32 = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("missing version"))?;
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut fields = HashMap::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("truncated header"));
            }
            let l = line.trim_end();
            if l == "end" {
                break;
            }
            let (k, v) = l.split_once(' ').ok_or_else(|| bad("malformed header line"))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let problem = fields.get("problem").ok_or_else(|| bad("missing problem"))?.clone();
        let seed: u64 = fields
            .get("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing seed"))?;
        let enc = NetRecord::read_from(r)?;
        let app = NetRecord::read_from(r)?;
        let rec = NetRecord::read_from(r)?;
        if enc.name != "encoder" || app.name != "approximator" || rec.name != "reconstructor" {
            return Err(bad("unexpected network order"));
        }
        let fe = enc.features.ok_or_else(|| bad("encoder without feature map"))?;
        let fr = rec.features.ok_or_else(|| bad("reconstructor without feature map"))?;
        let m = Self::from_parts(&problem, seed, enc.net, app.net, rec.net, fe, fr)?;
        let declared = |k: &str| fields.get(k).and_then(|v| v.parse::<usize>().ok());
        if declared("p") != Some(m.p()) || declared("q") != Some(m.q()) {
            return Err(bad("declared p/q disagree with network shapes"));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Layer;
    use ndarray::Array1;
    use proptest::prelude::*;

    fn small_cfg(dim: usize) -> ModelConfig {
        ModelConfig {
            dim,
            encoder_modes: 2,
            reconstructor_modes: 2,
            encoder_hidden: vec![6, 5],
            approximator_hidden: vec![7],
            reconstructor_hidden: vec![6, 5],
            p: 3,
            q: 4,
            slope: DEFAULT_SLOPE,
        }
    }

    fn constant_net(fan_in: usize, value: &[f64]) -> Mlp {
        let mut l = Layer::zeros(fan_in, value.len());
        l.bias = Array1::from(value.to_vec());
        Mlp::from_layers(vec![l], DEFAULT_SLOPE).unwrap()
    }

    fn linear_net(fan_in: usize, fan_out: usize, seed: u64) -> Mlp {
        Mlp::init(&[fan_in, fan_out], seed).unwrap()
    }

    fn grid(d: usize, r: usize) -> Grid {
        Grid::new(d, r).unwrap()
    }

    /// Model whose encoder basis is `Φᴱ_j ≡ 1`.
    fn unit_encoder_model(dim: usize) -> OperatorModel {
        let m = OperatorModel::new(&small_cfg(dim), "test", 1).unwrap();
        let fe = m.encoder_features();
        OperatorModel::from_parts(
            "test",
            1,
            constant_net(fe.width(), &[1.0; 3]),
            m.approximator().clone(),
            m.reconstructor().clone(),
            fe,
            m.reconstructor_features(),
        )
        .unwrap()
    }

    #[test]
    fn constant_basis_integrates_exactly() {
        let m = unit_encoder_model(1);
        for r in [2, 3, 9, 50, 129] {
            let g = grid(1, r);
            let one = FunctionSample::from_fn(g, |_| 1.0).unwrap();
            let x = FunctionSample::from_fn(g, |x| x[0]).unwrap();
            for z in m.encode(&one).unwrap() {
                assert!((z - 1.0).abs() <= 1e-15);
            }
            for z in m.encode(&x).unwrap() {
                assert!((z - 0.5).abs() <= 1e-15);
            }
        }
        let m2 = unit_encoder_model(2);
        let g = grid(2, 17);
        let s = FunctionSample::from_fn(g, |x| 3.0 * x[0] - x[1] + 2.0).unwrap();
        for z in m2.encode(&s).unwrap() {
            assert!((z - 3.0).abs() <= 1e-14);
        }
    }

    /// Model with single-layer (smooth) encoder basis functions.
    fn smooth_encoder_model() -> OperatorModel {
        let m = OperatorModel::new(&small_cfg(1), "test", 4).unwrap();
        let fe = FeatureMap::new(1, 3).unwrap();
        OperatorModel::from_parts(
            "test",
            4,
            linear_net(fe.width(), 3, 77),
            m.approximator().clone(),
            m.reconstructor().clone(),
            fe,
            m.reconstructor_features(),
        )
        .unwrap()
    }

    fn encode_sin(m: &OperatorModel, r: usize) -> Vec<f64> {
        let s = FunctionSample::from_fn(grid(1, r), |x| (2.0 * std::f64::consts::PI * x[0]).sin()).unwrap();
        m.encode(&s).unwrap()
    }

    #[test]
    fn encoder_converges_to_the_integral() {
        let m = smooth_encoder_model();
        let reference = encode_sin(&m, 4097);
        let e33 = encode_sin(&m, 33);
        let e129 = encode_sin(&m, 129);
        for j in 0..3 {
            let a = (e33[j] - reference[j]).abs();
            let b = (e129[j] - reference[j]).abs();
            // h shrinks 4×, so the O(h²) error shrinks about 16×
            assert!(b < a / 12.0 && b > a / 20.0, "component {j}: {a} -> {b}");
        }
    }

    #[test]
    fn encoder_refinement_is_second_order() {
        let m = smooth_encoder_model();
        let diffs: Vec<f64> = [9, 17, 33]
            .iter()
            .map(|&r| {
                let a = encode_sin(&m, 2 * r - 1);
                let b = encode_sin(&m, 4 * r - 3);
                a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
            })
            .collect();
        for w in diffs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.0..5.0).contains(&ratio), "ratio {ratio} from {diffs:?}");
        }
    }

    #[test]
    fn approximator_examples() {
        let base = OperatorModel::new(&small_cfg(1), "test", 2).unwrap();
        let b = [0.5, -1.0, 2.0, 0.25];
        let m = OperatorModel::from_parts(
            "test",
            2,
            base.encoder().clone(),
            constant_net(3, &b),
            base.reconstructor().clone(),
            base.encoder_features(),
            base.reconstructor_features(),
        )
        .unwrap();
        assert_eq!(m.approximate(&[1.0, 2.0, 3.0]).unwrap(), b.to_vec());
        assert!(m.approximate(&[1.0]).is_err());

        let mut id = Layer::zeros(3, 3);
        id.weight = Array2::eye(3);
        let id = Mlp::from_layers(vec![id], DEFAULT_SLOPE).unwrap();
        let rec = linear_net(base.reconstructor_features().width(), 3, 5);
        let m = OperatorModel::from_parts(
            "test",
            2,
            base.encoder().clone(),
            id,
            rec,
            base.encoder_features(),
            base.reconstructor_features(),
        )
        .unwrap();
        let z = [0.3, -0.7, 1.1];
        assert_eq!(m.approximate(&z).unwrap(), z.to_vec());
    }

    /// Straight-line re-evaluation of an MLP, independent of the batched code.
    fn naive_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = net.layers().len();
        for (i, l) in net.layers().iter().enumerate() {
            let mut next = l.bias.to_vec();
            for (a, hv) in h.iter().enumerate() {
                for (b, o) in next.iter_mut().enumerate() {
                    *o += hv * l.weight[[a, b]];
                }
            }
            if i + 1 < n {
                for v in next.iter_mut() {
                    if *v < 0.0 {
                        *v *= net.slope();
                    }
                }
            }
            h = next;
        }
        h
    }

    #[test]
    fn approximator_matches_naive_recomputation() {
        let m = OperatorModel::new(&small_cfg(2), "test", 9).unwrap();
        let z = [0.2, -1.3, 0.8];
        let got = m.approximate(&z).unwrap();
        let want = naive_forward(m.approximator(), &z);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-13);
        }
    }

    #[test]
    fn reconstruct_examples() {
        let m = OperatorModel::new(&small_cfg(2), "test", 3).unwrap();
        let g = grid(2, 9);
        let basis = m.reconstructor_basis(&g).unwrap();
        for j in 0..m.q() {
            let mut w = vec![0.0; m.q()];
            w[j] = 1.0;
            let s = m.reconstruct(&w, &g).unwrap();
            assert_eq!(s.values(), basis.column(j).to_vec().as_slice());
        }
        let zero = m.reconstruct(&vec![0.0; m.q()], &g).unwrap();
        assert!(zero.values().iter().all(|v| *v == 0.0));

        let w1 = [0.3, -1.0, 2.0, 0.5];
        let w2 = [1.5, 0.25, -0.75, 1.0];
        let comb: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + 2.0 * b).collect();
        let lhs = m.reconstruct(&comb, &g).unwrap();
        let r1 = m.reconstruct(&w1, &g).unwrap();
        let r2 = m.reconstruct(&w2, &g).unwrap();
        for k in 0..g.len() {
            let rhs = r1.values()[k] + 2.0 * r2.values()[k];
            assert!((lhs.values()[k] - rhs).abs() <= 1e-12);
        }
        assert!(m.reconstruct(&[1.0], &g).is_err());
        assert!(m.reconstruct(&w1, &grid(1, 9)).is_err());
    }

    #[test]
    fn trivial_chain_gives_constant_output() {
        let base = OperatorModel::new(&small_cfg(1), "test", 6).unwrap();
        let b = [1.0, 2.0, -1.0, 0.5];
        let c = [0.5, 0.25, 2.0, -4.0];
        let m = OperatorModel::from_parts(
            "test",
            6,
            base.encoder().clone(),
            constant_net(3, &b),
            constant_net(base.reconstructor_features().width(), &c),
            base.encoder_features(),
            base.reconstructor_features(),
        )
        .unwrap();
        let s = FunctionSample::from_fn(grid(1, 65), |x| x[0].sin()).unwrap();
        let out = m.forward(&s, &grid(1, 129)).unwrap();
        let expect: f64 = b.iter().zip(&c).map(|(x, y)| x * y).sum();
        assert_eq!(out.grid().points_per_axis(), 129);
        assert!(out.values().iter().all(|v| *v == expect));
    }

    #[test]
    fn dimension_errors() {
        let m = OperatorModel::new(&small_cfg(1), "test", 6).unwrap();
        let s2 = FunctionSample::zeros(grid(2, 5));
        assert!(matches!(m.encode(&s2), Err(ModelError::Dimension(_))));
        let s1 = FunctionSample::zeros(grid(1, 5));
        assert!(m.forward(&s1, &grid(2, 5)).is_err());
        let a = FunctionSample::zeros(grid(1, 5));
        let b = FunctionSample::zeros(grid(1, 9));
        assert!(m.forward_pass(&[&a, &b], &grid(1, 5), &mut FeatureCache::new()).is_err());
        assert!(m.forward_pass(&[], &grid(1, 5), &mut FeatureCache::new()).is_err());
    }

    fn random_sample(g: Grid, seed: u64) -> FunctionSample {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        FunctionSample::new(g, (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn encoder_is_linear_in_the_sample() {
        let m = OperatorModel::new(&small_cfg(2), "test", 8).unwrap();
        let g = grid(2, 11);
        let (s1, s2) = (random_sample(g, 1), random_sample(g, 2));
        let (a, b) = (1.7, -0.4);
        let comb = FunctionSample::new(
            g,
            s1.values().iter().zip(s2.values()).map(|(x, y)| a * x + b * y).collect(),
        )
        .unwrap();
        let (z1, z2, z) = (m.encode(&s1).unwrap(), m.encode(&s2).unwrap(), m.encode(&comb).unwrap());
        for j in 0..m.p() {
            assert!((z[j] - (a * z1[j] + b * z2[j])).abs() <= 1e-12);
        }
    }

    #[test]
    fn batch_matches_single_forward() {
        let m = OperatorModel::new(&small_cfg(1), "test", 10).unwrap();
        let g = grid(1, 33);
        let samples: Vec<FunctionSample> = (0..4).map(|i| random_sample(g, i)).collect();
        let refs: Vec<&FunctionSample> = samples.iter().collect();
        let out = grid(1, 17);
        let batch = m.predict_batch(&refs, &out, &mut FeatureCache::new()).unwrap();
        for (s, p) in samples.iter().zip(&batch) {
            let single = m.forward(s, &out).unwrap();
            for (a, b) in single.values().iter().zip(p.values()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn reconstructor_is_pointwise() {
        let m = OperatorModel::new(&small_cfg(2), "test", 12).unwrap();
        let w = [0.4, -0.2, 1.0, 0.7];
        let coarse = m.reconstruct(&w, &grid(2, 5)).unwrap();
        let fine = m.reconstruct(&w, &grid(2, 17)).unwrap();
        let restricted = crate::grid::restrict(&fine, &grid(2, 5)).unwrap();
        for (a, b) in coarse.values().iter().zip(restricted.values()) {
            assert!((a - b).abs() <= 1e-13);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let m = OperatorModel::new(&small_cfg(1), "test", 13).unwrap();
        let s = random_sample(grid(1, 9), 3);
        let g = m.forward_gradient(&s, &grid(1, 5), &[0.0; 5]).unwrap();
        assert!(g.flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn reconstructor_output_bias_gradient() {
        let m = OperatorModel::new(&small_cfg(1), "test", 14).unwrap();
        let s = random_sample(grid(1, 9), 4);
        let out = grid(1, 7);
        let up = [0.5, -1.0, 0.25, 2.0, 0.0, 1.0, -0.5];
        let g = m.forward_gradient(&s, &out, &up).unwrap();
        let w = m.approximate(&m.encode(&s).unwrap()).unwrap();
        let total: f64 = up.iter().sum();
        let last = g.reconstructor.layers.last().unwrap();
        for j in 0..m.q() {
            assert!((last.bias[j] - w[j] * total).abs() <= 1e-12 * (1.0 + (w[j] * total).abs()));
        }
    }

    fn fd_check(dim: usize, seed: u64) {
        let m = OperatorModel::new(&small_cfg(dim), "test", seed).unwrap();
        let s = random_sample(grid(dim, 6), seed + 100);
        let out = grid(dim, 4);
        let up: Vec<f64> = random_sample(out, seed + 200).into_values();
        let loss = |m: &OperatorModel| -> f64 {
            m.forward(&s, &out)
                .unwrap()
                .values()
                .iter()
                .zip(&up)
                .map(|(a, b)| a * b)
                .sum()
        };
        let g = m.forward_gradient(&s, &out, &up).unwrap().flat();
        let theta = m.flat();
        let h = 1e-6;
        let mut fd = vec![0.0; theta.len()];
        let mut probe = m.clone();
        for i in 0..theta.len() {
            let mut t = theta.clone();
            t[i] = theta[i] + h;
            probe.assign_flat(&t);
            let lp = loss(&probe);
            t[i] = theta[i] - h;
            probe.assign_flat(&t);
            let lm = loss(&probe);
            fd[i] = (lp - lm) / (2.0 * h);
        }
        let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den <= 1e-5, "dim {dim} seed {seed}: relative error {}", num / den);
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        for seed in 0..4 {
            fd_check(1, seed);
            fd_check(2, seed);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = OperatorModel::new(&small_cfg(2), "poisson", 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        assert_eq!(OperatorModel::load(&path).unwrap(), m);
        let bytes = std::fs::read(&path).unwrap();
        assert!(matches!(
            OperatorModel::read_from(&mut &bytes[..bytes.len() - 3]),
            Err(ModelError::Net(NetError::Format(_)))
        ));
        assert!(OperatorModel::read_from(&mut &b"opbasis-model 2\n"[..]).is_err());
        assert!(OperatorModel::read_from(&mut &b""[..]).is_err());
    }

    #[test]
    fn presets_chain() {
        for tag in ["poisson", "burgers", "navier_stokes"] {
            let cfg = ModelConfig::for_problem(tag).unwrap();
            let m = OperatorModel::new(&cfg, tag, 0).unwrap();
            assert_eq!((m.p(), m.q()), (cfg.p, cfg.q));
        }
        assert!(ModelConfig::for_problem("heat").is_none());
    }

    fn header_keys(bytes: &[u8]) -> Vec<String> {
        // text lines up to each `end`; payload bytes are skipped by count
        let mut keys = Vec::new();
        let mut r = bytes;
        let mut line = String::new();
        let mut pending_params = 0usize;
        loop {
            line.clear();
            if r.read_line(&mut line).unwrap() == 0 {
                break;
            }
            let l = line.trim_end();
            let key = l.split(' ').next().unwrap().to_string();
            if key == "params" {
                pending_params = l[7..].parse().unwrap();
            }
            if key == "end" {
                r = &r[8 * pending_params..];
                pending_params = 0;
                continue;
            }
            keys.push(key);
        }
        keys
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn checkpoint_has_no_grid_size(dim in 1usize..=2, seed in any::<u64>(), r in 2usize..40) {
            let m = OperatorModel::new(&small_cfg(dim), "test", seed).unwrap();
            let mut before = Vec::new();
            m.write_to(&mut before).unwrap();
            // running the model on some grid leaves the checkpoint untouched
            let s = random_sample(grid(dim, r), seed);
            m.forward(&s, &grid(dim, r + 1)).unwrap();
            let mut after = Vec::new();
            m.write_to(&mut after).unwrap();
            prop_assert_eq!(&before, &after);
            let allowed = ["opbasis-model", "problem", "p", "q", "seed", "net", "widths", "slope", "features", "params"];
            for k in header_keys(&before) {
                prop_assert!(allowed.contains(&k.as_str()), "unexpected key {}", k);
            }
        }
    }
}
