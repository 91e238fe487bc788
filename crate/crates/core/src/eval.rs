//! Test metrics, per-resolution reports, the discretization performance
//! gap, and empirical POD / encoding-error diagnostics.

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::dataset::MultifidelityDataset;
use crate::grid::{grids_overlap, restrict, trapezoid_weights, FunctionSample, Grid, GridError};
use crate::model::{FeatureCache, ModelError, OperatorModel};
use crate::train::{riemann_loss, LossKind};

/// Relative singular-value cutoff of the least-squares decoder fit.
pub const PINV_CUTOFF: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("grid mismatch: {0}")]
    Grid(String),
    #[error("truth has zero norm")]
    ZeroTruth,
    #[error("performance gap needs overlapping and non-overlapping test sets ({0} is empty)")]
    EmptyClass(&'static str),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    GridOp(#[from] GridError),
}

/// `‖pred − truth‖₁ / ‖truth‖₁` with trapezoidal Riemann sums.
pub fn relative_l1_error(pred: &FunctionSample, truth: &FunctionSample) -> Result<f64, EvalError> {
    if pred.grid() != truth.grid() {
        return Err(EvalError::Grid("prediction and truth grids differ".into()));
    }
    let w = trapezoid_weights(truth.grid());
    let zero = vec![0.0; truth.grid().len()];
    let norm = riemann_loss(LossKind::L1, truth.values(), &zero, &w.weights, None);
    if norm == 0.0 {
        return Err(EvalError::ZeroTruth);
    }
    Ok(riemann_loss(LossKind::L1, pred.values(), truth.values(), &w.weights, None) / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statistic {
    Mean,
    Median,
}

impl Statistic {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(Self::Mean),
            "median" => Some(Self::Median),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Median => "median",
        }
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Errors of one single-resolution test set.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionRow {
    pub resolution: usize,
    /// Relative L¹ error of every sample that evaluated successfully.
    pub errors: Vec<f64>,
    /// Samples whose prediction failed; excluded from `errors`.
    pub failures: usize,
    /// Whether the test grid shares its nodes with some training grid.
    pub overlap: Option<bool>,
    pub dataset_digest: String,
}

impl ResolutionRow {
    pub fn mean(&self) -> f64 {
        mean(&self.errors)
    }

    pub fn median(&self) -> f64 {
        median(&self.errors)
    }

    pub fn stat(&self, s: Statistic) -> f64 {
        match s {
            Statistic::Mean => self.mean(),
            Statistic::Median => self.median(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ResolutionRow>,
    pub train_resolutions: Vec<usize>,
    pub model_digest: String,
}

impl EvalReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().map(|r| r.failures).sum()
    }

    /// Gap with the given statistic, if both overlap classes are present.
    pub fn gap(&self, stat: Statistic) -> Option<f64> {
        performance_gap(self, &self.train_resolutions, stat).ok()
    }

    /// `R,n_samples,mean,median,overlap`, one row per test resolution.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("R,n_samples,mean,median,overlap\n");
        for r in &self.rows {
            let overlap = match r.overlap {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            s.push_str(&format!(
                "{},{},{:?},{:?},{overlap}\n",
                r.resolution,
                r.errors.len(),
                r.mean(),
                r.median()
            ));
        }
        s
    }

    pub fn summary(&self, stat: Statistic) -> String {
        let list = |v: Vec<String>| format!("[{}]", v.join(", "));
        let gap = self.gap(stat).map_or("null".to_string(), |g| format!("{g:?}"));
        format!(
            "{{\n  \"model_digest\": \"{}\",\n  \"train_resolutions\": {},\n  \"test_resolutions\": {},\n  \"statistic\": \"{}\",\n  \"performance_gap\": {gap},\n  \"failures\": {},\n  \"dataset_digests\": {}\n}}\n",
            self.model_digest,
            list(self.train_resolutions.iter().map(|r| r.to_string()).collect()),
            list(self.rows.iter().map(|r| r.resolution.to_string()).collect()),
            stat.name(),
            self.failures(),
            list(self.rows.iter().map(|r| format!("\"{}\"", r.dataset_digest)).collect()),
        )
    }
}

/// Errors of `model` on single-fidelity test sets. Overlap flags are filled
/// in when `train_resolutions` is non-empty.
pub fn evaluate_model(
    model: &OperatorModel,
    tests: &[&MultifidelityDataset],
    train_resolutions: &[usize],
) -> Result<EvalReport, EvalError> {
    let mut bytes = Vec::new();
    model.write_to(&mut bytes)?;
    let model_digest = crate::dataset::digest_hex(&bytes);
    let mut cache = FeatureCache::new();
    let mut rows = Vec::with_capacity(tests.len());
    for ds in tests {
        if ds.spec().resolutions().len() != 1 {
            return Err(EvalError::Input("test sets must be single-fidelity".into()));
        }
        if ds.dim() != model.dim() {
            return Err(EvalError::Input(format!("{}D test set for a {}D model", ds.dim(), model.dim())));
        }
        let resolution = ds.spec().resolutions()[0];
        let mut errors = Vec::with_capacity(ds.len());
        let mut failures = 0;
        for chunk in ds.samples().chunks(64) {
            let inputs: Vec<&FunctionSample> = chunk.iter().map(|s| &s.input).collect();
            let grid = *chunk[0].grid();
            let preds: Vec<Option<FunctionSample>> = match model.predict_batch(&inputs, &grid, &mut cache) {
                Ok(p) => p.into_iter().map(Some).collect(),
                // retry one by one so a single bad sample only costs itself
                Err(_) => inputs.iter().map(|s| model.forward(s, &grid).ok()).collect(),
            };
            for (s, p) in chunk.iter().zip(preds) {
                match p.map(|p| relative_l1_error(&p, &s.output)) {
                    Some(Ok(e)) if e.is_finite() => errors.push(e),
                    _ => failures += 1,
                }
            }
        }
        let overlap = (!train_resolutions.is_empty())
            .then(|| train_resolutions.iter().any(|&t| grids_overlap(t, resolution)));
        rows.push(ResolutionRow {
            resolution,
            errors,
            failures,
            overlap,
            dataset_digest: ds.provenance().digest(),
        });
    }
    Ok(EvalReport {
        rows,
        train_resolutions: train_resolutions.to_vec(),
        model_digest,
    })
}

/// Mean error over test sets overlapping a training grid minus mean error
/// over the rest.
pub fn performance_gap(report: &EvalReport, train_resolutions: &[usize], stat: Statistic) -> Result<f64, EvalError> {
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for r in &report.rows {
        if r.errors.is_empty() {
            continue;
        }
        if train_resolutions.iter().any(|&t| grids_overlap(t, r.resolution)) {
            same.push(r.stat(stat));
        } else {
            diff.push(r.stat(stat));
        }
    }
    gap_from_classes(&same, &diff)
}

/// `mean(same) − mean(diff)`.
pub fn gap_from_classes(same: &[f64], diff: &[f64]) -> Result<f64, EvalError> {
    if same.is_empty() {
        return Err(EvalError::EmptyClass("overlapping"));
    }
    if diff.is_empty() {
        return Err(EvalError::EmptyClass("non-overlapping"));
    }
    Ok(mean(same) - mean(diff))
}

/// Eigenpairs of the quadrature-weighted empirical second-moment operator.
#[derive(Debug, Clone, PartialEq)]
pub struct PodSpectrum {
    pub grid: Grid,
    /// Non-increasing, non-negative.
    pub eigenvalues: Vec<f64>,
    /// Eigenfunctions for the positive eigenvalues, orthonormal in the
    /// trapezoidal inner product.
    pub modes: Vec<FunctionSample>,
}

impl PodSpectrum {
    /// `Σ_{k>p} λ_k`.
    pub fn tail(&self, p: usize) -> f64 {
        self.eigenvalues.iter().skip(p).sum()
    }
}

/// Finest resolution among the dataset's samples.
pub fn pod_reference_grid(ds: &MultifidelityDataset) -> Option<Grid> {
    ds.samples().iter().map(|s| *s.grid()).max_by_key(|g| g.points_per_axis())
}

fn on_reference(samples: &[&FunctionSample], reference: &Grid) -> Result<Vec<Vec<f64>>, EvalError> {
    samples
        .iter()
        .map(|s| {
            if s.grid() == reference {
                Ok(s.values().to_vec())
            } else {
                restrict(s, reference)
                    .map(|r| r.into_values())
                    .map_err(|_| EvalError::Grid(format!(
                        "sample on R={} cannot be represented on the reference R={}",
                        s.grid().points_per_axis(),
                        reference.points_per_axis()
                    )))
            }
        })
        .collect()
}

/// `U W^{1/2}`, one row per sample.
fn weighted_snapshots(rows: &[Vec<f64>], w: &[f64]) -> DMatrix<f64> {
    let n = w.len();
    DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j] * w[j].sqrt())
}

pub fn empirical_pod_spectrum(inputs: &[&FunctionSample], reference: &Grid) -> Result<PodSpectrum, EvalError> {
    pod_spectrum_with(inputs, reference, reference.len() > inputs.len())
}

/// `snapshots` picks the N×N Gram matrix over the nodes×nodes covariance.
fn pod_spectrum_with(inputs: &[&FunctionSample], reference: &Grid, snapshots: bool) -> Result<PodSpectrum, EvalError> {
    if inputs.is_empty() {
        return Err(EvalError::Input("no samples".into()));
    }
    let rows = on_reference(inputs, reference)?;
    let w = trapezoid_weights(reference).weights;
    let y = weighted_snapshots(&rows, &w);
    let big_n = rows.len() as f64;
    let n = w.len();

    let mut pairs: Vec<(f64, Vec<f64>)> = if !snapshots {
        let c = y.transpose() * &y / big_n;
        let eig = SymmetricEigen::new(c);
        (0..n)
            .map(|k| {
                let v = eig.eigenvectors.column(k);
                // φ = W^{-1/2} v
                let phi: Vec<f64> = v.iter().zip(&w).map(|(a, wj)| a / wj.sqrt()).collect();
                (eig.eigenvalues[k], phi)
            })
            .collect()
    } else {
        let g = &y * y.transpose() / big_n;
        let eig = SymmetricEigen::new(g);
        (0..rows.len())
            .map(|k| {
                let lambda = eig.eigenvalues[k];
                let a = eig.eigenvectors.column(k);
                let scale = (big_n * lambda.max(0.0)).sqrt();
                let phi: Vec<f64> = (0..n)
                    .map(|j| {
                        let s: f64 = (0..rows.len()).map(|i| a[i] * rows[i][j]).sum();
                        if scale > 0.0 {
                            s / scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                (lambda, phi)
            })
            .collect()
    };
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top = pairs.first().map_or(0.0, |p| p.0.max(0.0));
    let eigenvalues: Vec<f64> = pairs.iter().map(|p| p.0.max(0.0)).collect();
    let modes = pairs
        .into_iter()
        .filter(|(l, _)| *l > 1e-12 * top)
        .map(|(_, phi)| FunctionSample::new(*reference, phi).map_err(EvalError::from))
        .collect::<Result<_, _>>()?;
    Ok(PodSpectrum {
        grid: *reference,
        eigenvalues,
        modes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodingDiagnostic {
    /// Mean squared reconstruction error of the best linear decoder.
    pub encoding_error_sq: f64,
    /// `max(ε̂² − tail, 0)`.
    pub aliasing: f64,
    /// `Σ_{k>p} λ_k`.
    pub tail: f64,
    /// Numerical rank of the latent matrix.
    pub rank: usize,
    pub rank_deficient: bool,
}

/// Encoding error of the basis `basis` (nodes × p, sampled on `reference`)
/// over `inputs`, with the decoder fitted by least squares on the same
/// samples.
pub fn encoding_error_diagnostic(
    basis: &ndarray::Array2<f64>,
    inputs: &[&FunctionSample],
    reference: &Grid,
    spectrum: &PodSpectrum,
) -> Result<EncodingDiagnostic, EvalError> {
    let p = basis.ncols();
    if basis.nrows() != reference.len() {
        return Err(EvalError::Grid(format!(
            "basis has {} rows for {} nodes",
            basis.nrows(),
            reference.len()
        )));
    }
    if p > inputs.len() {
        return Err(EvalError::Input(format!("p = {p} exceeds the {} samples", inputs.len())));
    }
    if spectrum.grid != *reference {
        return Err(EvalError::Grid("spectrum computed on another grid".into()));
    }
    let rows = on_reference(inputs, reference)?;
    let w = trapezoid_weights(reference).weights;
    let n_samples = rows.len();
    let z = DMatrix::from_fn(n_samples, p, |i, j| {
        rows[i].iter().zip(&w).enumerate().map(|(k, (u, wk))| u * wk * basis[[k, j]]).sum()
    });
    let y = weighted_snapshots(&rows, &w);
    let svd = z.svd(true, false);
    let u = svd.u.expect("left singular vectors");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| smax > 0.0 && svd.singular_values[k] > PINV_CUTOFF * smax)
        .collect();
    let ur = DMatrix::from_fn(n_samples, keep.len(), |i, j| u[(i, keep[j])]);
    let residual = &y - &ur * (ur.transpose() * &y);
    let encoding_error_sq = residual.norm_squared() / n_samples as f64;
    let tail = spectrum.tail(p);
    Ok(EncodingDiagnostic {
        encoding_error_sq,
        aliasing: (encoding_error_sq - tail).max(0.0),
        tail,
        rank: keep.len(),
        rank_deficient: keep.len() < p,
    })
}

/// Encoder basis of `model` on `reference` fed to [`encoding_error_diagnostic`].
pub fn model_encoding_error(
    model: &OperatorModel,
    inputs: &[&FunctionSample],
    reference: &Grid,
    spectrum: &PodSpectrum,
) -> Result<EncodingDiagnostic, EvalError> {
    let basis = model.encoder_basis(reference)?;
    encoding_error_diagnostic(&basis, inputs, reference, spectrum)
}

/// Basis matrix (nodes × p) whose columns are the top `p` POD modes.
pub fn pod_basis(spectrum: &PodSpectrum, p: usize) -> Result<ndarray::Array2<f64>, EvalError> {
    if p > spectrum.modes.len() {
        return Err(EvalError::Input(format!("only {} POD modes available", spectrum.modes.len())));
    }
    let n = spectrum.grid.len();
    Ok(ndarray::Array2::from_shape_fn((n, p), |(k, j)| spectrum.modes[j].values()[k]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetSpec, Provenance, SamplePair};
    use crate::model::ModelConfig;
    use crate::nets::Mlp;
    use crate::pde::{sample_grf_periodic, GrfSpec};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn grid(d: usize, r: usize) -> Grid {
        Grid::new(d, r).unwrap()
    }

    fn sample(g: Grid, f: impl Fn([f64; 2]) -> f64) -> FunctionSample {
        FunctionSample::from_fn(g, f).unwrap()
    }

    #[test]
    fn relative_error_examples() {
        let g = grid(1, 17);
        let t = sample(g, |x| (3.0 * x[0]).sin() + 0.2);
        assert_eq!(relative_l1_error(&t, &t).unwrap(), 0.0);
        let twice = FunctionSample::new(g, t.values().iter().map(|v| 2.0 * v).collect()).unwrap();
        assert!((relative_l1_error(&twice, &t).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(relative_l1_error(&FunctionSample::zeros(g), &t).unwrap(), 1.0);
        assert!(matches!(relative_l1_error(&t, &FunctionSample::zeros(g)), Err(EvalError::ZeroTruth)));
        assert!(relative_l1_error(&t, &sample(grid(1, 9), |_| 1.0)).is_err());
    }

    fn row(r: usize, errors: Vec<f64>) -> ResolutionRow {
        ResolutionRow {
            resolution: r,
            errors,
            failures: 0,
            overlap: None,
            dataset_digest: String::new(),
        }
    }

    fn report(rows: Vec<ResolutionRow>) -> EvalReport {
        EvalReport {
            rows,
            train_resolutions: vec![],
            model_digest: String::new(),
        }
    }

    #[test]
    fn gap_examples() {
        let r = report(vec![row(65, vec![0.1]), row(129, vec![0.1]), row(50, vec![0.1])]);
        assert_eq!(performance_gap(&r, &[65], Statistic::Mean).unwrap(), 0.0);
        let r = report(vec![row(65, vec![0.3]), row(50, vec![0.1])]);
        assert!((performance_gap(&r, &[65], Statistic::Mean).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(
            performance_gap(&r, &[12], Statistic::Mean),
            Err(EvalError::EmptyClass("overlapping"))
        ));
        let r = report(vec![row(65, vec![0.3])]);
        assert!(matches!(
            performance_gap(&r, &[65], Statistic::Mean),
            Err(EvalError::EmptyClass("non-overlapping"))
        ));
    }

    #[test]
    fn median_and_csv() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let mut r = report(vec![row(65, vec![0.1, 0.3]), row(50, vec![0.2])]);
        r.rows[0].overlap = Some(true);
        r.rows[1].overlap = Some(false);
        r.train_resolutions = vec![65];
        assert_eq!(r.to_csv(), "R,n_samples,mean,median,overlap\n65,2,0.2,0.2,1\n50,1,0.2,0.2,0\n");
        assert!(r.summary(Statistic::Median).contains("\"performance_gap\": 0.0"));
    }

    fn synthetic_set(r: usize, n: usize, shift: f64) -> MultifidelityDataset {
        let g = grid(1, r);
        let samples = (0..n)
            .map(|i| {
                let a = 1.0 + i as f64;
                SamplePair::new(sample(g, |x| a * x[0]), sample(g, move |x| a * (x[0] + shift))).unwrap()
            })
            .collect();
        MultifidelityDataset::from_samples(
            DatasetSpec::single(n, r).unwrap(),
            Provenance {
                problem: "synthetic".into(),
                dim: 1,
                master_seed: 0,
                generator_config: format!("r={r}"),
            },
            samples,
        )
        .unwrap()
    }

    /// Model computing `u ↦ 2∫u` everywhere.
    fn constant_model() -> OperatorModel {
        let base = OperatorModel::new(&ModelConfig::burgers(), "synthetic", 0).unwrap();
        let unit = |fan_in: usize, out: usize, b: f64| {
            let mut l = crate::nets::Layer::zeros(fan_in, out);
            l.bias.fill(b);
            Mlp::from_layers(vec![l], 0.03).unwrap()
        };
        let mut id = crate::nets::Layer::zeros(1, 1);
        id.weight[[0, 0]] = 1.0;
        OperatorModel::from_parts(
            "synthetic",
            0,
            unit(base.encoder_features().width(), 1, 1.0),
            Mlp::from_layers(vec![id], 0.03).unwrap(),
            unit(base.reconstructor_features().width(), 1, 2.0),
            base.encoder_features(),
            base.reconstructor_features(),
        )
        .unwrap()
    }

    #[test]
    fn evaluate_reports_each_resolution() {
        let m = constant_model();
        // truth a·1 equals 2∫a·x = a exactly
        let a = synthetic_set(9, 4, 0.0);
        let truth_const: Vec<SamplePair> = a
            .samples()
            .iter()
            .map(|s| {
                let c = s.input.values()[s.input.values().len() - 1];
                SamplePair::new(s.input.clone(), sample(*s.grid(), |_| c)).unwrap()
            })
            .collect();
        let exact = MultifidelityDataset::from_samples(a.spec().clone(), a.provenance().clone(), truth_const).unwrap();
        let r = evaluate_model(&m, &[&exact], &[]).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert!(r.rows[0].errors.iter().all(|e| *e < 1e-14));
        assert_eq!(r.rows[0].overlap, None);

        let b = synthetic_set(17, 3, 0.5);
        let r = evaluate_model(&m, &[&exact, &b], &[33]).unwrap();
        assert_eq!(r.rows[1].overlap, Some(true));
        assert_eq!(r.rows[0].overlap, Some(true));
        assert_eq!(r.rows[1].errors.len(), 3);
        assert!(r.gap(Statistic::Mean).is_none());
    }

    fn grf_inputs(n: usize, r: usize) -> Vec<FunctionSample> {
        let spec = GrfSpec {
            kmax: 64,
            ..GrfSpec::burgers()
        };
        let ev = crate::pde::GridEvaluator::new(&grid(1, r), crate::pde::Basis::Fourier, 64).unwrap();
        (0..n)
            .map(|i| ev.evaluate(&sample_grf_periodic(&spec, 1, 500 + i as u64).unwrap()).unwrap())
            .collect()
    }

    #[test]
    fn rank_one_spectrum() {
        let g = grid(1, 33);
        let u = sample(g, |x| (PI * x[0]).sin() + x[0]);
        let copies: Vec<&FunctionSample> = std::iter::repeat_n(&u, 10).collect();
        let s = empirical_pod_spectrum(&copies, &g).unwrap();
        let norm2 = trapezoid_weights(&g).integrate(&u.values().iter().map(|v| v * v).collect::<Vec<_>>());
        assert!((s.eigenvalues[0] - norm2).abs() < 1e-12);
        assert!(s.eigenvalues[1..].iter().all(|l| *l <= 1e-10));
        // 2D uses the snapshot path (33² nodes > 10 samples)
        let g2 = grid(2, 33);
        let v = sample(g2, |x| x[0] * x[1] + 1.0);
        let copies: Vec<&FunctionSample> = std::iter::repeat_n(&v, 10).collect();
        let s2 = empirical_pod_spectrum(&copies, &g2).unwrap();
        let norm2 = trapezoid_weights(&g2).integrate(&v.values().iter().map(|x| x * x).collect::<Vec<_>>());
        assert!((s2.eigenvalues[0] - norm2).abs() < 1e-12);
        assert!(s2.eigenvalues[1..].iter().all(|l| *l <= 1e-10));
        assert_eq!(s2.modes.len(), 1);
    }

    #[test]
    fn two_orthonormal_functions_split_evenly() {
        let g = grid(1, 65);
        let a = sample(g, |x| 2f64.sqrt() * (2.0 * PI * x[0]).cos());
        let b = sample(g, |x| 2f64.sqrt() * (2.0 * PI * x[0]).sin());
        let s = empirical_pod_spectrum(&[&a, &b], &g).unwrap();
        assert!((s.eigenvalues[0] - 0.5).abs() < 1e-12);
        assert!((s.eigenvalues[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pod_modes_are_orthonormal() {
        let inputs = grf_inputs(200, 65);
        let refs: Vec<&FunctionSample> = inputs.iter().collect();
        let g = grid(1, 65);
        let s = empirical_pod_spectrum(&refs, &g).unwrap();
        let w = trapezoid_weights(&g).weights;
        assert!(s.eigenvalues.windows(2).all(|p| p[0] >= p[1]));
        for i in 0..20 {
            for j in 0..20 {
                let ip: f64 = (0..g.len()).map(|k| w[k] * s.modes[i].values()[k] * s.modes[j].values()[k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((ip - expect).abs() <= 1e-8, "({i}, {j}): {ip}");
            }
        }
        // the snapshot path gives the same leading pairs
        let snap = pod_spectrum_with(&refs, &g, true).unwrap();
        for k in 0..20 {
            assert!((snap.eigenvalues[k] - s.eigenvalues[k]).abs() <= 1e-10 * s.eigenvalues[0]);
            let ip: f64 = (0..g.len()).map(|j| w[j] * s.modes[k].values()[j] * snap.modes[k].values()[j]).sum();
            assert!((ip.abs() - 1.0).abs() <= 1e-6, "mode {k}: {ip}");
        }
    }

    #[test]
    fn grf_spectrum_slope() {
        let g = grid(1, 129);
        let inputs = grf_inputs(2000, 129);
        let refs: Vec<&FunctionSample> = inputs.iter().collect();
        let s = empirical_pod_spectrum(&refs, &g).unwrap();
        let spec = GrfSpec::burgers();
        // closed form: each wavenumber k contributes two eigenvalues s_k²
        let exact: Vec<f64> = (1..=64).flat_map(|k| {
            let v = spec.coefficient_std([k, 0]).powi(2);
            [v, v]
        }).collect();
        let slope = |lam: &[f64]| {
            let pts: Vec<(f64, f64)> = (2..=20).map(|n| ((n as f64).ln(), lam[n - 1].ln())).collect();
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
            pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>()
        };
        let (emp, cf) = (slope(&s.eigenvalues), slope(&exact));
        assert!((emp / cf - 1.0).abs() <= 0.2, "slope {emp} vs {cf}");
    }

    #[test]
    fn pod_encoder_attains_the_tail() {
        let g = grid(1, 65);
        let inputs = grf_inputs(150, 65);
        let refs: Vec<&FunctionSample> = inputs.iter().collect();
        let s = empirical_pod_spectrum(&refs, &g).unwrap();
        for p in [2, 6, 10] {
            let d = encoding_error_diagnostic(&pod_basis(&s, p).unwrap(), &refs, &g, &s).unwrap();
            assert!(d.aliasing <= 1e-8, "p = {p}: {d:?}");
            assert_eq!(d.rank, p);
        }
        // p above the data rank leaves nothing to explain
        let few: Vec<&FunctionSample> = refs[..5].to_vec();
        let s5 = empirical_pod_spectrum(&few, &g).unwrap();
        let d = encoding_error_diagnostic(&pod_basis(&s5, 5).unwrap(), &few, &g, &s5).unwrap();
        assert!(d.encoding_error_sq < 1e-12);
        // random encoders do worse but never beat the tail
        let model = OperatorModel::new(&ModelConfig { p: 6, ..ModelConfig::burgers() }, "burgers", 3).unwrap();
        let r = model_encoding_error(&model, &refs, &g, &s).unwrap();
        let pod = encoding_error_diagnostic(&pod_basis(&s, 6).unwrap(), &refs, &g, &s).unwrap();
        assert!(r.encoding_error_sq >= r.tail - 1e-8);
        assert!(r.aliasing > pod.aliasing);
    }

    #[test]
    fn diagnostic_input_checks() {
        let g = grid(1, 17);
        let u = sample(g, |x| x[0]);
        let s = empirical_pod_spectrum(&[&u], &g).unwrap();
        let b = ndarray::Array2::zeros((17, 2));
        assert!(encoding_error_diagnostic(&b, &[&u], &g, &s).is_err());
        let zero = ndarray::Array2::zeros((17, 1));
        let d = encoding_error_diagnostic(&zero, &[&u], &g, &s).unwrap();
        assert!(d.rank_deficient);
        // samples on a non-nested grid cannot be mapped to the reference
        let other = sample(grid(1, 12), |x| x[0]);
        assert!(empirical_pod_spectrum(&[&other], &g).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn relative_error_is_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = grid(1, 11);
            let t = FunctionSample::new(g, (0..11).map(|_| rng.random_range(0.5..1.0)).collect()).unwrap();
            let p = FunctionSample::new(g, (0..11).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let scale = |s: &FunctionSample| FunctionSample::new(g, s.values().iter().map(|v| c * v).collect()).unwrap();
            let a = relative_l1_error(&p, &t).unwrap();
            let b = relative_l1_error(&scale(&p), &scale(&t)).unwrap();
            prop_assert!((a - b).abs() <= 1e-14 * a.max(1.0));
        }

        #[test]
        fn gap_ignores_order_within_classes(errs in proptest::collection::vec(0.0f64..1.0, 4), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let res = [65usize, 129, 50, 201];
            let make = |e: &[f64]| report(res.iter().zip(e).map(|(r, e)| row(*r, vec![*e])).collect());
            let g0 = performance_gap(&make(&errs), &[65], Statistic::Mean).unwrap();
            // 65 and 129 overlap a 65 grid; 50 and 201 do not
            let mut same = vec![errs[0], errs[1]];
            let mut diff = vec![errs[2], errs[3]];
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            same.shuffle(&mut rng);
            diff.shuffle(&mut rng);
            let g1 = performance_gap(&make(&[same[0], same[1], diff[0], diff[1]]), &[65], Statistic::Mean).unwrap();
            prop_assert_eq!(g0, g1);
        }

        #[test]
        fn encoding_error_lower_bound(seed in 0u64..1000) {
            let g = grid(1, 33);
            let inputs = grf_inputs(40, 33);
            let refs: Vec<&FunctionSample> = inputs.iter().collect();
            let s = empirical_pod_spectrum(&refs, &g).unwrap();
            let m = OperatorModel::new(&ModelConfig { p: 4, ..ModelConfig::burgers() }, "burgers", seed).unwrap();
            let d = model_encoding_error(&m, &refs, &g, &s).unwrap();
            prop_assert!(d.encoding_error_sq >= d.tail - 1e-8);
        }
    }
}
