//! Empirical risk minimization over multifidelity data: Riemann-sum losses,
//! resolution-grouped mini-batches and Adam with per-epoch geometric decay.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::MultifidelityDataset;
use crate::grid::{trapezoid_weights, FunctionSample, Grid};
use crate::model::{FeatureCache, ModelError, ModelGrad, OperatorModel};
use crate::nets::{AdamState, NetError, Params};
use crate::seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Diverged { epoch: usize, batch: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `Σ w |p - t|`
    L1,
    /// `Σ w (p - t)²`
    L2,
    /// `(Σ w (p - t)²)^½ / (Σ w t²)^½`
    RelativeL2,
}

impl LossKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "l1" => Some(Self::L1),
            "l2" => Some(Self::L2),
            "relative_l2" => Some(Self::RelativeL2),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::L1 => "l1",
            Self::L2 => "l2",
            Self::RelativeL2 => "relative_l2",
        }
    }
}

/// Loss of one prediction and, when `grad` is given, its gradient with
/// respect to the prediction values.
pub fn riemann_loss(kind: LossKind, pred: &[f64], truth: &[f64], weights: &[f64], grad: Option<&mut [f64]>) -> f64 {
    match kind {
        LossKind::L1 => {
            if let Some(g) = grad {
                for ((g, (p, t)), w) in g.iter_mut().zip(pred.iter().zip(truth)).zip(weights) {
                    let d = p - t;
                    *g = if d > 0.0 {
                        *w
                    } else if d < 0.0 {
                        -w
                    } else {
                        0.0
                    };
                }
            }
            pred.iter().zip(truth).zip(weights).map(|((p, t), w)| w * (p - t).abs()).sum()
        }
        LossKind::L2 => {
            if let Some(g) = grad {
                for ((g, (p, t)), w) in g.iter_mut().zip(pred.iter().zip(truth)).zip(weights) {
                    *g = 2.0 * w * (p - t);
                }
            }
            pred.iter().zip(truth).zip(weights).map(|((p, t), w)| w * (p - t).powi(2)).sum()
        }
        LossKind::RelativeL2 => {
            let dn: f64 = pred.iter().zip(truth).zip(weights).map(|((p, t), w)| w * (p - t).powi(2)).sum::<f64>().sqrt();
            let tn: f64 = truth.iter().zip(weights).map(|(t, w)| w * t * t).sum::<f64>().sqrt();
            if let Some(g) = grad {
                for ((g, (p, t)), w) in g.iter_mut().zip(pred.iter().zip(truth)).zip(weights) {
                    *g = if dn > 0.0 { w * (p - t) / (dn * tn) } else { 0.0 };
                }
            }
            dn / tn
        }
    }
}

/// `Σ_nodes w |pred - truth|` with trapezoidal weights.
pub fn l1_riemann_loss(pred: &FunctionSample, truth: &FunctionSample) -> Result<f64, TrainError> {
    if pred.grid() != truth.grid() {
        return Err(TrainError::Dimension("prediction and truth live on different grids".into()));
    }
    let w = trapezoid_weights(pred.grid());
    Ok(riemann_loss(LossKind::L1, pred.values(), truth.values(), &w.weights, None))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl TrainConfig {
    pub fn poisson() -> Self {
        Self {
            learning_rate: 0.003,
            decay: 0.9995,
            epochs: 2000,
            batch_size: 10,
            seed: 0,
            loss: LossKind::L1,
        }
    }

    pub fn burgers() -> Self {
        Self {
            learning_rate: 0.005,
            decay: 0.997,
            epochs: 1000,
            ..Self::poisson()
        }
    }

    pub fn navier_stokes() -> Self {
        Self {
            learning_rate: 0.003,
            decay: 0.999,
            epochs: 750,
            ..Self::poisson()
        }
    }

    /// A few epochs, for checking that a pipeline runs end to end.
    pub fn smoke() -> Self {
        Self {
            learning_rate: 0.003,
            decay: 0.99,
            epochs: 5,
            ..Self::poisson()
        }
    }

    pub fn for_problem(tag: &str) -> Option<Self> {
        match tag {
            "poisson" => Some(Self::poisson()),
            "burgers" => Some(Self::burgers()),
            "navier_stokes" => Some(Self::navier_stokes()),
            "smoke" => Some(Self::smoke()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(TrainError::Config(format!("decay {} outside (0, 1]", self.decay)));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("at least one epoch is required".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    /// Mean per-sample training loss of each epoch.
    pub loss: Vec<f64>,
    pub learning_rate: Vec<f64>,
    /// Seconds since the start of training at the end of each epoch.
    pub wall_seconds: Vec<f64>,
    pub optimizer_steps: usize,
}

impl TrainHistory {
    /// `epoch,loss,lr` rows; wall time is left out unless asked for since
    /// it differs between otherwise identical runs.
    pub fn to_csv(&self, with_wall_time: bool) -> String {
        let mut s = String::from(if with_wall_time {
            "epoch,loss,lr,wall_seconds\n"
        } else {
            "epoch,loss,lr\n"
        });
        for e in 0..self.loss.len() {
            s.push_str(&format!("{e},{:?},{:?}", self.loss[e], self.learning_rate[e]));
            if with_wall_time {
                s.push_str(&format!(",{:.3}", self.wall_seconds[e]));
            }
            s.push('\n');
        }
        s
    }
}

/// Sample indices of one epoch's batches. Samples are shuffled, grouped
/// by resolution (groups in order of first appearance), cut into chunks of
/// `batch_size`, and the chunks shuffled again.
pub fn make_batches(ds: &MultifidelityDataset, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    let mut groups: Vec<(Grid, Vec<usize>)> = Vec::new();
    for i in order {
        let g = *ds.samples()[i].grid();
        match groups.iter_mut().find(|(h, _)| *h == g) {
            Some((_, v)) => v.push(i),
            None => groups.push((g, vec![i])),
        }
    }
    let mut batches: Vec<Vec<usize>> = groups
        .into_iter()
        .flat_map(|(_, v)| v.chunks(batch_size).map(|c| c.to_vec()).collect::<Vec<_>>())
        .collect();
    batches.shuffle(&mut rng);
    batches
}

/// Mean loss over a uniform-resolution batch and its gradient. Samples are
/// processed in ascending index order whatever order `batch` lists them,
/// so the result is bit-identical under reordering.
pub fn batch_gradient(
    model: &OperatorModel,
    ds: &MultifidelityDataset,
    batch: &[usize],
    loss: LossKind,
    cache: &mut FeatureCache,
) -> Result<(f64, Vec<f64>, ModelGrad), TrainError> {
    let mut idx = batch.to_vec();
    idx.sort_unstable();
    let samples: Vec<_> = idx.iter().map(|&i| &ds.samples()[i]).collect();
    let inputs: Vec<&FunctionSample> = samples.iter().map(|s| &s.input).collect();
    let grid = *samples
        .first()
        .ok_or_else(|| TrainError::Dimension("empty batch".into()))?
        .grid();
    let pass = model.forward_pass(&inputs, &grid, cache)?;
    let w = trapezoid_weights(&grid);
    let b = samples.len() as f64;
    let mut upstream = Array2::zeros(pass.predictions().dim());
    let mut losses = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        let pred = pass.predictions().row(k);
        let mut g = vec![0.0; grid.len()];
        let l = riemann_loss(
            loss,
            pred.as_slice().expect("contiguous row"),
            s.output.values(),
            &w.weights,
            Some(&mut g),
        );
        losses.push(l);
        for (u, gv) in upstream.row_mut(k).iter_mut().zip(&g) {
            *u = gv / b;
        }
    }
    let grad = pass.backward(model, upstream)?;
    let mean = losses.iter().sum::<f64>() / b;
    Ok((mean, losses, grad))
}

/// Trains `model` on `ds`; `on_epoch(epoch, mean_loss)` runs after every epoch.
pub fn train_with(
    mut model: OperatorModel,
    ds: &MultifidelityDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(OperatorModel, TrainHistory), TrainError> {
    cfg.validate()?;
    if model.dim() != ds.dim() {
        return Err(TrainError::Dimension(format!(
            "model is {}D but the dataset is {}D",
            model.dim(),
            ds.dim()
        )));
    }
    if ds.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let mut adam = AdamState::new(model.param_count());
    let mut cache = FeatureCache::new();
    let mut history = TrainHistory::default();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let mut total = 0.0;
        for (b, batch) in make_batches(ds, cfg.batch_size, seed::derive(cfg.seed, epoch as u64))
            .iter()
            .enumerate()
        {
            let diverged = |reason: String| TrainError::Diverged { epoch, batch: b, reason };
            let (_, losses, grad) = match batch_gradient(&model, ds, batch, cfg.loss, &mut cache) {
                Err(TrainError::Model(ModelError::NonFinite(what))) => {
                    return Err(diverged(format!("non-finite {what}")))
                }
                r => r?,
            };
            let sum: f64 = losses.iter().sum();
            if !sum.is_finite() {
                return Err(diverged("non-finite loss".into()));
            }
            total += sum;
            match adam.step(&mut model, &grad, lr) {
                Err(NetError::NonFiniteGradient(_)) => return Err(diverged("non-finite gradient".into())),
                r => r?,
            }
            history.optimizer_steps += 1;
        }
        let mean = total / ds.len() as f64;
        history.loss.push(mean);
        history.learning_rate.push(lr);
        history.wall_seconds.push(start.elapsed().as_secs_f64());
        on_epoch(epoch, mean);
    }
    Ok((model, history))
}

pub fn train(
    model: OperatorModel,
    ds: &MultifidelityDataset,
    cfg: &TrainConfig,
) -> Result<(OperatorModel, TrainHistory), TrainError> {
    train_with(model, ds, cfg, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetSpec, Provenance, SamplePair};
    use crate::model::ModelConfig;
    use crate::nets::DEFAULT_SLOPE;
    use proptest::prelude::*;
    use rand::Rng;

    fn grid(d: usize, r: usize) -> Grid {
        Grid::new(d, r).unwrap()
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            dim: 1,
            encoder_modes: 2,
            reconstructor_modes: 2,
            encoder_hidden: vec![8],
            approximator_hidden: vec![8],
            reconstructor_hidden: vec![8],
            p: 4,
            q: 4,
            slope: DEFAULT_SLOPE,
        }
    }

    /// Random smooth-ish samples at the given resolutions (one entry per sample).
    fn synthetic(resolutions: &[usize], spec_res: Vec<usize>, props: Vec<f64>, zero_out: bool, seed: u64) -> MultifidelityDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = resolutions
            .iter()
            .map(|&r| {
                let g = grid(1, r);
                let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let input = FunctionSample::from_fn(g, |x| a * (2.0 * std::f64::consts::PI * x[0]).sin() + b).unwrap();
                let output = if zero_out {
                    FunctionSample::zeros(g)
                } else {
                    FunctionSample::from_fn(g, |x| a * x[0] * x[0] - b).unwrap()
                };
                SamplePair::new(input, output).unwrap()
            })
            .collect();
        let spec = DatasetSpec::new(resolutions.len(), spec_res, props).unwrap();
        let prov = Provenance {
            problem: "synthetic".into(),
            dim: 1,
            master_seed: seed,
            generator_config: "synthetic".into(),
        };
        MultifidelityDataset::from_samples(spec, prov, samples).unwrap()
    }

    #[test]
    fn l1_loss_examples() {
        let g = grid(1, 3);
        let t = FunctionSample::new(g, vec![0.3, -1.0, 2.0]).unwrap();
        assert_eq!(l1_riemann_loss(&t, &t).unwrap(), 0.0);
        let shifted = FunctionSample::new(g, t.values().iter().map(|v| v + 0.75).collect()).unwrap();
        assert_eq!(l1_riemann_loss(&shifted, &t).unwrap(), 0.75);
        let p = FunctionSample::new(g, vec![1.3, -1.0, 3.0]).unwrap();
        assert_eq!(l1_riemann_loss(&p, &t).unwrap(), 0.5);
        assert!(l1_riemann_loss(&p, &FunctionSample::zeros(grid(1, 4))).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let w = trapezoid_weights(&grid(1, 5)).weights;
        let t = [0.3, -1.0, 2.0, 0.5, 1.5];
        let p = [0.1, -0.2, 2.5, 0.4, -1.0];
        for kind in [LossKind::L1, LossKind::L2, LossKind::RelativeL2] {
            let mut g = vec![0.0; 5];
            riemann_loss(kind, &p, &t, &w, Some(&mut g));
            for i in 0..5 {
                let h = 1e-6;
                let mut a = p;
                a[i] += h;
                let mut b = p;
                b[i] -= h;
                let fd = (riemann_loss(kind, &a, &t, &w, None) - riemann_loss(kind, &b, &t, &w, None)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-7, "{kind:?} node {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn batch_layouts() {
        let single = synthetic(&[9; 20], vec![9], vec![1.0], false, 1);
        let b = make_batches(&single, 10, 0);
        assert_eq!(b.iter().map(|v| v.len()).collect::<Vec<_>>(), vec![10, 10]);

        let mut res = vec![9; 15];
        res.extend([17; 5]);
        let mixed = synthetic(&res, vec![9, 17], vec![0.75, 0.25], false, 2);
        let b = make_batches(&mixed, 10, 3);
        let mut sizes: Vec<usize> = b.iter().map(|v| v.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![5, 5, 10]);
        for batch in &b {
            let r = mixed.samples()[batch[0]].grid().points_per_axis();
            assert!(batch.iter().all(|&i| mixed.samples()[i].grid().points_per_axis() == r));
        }
        assert_ne!(make_batches(&single, 10, 0), make_batches(&single, 10, 1));
    }

    #[test]
    fn presets_and_validation() {
        let b = TrainConfig::burgers();
        assert_eq!((b.learning_rate, b.decay, b.epochs, b.batch_size), (0.005, 0.997, 1000, 10));
        let p = TrainConfig::poisson();
        assert_eq!((p.learning_rate, p.decay, p.epochs), (0.003, 0.9995, 2000));
        let n = TrainConfig::navier_stokes();
        assert_eq!((n.learning_rate, n.decay, n.epochs), (0.003, 0.999, 750));
        assert!(TrainConfig { epochs: 0, ..p.clone() }.validate().is_err());
        assert!(TrainConfig { decay: 1.5, ..p.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..p }.validate().is_err());
    }

    #[test]
    fn one_epoch_takes_one_step_per_batch() {
        let ds = synthetic(&[9; 23], vec![9], vec![1.0], false, 4);
        let model = OperatorModel::new(&tiny_cfg(), "synthetic", 0).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::smoke()
        };
        let (_, h) = train(model, &ds, &cfg).unwrap();
        assert_eq!(h.optimizer_steps, 3);
        assert_eq!(h.loss.len(), 1);
    }

    #[test]
    fn learns_the_zero_operator() {
        let ds = synthetic(&[17; 30], vec![17], vec![1.0], true, 5);
        let model = OperatorModel::new(&tiny_cfg(), "synthetic", 1).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            ..TrainConfig::burgers()
        };
        let initial: f64 = {
            let mut c = FeatureCache::new();
            let all: Vec<usize> = (0..ds.len()).collect();
            batch_gradient(&model, &ds, &all, LossKind::L1, &mut c).unwrap().0
        };
        let (_, h) = train(model, &ds, &cfg).unwrap();
        assert!(*h.loss.last().unwrap() < initial, "{initial} -> {:?}", h.loss.last());
        for (e, lr) in h.learning_rate.iter().enumerate() {
            assert_eq!(*lr, 0.005 * 0.997f64.powi(e as i32));
        }
    }

    #[test]
    fn training_is_deterministic_and_rejects_wrong_dimension() {
        let ds = synthetic(&[9, 9, 17, 17, 17], vec![9, 17], vec![0.4, 0.6], false, 6);
        let model = OperatorModel::new(&tiny_cfg(), "synthetic", 2).unwrap();
        let cfg = TrainConfig::smoke();
        let (a, ha) = train(model.clone(), &ds, &cfg).unwrap();
        let (b, hb) = train(model, &ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha.to_csv(false), hb.to_csv(false));

        let cfg2 = ModelConfig { dim: 2, ..tiny_cfg() };
        let m2 = OperatorModel::new(&cfg2, "synthetic", 0).unwrap();
        assert!(matches!(train(m2, &ds, &cfg), Err(TrainError::Dimension(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let ds = synthetic(&[9; 4], vec![9], vec![1.0], false, 7);
        let mut model = OperatorModel::new(&tiny_cfg(), "synthetic", 3).unwrap();
        let mut flat = model.flat();
        flat[0] = f64::INFINITY;
        model.assign_flat(&flat);
        let err = train(model, &ds, &TrainConfig::smoke()).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { epoch: 0, batch: 0, .. }), "{err}");
    }

    #[test]
    fn batch_gradient_ignores_listing_order() {
        let ds = synthetic(&[9; 6], vec![9], vec![1.0], false, 8);
        let model = OperatorModel::new(&tiny_cfg(), "synthetic", 4).unwrap();
        let mut c = FeatureCache::new();
        let a = batch_gradient(&model, &ds, &[0, 1, 2, 3, 4, 5], LossKind::L1, &mut c).unwrap();
        let b = batch_gradient(&model, &ds, &[5, 3, 1, 0, 4, 2], LossKind::L1, &mut c).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn small_step_does_not_increase_loss() {
        let ds = synthetic(&[9, 9, 9, 9, 9], vec![9], vec![1.0], false, 9);
        for state in 0..100u64 {
            let model = OperatorModel::new(&tiny_cfg(), "synthetic", state).unwrap();
            let i = (state % 5) as usize;
            let mut c = FeatureCache::new();
            for kind in [LossKind::L1, LossKind::L2] {
                let (before, _, g) = batch_gradient(&model, &ds, &[i], kind, &mut c).unwrap();
                let mut stepped = model.clone();
                AdamState::new(model.param_count()).step(&mut stepped, &g, 1e-6).unwrap();
                let (after, _, _) = batch_gradient(&stepped, &ds, &[i], kind, &mut c).unwrap();
                assert!(after <= before + 1e-10, "state {state} {kind:?}: {before} -> {after}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn every_sample_once_per_epoch(n9 in 0usize..30, n17 in 1usize..30, bs in 1usize..12, seed in any::<u64>()) {
            let mut res = vec![9; n9];
            res.extend(vec![17; n17]);
            let n = res.len() as f64;
            let ds = synthetic(&res, vec![9, 17], vec![n9 as f64 / n, 1.0 - n9 as f64 / n], false, 1);
            let batches = make_batches(&ds, bs, seed);
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..res.len()).collect::<Vec<_>>());
            prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        }

        #[test]
        fn lr_trace_is_exact(e in 0usize..5000) {
            let c = TrainConfig::poisson();
            prop_assert_eq!(c.learning_rate_at(e), 0.003 * 0.9995f64.powi(e as i32));
        }
    }
}
