//! Multifidelity datasets: `N` input/output pairs spread over resolutions
//! `R_1..R_M` with proportions `p_1..p_M`, plus the on-disk container.
//!
//! Container layout: a UTF-8 header terminated by a line `end`, followed by
//! little-endian `f64` values, for each sample its input then its output in
//! row-major node order.
//!
//! ```text
//! opbasis-dataset 1
//! problem burgers
//! dim 1
//! n 3
//! resolutions 9 17
//! proportions 0.7 0.3
//! master_seed 42
//! generator_digest <sha256 hex of the generator config>
//! generator_config problem=burgers;...
//! samples
//! 0 9 0
//! 1 17 18
//! 2 9 52
//! end
//! ```
//!
//! Each sample line is `index R offset`, offset counted in `f64` values.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::{compensated_sum, FunctionSample, Grid, GridError};
use crate::pde::{GridEvaluator, PdeError, Problem, SpectralField};
use crate::seed;

const MAGIC: &str = "opbasis-dataset";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("corrupt dataset header: {0}")]
    Header(String),
    #[error("dataset payload: {0}")]
    Payload(String),
    #[error("unsupported dataset version {found} (expected {VERSION})")]
    Version { found: String },
    #[error("sample {index}: {source}")]
    Generation { index: usize, source: PdeError },
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The `(N, (R_i), (p_i))` description of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    n: usize,
    resolutions: Vec<usize>,
    proportions: Vec<f64>,
}

impl DatasetSpec {
    pub fn new(n: usize, resolutions: Vec<usize>, proportions: Vec<f64>) -> Result<Self, DatasetError> {
        if resolutions.is_empty() || resolutions.len() != proportions.len() {
            return Err(DatasetError::Spec(format!(
                "{} resolutions but {} proportions",
                resolutions.len(),
                proportions.len()
            )));
        }
        if let Some(r) = resolutions.iter().find(|&&r| r < 2) {
            return Err(DatasetError::Spec(format!("resolution {r} < 2")));
        }
        for (i, r) in resolutions.iter().enumerate() {
            if resolutions[..i].contains(r) {
                return Err(DatasetError::Spec(format!("duplicate resolution {r}")));
            }
        }
        if proportions.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(DatasetError::Spec("proportions must be finite and non-negative".into()));
        }
        let total = compensated_sum(proportions.iter().copied());
        if (total - 1.0).abs() > 1e-12 {
            return Err(DatasetError::Spec(format!("proportions sum to {total}, not 1")));
        }
        Ok(Self {
            n,
            resolutions,
            proportions,
        })
    }

    pub fn single(n: usize, resolution: usize) -> Result<Self, DatasetError> {
        Self::new(n, vec![resolution], vec![1.0])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn proportions(&self) -> &[f64] {
        &self.proportions
    }

    /// Samples per level by largest-remainder rounding of `p_i N`; ties go
    /// to the earlier level.
    pub fn level_counts(&self) -> Vec<usize> {
        let exact: Vec<f64> = self.proportions.iter().map(|p| p * self.n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().cycle().take(self.n.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        counts
    }
}

/// Expected node count of one sample, `Σ p_i R_i^d`.
pub fn average_data_size(spec: &DatasetSpec, dim: usize) -> f64 {
    compensated_sum(
        spec.resolutions
            .iter()
            .zip(&spec.proportions)
            .map(|(r, p)| p * (*r as f64).powi(dim as i32)),
    )
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub problem: String,
    pub dim: usize,
    pub master_seed: u64,
    /// Canonical generator parameter listing.
    pub generator_config: String,
}

impl Provenance {
    pub fn digest(&self) -> String {
        digest_hex(self.generator_config.as_bytes())
    }
}

pub fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub input: FunctionSample,
    pub output: FunctionSample,
}

impl SamplePair {
    pub fn new(input: FunctionSample, output: FunctionSample) -> Result<Self, DatasetError> {
        if input.grid() != output.grid() {
            return Err(DatasetError::Spec("input and output must share a grid".into()));
        }
        Ok(Self { input, output })
    }

    pub fn grid(&self) -> &Grid {
        self.input.grid()
    }
}

/// Immutable collection of sample pairs with its spec and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MultifidelityDataset {
    spec: DatasetSpec,
    provenance: Provenance,
    samples: Vec<SamplePair>,
}

/// Spectral input/output truth for each sample index.
pub type Truths = Vec<(SpectralField, SpectralField)>;

/// Truth `i` uses seed `derive(master_seed, i)`, independent of fidelity.
pub fn generate_truths(problem: &dyn Problem, n: usize, master_seed: u64) -> Result<Truths, DatasetError> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            problem
                .sample_pair(seed::derive(master_seed, i as u64))
                .map_err(|source| DatasetError::Generation { index: i, source })
        })
        .collect()
}

/// Fidelity level of each sample index: level blocks in order, then a
/// seeded shuffle.
pub fn assign_levels(spec: &DatasetSpec, master_seed: u64) -> Vec<usize> {
    let mut levels: Vec<usize> = spec
        .level_counts()
        .iter()
        .enumerate()
        .flat_map(|(l, &c)| std::iter::repeat_n(l, c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(master_seed ^ 0x6C65_7665_6C73));
    levels.shuffle(&mut rng);
    levels
}

impl MultifidelityDataset {
    /// Generates `spec.n()` truths and samples each on its level's grid.
    pub fn assemble(problem: &dyn Problem, spec: &DatasetSpec, master_seed: u64) -> Result<Self, DatasetError> {
        let truths = generate_truths(problem, spec.n, master_seed)?;
        Self::from_truths(problem, &truths, spec, master_seed)
    }

    /// Samples precomputed truths; `truths[i]` must come from
    /// [`generate_truths`] with the same problem and seed.
    pub fn from_truths(
        problem: &dyn Problem,
        truths: &[(SpectralField, SpectralField)],
        spec: &DatasetSpec,
        master_seed: u64,
    ) -> Result<Self, DatasetError> {
        if truths.len() < spec.n {
            return Err(DatasetError::Spec(format!(
                "{} truths for {} samples",
                truths.len(),
                spec.n
            )));
        }
        let dim = problem.dim();
        let levels = assign_levels(spec, master_seed);
        let mut evaluators: HashMap<(usize, crate::pde::Basis, usize), GridEvaluator> = HashMap::new();
        for (i, &l) in levels.iter().enumerate() {
            let grid = Grid::new(dim, spec.resolutions[l])?;
            for f in [&truths[i].0, &truths[i].1] {
                let key = (grid.points_per_axis(), f.basis(), f.kmax());
                if !evaluators.contains_key(&key) {
                    evaluators.insert(key, GridEvaluator::new(&grid, f.basis(), f.kmax())?);
                }
            }
        }
        let samples = levels
            .par_iter()
            .enumerate()
            .map(|(i, &l)| {
                let r = spec.resolutions[l];
                let eval = |f: &SpectralField| evaluators[&(r, f.basis(), f.kmax())].evaluate(f);
                Ok(SamplePair {
                    input: eval(&truths[i].0)?,
                    output: eval(&truths[i].1)?,
                })
            })
            .collect::<Result<Vec<_>, DatasetError>>()?;
        Ok(Self {
            spec: spec.clone(),
            provenance: Provenance {
                problem: problem.tag().to_string(),
                dim,
                master_seed,
                generator_config: problem.config_string(),
            },
            samples,
        })
    }

    /// Wraps existing samples; every grid must be listed in the dataset spec.
    pub fn from_samples(
        spec: DatasetSpec,
        provenance: Provenance,
        samples: Vec<SamplePair>,
    ) -> Result<Self, DatasetError> {
        if samples.len() != spec.n {
            return Err(DatasetError::Spec(format!(
                "spec declares {} samples, got {}",
                spec.n,
                samples.len()
            )));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.input.grid() != s.output.grid() {
                return Err(DatasetError::Spec(format!("sample {i}: input and output grids differ")));
            }
            if s.grid().dim() != provenance.dim || !spec.resolutions.contains(&s.grid().points_per_axis()) {
                return Err(DatasetError::Spec(format!(
                    "sample {i}: grid {}D R={} not in the dataset spec",
                    s.grid().dim(),
                    s.grid().points_per_axis()
                )));
            }
        }
        Ok(Self {
            spec,
            provenance,
            samples,
        })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn dim(&self) -> usize {
        self.provenance.dim
    }

    pub fn samples(&self) -> &[SamplePair] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of samples at each resolution of the dataset spec.
    pub fn counts_by_resolution(&self) -> Vec<(usize, usize)> {
        self.spec
            .resolutions
            .iter()
            .map(|&r| {
                let c = self.samples.iter().filter(|s| s.grid().points_per_axis() == r).count();
                (r, c)
            })
            .collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), DatasetError> {
        let join = |v: Vec<String>| v.join(" ");
        writeln!(w, "{MAGIC} {VERSION}")?;
        writeln!(w, "problem {}", self.provenance.problem)?;
        writeln!(w, "dim {}", self.provenance.dim)?;
        writeln!(w, "n {}", self.samples.len())?;
        writeln!(w, "resolutions {}", join(self.spec.resolutions.iter().map(|r| r.to_string()).collect()))?;
        writeln!(w, "proportions {}", join(self.spec.proportions.iter().map(|p| format!("{p:?}")).collect()))?;
        writeln!(w, "master_seed {}", self.provenance.master_seed)?;
        writeln!(w, "generator_digest {}", self.provenance.digest())?;
        writeln!(w, "generator_config {}", self.provenance.generator_config)?;
        writeln!(w, "samples")?;
        let mut offset = 0usize;
        for (i, s) in self.samples.iter().enumerate() {
            writeln!(w, "{i} {} {offset}", s.grid().points_per_axis())?;
            offset += 2 * s.grid().len();
        }
        writeln!(w, "end")?;
        for s in &self.samples {
            for v in s.input.values().iter().chain(s.output.values()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self, DatasetError> {
        let mut header = HeaderReader { r, line: 0 };
        let first = header.next()?;
        let mut parts = first.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(DatasetError::Header("not an opbasis dataset".into()));
        }
        let version = parts.next().unwrap_or("").to_string();
        if version != VERSION.to_string() {
            return Err(DatasetError::Version { found: version });
        }
        let problem = header.field("problem")?;
        let dim: usize = header.parsed("dim")?;
        let n: usize = header.parsed("n")?;
        let resolutions = parse_list::<usize>(&header.field("resolutions")?, "resolutions")?;
        let proportions = parse_list::<f64>(&header.field("proportions")?, "proportions")?;
        let master_seed: u64 = header.parsed("master_seed")?;
        let digest = header.field("generator_digest")?;
        let generator_config = header.field("generator_config")?;
        if header.next()? != "samples" {
            return Err(DatasetError::Header("missing sample table".into()));
        }
        let mut layout = Vec::with_capacity(n);
        loop {
            let line = header.next()?;
            if line == "end" {
                break;
            }
            let v = parse_list::<usize>(&line, "sample line")?;
            if v.len() != 3 || v[0] != layout.len() {
                return Err(DatasetError::Header(format!("bad sample line `{line}`")));
            }
            layout.push((v[1], v[2]));
        }
        if layout.len() != n {
            return Err(DatasetError::Payload(format!(
                "header declares {n} samples but lists {}",
                layout.len()
            )));
        }
        let spec = DatasetSpec::new(n, resolutions, proportions).map_err(|e| DatasetError::Header(e.to_string()))?;
        let provenance = Provenance {
            problem,
            dim,
            master_seed,
            generator_config,
        };
        if provenance.digest() != digest {
            return Err(DatasetError::Header("generator digest does not match its config".into()));
        }

        let mut bytes = Vec::new();
        header.r.read_to_end(&mut bytes)?;
        let mut grids = Vec::with_capacity(n);
        let mut expected = 0usize;
        for &(res, offset) in &layout {
            let g = Grid::new(dim, res).map_err(|e| DatasetError::Header(e.to_string()))?;
            if offset != expected {
                return Err(DatasetError::Header(format!("sample offset {offset}, expected {expected}")));
            }
            expected += 2 * g.len();
            grids.push(g);
        }
        if bytes.len() != 8 * expected {
            return Err(DatasetError::Payload(format!(
                "expected {} bytes of values, found {}",
                8 * expected,
                bytes.len()
            )));
        }
        let mut values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut take = |len: usize| -> Vec<f64> { values.by_ref().take(len).collect() };
        let mut samples = Vec::with_capacity(n);
        for g in grids {
            let input = FunctionSample::new(g, take(g.len())).map_err(|e| DatasetError::Payload(e.to_string()))?;
            let output = FunctionSample::new(g, take(g.len())).map_err(|e| DatasetError::Payload(e.to_string()))?;
            samples.push(SamplePair { input, output });
        }
        Self::from_samples(spec, provenance, samples).map_err(|e| DatasetError::Header(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// One CSV per sample (`x[,y],input,output`) in `dir`.
    pub fn export_csv(&self, dir: &Path) -> Result<(), DatasetError> {
        std::fs::create_dir_all(dir)?;
        for (i, s) in self.samples.iter().enumerate() {
            let mut w = BufWriter::new(File::create(dir.join(format!("sample_{i:05}.csv")))?);
            let g = s.grid();
            if g.dim() == 1 {
                writeln!(w, "x,input,output")?;
            } else {
                writeln!(w, "x,y,input,output")?;
            }
            for (k, x) in g.nodes().into_iter().enumerate() {
                let (a, b) = (s.input.values()[k], s.output.values()[k]);
                if g.dim() == 1 {
                    writeln!(w, "{:?},{a:?},{b:?}", x[0])?;
                } else {
                    writeln!(w, "{:?},{:?},{a:?},{b:?}", x[0], x[1])?;
                }
            }
            w.flush()?;
        }
        Ok(())
    }
}

struct HeaderReader<'a, R: BufRead> {
    r: &'a mut R,
    line: usize,
}

impl<R: BufRead> HeaderReader<'_, R> {
    fn next(&mut self) -> Result<String, DatasetError> {
        let mut s = String::new();
        // header lines are ASCII; a payload mistaken for a header fails UTF-8 decoding
        let n = self
            .r
            .read_line(&mut s)
            .map_err(|e| DatasetError::Header(format!("line {}: {e}", self.line + 1)))?;
        if n == 0 {
            return Err(DatasetError::Header(format!("unexpected end of header after line {}", self.line)));
        }
        self.line += 1;
        Ok(s.trim_end_matches(['\n', '\r']).to_string())
    }

    fn field(&mut self, key: &str) -> Result<String, DatasetError> {
        let line = self.next()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.to_string()),
            _ if line == key => Ok(String::new()),
            _ => Err(DatasetError::Header(format!("line {}: expected `{key}`, found `{line}`", self.line))),
        }
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, DatasetError> {
        let v = self.field(key)?;
        v.trim()
            .parse()
            .map_err(|_| DatasetError::Header(format!("bad value for {key}: `{v}`")))
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, DatasetError> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| DatasetError::Header(format!("bad {what} entry `{t}`"))))
        .collect()
}
