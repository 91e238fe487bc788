//! Uniform tensor-product grids on the closed unit cube, trapezoidal
//! quadrature, and restriction of samples between nested grids.
//!
//! Nodes are ordered row-major on `(x, y)`: in 2D the node with axis
//! indices `(i, j)` sits at `(i h, j h)` and is stored at `i * R + j`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("unsupported spatial dimension {0} (expected 1 or 2)")]
    Dimension(usize),
    #[error("a grid needs at least 2 points per axis, got {0}")]
    TooFewPoints(usize),
    #[error("grid with R={fine} cannot be restricted to R={coarse}: nodes are not nested")]
    NotNested { fine: usize, coarse: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("sample has {got} values but its grid has {expected} nodes")]
    Length { expected: usize, got: usize },
    #[error("sample contains a non-finite value at node {0}")]
    NonFinite(usize),
}

/// Uniform grid on `[0, 1]^d` including the boundary nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    dim: usize,
    points: usize,
}

impl Grid {
    pub fn new(dim: usize, points: usize) -> Result<Self, GridError> {
        if dim != 1 && dim != 2 {
            return Err(GridError::Dimension(dim));
        }
        if points < 2 {
            return Err(GridError::TooFewPoints(points));
        }
        Ok(Self { dim, points })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Points per axis (`R`).
    pub fn points_per_axis(&self) -> usize {
        self.points
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.points - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Coordinate of axis index `k`. The last node is exactly 1.
    pub fn axis_coord(&self, k: usize) -> f64 {
        if k + 1 == self.points {
            1.0
        } else {
            k as f64 / (self.points - 1) as f64
        }
    }

    pub fn axis_coords(&self) -> Vec<f64> {
        (0..self.points).map(|k| self.axis_coord(k)).collect()
    }

    /// Coordinates of node `idx`, written into the first `dim` entries of the result.
    pub fn node(&self, idx: usize) -> [f64; 2] {
        match self.dim {
            1 => [self.axis_coord(idx), 0.0],
            _ => [
                self.axis_coord(idx / self.points),
                self.axis_coord(idx % self.points),
            ],
        }
    }

    pub fn nodes(&self) -> Vec<[f64; 2]> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }
}

/// Shorthand for [`Grid::new`].
pub fn make_uniform_grid(dim: usize, points: usize) -> Result<Grid, GridError> {
    Grid::new(dim, points)
}

/// Neumaier-compensated summation.
pub fn compensated_sum(terms: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for t in terms {
        let s = sum + t;
        if sum.abs() >= t.abs() {
            c += (sum - s) + t;
        } else {
            c += (t - s) + sum;
        }
        sum = s;
    }
    sum + c
}

/// Per-node trapezoidal weights; they sum to the unit domain volume.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureWeights {
    pub weights: Vec<f64>,
}

impl QuadratureWeights {
    /// Quadrature of node values against these weights.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.weights.len());
        compensated_sum(self.weights.iter().zip(values).map(|(w, v)| w * v))
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn trapezoid_axis(points: usize) -> Vec<f64> {
    let h = 1.0 / (points - 1) as f64;
    let mut w = vec![h; points];
    w[0] = 0.5 * h;
    w[points - 1] = 0.5 * h;
    w
}

pub fn trapezoid_weights(grid: &Grid) -> QuadratureWeights {
    let axis = trapezoid_axis(grid.points);
    let weights = match grid.dim {
        1 => axis,
        _ => {
            let mut w = Vec::with_capacity(grid.len());
            for wx in &axis {
                for wy in &axis {
                    w.push(wx * wy);
                }
            }
            w
        }
    };
    QuadratureWeights { weights }
}

/// True when the nodes of the coarser grid are a subset of the finer grid's
/// nodes, i.e. one of `Ra - 1`, `Rb - 1` divides the other.
pub fn grids_overlap(ra: usize, rb: usize) -> bool {
    let (a, b) = (ra.saturating_sub(1), rb.saturating_sub(1));
    if a == 0 || b == 0 {
        return a == b;
    }
    a % b == 0 || b % a == 0
}

/// Values of a function at the nodes of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionSample {
    grid: Grid,
    values: Vec<f64>,
}

impl FunctionSample {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::Length {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 2]) -> f64) -> Result<Self, GridError> {
        Self::new(grid, grid.nodes().into_iter().map(f).collect())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Picks the fine-grid values at the nodes shared with `coarse`.
pub fn restrict(sample: &FunctionSample, coarse: &Grid) -> Result<FunctionSample, GridError> {
    let fine = sample.grid;
    if fine.dim != coarse.dim {
        return Err(GridError::DimensionMismatch(fine.dim, coarse.dim));
    }
    let (rf, rc) = (fine.points, coarse.points);
    if rc > rf || (rf - 1) % (rc - 1) != 0 {
        return Err(GridError::NotNested {
            fine: rf,
            coarse: rc,
        });
    }
    let stride = (rf - 1) / (rc - 1);
    let values = match fine.dim {
        1 => (0..rc).map(|i| sample.values[i * stride]).collect(),
        _ => {
            let mut v = Vec::with_capacity(coarse.len());
            for i in 0..rc {
                for j in 0..rc {
                    v.push(sample.values[i * stride * rf + j * stride]);
                }
            }
            v
        }
    };
    Ok(FunctionSample {
        grid: *coarse,
        values,
    })
}
