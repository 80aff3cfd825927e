//! Discretized classical Wiener space on `[0, 1]`.
//!
//! Brownian paths are stored through their increments on a uniform dyadic
//! grid. Cameron–Martin paths are piecewise linear on the same grid, so the
//! shift `ω + εh` is represented exactly.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{LabError, Result};

/// Uniform grid `t_j = j / n_steps` on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathGrid {
    n_steps: usize,
}

impl PathGrid {
    pub const DEFAULT_STEPS: usize = 4096;

    pub fn new(n_steps: usize) -> Result<Self> {
        if n_steps == 0 || !n_steps.is_power_of_two() {
            return Err(LabError::InvalidArgument(format!(
                "n_steps must be a positive power of two, got {n_steps}"
            )));
        }
        Ok(Self { n_steps })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.n_steps as f64
    }

    pub fn time(&self, j: usize) -> f64 {
        j as f64 / self.n_steps as f64
    }

    /// Grid index of `t`, which must lie on the grid.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let x = t * self.n_steps as f64;
        let j = x.round();
        if !(0.0..=self.n_steps as f64).contains(&j) || (x - j).abs() > 1e-9 {
            return Err(LabError::GridMismatch(format!(
                "time {t} is not on a {}-step grid",
                self.n_steps
            )));
        }
        Ok(j as usize)
    }

    pub(crate) fn check_same(&self, other: &PathGrid) -> Result<()> {
        if self != other {
            return Err(LabError::GridMismatch(format!(
                "{} steps vs {} steps",
                self.n_steps, other.n_steps
            )));
        }
        Ok(())
    }
}

/// A `k`-dimensional Brownian path sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    grid: PathGrid,
    k: usize,
    /// Row-major `n_steps × k`.
    increments: Vec<f64>,
    /// Row-major `(n_steps + 1) × k`, first row zero.
    values: Vec<f64>,
}

impl BrownianPath {
    pub fn from_increments(grid: PathGrid, k: usize, increments: Vec<f64>) -> Result<Self> {
        if increments.len() != grid.n_steps() * k {
            return Err(LabError::DimensionMismatch {
                expected: grid.n_steps() * k,
                got: increments.len(),
            });
        }
        let values = cumulative(k, &increments, 1.0);
        Ok(Self {
            grid,
            k,
            increments,
            values,
        })
    }

    pub fn grid(&self) -> PathGrid {
        self.grid
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `Δb_j = b_{t_{j+1}} - b_{t_j}`, `j < n_steps`.
    pub fn increment(&self, j: usize) -> &[f64] {
        &self.increments[j * self.k..(j + 1) * self.k]
    }

    pub fn value(&self, j: usize) -> &[f64] {
        &self.values[j * self.k..(j + 1) * self.k]
    }

    pub fn terminal(&self) -> &[f64] {
        self.value(self.grid.n_steps())
    }

    /// The same path observed on a grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<BrownianPath> {
        if factor == 0 || !factor.is_power_of_two() || factor > self.grid.n_steps() {
            return Err(LabError::InvalidArgument(format!("bad coarsening factor {factor}")));
        }
        let grid = PathGrid::new(self.grid.n_steps() / factor)?;
        let k = self.k;
        let mut increments = vec![0.0; grid.n_steps() * k];
        for j in 0..grid.n_steps() {
            for c in 0..k {
                increments[j * k + c] = self.values[(j + 1) * factor * k + c] - self.values[j * factor * k + c];
            }
        }
        BrownianPath::from_increments(grid, k, increments)
    }

    fn check_compatible(&self, h: &CameronMartinPath) -> Result<()> {
        self.grid.check_same(&h.grid)?;
        if self.k != h.k {
            return Err(LabError::GridMismatch(format!("k = {} vs k = {}", self.k, h.k)));
        }
        Ok(())
    }

    /// Writes `t, b^1, …, b^k` rows.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        write!(out, "t")?;
        for c in 1..=self.k {
            write!(out, ",b{c}")?;
        }
        writeln!(out)?;
        for j in 0..=self.grid.n_steps() {
            write!(out, "{}", self.grid.time(j))?;
            for v in self.value(j) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn cumulative(k: usize, increments: &[f64], scale: f64) -> Vec<f64> {
    let n = increments.len() / k.max(1);
    let mut values = vec![0.0; (n + 1) * k];
    for j in 0..n {
        for c in 0..k {
            values[(j + 1) * k + c] = values[j * k + c] + scale * increments[j * k + c];
        }
    }
    values
}

/// Samples a Brownian path. The path is a pure function of
/// `(seed, path_index)`: each index reads its own ChaCha stream.
pub fn sample_brownian(grid: PathGrid, k: usize, seed: u64, path_index: u64) -> BrownianPath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    let sd = grid.dt().sqrt();
    let increments: Vec<f64> = (0..grid.n_steps() * k)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect();
    BrownianPath::from_increments(grid, k, increments).expect("sized by construction")
}

/// A piecewise linear Cameron–Martin path (constant slope on each cell).
#[derive(Debug, Clone, PartialEq)]
pub struct CameronMartinPath {
    grid: PathGrid,
    k: usize,
    /// Row-major `n_steps × k`.
    slopes: Vec<f64>,
    values: Vec<f64>,
}

/// Names accepted by [`CameronMartinPath::bundled`].
pub const BUNDLED_SHIFTS: [&str; 3] = ["unit-first", "cosine", "late-switch"];

impl CameronMartinPath {
    pub fn from_slopes(grid: PathGrid, k: usize, slopes: Vec<f64>) -> Result<Self> {
        if slopes.len() != grid.n_steps() * k {
            return Err(LabError::DimensionMismatch {
                expected: grid.n_steps() * k,
                got: slopes.len(),
            });
        }
        if slopes.iter().any(|s| !s.is_finite()) {
            return Err(LabError::InvalidArgument("non-finite slope".into()));
        }
        let values = cumulative(k, &slopes, grid.dt());
        Ok(Self {
            grid,
            k,
            slopes,
            values,
        })
    }

    /// Slopes sampled from `rate(t)` at cell midpoints.
    pub fn from_rate(grid: PathGrid, k: usize, rate: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        let mut slopes = Vec::with_capacity(grid.n_steps() * k);
        for j in 0..grid.n_steps() {
            let r = rate((j as f64 + 0.5) * grid.dt());
            if r.len() != k {
                return Err(LabError::DimensionMismatch {
                    expected: k,
                    got: r.len(),
                });
            }
            slopes.extend(r);
        }
        Self::from_slopes(grid, k, slopes)
    }

    pub fn zero(grid: PathGrid, k: usize) -> Self {
        Self::from_slopes(grid, k, vec![0.0; grid.n_steps() * k]).expect("sized by construction")
    }

    /// Bundled shifts:
    ///
    /// * `unit-first`: `ḣ = e_1`, i.e. `h_t = (t, 0, …)`,
    /// * `cosine`: `ḣ^i(t) = cos(π (i+1) t)`,
    /// * `late-switch`: `ḣ = 0` on `[0, ½]`, then `ḣ = 2 e_k`.
    pub fn bundled(name: &str, grid: PathGrid, k: usize) -> Result<Self> {
        match name {
            "unit-first" => Self::from_rate(grid, k, |_| {
                let mut r = vec![0.0; k];
                r[0] = 1.0;
                r
            }),
            "cosine" => Self::from_rate(grid, k, |t| {
                (0..k)
                    .map(|i| (std::f64::consts::PI * (i + 1) as f64 * t).cos())
                    .collect()
            }),
            "late-switch" => Self::from_rate(grid, k, |t| {
                let mut r = vec![0.0; k];
                if t > 0.5 {
                    r[k - 1] = 2.0;
                }
                r
            }),
            "zero" => Ok(Self::zero(grid, k)),
            _ => Err(LabError::UnknownName {
                what: "Cameron-Martin path",
                name: name.to_string(),
            }),
        }
    }

    pub fn grid(&self) -> PathGrid {
        self.grid
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn slope(&self, j: usize) -> &[f64] {
        &self.slopes[j * self.k..(j + 1) * self.k]
    }

    pub fn value(&self, j: usize) -> &[f64] {
        &self.values[j * self.k..(j + 1) * self.k]
    }

    fn check_compatible(&self, other: &CameronMartinPath) -> Result<()> {
        self.grid.check_same(&other.grid)?;
        if self.k != other.k {
            return Err(LabError::GridMismatch(format!("k = {} vs k = {}", self.k, other.k)));
        }
        Ok(())
    }
}

/// `(h, g)_H = ∫ ḣ·ġ dt`.
pub fn cm_inner(h: &CameronMartinPath, g: &CameronMartinPath) -> Result<f64> {
    h.check_compatible(g)?;
    let sum: f64 = h.slopes.iter().zip(&g.slopes).map(|(a, b)| a * b).sum();
    Ok(sum * h.grid.dt())
}

pub fn energy(h: &CameronMartinPath) -> f64 {
    cm_inner(h, h).expect("same path")
}

/// `ω + εh` on the grid.
pub fn shift_path(omega: &BrownianPath, h: &CameronMartinPath, eps: f64) -> Result<BrownianPath> {
    omega.check_compatible(h)?;
    let dt = omega.grid.dt();
    let increments = omega
        .increments
        .iter()
        .zip(&h.slopes)
        .map(|(db, s)| db + eps * s * dt)
        .collect();
    BrownianPath::from_increments(omega.grid, omega.k, increments)
}

/// `∫_0^1 ḣ·db` as the left-point sum `Σ_j ḣ_j·Δb_j`.
pub fn wiener_integral(h: &CameronMartinPath, omega: &BrownianPath) -> Result<f64> {
    omega.check_compatible(h)?;
    Ok(h.slopes.iter().zip(&omega.increments).map(|(s, db)| s * db).sum())
}

type CylinderFn = dyn Fn(&[&[f64]]) -> f64 + Send + Sync;
type CylinderGrad = dyn Fn(&[&[f64]]) -> Vec<Vec<f64>> + Send + Sync;

/// `F(ω) = f(ω_{t_1}, …, ω_{t_n})`.
#[derive(Clone)]
pub struct CylinderFunctional {
    name: String,
    times: Vec<f64>,
    f: Arc<CylinderFn>,
    grad: Option<Arc<CylinderGrad>>,
}

impl fmt::Debug for CylinderFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CylinderFunctional")
            .field("name", &self.name)
            .field("times", &self.times)
            .field("has_partials", &self.grad.is_some())
            .finish()
    }
}

impl CylinderFunctional {
    /// `times` must be strictly increasing in `(0, 1]`.
    pub fn new(
        name: impl Into<String>,
        times: Vec<f64>,
        f: impl Fn(&[&[f64]]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if times.windows(2).any(|w| w[0] >= w[1]) || times.iter().any(|&t| t <= 0.0 || t > 1.0) {
            return Err(LabError::InvalidArgument(format!(
                "cylinder times must be increasing in (0, 1], got {times:?}"
            )));
        }
        Ok(Self {
            name: name.into(),
            times,
            f: Arc::new(f),
            grad: None,
        })
    }

    /// Partials `∇^i f`, one `k`-vector per time.
    pub fn with_partials(mut self, grad: impl Fn(&[&[f64]]) -> Vec<Vec<f64>> + Send + Sync + 'static) -> Self {
        self.grad = Some(Arc::new(grad));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("{c}"), Vec::new(), move |_| c)
            .expect("no times")
            .with_partials(|_| Vec::new())
    }

    /// `ω^{comp}_t` (zero-based component).
    pub fn coordinate(t: f64, comp: usize) -> Result<Self> {
        Ok(
            Self::new(format!("w{}({t})", comp + 1), vec![t], move |w| w[0][comp])?.with_partials(move |w| {
                let mut g = vec![0.0; w[0].len()];
                g[comp] = 1.0;
                vec![g]
            }),
        )
    }

    /// `(ω^{comp}_t)²`.
    pub fn square(t: f64, comp: usize) -> Result<Self> {
        Ok(Self::new(format!("w{}({t})^2", comp + 1), vec![t], move |w| {
            w[0][comp] * w[0][comp]
        })?
        .with_partials(move |w| {
            let mut g = vec![0.0; w[0].len()];
            g[comp] = 2.0 * w[0][comp];
            vec![g]
        }))
    }

    /// `sin(ω^{comp}_t)`.
    pub fn sine(t: f64, comp: usize) -> Result<Self> {
        Ok(
            Self::new(format!("sin(w{}({t}))", comp + 1), vec![t], move |w| w[0][comp].sin())?.with_partials(
                move |w| {
                    let mut g = vec![0.0; w[0].len()];
                    g[comp] = w[0][comp].cos();
                    vec![g]
                },
            ),
        )
    }

    /// `cos(ω^{c1}_{t1}) · ω^{c2}_{t2}` with `t1 < t2`.
    pub fn cos_times_coordinate(t1: usize, c1: usize, t2: usize, c2: usize, grid: PathGrid) -> Result<Self> {
        let (s1, s2) = (grid.time(t1), grid.time(t2));
        Ok(Self::new(
            format!("cos(w{}({s1}))*w{}({s2})", c1 + 1, c2 + 1),
            vec![s1, s2],
            move |w| w[0][c1].cos() * w[1][c2],
        )?
        .with_partials(move |w| {
            let mut g1 = vec![0.0; w[0].len()];
            let mut g2 = vec![0.0; w[1].len()];
            g1[c1] = -w[0][c1].sin() * w[1][c2];
            g2[c2] = w[0][c1].cos();
            vec![g1, g2]
        }))
    }

    fn indices(&self, grid: PathGrid) -> Result<Vec<usize>> {
        self.times.iter().map(|&t| grid.index_of(t)).collect()
    }

    fn points_from<'a>(&self, idx: &[usize], value: impl Fn(usize) -> &'a [f64]) -> Vec<&'a [f64]> {
        idx.iter().map(|&j| value(j)).collect()
    }

    pub fn eval(&self, omega: &BrownianPath) -> Result<f64> {
        let idx = self.indices(omega.grid)?;
        Ok((self.f)(&self.points_from(&idx, |j| omega.value(j))))
    }

    /// Evaluates the base function on explicit points (one `k`-vector per time).
    pub fn eval_at(&self, points: &[&[f64]]) -> f64 {
        (self.f)(points)
    }
}

/// `∂_h F(ω) = Σ_i ∇^i f(ω_{t_1}, …)·h_{t_i}`.
pub fn cylinder_partial(f: &CylinderFunctional, h: &CameronMartinPath, omega: &BrownianPath) -> Result<f64> {
    omega.check_compatible(h)?;
    let grad = f.grad.as_ref().ok_or(LabError::MissingPartials)?;
    let idx = f.indices(omega.grid)?;
    let partials = grad(&f.points_from(&idx, |j| omega.value(j)));
    Ok(partials
        .iter()
        .zip(&idx)
        .map(|(p, &j)| p.iter().zip(h.value(j)).map(|(a, b)| a * b).sum::<f64>())
        .sum())
}

/// `∂_h^* G = -∂_h G + G·∫ḣ·db`.
pub fn dh_star(g: &CylinderFunctional, h: &CameronMartinPath, omega: &BrownianPath) -> Result<f64> {
    Ok(-cylinder_partial(g, h, omega)? + g.eval(omega)? * wiener_integral(h, omega)?)
}
