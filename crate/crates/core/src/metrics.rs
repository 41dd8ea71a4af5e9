//! Grid-based comparison of densities and closed-form Gaussian overlap.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::experts::LogTarget;
use crate::linalg::{cholesky_lower, log_det_tril, solve_lower};
use crate::special::{log_sum_exp, LN_2PI};
use crate::varfam::{Component, Mixture};

pub const MAX_GRID_DIM: usize = 3;
pub const MIN_CELLS: usize = 16;

/// Regular grid over a box; densities are evaluated at cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    axes: Vec<(f64, f64, usize)>,
}

impl GridSpec {
    pub fn new(axes: Vec<(f64, f64, usize)>) -> Result<Self> {
        if axes.is_empty() || axes.len() > MAX_GRID_DIM {
            return Err(invalid(format!("grids support 1 to {MAX_GRID_DIM} dimensions, got {}", axes.len())));
        }
        for (i, (lo, hi, n)) in axes.iter().enumerate() {
            if !(lo < hi) {
                return Err(invalid(format!("grid axis {i}: lower bound {lo} must be below {hi}")));
            }
            if *n < MIN_CELLS {
                return Err(invalid(format!("grid axis {i}: needs at least {MIN_CELLS} cells, got {n}")));
            }
        }
        Ok(Self { axes })
    }

    /// Same cell count on every axis of a joint-limit box.
    pub fn over_limits(limits: &[(f64, f64)], cells: usize) -> Result<Self> {
        Self::new(limits.iter().map(|(lo, hi)| (*lo, *hi, cells)).collect())
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[(f64, f64, usize)] {
        &self.axes
    }

    pub fn cell_count(&self) -> usize {
        self.axes.iter().map(|a| a.2).product()
    }

    fn width(&self, axis: usize) -> f64 {
        let (lo, hi, n) = self.axes[axis];
        (hi - lo) / n as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.width(a)).product()
    }

    /// Center of the cell with flat index `idx` (last axis fastest).
    pub fn center(&self, mut idx: usize) -> DVector<f64> {
        let d = self.dim();
        let mut c = DVector::zeros(d);
        for a in (0..d).rev() {
            let (lo, _, n) = self.axes[a];
            c[a] = lo + ((idx % n) as f64 + 0.5) * self.width(a);
            idx /= n;
        }
        c
    }

    /// Flat index of the cell containing `x`, if inside the box.
    pub fn locate(&self, x: &DVector<f64>) -> Option<usize> {
        let mut idx = 0;
        for (a, (lo, hi, n)) in self.axes.iter().enumerate() {
            if !(x[a] >= *lo && x[a] < *hi) {
                return None;
            }
            let i = (((x[a] - lo) / self.width(a)) as usize).min(n - 1);
            idx = idx * n + i;
        }
        Some(idx)
    }
}

/// Density values per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl DensityTable {
    /// `Σ values · cell volume`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// Cell centers with their values, in flat-index order.
    pub fn rows(&self) -> impl Iterator<Item = (DVector<f64>, f64)> + '_ {
        self.values.iter().enumerate().map(|(i, v)| (self.grid.center(i), *v))
    }

    /// Mass of `self` over cells where `other`'s value is below `threshold`.
    pub fn mass_where_below(&self, other: &DensityTable, threshold: f64) -> Result<f64> {
        check_pair(self, other, false)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .filter(|(_, o)| **o < threshold)
            .map(|(s, _)| s)
            .sum::<f64>()
            * self.grid.cell_volume())
    }
}

/// Evaluate `exp(log_density)` at every cell center and normalize.
/// Returns the table and the log of the pre-normalization integral.
pub fn normalize_on_grid<F>(log_density: F, grid: &GridSpec) -> Result<(DensityTable, f64)>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    let logs: Vec<f64> = (0..grid.cell_count())
        .into_par_iter()
        .map(|i| log_density(&grid.center(i)))
        .collect();
    if logs.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::DegenerateDensity("log-density is NaN or +inf on the grid".into()));
    }
    let lse = log_sum_exp(&logs);
    if lse == f64::NEG_INFINITY {
        return Err(Error::DegenerateDensity("density has zero mass on the grid".into()));
    }
    let vol = grid.cell_volume();
    let values = logs.iter().map(|l| (l - lse).exp() / vol).collect();
    Ok((DensityTable { grid: grid.clone(), values, normalized: true }, lse + vol.ln()))
}

/// Normalized histogram of the samples that fall inside the grid.
pub fn histogram(samples: &[DVector<f64>], grid: &GridSpec) -> Result<DensityTable> {
    let mut counts = vec![0.0; grid.cell_count()];
    let mut inside = 0usize;
    for s in samples {
        if s.len() != grid.dim() {
            return Err(invalid(format!("sample dimension {} differs from grid dimension {}", s.len(), grid.dim())));
        }
        if let Some(i) = grid.locate(s) {
            counts[i] += 1.0;
            inside += 1;
        }
    }
    if inside == 0 {
        return Err(Error::DegenerateDensity("no samples fall inside the grid".into()));
    }
    let scale = 1.0 / (inside as f64 * grid.cell_volume());
    Ok(DensityTable { grid: grid.clone(), values: counts.into_iter().map(|c| c * scale).collect(), normalized: true })
}

fn check_pair(p: &DensityTable, q: &DensityTable, need_normalized: bool) -> Result<()> {
    if p.grid != q.grid || p.values.len() != q.values.len() {
        return Err(invalid("density tables live on different grids"));
    }
    if need_normalized && !(p.normalized && q.normalized) {
        return Err(invalid("density tables must be normalized"));
    }
    Ok(())
}

/// `Σ √(p_i q_i) · cell volume`.
pub fn bhattacharyya(p: &DensityTable, q: &DensityTable) -> Result<f64> {
    check_pair(p, q, true)?;
    let s: f64 = p.values.iter().zip(&q.values).map(|(a, b)| (a * b).sqrt()).sum();
    Ok((s * p.grid.cell_volume()).clamp(0.0, 1.0))
}

/// `Σ min(p_i, q_i) · cell volume`.
pub fn ovl(p: &DensityTable, q: &DensityTable) -> Result<f64> {
    check_pair(p, q, true)?;
    let s: f64 = p.values.iter().zip(&q.values).map(|(a, b)| a.min(*b)).sum();
    Ok((s * p.grid.cell_volume()).clamp(0.0, 1.0))
}

/// `2 (1 − BC)`: twice the squared Hellinger distance.
pub fn alpha_half_from_bc(bc: f64) -> f64 {
    2.0 * (1.0 - bc)
}

pub fn alpha_half_divergence(p: &DensityTable, q: &DensityTable) -> Result<f64> {
    Ok(alpha_half_from_bc(bhattacharyya(p, q)?))
}

/// Importance estimate of the normalizer from draws of `q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImportanceEstimate {
    /// `log mean p̃(x)/q(x)`.
    pub log_c: f64,
    /// `1 / Σ w²` of the self-normalized weights.
    pub ess: f64,
}

pub fn importance_log_c<T: LogTarget + ?Sized>(target: &T, q: &Mixture, samples: &[DVector<f64>]) -> Result<ImportanceEstimate> {
    if samples.is_empty() {
        return Err(invalid("importance estimate needs at least one sample"));
    }
    let lw: Vec<f64> = samples.par_iter().map(|x| target.log_density(x) - q.logpdf(x)).collect();
    if lw.iter().any(|l| l.is_nan()) {
        return Err(Error::DegenerateDensity("log-weight is NaN".into()));
    }
    let lse = log_sum_exp(&lw);
    let ess = if lse == f64::NEG_INFINITY {
        0.0
    } else {
        1.0 / lw.iter().map(|l| (2.0 * (l - lse)).exp()).sum::<f64>()
    };
    Ok(ImportanceEstimate { log_c: lse - (samples.len() as f64).ln(), ess })
}

fn gaussian_parts(c: &Component) -> Result<(&DVector<f64>, DMatrix<f64>)> {
    match c {
        Component::Gaussian(g) => Ok((&g.mean, g.covariance())),
        Component::Banana(_) => Err(Error::UnsupportedFamily(
            "closed-form overlap needs Gaussian components; use component_overlap_on_grid".into(),
        )),
    }
}

/// `∫ N_k N_l dx = N(μ_k; μ_l, Σ_k + Σ_l)`.
pub fn gaussian_overlap(a: &Component, b: &Component) -> Result<f64> {
    Ok(log_gaussian_overlap(a, b)?.exp())
}

pub fn log_gaussian_overlap(a: &Component, b: &Component) -> Result<f64> {
    let (ma, sa) = gaussian_parts(a)?;
    let (mb, sb) = gaussian_parts(b)?;
    if ma.len() != mb.len() {
        return Err(invalid("components differ in dimension"));
    }
    let l = cholesky_lower(&(sa + sb)).ok_or_else(|| invalid("summed covariance is not positive definite"))?;
    let w = solve_lower(&l, &(ma - mb));
    Ok(-0.5 * w.norm_squared() - log_det_tril(&l) - 0.5 * ma.len() as f64 * LN_2PI)
}

/// Overlap integral by cell-center quadrature, for any component family.
pub fn component_overlap_on_grid(a: &Component, b: &Component, grid: &GridSpec) -> Result<f64> {
    if a.dim() != grid.dim() || b.dim() != grid.dim() {
        return Err(invalid("grid and component dimensions differ"));
    }
    let s: f64 = (0..grid.cell_count())
        .into_par_iter()
        .map(|i| {
            let x = grid.center(i);
            (a.logpdf(&x) + b.logpdf(&x)).exp()
        })
        .sum();
    Ok(s * grid.cell_volume())
}

/// Components joined when their overlap integral reaches a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityGraph {
    pub overlaps: DMatrix<f64>,
    pub edges: Vec<(usize, usize)>,
    /// Connected-component label per mixture component, numbered by first appearance.
    pub labels: Vec<usize>,
}

impl ConnectivityGraph {
    pub fn group_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

pub fn connectivity_graph(mixture: &Mixture, epsilon: f64) -> Result<ConnectivityGraph> {
    let k = mixture.k();
    let comps = mixture.components();
    let mut overlaps = DMatrix::zeros(k, k);
    let mut edges = Vec::new();
    for i in 0..k {
        for j in i..k {
            let o = gaussian_overlap(&comps[i], &comps[j])?;
            overlaps[(i, j)] = o;
            overlaps[(j, i)] = o;
            if i != j && o >= epsilon {
                edges.push((i, j));
            }
        }
    }
    let mut labels = vec![usize::MAX; k];
    let mut next = 0;
    for start in 0..k {
        if labels[start] != usize::MAX {
            continue;
        }
        let mut queue = std::collections::VecDeque::from([start]);
        labels[start] = next;
        while let Some(u) = queue.pop_front() {
            for (a, b) in &edges {
                let other = if *a == u { *b } else if *b == u { *a } else { continue };
                if labels[other] == usize::MAX {
                    labels[other] = next;
                    queue.push_back(other);
                }
            }
        }
        next += 1;
    }
    Ok(ConnectivityGraph { overlaps, edges, labels })
}
