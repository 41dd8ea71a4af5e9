//! Product of Gaussian mixtures.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::linalg::cholesky_lower;
use crate::metrics::log_gaussian_overlap;
use crate::varfam::{Component, Mixture};

/// Default weight below which product components may be dropped.
pub const WEIGHT_FLOOR: f64 = 1e-8;

fn moments(c: &Component) -> Result<(DVector<f64>, DMatrix<f64>)> {
    match c {
        Component::Gaussian(g) => Ok((g.mean.clone(), g.covariance())),
        Component::Banana(_) => Err(Error::UnsupportedFamily("mixture products need Gaussian components".into())),
    }
}

fn inverse_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.inverse()).ok_or_else(|| invalid("covariance is not positive definite"))
}

/// Product `q_A · q_B` renormalized: component `(k, l)` (row-major in `k`)
/// has precision `Σ_k⁻¹ + Σ_l⁻¹` and weight `∝ π_k π_l N(μ_k; μ_l, Σ_k + Σ_l)`.
/// With `floor = Some(w)`, components below weight `w` are dropped and the rest
/// renormalized.
pub fn gmm_product(a: &Mixture, b: &Mixture, floor: Option<f64>) -> Result<Mixture> {
    if a.dim() != b.dim() {
        return Err(invalid(format!("mixtures differ in dimension ({} vs {})", a.dim(), b.dim())));
    }
    let (pa, pb) = (a.weights(), b.weights());
    let ma: Vec<_> = a.components().iter().map(moments).collect::<Result<_>>()?;
    let mb: Vec<_> = b.components().iter().map(moments).collect::<Result<_>>()?;
    let prec_a: Vec<_> = ma.iter().map(|(_, s)| inverse_spd(s)).collect::<Result<_>>()?;
    let prec_b: Vec<_> = mb.iter().map(|(_, s)| inverse_spd(s)).collect::<Result<_>>()?;

    let mut comps = Vec::with_capacity(a.k() * b.k());
    let mut log_w = Vec::with_capacity(a.k() * b.k());
    for k in 0..a.k() {
        for l in 0..b.k() {
            let cov = inverse_spd(&(&prec_a[k] + &prec_b[l]))?;
            let cov = (&cov + cov.transpose()) * 0.5;
            let mean = &cov * (&prec_a[k] * &ma[k].0 + &prec_b[l] * &mb[l].0);
            let chol = cholesky_lower(&cov).ok_or_else(|| invalid("product covariance is not positive definite"))?;
            let overlap = log_gaussian_overlap(&a.components()[k], &b.components()[l])?;
            log_w.push(pa[k].ln() + pb[l].ln() + overlap);
            comps.push(Component::gaussian(mean, chol)?);
        }
    }
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateDensity("mixtures have no common mass".into()));
    }
    let mut keep: Vec<(Component, f64)> = comps.into_iter().zip(log_w.iter().map(|w| w - max)).collect();
    if let Some(f) = floor {
        let total: f64 = keep.iter().map(|(_, w)| w.exp()).sum();
        let threshold = (f * total).ln();
        keep.retain(|(_, w)| *w >= threshold);
    }
    let (comps, logits): (Vec<_>, Vec<_>) = keep.into_iter().unzip();
    Mixture::new(comps, DVector::from_vec(logits))
}
