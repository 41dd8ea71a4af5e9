//! Variational families: Gaussian and banana-shaped components, their
//! mixtures, and the conditional mixture of experts.
//!
//! Every family exposes a flat parameter vector (scale factors with
//! log-diagonal, mixture weights as softmax logits) together with the two
//! derivatives the reparametrized ELBO gradient needs: the score of the
//! log-density at a fixed point, and the vector-Jacobian product of a
//! reparametrized sample.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{log_det_tril, pack_log_tril, solve_lower, solve_lower_transpose, tril_indices, tril_len, unpack_log_tril};
use crate::special::{log_sum_exp, softmax, LN_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Banana,
}

/// Label of a parameter block, used to group gradient coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamBlock {
    Mean,
    Scale,
    Curvature,
    Logits,
    Gate,
    W,
    Offset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub mean: DVector<f64>,
    pub scale_tril: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BananaComponent {
    pub mean: DVector<f64>,
    pub scale_tril: DMatrix<f64>,
    /// One coefficient per coordinate other than `axis`, in index order.
    pub curvature: DVector<f64>,
    pub axis: usize,
    /// Orthonormal matrix applied to the Gaussian draw before bending.
    pub rotation: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Component {
    Gaussian(GaussianComponent),
    Banana(BananaComponent),
}

fn check_scale(scale_tril: &DMatrix<f64>, d: usize) -> Result<DMatrix<f64>> {
    if scale_tril.nrows() != d || scale_tril.ncols() != d {
        return Err(invalid(format!("scale factor must be {d}x{d}")));
    }
    if (0..d).any(|i| !(scale_tril[(i, i)] > 0.0)) {
        return Err(invalid("scale factor needs a strictly positive diagonal"));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| if j <= i { scale_tril[(i, j)] } else { 0.0 }))
}

fn gaussian_logpdf(mean: &DVector<f64>, l: &DMatrix<f64>, z: &DVector<f64>) -> f64 {
    let w = solve_lower(l, &(z - mean));
    -0.5 * w.norm_squared() - log_det_tril(l) - 0.5 * mean.len() as f64 * LN_2PI
}

/// Score of `log N(z; μ, LLᵀ)` in packed (μ, log-tril L) order, plus `∂/∂z`.
fn gaussian_score(mean: &DVector<f64>, l: &DMatrix<f64>, z: &DVector<f64>) -> (Vec<f64>, DVector<f64>) {
    let d = mean.len();
    let w = solve_lower(l, &(z - mean));
    let gm = solve_lower_transpose(l, &w);
    let gl = &gm * w.transpose();
    let mut s: Vec<f64> = gm.iter().cloned().collect();
    for (i, j) in tril_indices(d) {
        s.push(if i == j { gl[(i, i)] * l[(i, i)] - 1.0 } else { gl[(i, j)] });
    }
    (s, -gm)
}

/// VJP of `z = μ + Lη` with cotangent `v`, in packed (μ, log-tril L) order.
fn affine_vjp(l: &DMatrix<f64>, eta: &DVector<f64>, v: &DVector<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = v.iter().cloned().collect();
    for (i, j) in tril_indices(v.len()) {
        let g = v[i] * eta[j];
        s.push(if i == j { g * l[(i, i)] } else { g });
    }
    s
}

impl GaussianComponent {
    pub fn new(mean: DVector<f64>, scale_tril: DMatrix<f64>) -> Result<Self> {
        let l = check_scale(&scale_tril, mean.len())?;
        Ok(Self { mean, scale_tril: l })
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.scale_tril * self.scale_tril.transpose()
    }
}

impl BananaComponent {
    pub fn new(
        mean: DVector<f64>,
        scale_tril: DMatrix<f64>,
        curvature: DVector<f64>,
        axis: usize,
        rotation: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let d = mean.len();
        let l = check_scale(&scale_tril, d)?;
        if d == 0 || axis >= d {
            return Err(invalid(format!("banana axis {axis} out of range for dimension {d}")));
        }
        if curvature.len() != d - 1 {
            return Err(invalid(format!("banana curvature needs {} coefficients", d - 1)));
        }
        if let Some(r) = &rotation {
            if r.nrows() != d || r.ncols() != d || (r.transpose() * r - DMatrix::identity(d, d)).abs().max() > 1e-9 {
                return Err(invalid("banana rotation must be a square orthonormal matrix"));
            }
        }
        Ok(Self { mean, scale_tril: l, curvature, axis, rotation })
    }

    fn others(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.mean.len()).filter(move |i| *i != self.axis).enumerate()
    }

    /// `x_axis = z_axis + Σ κ_i z_i²`, other coordinates unchanged.
    pub fn forward(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut x = z.clone();
        x[self.axis] += self.others().map(|(k, i)| self.curvature[k] * z[i] * z[i]).sum::<f64>();
        x
    }

    pub fn inverse(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut z = x.clone();
        z[self.axis] -= self.others().map(|(k, i)| self.curvature[k] * x[i] * x[i]).sum::<f64>();
        z
    }

    fn rotate(&self, z: DVector<f64>) -> DVector<f64> {
        match &self.rotation {
            Some(r) => r * z,
            None => z,
        }
    }

    fn unrotate(&self, u: DVector<f64>) -> DVector<f64> {
        match &self.rotation {
            Some(r) => r.transpose() * u,
            None => u,
        }
    }
}

impl Component {
    pub fn gaussian(mean: DVector<f64>, scale_tril: DMatrix<f64>) -> Result<Self> {
        Ok(Component::Gaussian(GaussianComponent::new(mean, scale_tril)?))
    }

    pub fn banana(mean: DVector<f64>, scale_tril: DMatrix<f64>, curvature: DVector<f64>) -> Result<Self> {
        Ok(Component::Banana(BananaComponent::new(mean, scale_tril, curvature, 0, None)?))
    }

    pub fn family(&self) -> Family {
        match self {
            Component::Gaussian(_) => Family::Gaussian,
            Component::Banana(_) => Family::Banana,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean().len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        match self {
            Component::Gaussian(c) => &c.mean,
            Component::Banana(c) => &c.mean,
        }
    }

    pub fn scale_tril(&self) -> &DMatrix<f64> {
        match self {
            Component::Gaussian(c) => &c.scale_tril,
            Component::Banana(c) => &c.scale_tril,
        }
    }

    pub fn sample(&self, eta: &DVector<f64>) -> DVector<f64> {
        let z = self.mean() + self.scale_tril() * eta;
        match self {
            Component::Gaussian(_) => z,
            Component::Banana(b) => b.forward(&b.rotate(z)),
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let eta = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| StandardNormal.sample(rng)));
        self.sample(&eta)
    }

    pub fn logpdf(&self, x: &DVector<f64>) -> f64 {
        match self {
            Component::Gaussian(c) => gaussian_logpdf(&c.mean, &c.scale_tril, x),
            Component::Banana(b) => gaussian_logpdf(&b.mean, &b.scale_tril, &b.unrotate(b.inverse(x))),
        }
    }

    pub fn param_count(&self) -> usize {
        let d = self.dim();
        d + tril_len(d) + if let Component::Banana(b) = self { b.curvature.len() } else { 0 }
    }

    fn blocks(&self) -> Vec<(ParamBlock, usize)> {
        let d = self.dim();
        let mut b = vec![(ParamBlock::Mean, d), (ParamBlock::Scale, tril_len(d))];
        if let Component::Banana(c) = self {
            b.push((ParamBlock::Curvature, c.curvature.len()));
        }
        b
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.mean().iter().cloned().collect();
        p.extend(pack_log_tril(self.scale_tril()));
        if let Component::Banana(b) = self {
            p.extend(b.curvature.iter().cloned());
        }
        p
    }

    pub fn set_flat(&mut self, p: &[f64]) {
        let d = self.dim();
        let t = tril_len(d);
        let mean = DVector::from_column_slice(&p[..d]);
        let l = unpack_log_tril(d, &p[d..d + t]);
        match self {
            Component::Gaussian(c) => {
                c.mean = mean;
                c.scale_tril = l;
            }
            Component::Banana(b) => {
                b.mean = mean;
                b.scale_tril = l;
                b.curvature = DVector::from_column_slice(&p[d + t..d + t + d - 1]);
            }
        }
    }

    /// `log q_k(x)`, its score over the flat parameters at fixed `x`, and `∂/∂x`.
    pub fn logpdf_grads(&self, x: &DVector<f64>) -> (f64, Vec<f64>, DVector<f64>) {
        match self {
            Component::Gaussian(c) => {
                let (s, gx) = gaussian_score(&c.mean, &c.scale_tril, x);
                (gaussian_logpdf(&c.mean, &c.scale_tril, x), s, gx)
            }
            Component::Banana(b) => {
                let u = b.inverse(x);
                let z = b.unrotate(u);
                let (mut s, gz) = gaussian_score(&b.mean, &b.scale_tril, &z);
                let gu = match &b.rotation {
                    Some(r) => r * &gz,
                    None => gz,
                };
                let a = b.axis;
                let mut gx = gu.clone();
                for (k, i) in b.others() {
                    gx[i] -= gu[a] * 2.0 * b.curvature[k] * x[i];
                    s.push(-gu[a] * x[i] * x[i]);
                }
                (gaussian_logpdf(&b.mean, &b.scale_tril, &z), s, gx)
            }
        }
    }

    /// Gradient over the flat parameters of `vᵀ x(θ)` for `x = sample(η)`.
    pub fn sample_vjp(&self, eta: &DVector<f64>, v: &DVector<f64>) -> Vec<f64> {
        match self {
            Component::Gaussian(c) => affine_vjp(&c.scale_tril, eta, v),
            Component::Banana(b) => {
                let u = b.rotate(&b.mean + &b.scale_tril * eta);
                let a = b.axis;
                let mut vu = v.clone();
                let mut gk = Vec::with_capacity(b.curvature.len());
                for (k, i) in b.others() {
                    vu[i] += v[a] * 2.0 * b.curvature[k] * u[i];
                    gk.push(v[a] * u[i] * u[i]);
                }
                let vz = b.unrotate(vu);
                let mut s = affine_vjp(&b.scale_tril, eta, &vz);
                s.extend(gk);
                s
            }
        }
    }
}

/// Finite homogeneous mixture `Σ_k π_k q_k` with `π = softmax(ω)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    components: Vec<Component>,
    logits: DVector<f64>,
}

/// Log-density of a mixture at one point with its derivatives.
#[derive(Debug, Clone)]
pub struct MixtureEval {
    pub log_q: f64,
    /// Score over the flat parameters at fixed `x`.
    pub score: Vec<f64>,
    pub grad_x: DVector<f64>,
}

impl Mixture {
    pub fn new(components: Vec<Component>, logits: DVector<f64>) -> Result<Self> {
        let first = components.first().ok_or_else(|| invalid("a mixture needs at least one component"))?;
        if logits.len() != components.len() {
            return Err(invalid("one weight logit per component is required"));
        }
        if components.iter().any(|c| c.family() != first.family() || c.dim() != first.dim()) {
            return Err(invalid("mixture components must share family and dimension"));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(invalid("weight logits must be finite"));
        }
        Ok(Self { components, logits })
    }

    pub fn uniform(components: Vec<Component>) -> Result<Self> {
        let k = components.len();
        Self::new(components, DVector::zeros(k))
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn logits(&self) -> &DVector<f64> {
        &self.logits
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn family(&self) -> Family {
        self.components[0].family()
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(self.logits.as_slice())
    }

    pub fn logpdf(&self, x: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(self.weights())
            .map(|(c, w)| w.ln() + c.logpdf(x))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (DVector<f64>, usize) {
        let k = if self.k() == 1 {
            0
        } else {
            WeightedIndex::new(self.weights()).expect("softmax weights are positive").sample(rng)
        };
        (self.components[k].draw(rng), k)
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<DVector<f64>> {
        (0..n).map(|_| self.sample(rng).0).collect()
    }

    pub fn param_count(&self) -> usize {
        self.components.iter().map(|c| c.param_count()).sum::<usize>() + self.k()
    }

    /// Offset of component `k`'s parameters in the flat vector.
    pub fn component_offset(&self, k: usize) -> usize {
        self.components[..k].iter().map(|c| c.param_count()).sum()
    }

    pub fn logits_range(&self) -> Range<usize> {
        let start = self.component_offset(self.k());
        start..start + self.k()
    }

    /// Labelled ranges of the flat parameter vector.
    pub fn layout(&self) -> Vec<(ParamBlock, Range<usize>)> {
        let mut out = Vec::new();
        let mut at = 0;
        for c in &self.components {
            for (b, n) in c.blocks() {
                out.push((b, at..at + n));
                at += n;
            }
        }
        out.push((ParamBlock::Logits, at..at + self.k()));
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.components.iter().flat_map(|c| c.to_flat()).collect();
        p.extend(self.logits.iter().cloned());
        p
    }

    pub fn set_flat(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(invalid(format!("expected {} parameters, got {}", self.param_count(), p.len())));
        }
        let mut at = 0;
        for c in &mut self.components {
            let n = c.param_count();
            c.set_flat(&p[at..at + n]);
            at += n;
        }
        self.logits = DVector::from_column_slice(&p[at..]);
        Ok(())
    }

    pub fn with_flat(&self, p: &[f64]) -> Result<Self> {
        let mut m = self.clone();
        m.set_flat(p)?;
        Ok(m)
    }

    /// `log q(x)` with its score over all flat parameters and `∂/∂x`.
    pub fn logpdf_grads(&self, x: &DVector<f64>) -> MixtureEval {
        let pis = self.weights();
        let evals: Vec<_> = self.components.iter().map(|c| c.logpdf_grads(x)).collect();
        let terms: Vec<f64> = evals.iter().zip(&pis).map(|(e, p)| p.ln() + e.0).collect();
        let log_q = log_sum_exp(&terms);
        let mut score = Vec::with_capacity(self.param_count());
        let mut grad_x = DVector::zeros(self.dim());
        let resp: Vec<f64> = terms.iter().map(|t| (t - log_q).exp()).collect();
        for ((_, s, gx), r) in evals.iter().zip(&resp) {
            score.extend(s.iter().map(|v| v * r));
            grad_x += gx * *r;
        }
        score.extend(resp.iter().zip(&pis).map(|(r, p)| r - p));
        MixtureEval { log_q, score, grad_x }
    }
}

/// Conditional mixture of experts `q(x | y) = Σ_k h_k(y) N(x; W_k y + c_k, L_k L_kᵀ)`
/// with affine-softmax gate `h = softmax(a_kᵀ y + b_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    pub gate_a: Vec<DVector<f64>>,
    pub gate_b: DVector<f64>,
    pub w: Vec<DMatrix<f64>>,
    pub c: Vec<DVector<f64>>,
    pub scale_tril: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct MoeEval {
    pub log_q: f64,
    pub score: Vec<f64>,
    pub grad_x: DVector<f64>,
}

impl MoeParams {
    pub fn new(
        gate_a: Vec<DVector<f64>>,
        gate_b: DVector<f64>,
        w: Vec<DMatrix<f64>>,
        c: Vec<DVector<f64>>,
        scale_tril: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let k = gate_b.len();
        if k == 0 {
            return Err(invalid("a mixture of experts needs at least one component"));
        }
        if gate_a.len() != k || w.len() != k || c.len() != k || scale_tril.len() != k {
            return Err(invalid("every mixture-of-experts block needs one entry per component"));
        }
        let d = c[0].len();
        let ty = w[0].ncols();
        let mut tril = Vec::with_capacity(k);
        for i in 0..k {
            if gate_a[i].len() != ty || w[i].nrows() != d || w[i].ncols() != ty || c[i].len() != d {
                return Err(invalid(format!("mixture-of-experts component {i} has inconsistent dimensions")));
            }
            tril.push(check_scale(&scale_tril[i], d)?);
        }
        Ok(Self { gate_a, gate_b, w, c, scale_tril: tril })
    }

    pub fn k(&self) -> usize {
        self.gate_b.len()
    }

    pub fn dim(&self) -> usize {
        self.c[0].len()
    }

    pub fn task_dim(&self) -> usize {
        self.w[0].ncols()
    }

    fn check_y(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.task_dim() {
            return Err(invalid(format!("task parameter has dimension {}, expected {}", y.len(), self.task_dim())));
        }
        Ok(())
    }

    pub fn gate(&self, y: &DVector<f64>) -> Result<Vec<f64>> {
        self.check_y(y)?;
        let s: Vec<f64> = (0..self.k()).map(|k| self.gate_a[k].dot(y) + self.gate_b[k]).collect();
        Ok(softmax(&s))
    }

    pub fn component_mean(&self, k: usize, y: &DVector<f64>) -> DVector<f64> {
        &self.w[k] * y + &self.c[k]
    }

    pub fn sample_component(&self, k: usize, y: &DVector<f64>, eta: &DVector<f64>) -> DVector<f64> {
        self.component_mean(k, y) + &self.scale_tril[k] * eta
    }

    /// Draw `k ~ h(y)` and return `W_k y + c_k + L_k η`.
    pub fn sample<R: Rng + ?Sized>(&self, y: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        let h = self.gate(y)?;
        let k = if self.k() == 1 { 0 } else { WeightedIndex::new(&h).expect("softmax weights are positive").sample(rng) };
        let eta = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| StandardNormal.sample(rng)));
        Ok(self.sample_component(k, y, &eta))
    }

    pub fn logpdf(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        let h = self.gate(y)?;
        if x.len() != self.dim() {
            return Err(invalid(format!("configuration has dimension {}, expected {}", x.len(), self.dim())));
        }
        let terms: Vec<f64> = (0..self.k())
            .map(|k| h[k].ln() + gaussian_logpdf(&self.component_mean(k, y), &self.scale_tril[k], x))
            .collect();
        Ok(log_sum_exp(&terms))
    }

    fn component_len(&self) -> usize {
        let (d, ty) = (self.dim(), self.task_dim());
        ty + 1 + d * ty + d + tril_len(d)
    }

    pub fn param_count(&self) -> usize {
        self.k() * self.component_len()
    }

    pub fn component_offset(&self, k: usize) -> usize {
        k * self.component_len()
    }

    /// Per component: gate `a` and `b`, `W` (row-major), `c`, packed log-tril `L`.
    pub fn layout(&self) -> Vec<(ParamBlock, Range<usize>)> {
        let (d, ty) = (self.dim(), self.task_dim());
        let mut out = Vec::new();
        let mut at = 0;
        for _ in 0..self.k() {
            for (b, n) in [
                (ParamBlock::Gate, ty + 1),
                (ParamBlock::W, d * ty),
                (ParamBlock::Offset, d),
                (ParamBlock::Scale, tril_len(d)),
            ] {
                out.push((b, at..at + n));
                at += n;
            }
        }
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for k in 0..self.k() {
            p.extend(self.gate_a[k].iter());
            p.push(self.gate_b[k]);
            p.extend(self.w[k].transpose().iter());
            p.extend(self.c[k].iter());
            p.extend(pack_log_tril(&self.scale_tril[k]));
        }
        p
    }

    pub fn set_flat(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(invalid(format!("expected {} parameters, got {}", self.param_count(), p.len())));
        }
        let (d, ty) = (self.dim(), self.task_dim());
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &p[at..at + n];
            at += n;
            s
        };
        for k in 0..self.k() {
            self.gate_a[k] = DVector::from_column_slice(take(ty));
            self.gate_b[k] = take(1)[0];
            self.w[k] = DMatrix::from_row_slice(d, ty, take(d * ty));
            self.c[k] = DVector::from_column_slice(take(d));
            self.scale_tril[k] = unpack_log_tril(d, take(tril_len(d)));
        }
        Ok(())
    }

    pub fn with_flat(&self, p: &[f64]) -> Result<Self> {
        let mut m = self.clone();
        m.set_flat(p)?;
        Ok(m)
    }

    /// Gradient over the gate logits `s_k = a_kᵀy + b_k` expressed in flat
    /// coordinates, given `∂f/∂s`.
    pub fn gate_vjp(&self, y: &DVector<f64>, ds: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.param_count()];
        for k in 0..self.k() {
            let o = self.component_offset(k);
            for (t, yt) in y.iter().enumerate() {
                g[o + t] = ds[k] * yt;
            }
            g[o + self.task_dim()] = ds[k];
        }
        g
    }

    /// `log q(x|y)` with its score over the flat parameters and `∂/∂x`.
    pub fn logpdf_grads(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<MoeEval> {
        let h = self.gate(y)?;
        let (d, ty) = (self.dim(), self.task_dim());
        let mut terms = Vec::with_capacity(self.k());
        let mut parts = Vec::with_capacity(self.k());
        for k in 0..self.k() {
            let m = self.component_mean(k, y);
            let (s, gx) = gaussian_score(&m, &self.scale_tril[k], x);
            terms.push(h[k].ln() + gaussian_logpdf(&m, &self.scale_tril[k], x));
            parts.push((s, gx));
        }
        let log_q = log_sum_exp(&terms);
        let resp: Vec<f64> = terms.iter().map(|t| (t - log_q).exp()).collect();
        let ds: Vec<f64> = resp.iter().zip(&h).map(|(r, p)| r - p).collect();
        let mut score = self.gate_vjp(y, &ds);
        let mut grad_x = DVector::zeros(d);
        for (k, (s, gx)) in parts.iter().enumerate() {
            let r = resp[k];
            let o = self.component_offset(k) + ty + 1;
            // s = [∂μ (d), ∂L (tril)]; μ = W y + c
            for i in 0..d {
                for t in 0..ty {
                    score[o + i * ty + t] = r * s[i] * y[t];
                }
                score[o + d * ty + i] = r * s[i];
            }
            for (j, v) in s[d..].iter().enumerate() {
                score[o + d * ty + d + j] = r * v;
            }
            grad_x += gx * r;
        }
        Ok(MoeEval { log_q, score, grad_x })
    }

    /// Gradient over the flat parameters of `vᵀ x(θ)` for a sample of component `k`.
    pub fn sample_vjp(&self, k: usize, y: &DVector<f64>, eta: &DVector<f64>, v: &DVector<f64>) -> Vec<f64> {
        let (d, ty) = (self.dim(), self.task_dim());
        let mut g = vec![0.0; self.param_count()];
        let o = self.component_offset(k) + ty + 1;
        let a = affine_vjp(&self.scale_tril[k], eta, v);
        for i in 0..d {
            for t in 0..ty {
                g[o + i * ty + t] = v[i] * y[t];
            }
            g[o + d * ty + i] = v[i];
        }
        for (j, val) in a[d..].iter().enumerate() {
            g[o + d * ty + d + j] = *val;
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentDoc {
    pub mean: Vec<f64>,
    /// Lower triangle, row-major: (0,0), (1,0), (1,1), ...
    pub scale_tril: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curvature: Vec<f64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub axis: usize,
    /// Row-major rotation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<Vec<f64>>,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeComponentDoc {
    pub gate_a: Vec<f64>,
    pub gate_b: f64,
    /// Row-major, config × task.
    pub w: Vec<f64>,
    pub c: Vec<f64>,
    pub scale_tril: Vec<f64>,
}

/// JSON document for fitted parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ParamsDoc {
    Gaussian { dim: usize, k: usize, weight_logits: Vec<f64>, components: Vec<ComponentDoc> },
    Banana { dim: usize, k: usize, weight_logits: Vec<f64>, components: Vec<ComponentDoc> },
    Moe { dim: usize, task_dim: usize, k: usize, components: Vec<MoeComponentDoc> },
}

fn tril_values(l: &DMatrix<f64>) -> Vec<f64> {
    tril_indices(l.nrows()).map(|(i, j)| l[(i, j)]).collect()
}

fn tril_from(d: usize, v: &[f64]) -> Result<DMatrix<f64>> {
    if v.len() != tril_len(d) {
        return Err(invalid(format!("scale_tril needs {} entries for dimension {d}", tril_len(d))));
    }
    let mut l = DMatrix::zeros(d, d);
    for ((i, j), x) in tril_indices(d).zip(v) {
        l[(i, j)] = *x;
    }
    Ok(l)
}

impl From<&Mixture> for ParamsDoc {
    fn from(m: &Mixture) -> Self {
        let components = m
            .components
            .iter()
            .map(|c| {
                let (curvature, axis, rotation) = match c {
                    Component::Gaussian(_) => (Vec::new(), 0, None),
                    Component::Banana(b) => (
                        b.curvature.iter().cloned().collect(),
                        b.axis,
                        b.rotation.as_ref().map(|r| r.transpose().iter().cloned().collect()),
                    ),
                };
                ComponentDoc {
                    mean: c.mean().iter().cloned().collect(),
                    scale_tril: tril_values(c.scale_tril()),
                    curvature,
                    axis,
                    rotation,
                }
            })
            .collect();
        let (dim, k, weight_logits) = (m.dim(), m.k(), m.logits.iter().cloned().collect());
        match m.family() {
            Family::Gaussian => ParamsDoc::Gaussian { dim, k, weight_logits, components },
            Family::Banana => ParamsDoc::Banana { dim, k, weight_logits, components },
        }
    }
}

impl From<&MoeParams> for ParamsDoc {
    fn from(p: &MoeParams) -> Self {
        let components = (0..p.k())
            .map(|k| MoeComponentDoc {
                gate_a: p.gate_a[k].iter().cloned().collect(),
                gate_b: p.gate_b[k],
                w: p.w[k].transpose().iter().cloned().collect(),
                c: p.c[k].iter().cloned().collect(),
                scale_tril: tril_values(&p.scale_tril[k]),
            })
            .collect();
        ParamsDoc::Moe { dim: p.dim(), task_dim: p.task_dim(), k: p.k(), components }
    }
}

/// Either kind of fitted family.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedParams {
    Mixture(Mixture),
    Moe(MoeParams),
}

impl ParamsDoc {
    pub fn into_params(self) -> Result<FittedParams> {
        match self {
            ParamsDoc::Gaussian { dim, k, weight_logits, components } | ParamsDoc::Banana { dim, k, weight_logits, components }
                if components.len() != k || weight_logits.len() != k =>
            {
                let _ = dim;
                Err(invalid(format!("k = {k} disagrees with the component or logit count")))
            }
            ParamsDoc::Gaussian { dim, weight_logits, components, .. } => {
                let comps = components
                    .into_iter()
                    .map(|c| {
                        if c.mean.len() != dim {
                            return Err(invalid("component mean dimension disagrees with dim"));
                        }
                        Component::gaussian(DVector::from_vec(c.mean), tril_from(dim, &c.scale_tril)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(FittedParams::Mixture(Mixture::new(comps, DVector::from_vec(weight_logits))?))
            }
            ParamsDoc::Banana { dim, weight_logits, components, .. } => {
                let comps = components
                    .into_iter()
                    .map(|c| {
                        if c.mean.len() != dim {
                            return Err(invalid("component mean dimension disagrees with dim"));
                        }
                        let rotation = c.rotation.map(|r| DMatrix::from_row_slice(dim, dim, &r));
                        Ok(Component::Banana(BananaComponent::new(
                            DVector::from_vec(c.mean),
                            tril_from(dim, &c.scale_tril)?,
                            DVector::from_vec(c.curvature),
                            c.axis,
                            rotation,
                        )?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(FittedParams::Mixture(Mixture::new(comps, DVector::from_vec(weight_logits))?))
            }
            ParamsDoc::Moe { dim, task_dim, k, components } => {
                if components.len() != k {
                    return Err(invalid(format!("k = {k} disagrees with the component count")));
                }
                let mut a = Vec::new();
                let mut b = Vec::new();
                let mut w = Vec::new();
                let mut c = Vec::new();
                let mut l = Vec::new();
                for comp in components {
                    if comp.w.len() != dim * task_dim {
                        return Err(invalid("w must have dim × task_dim entries"));
                    }
                    a.push(DVector::from_vec(comp.gate_a));
                    b.push(comp.gate_b);
                    w.push(DMatrix::from_row_slice(dim, task_dim, &comp.w));
                    c.push(DVector::from_vec(comp.c));
                    l.push(tril_from(dim, &comp.scale_tril)?);
                }
                Ok(FittedParams::Moe(MoeParams::new(a, DVector::from_vec(b), w, c, l)?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn random_banana(rng: &mut ChaCha8Rng, rotated: bool) -> Component {
        let mean = v(&[rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]);
        let l = DMatrix::from_row_slice(2, 2, &[rng.random_range(0.3..0.6), 0.0, rng.random_range(-0.2..0.2), rng.random_range(0.3..0.6)]);
        let rotation = rotated.then(|| {
            let (s, c) = rng.random_range(-1.0f64..1.0).sin_cos();
            DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
        });
        Component::Banana(
            BananaComponent::new(mean, l, v(&[rng.random_range(-1.0..1.0)]), rng.random_range(0..2), rotation).unwrap(),
        )
    }

    #[test]
    fn banana_examples() {
        let b = BananaComponent::new(v(&[0.0, 0.0]), DMatrix::identity(2, 2), v(&[0.5]), 0, None).unwrap();
        assert_eq!(b.forward(&v(&[1.0, 2.0])), v(&[3.0, 2.0]));
        let flat = BananaComponent::new(v(&[0.0, 0.0]), DMatrix::identity(2, 2), v(&[0.0]), 0, None).unwrap();
        assert_eq!(flat.forward(&v(&[1.3, -0.4])), v(&[1.3, -0.4]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let z = v(&[rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]);
            assert_relative_eq!(b.inverse(&b.forward(&z)), z, epsilon = 1e-12);
        }
        let c = Component::Banana(BananaComponent::new(v(&[0.0, 0.0]), DMatrix::identity(2, 2), v(&[0.7]), 0, None).unwrap());
        assert_eq!(c.sample(&v(&[0.0, 0.0])), v(&[0.0, 0.0]));
    }

    #[test]
    fn banana_jacobian_has_unit_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let b = BananaComponent::new(v(&[0.0; 3]), DMatrix::identity(3, 3), v(&[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]), rng.random_range(0..3), None).unwrap();
            let z = v(&[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
            let h = 1e-6;
            let jac = DMatrix::from_fn(3, 3, |i, j| {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[j] += h;
                zm[j] -= h;
                (b.forward(&zp)[i] - b.forward(&zm)[i]) / (2.0 * h)
            });
            assert!((jac.determinant() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn gaussian_sample_examples() {
        let c = Component::gaussian(v(&[0.0, 0.0]), DMatrix::from_diagonal(&v(&[1.0, 2.0]))).unwrap();
        assert_eq!(c.sample(&v(&[1.0, 1.0])), v(&[1.0, 2.0]));
        let c = Component::gaussian(v(&[0.4, -1.0]), DMatrix::identity(2, 2)).unwrap();
        assert_eq!(c.sample(&v(&[0.0, 0.0])), v(&[0.4, -1.0]));
    }

    #[test]
    fn logpdf_examples() {
        let c = Component::gaussian(v(&[0.0]), DMatrix::identity(1, 1)).unwrap();
        assert_relative_eq!(c.logpdf(&v(&[0.0])), -0.5 * LN_2PI, epsilon = 1e-15);
        let g = Component::gaussian(v(&[0.2, 0.1]), DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.1, 0.3])).unwrap();
        let b = Component::banana(v(&[0.2, 0.1]), DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.1, 0.3]), v(&[0.0])).unwrap();
        for x in [v(&[0.0, 0.0]), v(&[1.0, -2.0]), v(&[0.3, 0.7])] {
            assert_eq!(g.logpdf(&x), b.logpdf(&x));
        }
    }

    #[test]
    fn banana_density_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for rotated in [false, true] {
            let c = random_banana(&mut rng, rotated);
            let (lo, hi, n) = (-12.0, 12.0, 800);
            let h = (hi - lo) / n as f64;
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let x = v(&[lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h]);
                    total += c.logpdf(&x).exp();
                }
            }
            assert!((total * h * h - 1.0).abs() < 1e-3, "{}", total * h * h);
        }
    }

    #[test]
    fn mixture_examples() {
        let a = Component::gaussian(v(&[0.0]), DMatrix::identity(1, 1)).unwrap();
        let b = Component::gaussian(v(&[10.0]), DMatrix::identity(1, 1)).unwrap();
        let m = Mixture::uniform(vec![a.clone(), b]).unwrap();
        assert_relative_eq!(m.logpdf(&v(&[0.0])), -1.6121, epsilon = 1e-4);
        let single = Mixture::uniform(vec![a.clone()]).unwrap();
        assert_eq!(single.logpdf(&v(&[0.7])), a.logpdf(&v(&[0.7])));
        let twin = Mixture::new(vec![a.clone(), a.clone()], v(&[0.3, -2.0])).unwrap();
        assert_relative_eq!(twin.logpdf(&v(&[0.7])), a.logpdf(&v(&[0.7])), epsilon = 1e-14);
    }

    #[test]
    fn mixture_rejects_heterogeneous() {
        let a = Component::gaussian(v(&[0.0, 0.0]), DMatrix::identity(2, 2)).unwrap();
        let b = Component::banana(v(&[0.0, 0.0]), DMatrix::identity(2, 2), v(&[0.1])).unwrap();
        assert!(Mixture::uniform(vec![a, b]).is_err());
        assert!(Mixture::uniform(vec![]).is_err());
    }

    #[test]
    fn gaussian_sample_mean_within_four_standard_errors() {
        let c = Component::gaussian(v(&[0.5, -1.0]), DMatrix::from_row_slice(2, 2, &[0.7, 0.0, 0.3, 0.4])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut sum = DVector::zeros(2);
        for _ in 0..n {
            sum += c.draw(&mut rng);
        }
        let mean = sum / n as f64;
        let cov = match &c {
            Component::Gaussian(g) => g.covariance(),
            _ => unreachable!(),
        };
        for i in 0..2 {
            let se = (cov[(i, i)] / n as f64).sqrt();
            assert!((mean[i] - c.mean()[i]).abs() < 4.0 * se);
        }
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, p: &[f64], analytic: &[f64]) {
        for k in 0..p.len() {
            let h = 1e-6;
            let mut pp = p.to_vec();
            let mut pm = p.to_vec();
            pp[k] += h;
            pm[k] -= h;
            let fd = (f(&pp) - f(&pm)) / (2.0 * h);
            assert!((analytic[k] - fd).abs() < 1e-6 * fd.abs().max(1.0), "param {k}: {} vs {fd}", analytic[k]);
        }
    }

    #[test]
    fn mixture_score_and_vjp_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for rotated in [false, true] {
            let comps = vec![random_banana(&mut rng, rotated), random_banana(&mut rng, rotated)];
            let m = Mixture::new(comps, v(&[0.3, -0.4])).unwrap();
            let x = v(&[0.3, -0.2]);
            let e = m.logpdf_grads(&x);
            let p = m.to_flat();
            fd_check(|q| m.with_flat(q).unwrap().logpdf(&x), &p, &e.score);
            let gx: Vec<f64> = e.grad_x.iter().cloned().collect();
            fd_check(|y| m.logpdf(&DVector::from_column_slice(y)), x.as_slice(), &gx);

            let eta = v(&[0.4, -1.1]);
            let cot = v(&[0.7, -0.3]);
            let c = &m.components()[1];
            let g = c.sample_vjp(&eta, &cot);
            fd_check(
                |q| {
                    let mut c2 = c.clone();
                    c2.set_flat(q);
                    c2.sample(&eta).dot(&cot)
                },
                &c.to_flat(),
                &g,
            );
        }
    }

    fn random_moe(rng: &mut ChaCha8Rng, k: usize) -> MoeParams {
        let mut r = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let a = (0..k).map(|_| v(&[r(-1.0, 1.0)])).collect();
        let b = DVector::from_iterator(k, (0..k).map(|_| r(-0.5, 0.5)));
        let w = (0..k).map(|_| DMatrix::from_row_slice(2, 1, &[r(-1.0, 1.0), r(-1.0, 1.0)])).collect();
        let c = (0..k).map(|_| v(&[r(-0.5, 0.5), r(-0.5, 0.5)])).collect();
        let l = (0..k).map(|_| DMatrix::from_row_slice(2, 2, &[r(0.3, 0.8), 0.0, r(-0.2, 0.2), r(0.3, 0.8)])).collect();
        MoeParams::new(a, b, w, c, l).unwrap()
    }

    #[test]
    fn moe_examples() {
        let z = MoeParams::new(
            vec![v(&[0.0]); 3],
            DVector::zeros(3),
            vec![DMatrix::zeros(2, 1); 3],
            vec![v(&[0.0, 0.0]); 3],
            vec![DMatrix::identity(2, 2); 3],
        )
        .unwrap();
        for h in z.gate(&v(&[0.8])).unwrap() {
            assert_relative_eq!(h, 1.0 / 3.0, epsilon = 1e-15);
        }
        let id = MoeParams::new(vec![v(&[0.0, 0.0])], DVector::zeros(1), vec![DMatrix::identity(2, 2)], vec![v(&[0.0, 0.0])], vec![DMatrix::identity(2, 2)]).unwrap();
        let y = v(&[1.0, 0.0]);
        assert_eq!(id.component_mean(0, &y), y);
        assert_relative_eq!(id.logpdf(&y, &y).unwrap(), -(2.0 * std::f64::consts::PI).ln(), epsilon = 1e-14);
        assert!(id.gate(&v(&[1.0])).is_err());
    }

    #[test]
    fn moe_score_and_vjp_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_moe(&mut rng, 3);
        let y = v(&[0.7]);
        let x = v(&[0.2, 0.5]);
        let e = m.logpdf_grads(&y, &x).unwrap();
        fd_check(|q| m.with_flat(q).unwrap().logpdf(&y, &x).unwrap(), &m.to_flat(), &e.score);
        let eta = v(&[0.3, -0.8]);
        let cot = v(&[-0.4, 1.2]);
        let g = m.sample_vjp(2, &y, &eta, &cot);
        fd_check(|q| m.with_flat(q).unwrap().sample_component(2, &y, &eta).dot(&cot), &m.to_flat(), &g);
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = Mixture::new(vec![random_banana(&mut rng, true), random_banana(&mut rng, false)], v(&[0.1, 0.2])).unwrap();
        let doc = ParamsDoc::from(&m);
        let back = serde_json_roundtrip(&doc);
        match back.into_params().unwrap() {
            FittedParams::Mixture(b) => {
                for (x, y) in b.to_flat().iter().zip(m.to_flat()) {
                    assert_relative_eq!(*x, y, epsilon = 1e-12);
                }
            }
            _ => panic!("wrong family"),
        }
        let moe = random_moe(&mut rng, 2);
        match serde_json_roundtrip(&ParamsDoc::from(&moe)).into_params().unwrap() {
            FittedParams::Moe(b) => {
                for (x, y) in b.to_flat().iter().zip(moe.to_flat()) {
                    assert_relative_eq!(*x, y, epsilon = 1e-12);
                }
            }
            _ => panic!("wrong family"),
        }
    }

    fn serde_json_roundtrip(doc: &ParamsDoc) -> ParamsDoc {
        serde_json::from_str(&serde_json::to_string(doc).unwrap()).unwrap()
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_weights_positive_and_normalized(logits in proptest::collection::vec(-30.0f64..30.0, 1..8)) {
            let k = logits.len();
            let comps = vec![Component::gaussian(v(&[0.0]), DMatrix::identity(1, 1)).unwrap(); k];
            let m = Mixture::new(comps, DVector::from_vec(logits)).unwrap();
            let w = m.weights();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|p| *p > 0.0));
        }

        #[test]
        fn mixture_logpdf_permutation_invariant(
            means in proptest::collection::vec(-3.0f64..3.0, 3),
            logits in proptest::collection::vec(-2.0f64..2.0, 3),
            x in -4.0f64..4.0,
        ) {
            let comps: Vec<_> = means.iter().map(|m| Component::gaussian(v(&[*m]), DMatrix::identity(1, 1) * 0.7).unwrap()).collect();
            let a = Mixture::new(comps.clone(), DVector::from_vec(logits.clone())).unwrap();
            let perm = [2, 0, 1];
            let b = Mixture::new(perm.iter().map(|i| comps[*i].clone()).collect(), DVector::from_iterator(3, perm.iter().map(|i| logits[*i]))).unwrap();
            prop_assert!((a.logpdf(&v(&[x])) - b.logpdf(&v(&[x]))).abs() < 1e-12);
        }
    }
}
}
